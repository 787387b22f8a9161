#pragma once

// Seeded query-variation generators: character typos, stop-word removal,
// word reordering and lexicon synonym swaps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace advrank {

enum class VariationFamily { kRandomChar, kNeighbChar, kQwertyChar, kRmStopwords, kRandomOrder, kLexiconSyn };

std::string to_string(VariationFamily f);
VariationFamily variation_family_from_string(const std::string& s);

using SynonymLexicon = std::map<std::string, std::vector<std::string>>;

struct VariationSpec {
    VariationFamily family = VariationFamily::kQwertyChar;
    std::uint64_t seed = 0;
    std::size_t min_word_length = 4;
    std::size_t edits_per_query = 1;
    std::set<std::string> stopwords;  // kRmStopwords
    SynonymLexicon lexicon;           // kLexiconSyn

    /// Throws when the family's resource is missing.
    void validate() const;
};

std::set<std::string> load_stopwords(const std::filesystem::path& path);
SynonymLexicon load_lexicon(const std::filesystem::path& path);

struct VariationResult {
    std::string text;
    /// Human-readable description of each applied edit.
    std::vector<std::string> edits;
    /// e.g. "all_stopwords", "no_eligible_word", "no_lexicon_entry".
    std::vector<std::string> flags;
};

/// Letters adjacent to `c` on a US QWERTY keyboard (lowercase); empty for
/// non-letters.
std::string_view qwerty_neighbors(char c);

/// Varies one query. `stream` selects an independent random substream (the
/// query id in vary_file) so results do not depend on processing order.
VariationResult vary(std::string_view query, const VariationSpec& spec, std::uint64_t stream = 0);

struct VariedFile {
    std::size_t queries = 0;
    std::size_t flagged = 0;
};

/// Writes the varied queries TSV to `output` and a JSON-lines manifest
/// ({id, family, edit, flags}) to `manifest`.
VariedFile vary_file(const std::filesystem::path& queries, const VariationSpec& spec, const std::filesystem::path& output,
                     const std::filesystem::path& manifest);

/// Edit distances used to check the character families.
std::size_t levenshtein(std::string_view a, std::string_view b);
/// Optimal string alignment distance (adjacent transpositions cost 1).
std::size_t damerau_levenshtein(std::string_view a, std::string_view b);

}  // namespace advrank
