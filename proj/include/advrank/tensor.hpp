#pragma once

// Dense 64-bit tensors with a dynamic reverse-mode tape.
//
// Every op that receives at least one input with requires_grad() records a
// node holding its inputs and a backward closure. backward(loss) walks the
// nodes reachable from `loss` in reverse topological order, visiting each
// exactly once, and accumulates d(loss)/d(t) into every requires_grad tensor
// it reaches (intermediates included, so gradients with respect to token
// embeddings are available after the pass).
//
// Most ops treat a tensor as a 2-D matrix [rows x cols] where cols is the
// last dimension and rows the product of the leading ones.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace advrank {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const;
    std::size_t numel() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    /// In-place access for optimizers and initializers. Never call on a
    /// tensor that is an input of a live graph you still intend to backward.
    std::span<double> mutable_data();
    double at(std::size_t r, std::size_t c) const;
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    /// Allocates (if needed) and zero-fills the gradient; no-op when the
    /// tensor does not require grad.
    void zero_grad();
    void clear_grad();

    /// Copy of the values with no graph attachment and requires_grad off.
    Tensor detach() const;
    /// Same buffer viewed with a new shape of equal element count. Recorded
    /// on the tape like any other op.
    Tensor reshape(Shape shape) const;

    bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

    // Tape internals, used by op implementations.
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

/// While alive, ops on this thread record nothing (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled();

/// Runs the reverse pass from a scalar loss. Gradients accumulate into
/// existing grad buffers until zeroed.
void backward(const Tensor& loss);

/// Number of backward passes run by this thread since start (or last reset).
std::uint64_t backward_pass_count();
void reset_backward_pass_count();

// ---- forward ops -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Elementwise sum. `b` may also be a [1 x cols] row broadcast over rows of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor square(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor log1p(const Tensor& a);
Tensor exp(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Frobenius / L2 norm of all elements, as a scalar.
Tensor l2_norm(const Tensor& a);

/// Reductions across rows: [n x m] -> [1 x m].
Tensor mean_rows(const Tensor& a);
/// Ties route the gradient to the first (lowest-index) maximal row.
Tensor max_rows(const Tensor& a);

/// Row-wise ops: [n x m] -> [n x m] or [n x 1].
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);
Tensor dot_rows(const Tensor& a, const Tensor& b);

/// out[i] = table[indices[i]]; backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> indices);
/// out[i][j] = a[i][indices[i * k + j]] for a [n x k] index layout.
Tensor gather_cols(const Tensor& a, std::span<const std::size_t> indices, std::size_t k);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Repeats a [1 x m] row n times.
Tensor broadcast_rows(const Tensor& row, std::size_t n);

/// Grouped pooling over [groups * length x d] inputs. `mask` has one 0/1
/// entry per input row; rows with mask 0 are excluded. A group with no
/// unmasked row yields a zero output row.
Tensor masked_mean_pool(const Tensor& x, std::span<const double> mask, std::size_t groups);
/// Per-column maximum within each group; ties go to the first maximal row.
Tensor masked_max_pool(const Tensor& x, std::span<const double> mask, std::size_t groups);

// ---- optimizers ------------------------------------------------------------

struct NamedTensor {
    std::string name;
    Tensor tensor;
};
using ParameterList = std::vector<NamedTensor>;

void zero_grads(const ParameterList& params);
void sgd_step(const ParameterList& params, double learning_rate);

struct AdamHyperparams {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

void adam_step(const ParameterList& params, AdamState& state, const AdamHyperparams& hp);

}  // namespace advrank
