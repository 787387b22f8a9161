import json
import math

import pytest

import advrank


def test_metrics_match_hand_values():
    run = {1: [3, 1, 2], 2: [5, 6, 7]}
    qrels = {1: {1: 1}, 2: {7: 2, 8: 1}}
    mrr = advrank.mrr_at_k(run, qrels, 10)
    assert mrr["per_query"] == {1: 0.5, 2: pytest.approx(1 / 3)}
    assert advrank.recall_at_k(run, qrels, 1000)["per_query"][2] == 0.5
    ndcg = advrank.ndcg_at_k({1: [2, 1]}, {1: {1: 1}}, 10)
    assert ndcg["mean"] == pytest.approx(1 / math.log2(3), abs=1e-12)


def test_losses():
    assert advrank.infonce([[0.3, 0.3]]) == pytest.approx(math.log(2), abs=1e-15)
    assert advrank.kl_scores([[0.0, 0.0]], [[0.0, math.log(3)]]) == pytest.approx(0.5 * math.log(4 / 3), abs=1e-15)


def test_t_test_and_edit_distance():
    r = advrank.paired_t_test([0.1, 0.4, 0.3], [0.1, 0.4, 0.3])
    assert r["p"] == 1.0 and not r["significant"]
    assert advrank.levenshtein("kitten", "sitting") == 3
    assert advrank.damerau_levenshtein("ca", "ac") == 1


def test_vary_is_deterministic():
    a = advrank.vary("dense retrieval model", "qwerty_char", seed=3, stream=5)
    assert a == advrank.vary("dense retrieval model", "qwerty_char", seed=3, stream=5)
    text, edits, flags = a
    assert text != "dense retrieval model" and len(edits) == 1 and flags == []
    with pytest.raises(ValueError):
        advrank.vary("the query", "rm_stopwords")


def test_config_resolution():
    cfg = advrank.resolve_config({"training": {"epochs": 3}})
    assert cfg["training"]["epochs"] == 3
    assert cfg["model"] == advrank.default_config()["model"]
    assert advrank.config_hash(cfg) == advrank.config_hash(advrank.resolve_config({"training": {"epochs": 3}}))
    with pytest.raises(ValueError):
        advrank.resolve_config({"training": {"epoch": 3}})


def test_pipeline(tmp_path):
    spec = {"topics": 6, "docs_per_topic": 20, "train_queries": 48, "dev_queries": 12, "test_queries": 12, "vocab_size": 400}
    corpus = advrank.gen_corpus(tmp_path / "corpus", spec, hard_depth=5)
    assert corpus["documents"] == 120
    base = {"paths": {"data_dir": str(tmp_path / "corpus")}, "model": {"dim": 8}, "training": {"epochs": 1}}
    summary = advrank.train({**base, "out": str(tmp_path / "run")})
    assert summary["epochs_completed"] == 1
    ckpt = summary["checkpoint"]

    reports = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        advrank.evaluate({**base, "eval": {"checkpoint": ckpt}, "out": str(out)})
        reports.append(out / "report.json")
    assert (tmp_path / "e1" / "run.trec").read_bytes() == (tmp_path / "e2" / "run.trec").read_bytes()
    report = json.loads(reports[0].read_text())
    assert 0.0 <= report["MRR@10"]["mean"] <= 1.0

    cmp = advrank.compare(reports[0], reports[1], tmp_path / "cmp")
    assert all(m["p"] == 1.0 for m in cmp["metrics"].values())

    varied = advrank.perturb_queries(tmp_path / "corpus" / "queries.test.tsv", "random_order", tmp_path / "pq", seed=1)
    assert varied["queries"] == 12
