"""Python interface to the advrank toolkit.

Commands take a nested dict of config overrides (the same keys as the CLI's
``--config`` JSON) and return the command summary as a dict.
"""

from __future__ import annotations

import json
import os
from typing import Any

from . import _advrank
from ._advrank import (
    NonFiniteLoss,
    damerau_levenshtein,
    infonce,
    kl_scores,
    levenshtein,
    mrr_at_k,
    ndcg_at_k,
    paired_t_test,
    recall_at_k,
    vary,
)

__all__ = [
    "NonFiniteLoss",
    "compare",
    "config_hash",
    "damerau_levenshtein",
    "default_config",
    "default_synth_spec",
    "distill",
    "evaluate",
    "finetune",
    "gen_corpus",
    "infonce",
    "kl_scores",
    "levenshtein",
    "mrr_at_k",
    "ndcg_at_k",
    "paired_t_test",
    "perturb_queries",
    "recall_at_k",
    "resolve_config",
    "train",
    "vary",
]


def default_config() -> dict[str, Any]:
    return json.loads(_advrank.default_config())


def default_synth_spec() -> dict[str, Any]:
    return json.loads(_advrank.default_synth_spec())


def resolve_config(overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Merges ``overrides`` onto the defaults; unknown keys raise ValueError."""
    return json.loads(_advrank.resolve_config(json.dumps(overrides or {})))


def config_hash(config: dict[str, Any]) -> str:
    return _advrank.config_hash(json.dumps(config))


def _command(name: str, config: dict[str, Any]) -> dict[str, Any]:
    return json.loads(_advrank.run_command(name, json.dumps(config)))


def train(config: dict[str, Any]) -> dict[str, Any]:
    return _command("train", config)


def distill(config: dict[str, Any]) -> dict[str, Any]:
    return _command("distill", config)


def finetune(config: dict[str, Any]) -> dict[str, Any]:
    return _command("finetune", config)


def evaluate(config: dict[str, Any]) -> dict[str, Any]:
    return _command("evaluate", config)


def gen_corpus(out: str | os.PathLike, spec: dict[str, Any] | None = None, hard_depth: int = 20) -> dict[str, Any]:
    full = default_synth_spec()
    full.update(spec or {})
    return json.loads(_advrank.gen_corpus(json.dumps(full), hard_depth, os.fspath(out)))


def perturb_queries(queries: str | os.PathLike, family: str, out: str | os.PathLike, seed: int = 0,
                    stopwords: str = "", lexicon: str = "") -> dict[str, Any]:
    return json.loads(_advrank.perturb_queries(os.fspath(queries), family, seed, os.fspath(out), stopwords, lexicon))


def compare(report_a: str | os.PathLike, report_b: str | os.PathLike, out: str | os.PathLike) -> dict[str, Any]:
    return json.loads(_advrank.compare(os.fspath(report_a), os.fspath(report_b), os.fspath(out)))
