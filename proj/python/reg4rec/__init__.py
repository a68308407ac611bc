"""Python bindings for the reg4rec recommendation toolkit."""

import json as _json

from . import _core
from ._core import (
    Error,
    advantages,
    clipped_surrogate,
    decay_mean,
    js_divergence,
    quantize_nearest,
    quantize_value,
)

__all__ = [
    "Error",
    "advantages",
    "clipped_surrogate",
    "config_hash",
    "decay_mean",
    "js_divergence",
    "quantize_nearest",
    "quantize_value",
    "run_experiment",
    "synth_corpus",
]


def config_hash(config: dict) -> str:
    """CRC-32 of the canonical serialization of an experiment config."""
    return _core.config_hash(_json.dumps(config))


def synth_corpus(config: dict | None = None, seed: int = 0) -> dict:
    """Synthetic interactions with planted successor structure.

    Returns {"interactions": [{"user", "item", "ts", "category"}],
    "items": {id: {"category", "features"}}, "planted": {id: [codes]}}.
    """
    return _json.loads(_core.synth_corpus(_json.dumps(config or {}), seed))


def run_experiment(config: dict, out_dir: str) -> dict:
    """Evaluates the configured checkpoint and writes report.json to out_dir."""
    return _json.loads(_core.run_experiment(_json.dumps(config), str(out_dir)))
