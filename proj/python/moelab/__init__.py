"""Python bindings for the moelab mixture-of-experts routing laboratory."""

import json

from . import _moelab
from ._moelab import ConfigError, Error, IoError, NumericError, SpecError, ValidationError

__all__ = [
    "ConfigError",
    "Error",
    "IoError",
    "NumericError",
    "SpecError",
    "ValidationError",
    "bleu",
    "generate_corpus",
    "preset",
    "preset_names",
    "route",
    "train",
]


def route(probs, policy="topk", k=2, p=0.5):
    """Route one token given its router distribution over experts."""
    return json.loads(_moelab.route(list(probs), policy, k, p))


def bleu(candidates, references):
    """Corpus BLEU over token-id sentences."""
    return json.loads(_moelab.bleu(candidates, references))


def generate_corpus(config=None, seed=1):
    """Synthetic multi-task corpus as a dict with hash, vocab and splits."""
    return json.loads(_moelab.generate_corpus(json.dumps(config or {}), seed))


def preset(name):
    """Built-in experiment configuration."""
    return json.loads(_moelab.preset(name))


def preset_names():
    return list(_moelab.preset_names())


def train(config, out_dir=None, jobs=1, force=False):
    """Train and evaluate one experiment configuration; returns its record."""
    return json.loads(_moelab.train(json.dumps(config), str(out_dir or ""), jobs, force))
