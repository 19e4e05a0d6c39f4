"""Glue between the synthetic corpus, the frontend and the models."""

from __future__ import annotations

import numpy as np

from . import frontend
from .models import ModelGraph
from .synthdata import Corpus, Utterance
from .training import Example

STD_FLOOR = 1e-8


def norm_stats(utts: list[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean/std over every mel frame of ``utts``."""
    if not utts:
        raise ValueError("cannot compute normalization statistics from no utterances")
    frames = np.concatenate([u.features for u in utts])
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), STD_FLOOR)


def model_input(m: ModelGraph, mel: np.ndarray) -> np.ndarray:
    """Mel frames -> normalized, spliced input; position-encoded for encoder models."""
    return frontend.model_input(mel, m.frontend, mean=m.norm_mean, std=m.norm_std,
                                positional=m.is_encoder)


def to_example(m: ModelGraph, u: Utterance) -> Example:
    x = model_input(m, u.features)
    if u.kind == "am_train":
        return Example(x, labels=np.asarray(u.phones, dtype=np.int64), id=u.id)
    return Example(x, trigger=int(u.kind == "positive"), id=u.id)


def training_sets(m: ModelGraph, corpus: Corpus) -> dict[str, list[Example]]:
    return {split: [to_example(m, u) for u in corpus.split(split)]
            for split in ("train", "val", "disc_train", "disc_val")}


def attach_norm(m: ModelGraph, corpus: Corpus) -> ModelGraph:
    m.norm_mean, m.norm_std = norm_stats(corpus.split("train"))
    return m
