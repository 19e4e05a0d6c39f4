"""Trigger scoring and DET / FRR-at-operating-point evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, models
from .pipeline import model_input
from .training import pad_batch
from .synthdata import Corpus

DEFAULT_FA_PER_HOUR = 1.0 / 100.0  # 1 false alarm per 100 hours


@dataclass
class ScoredSegment:
    id: str
    score: float
    truth: str  # "positive" | "negative"
    hours: float = 0.0

    def __post_init__(self):
        if self.truth not in ("positive", "negative"):
            raise ValueError(f"truth must be positive or negative, got {self.truth!r}")
        if np.isnan(self.score) or self.score == np.inf:
            raise ValueError(f"{self.id}: invalid score {self.score}")


@dataclass
class DetCurve:
    thresholds: np.ndarray
    fa_per_hour: np.ndarray
    frr: np.ndarray
    negative_hours: float
    n_positive: int
    n_negative: int

    def __len__(self):
        return len(self.thresholds)

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fa_per_hour.tolist(), self.frr.tolist()))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "fa_per_hour", "frr"])
            for row in self.points():
                w.writerow([repr(v) for v in row])


def trigger_score(log_posteriors: np.ndarray, trigger_phones, length_normalize: bool = False) -> float:
    """log P_CTC(trigger | segment); ``-inf`` when the segment is too short."""
    score = losses.ctc_log_likelihood(log_posteriors, trigger_phones)
    if length_normalize and np.isfinite(score):
        score /= log_posteriors.shape[0]
    return score


def _default_forward(m):
    return lambda x, lengths=None: models.forward(m, x, lengths)


def score_segment(m: models.ModelGraph, mel: np.ndarray, trigger_phones, length_normalize: bool = False,
                  forward: Callable | None = None) -> float:
    """Run the inference trunk on mel frames and score the trigger phrase."""
    fwd = forward or _default_forward(m)
    return trigger_score(fwd(model_input(m, mel)), trigger_phones, length_normalize)


def score_segments(m: models.ModelGraph, mels: list[np.ndarray], trigger_phones, length_normalize: bool = False,
                   forward: Callable | None = None, chunk: int = 64) -> np.ndarray:
    """Batched :func:`score_segment` over many segments (same scores, fewer passes).

    ``forward(x, lengths)`` maps a padded batch to log-posteriors.
    """
    fwd = forward or _default_forward(m)
    xs = [model_input(m, mel) for mel in mels]
    order = sorted(range(len(xs)), key=lambda i: xs[i].shape[0])
    scores = np.empty(len(xs))
    for s in range(0, len(order), chunk):
        idx = order[s:s + chunk]
        X, lengths = pad_batch([xs[i] for i in idx])
        logp = fwd(X, lengths)
        ll = losses.ctc_log_likelihood_batch(logp, lengths, [trigger_phones] * len(idx))
        if length_normalize:
            ll = np.where(np.isfinite(ll), ll / lengths, ll)
        scores[idx] = ll
    return scores


def det_curve(scored: list[ScoredSegment], negative_hours: float) -> DetCurve:
    """Sweep the threshold over the sorted unique finite scores.

    A segment is accepted when ``score >= threshold``.
    """
    if negative_hours <= 0:
        raise ValueError("negative_hours must be positive")
    pos = np.array([s.score for s in scored if s.truth == "positive"], dtype=np.float64)
    neg = np.array([s.score for s in scored if s.truth == "negative"], dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("DET curve needs at least one positive and one negative segment")
    allscores = np.concatenate([pos, neg])
    thresholds = np.unique(allscores[np.isfinite(allscores)])
    if thresholds.size == 0:
        raise ValueError("every segment scored -inf; no threshold to sweep")
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    n_neg_accepted = neg.size - np.searchsorted(neg_sorted, thresholds, side="left")
    n_pos_rejected = np.searchsorted(pos_sorted, thresholds, side="left")
    return DetCurve(thresholds, n_neg_accepted / negative_hours, n_pos_rejected / pos.size,
                    float(negative_hours), int(pos.size), int(neg.size))


class UnreachableOperatingPoint(ValueError):
    pass


def frr_at_fa(curve: DetCurve, target_fa: float) -> float:
    """FRR at the best threshold whose FA rate does not exceed ``target_fa``.

    Step-function reading, no interpolation: of all swept thresholds meeting
    the FA budget, the lowest one (hence the lowest FRR) is the operating point.
    """
    if len(curve) == 0:
        raise ValueError("empty DET curve")
    ok = np.flatnonzero(curve.fa_per_hour <= target_fa)
    if ok.size == 0:
        raise UnreachableOperatingPoint(
            f"{target_fa} FA/hr unreachable: the highest threshold still gives "
            f"{curve.fa_per_hour[-1]:.4g} FA/hr")
    return float(curve.frr[ok[0]])


def frr_at_fa_count(curve: DetCurve, max_false_alarms: int) -> float:
    """Count-based operating point ("N false alarms" on the whole negative set)."""
    return frr_at_fa(curve, max_false_alarms / curve.negative_hours)


def score_corpus(m: models.ModelGraph, corpus: Corpus, trigger_phones=None, length_normalize: bool = False,
                 forward: Callable | None = None) -> list[ScoredSegment]:
    """Score the evaluation split: positives vs hard negatives and background."""
    trigger = corpus.trigger if trigger_phones is None else trigger_phones
    utts = corpus.split("eval")
    scores = score_segments(m, [u.features for u in utts], trigger, length_normalize, forward)
    return [ScoredSegment(u.id, float(s), "positive" if u.kind == "positive" else "negative", u.hours)
            for u, s in zip(utts, scores)]


def negative_hours(scored: list[ScoredSegment]) -> float:
    return float(sum(s.hours for s in scored if s.truth == "negative"))


def summarize(curve: DetCurve, targets=(DEFAULT_FA_PER_HOUR,), fa_counts=()) -> dict:
    out = {"negative_hours": curve.negative_hours, "n_positive": curve.n_positive,
           "n_negative": curve.n_negative, "frr_at": {}, "frr_at_count": {}}
    for t in targets:
        try:
            out["frr_at"][f"{t:g}/hr"] = frr_at_fa(curve, t)
        except UnreachableOperatingPoint:
            out["frr_at"][f"{t:g}/hr"] = None
    for c in fa_counts:
        try:
            out["frr_at_count"][str(c)] = frr_at_fa_count(curve, c)
        except UnreachableOperatingPoint:
            out["frr_at_count"][str(c)] = None
    return out


def write_scores(path, scored: list[ScoredSegment]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "truth", "score", "hours"])
        for s in scored:
            w.writerow([s.id, s.truth, repr(s.score), repr(s.hours)])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
