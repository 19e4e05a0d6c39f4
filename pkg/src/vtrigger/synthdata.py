"""Synthetic phone-level corpus.

Utterances are rendered directly as mel-stage frames: each phone has a
prototype mean vector and diagonal variance, and a frame of phone k is
``mean_k + noise_level * sqrt(var_k) * N(0, I)``. ``noise_level`` therefore
sets the frame-level Bayes error (zero at ``noise_level == 0``).

Every utterance is drawn from its own generator seeded by
``(seed, stream, index)`` so that output does not depend on generation
order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .frontend import AudioBuffer, read_features, write_features

KINDS = ("am_train", "positive", "hard_negative", "background")
SPLITS = ("train", "val", "disc_train", "disc_val", "eval")
FRAMES_PER_SECOND = 100

_STREAM = {"inventory": 0, "trigger": 1, "train": 2, "val": 3, "disc_train": 4,
           "disc_val": 5, "eval_pos": 6, "eval_neg": 7, "background": 8}


def _rng(seed: int, stream: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM[stream], index])


@dataclass
class PhoneInventory:
    """Phones are numbered 1..n (0 is reserved for the CTC blank)."""
    means: np.ndarray
    variances: np.ndarray
    durations: np.ndarray  # (n, 2) inclusive frame range per phone
    tones: np.ndarray | None = None  # (n, 3) Hz, for the optional waveform path

    def __post_init__(self):
        if np.any(self.durations < 1):
            raise ValueError("phone durations must be >= 1 frame")

    @property
    def n_phones(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def check(self, phones) -> None:
        phones = np.asarray(phones)
        bad = phones[(phones < 1) | (phones > self.n_phones)]
        if bad.size:
            raise DataError(f"unknown phone ids {sorted(set(bad.tolist()))} (inventory has 1..{self.n_phones})")


def make_inventory(n_phones: int = 53, dim: int = 40, seed: int = 0, spread: float = 1.0,
                   duration_range: tuple[int, int] = (4, 9)) -> PhoneInventory:
    rng = _rng(seed, "inventory")
    means = rng.normal(0.0, spread, size=(n_phones, dim))
    variances = rng.uniform(0.5, 1.5, size=(n_phones, dim))
    durations = np.tile(np.asarray(duration_range, dtype=np.int64), (n_phones, 1))
    tones = np.sort(rng.uniform(200.0, 3800.0, size=(n_phones, 3)), axis=1)
    return PhoneInventory(means, variances, durations, tones)


def sample_durations(phones, inv: PhoneInventory, rng: np.random.Generator, p: float = 0.4) -> np.ndarray:
    """Geometric durations starting at each phone's minimum, capped at its maximum."""
    idx = np.asarray(phones) - 1
    lo, hi = inv.durations[idx, 0], inv.durations[idx, 1]
    return np.minimum(lo + rng.geometric(p, size=len(idx)) - 1, hi)


def render_segment(phones, inv: PhoneInventory, noise: float, rng: np.random.Generator,
                   durations=None) -> np.ndarray:
    """Mel-stage frames for a phone sequence; returns (T x dim)."""
    phones = np.asarray(phones, dtype=np.int64)
    if phones.size == 0:
        raise ValueError("cannot render an empty phone sequence")
    inv.check(phones)
    if durations is None:
        durations = sample_durations(phones, inv, rng)
    frame_phone = np.repeat(phones - 1, durations)
    z = rng.standard_normal((len(frame_phone), inv.dim))
    return inv.means[frame_phone] + noise * np.sqrt(inv.variances[frame_phone]) * z


def render_waveform(phones, inv: PhoneInventory, rng: np.random.Generator, sample_rate: int = 16000,
                    noise: float = 0.01) -> AudioBuffer:
    """Sine-mixture audio (three tones per phone) for end-to-end frontend runs."""
    phones = np.asarray(phones, dtype=np.int64)
    inv.check(phones)
    hop = sample_rate // FRAMES_PER_SECOND
    durations = sample_durations(phones, inv, rng)
    chunks = []
    for ph, d in zip(phones, durations):
        t = np.arange(d * hop) / sample_rate
        tone = sum(np.sin(2 * np.pi * f * t) for f in inv.tones[ph - 1]) / 3.0
        chunks.append(0.5 * tone)
    audio = np.concatenate(chunks)
    return AudioBuffer(audio + noise * rng.standard_normal(audio.size), sample_rate)


# ---------------------------------------------------------------------------
# difficulty


def bayes_frame_error(inv: PhoneInventory, noise: float, n: int = 20000, seed: int = 0) -> float:
    """Monte-Carlo error of the optimal (true-likelihood) frame classifier, uniform prior."""
    if noise == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    cls = rng.integers(0, inv.n_phones, size=n)
    x = inv.means[cls] + noise * np.sqrt(inv.variances[cls]) * rng.standard_normal((n, inv.dim))
    var = noise**2 * inv.variances
    ll = np.empty((n, inv.n_phones))
    for k in range(inv.n_phones):
        d = x - inv.means[k]
        ll[:, k] = -0.5 * np.sum(d * d / var[k] + np.log(var[k]), axis=1)
    return float(np.mean(np.argmax(ll, axis=1) != cls))


def noise_for_bayes_error(inv: PhoneInventory, target: float, n: int = 20000, seed: int = 0,
                          tol: float = 1e-3) -> float:
    """Bisect the noise level whose Monte-Carlo Bayes frame error is ``target``."""
    lo, hi = 0.0, 1.0
    while bayes_frame_error(inv, hi, n, seed) < target:
        hi *= 2.0
        if hi > 1e4:
            raise ValueError(f"cannot reach Bayes error {target}")
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if bayes_frame_error(inv, mid, n, seed) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# corpus


@dataclass
class SynthCorpusSpec:
    n_train: int = 500
    n_val: int = 50
    n_phones: int = 53
    feature_dim: int = 40
    trigger_phones: list[int] | None = None
    trigger_length: int = 8
    confusability: int = 1
    negative_hours: float = 0.5
    noise_level: float | None = 1.0
    bayes_error: float | None = None  # when set, noise_level is calibrated to it
    n_positive: int = 200
    n_hard_negative: int = 200
    n_disc_train_positive: int = 70
    n_disc_train_negative: int = 50
    n_disc_val_positive: int = 14
    n_disc_val_negative: int = 10
    utterance_phones: tuple[int, int] = (5, 20)
    duration_range: tuple[int, int] = (4, 9)
    prototype_spread: float = 1.0
    segment_seconds: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if self.negative_hours <= 0:
            raise ValueError("negative_hours must be positive")
        if not 6 <= self.trigger_length <= 10 and self.trigger_phones is None:
            raise ValueError("trigger_length must be between 6 and 10")
        self.utterance_phones = tuple(self.utterance_phones)
        self.duration_range = tuple(self.duration_range)

    @classmethod
    def from_json(cls, path) -> "SynthCorpusSpec":
        return cls(**json.loads(Path(path).read_text()))

    @property
    def n_background(self) -> int:
        return int(round(self.negative_hours * 3600.0 / self.segment_seconds))


@dataclass
class Utterance:
    id: str
    kind: str
    split: str
    features: np.ndarray
    phones: list[int] | None = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    @property
    def hours(self) -> float:
        return self.n_frames / FRAMES_PER_SECOND / 3600.0


@dataclass
class Corpus:
    spec: SynthCorpusSpec
    inventory: PhoneInventory
    trigger: list[int]
    noise_level: float
    utterances: list[Utterance] = field(default_factory=list)

    def split(self, name: str, kind: str | None = None) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name and (kind is None or u.kind == kind)]


def _contains(seq, sub) -> bool:
    n = len(sub)
    return any(list(seq[i:i + n]) == list(sub) for i in range(len(seq) - n + 1))


def random_phones(n: int, n_phones: int, rng: np.random.Generator) -> np.ndarray:
    """Phone string without immediate repeats."""
    out = np.empty(n, dtype=np.int64)
    out[0] = rng.integers(1, n_phones + 1)
    for i in range(1, n):
        step = rng.integers(1, n_phones)  # 1..n_phones-1, never the previous phone
        out[i] = (out[i - 1] - 1 + step) % n_phones + 1
    return out


def confusable(trigger, n_subs: int, n_phones: int, rng: np.random.Generator) -> np.ndarray:
    """Trigger with ``n_subs`` substitutions; substitutes never equal a neighbour."""
    seq = np.array(trigger, dtype=np.int64)
    for pos in rng.choice(len(seq), size=min(n_subs, len(seq)), replace=False):
        banned = {int(seq[pos])}
        if pos > 0:
            banned.add(int(seq[pos - 1]))
        if pos + 1 < len(seq):
            banned.add(int(seq[pos + 1]))
        choices = [p for p in range(1, n_phones + 1) if p not in banned]
        seq[pos] = rng.choice(choices)
    return seq


def _am_utterance(spec, inv, trigger, noise, stream, i) -> Utterance:
    rng = _rng(spec.seed, stream, i)
    lo, hi = spec.utterance_phones
    while True:
        phones = random_phones(int(rng.integers(lo, hi + 1)), inv.n_phones, rng)
        if not _contains(phones, trigger):
            break
    feats = render_segment(phones, inv, noise, rng)
    return Utterance(f"{stream}-{i:05d}", "am_train", stream, feats, phones.tolist())


def _trigger_utterance(spec, inv, trigger, noise, stream, i, split, positive) -> Utterance:
    rng = _rng(spec.seed, stream, i)
    phones = np.array(trigger) if positive else confusable(trigger, spec.confusability, inv.n_phones, rng)
    feats = render_segment(phones, inv, noise, rng)
    kind = "positive" if positive else "hard_negative"
    return Utterance(f"{split}-{kind}-{i:05d}", kind, split, feats, phones.tolist())


def _background(spec, inv, trigger, noise) -> list[Utterance]:
    seg = int(round(spec.segment_seconds * FRAMES_PER_SECOND))
    n = spec.n_background
    out = []
    # one stream per 64 segments keeps the per-chunk seeding order-independent
    per_chunk = 64
    for c in range(-(-n // per_chunk)):
        rng = _rng(spec.seed, "background", c)
        k = min(per_chunk, n - c * per_chunk)
        need = k * seg
        phones = random_phones(int(need / spec.duration_range[0]) + 2, inv.n_phones, rng)
        while _contains(phones, trigger):
            phones = random_phones(len(phones), inv.n_phones, rng)
        feats = render_segment(phones, inv, noise, rng)  # >= need frames: every phone lasts >= min duration
        for j in range(k):
            idx = c * per_chunk + j
            out.append(Utterance(f"eval-background-{idx:06d}", "background", "eval",
                                 feats[j * seg:(j + 1) * seg], None))
    return out


def gen_corpus(spec: SynthCorpusSpec) -> Corpus:
    inv = make_inventory(spec.n_phones, spec.feature_dim, spec.seed, spec.prototype_spread, spec.duration_range)
    if spec.trigger_phones is not None:
        trigger = [int(p) for p in spec.trigger_phones]
        inv.check(trigger)
        if len(trigger) == 0:
            raise DataError("trigger phone sequence is empty")
    else:
        trigger = random_phones(spec.trigger_length, inv.n_phones, _rng(spec.seed, "trigger")).tolist()
    if spec.bayes_error is not None:
        noise = noise_for_bayes_error(inv, spec.bayes_error, seed=spec.seed)
    else:
        noise = float(spec.noise_level)

    utts = [_am_utterance(spec, inv, trigger, noise, "train", i) for i in range(spec.n_train)]
    utts += [_am_utterance(spec, inv, trigger, noise, "val", i) for i in range(spec.n_val)]
    for split, n_pos, n_neg in (("disc_train", spec.n_disc_train_positive, spec.n_disc_train_negative),
                                ("disc_val", spec.n_disc_val_positive, spec.n_disc_val_negative)):
        utts += [_trigger_utterance(spec, inv, trigger, noise, split, i, split, True) for i in range(n_pos)]
        utts += [_trigger_utterance(spec, inv, trigger, noise, split, n_pos + i, split, False)
                 for i in range(n_neg)]
    utts += [_trigger_utterance(spec, inv, trigger, noise, "eval_pos", i, "eval", True)
             for i in range(spec.n_positive)]
    utts += [_trigger_utterance(spec, inv, trigger, noise, "eval_neg", i, "eval", False)
             for i in range(spec.n_hard_negative)]
    utts += _background(spec, inv, trigger, noise)
    return Corpus(spec, inv, trigger, noise, utts)


# ---------------------------------------------------------------------------
# on-disk layout: corpus.json, manifest.jsonl, features/<id>.vtfe


def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus.utterances:
        rel = f"features/{u.id}.vtfe"
        write_features(out / rel, u.features)
        row = {"id": u.id, "kind": u.kind, "split": u.split, "feature_file": rel, "n_frames": u.n_frames}
        if u.phones is not None:
            row["phones"] = u.phones
        lines.append(json.dumps(row, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {
        "spec": asdict(corpus.spec),
        "trigger_phones": corpus.trigger,
        "noise_level": corpus.noise_level,
        "n_phones": corpus.inventory.n_phones,
        "counts": {s: len(corpus.split(s)) for s in SPLITS},
    }
    (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    if not (root / "manifest.jsonl").exists():
        raise DataError(f"{root}: no manifest.jsonl (run gen-data first)")
    meta = json.loads((root / "corpus.json").read_text())
    spec = SynthCorpusSpec(**meta["spec"])
    inv = make_inventory(spec.n_phones, spec.feature_dim, spec.seed, spec.prototype_spread, spec.duration_range)
    utts = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        feats = read_features(root / row["feature_file"]).astype(np.float64)
        if feats.shape[0] != row["n_frames"]:
            raise DataError(f"{row['id']}: manifest says {row['n_frames']} frames, file has {feats.shape[0]}")
        utts.append(Utterance(row["id"], row["kind"], row["split"], feats, row.get("phones")))
    return Corpus(spec, inv, meta["trigger_phones"], meta["noise_level"], utts)
