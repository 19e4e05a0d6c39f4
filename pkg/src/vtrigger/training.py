"""Adam, mixed AM/discriminative mini-batches, early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses, models
from .errors import DataError, NumericError

log = logging.getLogger(__name__)

MODES = ("ctc", "ctc+dec", "mtl")


@dataclass
class Example:
    """One training utterance, already converted to model input.

    Phonetic (AM) examples carry ``labels``; discriminative examples carry
    ``trigger`` (1 = true trigger, 0 = false trigger) and no labels.
    """
    x: np.ndarray
    labels: np.ndarray | None = None
    trigger: int | None = None
    id: str = ""

    @property
    def recipe(self) -> str:
        return "am" if self.labels is not None else "disc"


@dataclass
class TrainConfig:
    batch_size: int = 32
    patience_epochs: int = 8
    max_epochs: int = 100
    seed: int = 0
    mode: str = "ctc"
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


# ---------------------------------------------------------------------------
# per-example objective


def pad_batch(xs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (T_i, D) arrays into a zero-padded (B, T_max, D) array plus lengths."""
    lengths = np.array([x.shape[0] for x in xs], dtype=np.int64)
    out = np.zeros((len(xs), int(lengths.max()), xs[0].shape[1]), dtype=xs[0].dtype)
    for i, x in enumerate(xs):
        out[i, :len(x)] = x
    return out, lengths


def batch_objective(m: models.ModelGraph, batch: list[Example], *, use_decoder: bool = True,
                    grads: bool = True):
    """Per-example loss breakdowns and the gradient of their mean.

    The whole batch goes through the trunk as one padded array. Tensors no
    example touches (e.g. the decoder in a batch of discriminative examples)
    get zero gradients.
    """
    if not batch:
        raise DataError("empty batch")
    B = len(batch)
    X, lengths = pad_batch([ex.x for ex in batch])
    h, cache = models.trunk_forward(m, X, lengths)
    g: dict = {}
    dh = np.zeros_like(h)
    ctc = np.full(B, np.nan)
    ce = np.full(B, np.nan)
    disc = np.full(B, np.nan)

    am = [i for i, ex in enumerate(batch) if ex.labels is not None]
    if am:
        labels = [batch[i].labels for i in am]
        logp, hc = models.phone_head(m, h[am])
        ctc[am], dlp = losses.ctc_loss_batch(logp, lengths[am], labels)
        if grads:
            dh[am] += models.phone_head_backward(dlp / B, hc, g)
        if use_decoder and m.decoder is not None:
            U = np.array([len(lab) + 1 for lab in labels])
            tokens_in = np.full((len(am), U.max()), m.decoder.eos, dtype=np.int64)
            targets = tokens_in.copy()
            tokens_in[:, 0] = models.BOS
            for r, lab in enumerate(labels):
                tokens_in[r, 1:len(lab) + 1] = lab
                targets[r, :len(lab)] = lab
            dlogp, dc = models.decoder_forward(h[am], tokens_in, m, lengths[am])
            ce[am], dd = losses.decoder_ce_batch(dlogp, targets, U)
            if grads:
                dh[am] += models.decoder_backward(m, dd / B, dc, g)
    dsc = [i for i, ex in enumerate(batch) if ex.trigger is not None]
    if dsc:
        if not m.mtl:
            raise ValueError("discriminative example given to a model without a trigger head")
        z, mc = models.mtl_logit(m, h[dsc], lengths[dsc])
        disc[dsc], dz = losses.disc_loss_batch(z, [batch[i].trigger for i in dsc])
        if grads:
            dh[dsc] += models.mtl_logit_backward(m, dz / B, mc, g)

    def opt(v):
        return None if np.isnan(v) else float(v)

    breakdowns = [losses.joint_loss(ctc=opt(ctc[i]), ce=opt(ce[i]), disc=opt(disc[i])) for i in range(B)]
    if not grads:
        return breakdowns, None
    models.trunk_backward(m, dh, cache, g)
    for name, p in m.params.items():
        if name not in g:
            g[name] = np.zeros_like(p)
    return breakdowns, g


def example_loss(m: models.ModelGraph, ex: Example, *, use_decoder: bool = True, grads: bool = True):
    """Composite loss for one example and, optionally, its parameter gradients."""
    br, g = batch_objective(m, [ex], use_decoder=use_decoder, grads=grads)
    return br[0], g


def batch_loss(m: models.ModelGraph, batch: list[Example], *, use_decoder: bool = True, grads: bool = True):
    """Mean composite loss over ``batch`` and the mean gradient."""
    br, g = batch_objective(m, batch, use_decoder=use_decoder, grads=grads)
    return float(np.mean([b.total for b in br])), g


def dataset_loss(m: models.ModelGraph, examples: list[Example], *, use_decoder: bool = True,
                 chunk: int = 64) -> float:
    """Mean composite loss over a whole set, evaluated in length-sorted chunks."""
    order = sorted(range(len(examples)), key=lambda i: examples[i].x.shape[0])
    total = 0.0
    for s in range(0, len(order), chunk):
        br, _ = batch_objective(m, [examples[i] for i in order[s:s + chunk]],
                                use_decoder=use_decoder, grads=False)
        total += sum(b.total for b in br)
    return total / len(examples)


# ---------------------------------------------------------------------------
# sampling and stopping


def sample_mixed_batch(am_set: list, disc_set: list, rng: np.random.Generator, batch_size: int = 32) -> list:
    """Uniform draw (without replacement) from the concatenation of both sets."""
    pool = list(am_set) + list(disc_set)
    if not pool:
        raise DataError("both the AM and the discriminative set are empty")
    idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
    return [pool[i] for i in idx]


def epoch_batches(pool: list, batch_size: int, rng: np.random.Generator) -> list[list]:
    """One shuffled pass over ``pool`` cut into mini-batches."""
    order = rng.permutation(len(pool))
    return [[pool[i] for i in order[s:s + batch_size]] for s in range(0, len(pool), batch_size)]


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to beat the best loss (strict <)."""

    def __init__(self, patience: int = 8):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, **row):
        if self.epochs and row["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.epochs.append(row)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.epochs)

    def write(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def filter_feasible(examples: list[Example]) -> tuple[list[Example], int]:
    """Drop AM examples whose labels cannot fit in their frames; returns (kept, n_skipped)."""
    kept = [ex for ex in examples
            if ex.labels is None or ex.x.shape[0] >= losses.ctc_min_frames(ex.labels)]
    return kept, len(examples) - len(kept)


def train(m: models.ModelGraph, train_am: list[Example], val_am: list[Example], cfg: TrainConfig,
          train_disc: list[Example] = (), val_disc: list[Example] = (), on_epoch=None):
    """Train ``m`` (mutated in place) and return ``(best_model, TrainLog)``.

    The validation loss is the same composite loss used for training.
    """
    use_decoder = cfg.mode != "ctc"
    if cfg.mode == "ctc+dec" and m.decoder is None:
        raise ValueError("mode ctc+dec needs a model with a decoder")
    if cfg.mode == "mtl" and not m.mtl:
        raise ValueError("mode mtl needs a model with a trigger head")
    train_disc = list(train_disc) if cfg.mode == "mtl" else []
    val_disc = list(val_disc) if cfg.mode == "mtl" else []

    train_am, skipped_train = filter_feasible(list(train_am))
    val_am, skipped_val = filter_feasible(list(val_am))
    if skipped_train or skipped_val:
        log.warning("skipped %d train / %d val utterances with infeasible CTC alignments",
                    skipped_train, skipped_val)
    pool = train_am + train_disc
    val_pool = val_am + val_disc
    if not pool:
        raise DataError("training set is empty (after skipping infeasible utterances)")
    if not val_pool:
        raise DataError("validation set is empty (after skipping infeasible utterances)")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    stopper = EarlyStopping(cfg.patience_epochs)
    tlog = TrainLog(meta={
        "mode": cfg.mode, "arch": m.arch, "effective_batch": cfg.batch_size, "workers": 1,
        "clip_norm": cfg.clip_norm, "lr": cfg.lr, "seed": cfg.seed,
        "skipped_infeasible": skipped_train + skipped_val,
        "n_train": len(pool), "n_val": len(val_pool),
    })
    best = m.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        seen = 0
        running = 0.0
        for batch in epoch_batches(pool, cfg.batch_size, rng):
            loss, g = batch_loss(m, batch, use_decoder=use_decoder)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            if cfg.clip_norm is not None:
                norm = global_norm(g)
                if norm > cfg.clip_norm:
                    for k in g:
                        g[k] *= cfg.clip_norm / norm
            adam_step(m.params, g, state)
            running += loss * len(batch)
            seen += len(batch)
        seconds = time.perf_counter() - t0
        val_loss = dataset_loss(m, val_pool, use_decoder=use_decoder)
        stop = stopper.update(val_loss)
        tlog.add(epoch=epoch, train_loss=running / seen, val_loss=val_loss,
                 seconds=seconds, utt_per_sec=seen / seconds)
        if stopper.improved:
            best = m.copy()
        if on_epoch is not None:
            on_epoch(tlog.epochs[-1])
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, running / seen, val_loss, seconds)
        if stop:
            break
    tlog.meta.update(best_epoch=stopper.best_epoch, best_val_loss=stopper.best_loss,
                     stopped_epoch=stopper.epoch, early_stopped=stopper.bad_epochs >= stopper.patience)
    best.meta = dict(best.meta, epochs=stopper.epoch, best_epoch=stopper.best_epoch,
                     best_val_loss=stopper.best_loss, final_train_loss=tlog.epochs[-1]["train_loss"],
                     mode=cfg.mode, train_config=asdict(cfg))
    return best, tlog
