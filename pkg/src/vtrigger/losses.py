"""Training objectives: CTC, decoder cross-entropy, trigger BCE, joint sum."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CtcInfeasibleError

BLANK = 0
N_OUTPUTS = 54  # 53 phones/boundaries + blank


def _labels(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("CTC labels must be a non-empty 1-D sequence")
    if np.any(labels == BLANK):
        raise ValueError("CTC labels must not contain the blank symbol")
    return labels


def ctc_min_frames(labels) -> int:
    labels = np.asarray(labels)
    return int(len(labels) + np.count_nonzero(labels[1:] == labels[:-1]))


def _extended(labels):
    S = 2 * len(labels) + 1
    ext = np.full(S, BLANK, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = labels[1:] != labels[:-1]
    return ext, skip


def _ctc_alpha(lp_ext, skip):
    T, S = lp_ext.shape
    # two leading -inf columns stand in for states -1 and -2
    alpha = np.full((T, S + 2), -np.inf)
    alpha[0, 2] = lp_ext[0, 0]
    if S > 1:
        alpha[0, 3] = lp_ext[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev[2:], prev[1:-1])
        acc = np.where(skip, np.logaddexp(acc, prev[:-2]), acc)
        alpha[t, 2:] = acc + lp_ext[t]
    return alpha[:, 2:]


def ctc_log_likelihood(log_posteriors, labels) -> float:
    """log P(labels | x) by the CTC forward recursion; -inf when infeasible."""
    lp = np.asarray(log_posteriors, dtype=np.float64)
    labels = _labels(labels)
    if lp.shape[0] < ctc_min_frames(labels):
        return -np.inf
    ext, skip = _extended(labels)
    alpha = _ctc_alpha(lp[:, ext], skip)
    return float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))


def ctc_loss(log_posteriors, labels):
    """Negative log-likelihood and its exact gradient.

    Returns ``(loss, grad)`` where ``grad[t, a]`` is d loss / d log_posteriors[t, a]
    with every entry treated as an independent variable, i.e. minus the
    state occupancy of symbol ``a`` at frame ``t``. Chain through
    ``nn.log_softmax_backward`` (or use :func:`ctc_grad_logits`) for logits.
    """
    lp = np.asarray(log_posteriors, dtype=np.float64)
    labels = _labels(labels)
    T, A = lp.shape
    need = ctc_min_frames(labels)
    if T < need:
        raise CtcInfeasibleError(f"CTC infeasible: {T} frames for labels needing at least {need}")
    ext, skip = _extended(labels)
    lp_ext = lp[:, ext]
    S = len(ext)
    alpha = _ctc_alpha(lp_ext, skip)
    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(log_z):
        raise CtcInfeasibleError("CTC infeasible: every alignment has zero probability")

    skip_back = np.zeros(S, dtype=bool)
    skip_back[:-2] = skip[2:]
    beta = np.full((T, S + 2), -np.inf)  # two trailing -inf columns
    beta[-1, S - 1] = lp_ext[-1, -1]
    beta[-1, S - 2] = lp_ext[-1, -2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = np.logaddexp(nxt[:-2], nxt[1:-1])
        acc = np.where(skip_back, np.logaddexp(acc, nxt[2:]), acc)
        beta[t, :-2] = acc + lp_ext[t]
    beta = beta[:, :-2]

    live = np.isfinite(alpha) & np.isfinite(beta)
    occ = np.zeros((T, S))
    occ[live] = np.exp(alpha[live] + beta[live] - lp_ext[live] - log_z)
    gamma = np.zeros((T, A))
    np.add.at(gamma, (slice(None), ext), occ)
    return float(-log_z), -gamma


def ctc_grad_logits(log_posteriors, labels):
    """Loss and gradient w.r.t. the logits that produced ``log_posteriors``.

    Equals softmax(logits) - occupancy row-wise.
    """
    loss, g = ctc_loss(log_posteriors, labels)
    p = np.exp(log_posteriors)
    return loss, p + g


# ---------------------------------------------------------------------------
# padded batches


def _batch_extended(label_seqs, A):
    """Padded blank-augmented labels, skip flags and state counts for a batch."""
    labs = [_labels(lab) for lab in label_seqs]
    S = np.array([2 * len(lab) + 1 for lab in labs])
    Smax = int(S.max())
    ext = np.zeros((len(labs), Smax), dtype=np.int64)
    skip = np.zeros((len(labs), Smax), dtype=bool)
    for b, lab in enumerate(labs):
        if lab.max() >= A:
            raise ValueError(f"label {lab.max()} out of range for {A} outputs")
        e, k = _extended(lab)
        ext[b, :len(e)] = e
        skip[b, :len(k)] = k
    return labs, ext, skip, S


def _batch_alpha(lp_ext, skip):
    """Forward recursion for (B, T, S) emissions; padded entries must be -inf."""
    B, T, S = lp_ext.shape
    alpha = np.full((B, T, S + 2), -np.inf)
    alpha[:, 0, 2:4] = lp_ext[:, 0, :2]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        acc = np.logaddexp(prev[:, 2:], prev[:, 1:-1])
        acc = np.where(skip, np.logaddexp(acc, prev[:, :-2]), acc)
        alpha[:, t, 2:] = acc + lp_ext[:, t]
    return alpha[:, :, 2:]


def _emissions(lp, lengths, ext, S):
    B, T, _ = lp.shape
    lp_ext = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, ext.shape[1])), axis=2)
    valid = (np.arange(T)[None, :, None] < lengths[:, None, None]) & \
            (np.arange(ext.shape[1])[None, None, :] < S[:, None, None])
    return np.where(valid, lp_ext, -np.inf), valid


def _final(alpha, lengths, S):
    b = np.arange(alpha.shape[0])
    last = alpha[b, lengths - 1]
    return np.logaddexp(last[b, S - 1], last[b, S - 2])


def _check_batch(log_posteriors, lengths, label_seqs):
    lp = np.asarray(log_posteriors, dtype=np.float64)
    if lp.ndim != 3:
        raise ValueError(f"expected (B, T, A) log-posteriors, got shape {lp.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (lp.shape[0],) or len(label_seqs) != lp.shape[0]:
        raise ValueError("lengths and label sequences must have one entry per batch row")
    if np.any(lengths < 1) or np.any(lengths > lp.shape[1]):
        raise ValueError("sequence lengths must lie in [1, T]")
    return lp, lengths


def ctc_log_likelihood_batch(log_posteriors, lengths, label_seqs) -> np.ndarray:
    """Per-row log P(labels | x) for a padded (B, T, A) batch; -inf where infeasible."""
    lp, lengths = _check_batch(log_posteriors, lengths, label_seqs)
    _, ext, skip, S = _batch_extended(label_seqs, lp.shape[2])
    lp_ext, _ = _emissions(lp, lengths, ext, S)
    return _final(_batch_alpha(lp_ext, skip), lengths, S)


def ctc_loss_batch(log_posteriors, lengths, label_seqs):
    """Batched :func:`ctc_loss` over a padded (B, T, A) array.

    Returns ``(losses (B,), grad (B, T, A))``; gradient rows past each
    sequence's length are zero. The backward variables come from running the
    forward recursion on each sequence reversed in time (with its labels
    reversed), which keeps every row in one vectorized pass.
    """
    lp, lengths = _check_batch(log_posteriors, lengths, label_seqs)
    B, T, A = lp.shape
    labs, ext, skip, S = _batch_extended(label_seqs, A)
    for b, lab in enumerate(labs):
        need = ctc_min_frames(lab)
        if lengths[b] < need:
            raise CtcInfeasibleError(f"CTC infeasible in row {b}: {lengths[b]} frames, need {need}")
    lp_ext, valid = _emissions(lp, lengths, ext, S)
    alpha = _batch_alpha(lp_ext, skip)
    log_z = _final(alpha, lengths, S)
    if not np.all(np.isfinite(log_z)):
        raise CtcInfeasibleError("CTC infeasible: every alignment has zero probability")

    Smax = ext.shape[1]
    t_idx = np.arange(T)[None, :]
    s_idx = np.arange(Smax)[None, :]
    rev_t = np.where(t_idx < lengths[:, None], lengths[:, None] - 1 - t_idx, t_idx)
    rev_s = np.where(s_idx < S[:, None], S[:, None] - 1 - s_idx, s_idx)
    ext_r = np.take_along_axis(ext, rev_s, axis=1)
    skip_r = np.zeros_like(skip)
    skip_r[:, 2:] = (ext_r[:, 2:] != BLANK) & (ext_r[:, 2:] != ext_r[:, :-2])
    skip_r &= s_idx < S[:, None]
    lp_ext_r = np.take_along_axis(np.take_along_axis(lp_ext, rev_t[:, :, None], axis=1),
                                  np.broadcast_to(rev_s[:, None, :], (B, T, Smax)), axis=2)
    alpha_r = _batch_alpha(lp_ext_r, skip_r)
    beta = np.take_along_axis(np.take_along_axis(alpha_r, rev_t[:, :, None], axis=1),
                              np.broadcast_to(rev_s[:, None, :], (B, T, Smax)), axis=2)

    live = valid & np.isfinite(alpha) & np.isfinite(beta)
    with np.errstate(invalid="ignore"):
        expo = alpha + beta - lp_ext - log_z[:, None, None]
    occ = np.where(live, np.exp(np.where(live, expo, 0.0)), 0.0)
    onehot = np.zeros((B, Smax, A))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    onehot *= (s_idx < S[:, None])[:, :, None]
    gamma = occ @ onehot
    return -log_z, -gamma


@lru_cache(maxsize=64)
def _collapse_index(A: int, T: int):
    """All A**T paths, plus a map from collapsed label tuple to path indices."""
    paths = np.array(list(itertools.product(range(A), repeat=T)), dtype=np.int64).reshape(-1, T)
    groups: dict[tuple, list[int]] = {}
    for k, path in enumerate(paths.tolist()):
        out = []
        prev = None
        for s in path:
            if s != prev and s != BLANK:
                out.append(s)
            prev = s
        groups.setdefault(tuple(out), []).append(k)
    return paths, {key: np.asarray(v) for key, v in groups.items()}


def ctc_bruteforce(log_posteriors, labels, max_paths: int = 10**6) -> float:
    """CTC loss by summing over every frame-level path (test oracle)."""
    lp = np.asarray(log_posteriors, dtype=np.float64)
    labels = tuple(int(v) for v in _labels(labels))
    T, A = lp.shape
    if A**T > max_paths:
        raise ValueError(f"instance too large for enumeration: {A}^{T} paths > {max_paths}")
    all_paths, groups = _collapse_index(A, T)
    idx = groups.get(labels)
    if idx is None:
        raise CtcInfeasibleError(f"no path of length {T} collapses to {list(labels)}")
    paths = all_paths[idx]
    path_lp = lp[np.arange(T)[None, :], paths].sum(axis=1)
    top = path_lp.max()
    return float(-(top + np.log(np.exp(path_lp - top).sum())))


# ---------------------------------------------------------------------------


def decoder_ce(pred_logp, targets):
    """Mean token NLL of ``targets`` (EOS included) and its gradient w.r.t. ``pred_logp``."""
    pred_logp = np.asarray(pred_logp)
    targets = np.asarray(targets, dtype=np.int64)
    U = pred_logp.shape[0]
    if targets.shape != (U,):
        raise ValueError(f"decoder_ce: {U} prediction steps but {targets.shape[0]} targets")
    rows = np.arange(U)
    loss = -pred_logp[rows, targets].mean()
    grad = np.zeros_like(pred_logp)
    grad[rows, targets] = -1.0 / U
    return float(loss), grad


def decoder_ce_batch(pred_logp, targets, lengths):
    """Row-wise :func:`decoder_ce` over padded (B, U, V) predictions.

    Returns ``(losses (B,), grad)``; steps at or past ``lengths[b]`` are ignored.
    """
    pred_logp = np.asarray(pred_logp)
    targets = np.asarray(targets, dtype=np.int64)
    B, U, _ = pred_logp.shape
    lengths = np.asarray(lengths)
    if targets.shape != (B, U) or lengths.shape != (B,):
        raise ValueError("decoder_ce_batch: targets must be (B, U) with one length per row")
    mask = np.arange(U)[None, :] < lengths[:, None]
    picked = np.take_along_axis(pred_logp, targets[:, :, None], axis=2)[:, :, 0]
    loss = -(picked * mask).sum(axis=1) / lengths
    grad = np.zeros_like(pred_logp)
    np.put_along_axis(grad, targets[:, :, None], (-mask.astype(float) / lengths[:, None])[:, :, None], axis=2)
    return loss, grad


def disc_loss_batch(z, y):
    """Vectorized :func:`disc_loss_from_logit`."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.logaddexp(0.0, z) - y * z, 0.5 * (1.0 + np.tanh(0.5 * z)) - y


def disc_loss(p: float, y: int):
    """Binary cross-entropy; the gradient is w.r.t. the pre-sigmoid logit (p - y)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"trigger probability must lie in (0, 1), got {p}")
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(loss), float(p - y)


def disc_loss_from_logit(z: float, y: int):
    """Numerically stable BCE from a logit; returns (loss, d loss / d z)."""
    loss = np.logaddexp(0.0, z) - y * z
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(loss), float(p - y)


@dataclass
class LossBreakdown:
    ctc: float | None = None
    ce: float | None = None
    disc: float | None = None

    @property
    def total(self) -> float:
        return sum(v for v in (self.ctc, self.ce, self.disc) if v is not None)

    def as_dict(self) -> dict:
        return {"ctc": self.ctc, "ce": self.ce, "disc": self.disc, "total": self.total}


def joint_loss(ctc: float | None = None, ce: float | None = None, disc: float | None = None) -> LossBreakdown:
    """Unit-weight sum of whichever components are present.

    Phonetic examples carry ``ctc`` (plus ``ce`` with a decoder);
    discriminative examples carry only ``disc``.
    """
    if ctc is None and disc is None:
        raise ValueError("joint_loss needs a CTC term (or a discriminative term)")
    return LossBreakdown(ctc=ctc, ce=ce, disc=disc)
