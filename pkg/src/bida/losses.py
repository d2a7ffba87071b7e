"""Objective terms and the entropy-gated pseudo-label pairing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoder import class_token
from .errors import ContractError, DataError

BANDWIDTH_SCALES = (0.5, 1.0, 2.0)


@dataclass
class LossBreakdown:
    cls: float = 0.0
    mmd: float = 0.0
    bi_distill: float = 0.0
    con: float = 0.0
    total: float = 0.0
    pseudo_count: int = 0

    def as_row(self) -> dict:
        return {
            "loss_total": self.total,
            "loss_cls": self.cls,
            "loss_mmd": self.mmd,
            "loss_distill": self.bi_distill,
            "loss_con": self.con,
        }


@dataclass
class PseudoLabelSet:
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    entropy: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.indices)


def _onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (B x C) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ContractError(f"labels must be {B} ids in [0, {C})")
    picked = dc.sum_(dc.mul(dc.log_softmax(logits, axis=1), _onehot(labels, C)), axis=1)
    return dc.mul(dc.mean(picked), -1.0)


def _entropy_rows(q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def prediction_entropy(q) -> float:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or np.any(q < 0) or abs(q.sum() - 1.0) > 1e-6:
        raise ContractError("entropy needs a probability vector (non-negative, sums to 1)")
    return float(_entropy_rows(q))


def entropy_threshold(classes: int) -> float:
    return 0.5 * np.log(classes)


def select_pseudo_labels(q_t, classes: int | None = None) -> PseudoLabelSet:
    """Keep rows whose prediction entropy is at most half of log(C)."""
    q_t = np.asarray(q_t, dtype=np.float64)
    if q_t.ndim != 2:
        raise ContractError(f"expected B x C probabilities, got shape {q_t.shape}")
    classes = q_t.shape[1] if classes is None else classes
    h = _entropy_rows(q_t)
    keep = np.flatnonzero(h <= entropy_threshold(classes))
    return PseudoLabelSet(keep, np.argmax(q_t[keep], axis=1), h[keep])


def pair_samples(source_labels, pseudo: PseudoLabelSet, rng: np.random.Generator) -> np.ndarray:
    """For every pseudo-labelled target sample, the index of a uniformly drawn
    source sample of the same class."""
    source_labels = np.asarray(source_labels)
    out = np.zeros(len(pseudo), dtype=np.int64)
    by_class: dict[int, np.ndarray] = {}
    for i, c in enumerate(pseudo.labels):
        c = int(c)
        if c not in by_class:
            by_class[c] = np.flatnonzero(source_labels == c)
            if by_class[c].size == 0:
                raise DataError(f"pseudo-label class {c} has no source samples to pair with")
        out[i] = by_class[c][rng.integers(by_class[c].size)]
    return out


def distillation_loss(p_soft, logits: Tensor) -> Tensor:
    """Soft-target cross-entropy ``-mean_i sum_c p_ic log q_ic``.

    ``p_soft`` is used as a constant; ``q = softmax(logits)``.
    """
    p = p_soft.data if isinstance(p_soft, Tensor) else np.asarray(p_soft, dtype=np.float64)
    return dc.mul(dc.mean(dc.sum_(dc.mul(dc.log_softmax(logits, axis=1), p), axis=1)), -1.0)


def probabilities(logits: Tensor) -> np.ndarray:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def bi_directional_distillation(out, directions=("s", "t"), soft: dict | None = None) -> Tensor:
    """Coupled-branch predictions supervise the source (from ``t->s``) and
    target (from ``s->t``) branches.

    ``soft`` optionally caches the soft labels: entries already present are
    reused, missing ones are filled in.  Finite-difference checks pass the
    same dict to every evaluation so the labels stay the constants that
    backpropagation treats them as.
    """
    soft = {} if soft is None else soft
    terms = []
    if "s" in directions:
        p = soft.setdefault("ts", probabilities(out.logits_ts))
        terms.append(distillation_loss(p, out.logits_s))
    if "t" in directions:
        p = soft.setdefault("st", probabilities(out.logits_st))
        terms.append(distillation_loss(p, out.logits_t))
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def pairwise_sq_dists(z: Tensor) -> Tensor:
    n, k = z.shape
    diff = dc.sub(dc.reshape(z, (n, 1, k)), dc.reshape(z, (1, n, k)))
    return dc.sum_(dc.mul(diff, diff), axis=2)


def median_mask(d: np.ndarray) -> np.ndarray:
    """Weights selecting the median of the strictly-upper-triangular entries."""
    n = d.shape[0]
    iu = np.triu_indices(n, 1)
    mask = np.zeros_like(d)
    if len(iu[0]) == 0:
        return mask
    order = np.argsort(d[iu], kind="stable")
    m = len(order)
    picks = [order[m // 2]] if m % 2 else [order[m // 2 - 1], order[m // 2]]
    for p in picks:
        mask[iu[0][p], iu[1][p]] = 1.0 / len(picks)
    return mask


def mmd(a, b, scales=BANDWIDTH_SCALES, floor: float = 1e-9) -> Tensor:
    """Biased multi-bandwidth Gaussian-kernel MMD^2 between row sets.

    Bandwidths are the median pairwise squared distance of the pooled rows
    times each scale (plus ``floor``); kernels for all bandwidths are summed.
    The median is differentiated through the selected entries.
    """
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractError(f"mmd needs n x k and m x k inputs, got {a.shape} and {b.shape}")
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ContractError("mmd of an empty sample")
    z = dc.concat([a, b], axis=0)
    d = pairwise_sq_dists(z)
    med = dc.add(dc.sum_(dc.mul(d, median_mask(d.data))), floor)
    kern = None
    for s in scales:
        k = dc.exp(dc.mul(dc.div(d, dc.mul(med, s)), -1.0))
        kern = k if kern is None else dc.add(kern, k)
    w = np.zeros((n + m, n + m))
    w[:n, :n] = 1.0 / (n * n)
    w[n:, n:] = 1.0 / (m * m)
    w[:n, n:] = w[n:, :n] = -1.0 / (n * m)
    return dc.relu(dc.sum_(dc.mul(kern, w)))


def mmd_loss(out, coupled: bool = True) -> Tensor:
    """MMD between intra-domain class tokens plus, when available, between
    the two coupled class tokens."""
    loss = mmd(class_token(out.t_s), class_token(out.t_t))
    if coupled and out.t_st is not None:
        loss = dc.add(loss, mmd(class_token(out.t_st), class_token(out.t_ts)))
    return loss


def total_loss(cls, mmd_term, distill, con, lambda1: float, lambda2: float):
    """``cls + lambda1 * (mmd + distill) + lambda2 * con``; works on floats or
    tensors."""
    if lambda1 < 0 or lambda2 < 0:
        raise ContractError("loss weights must be non-negative")
    return cls + lambda1 * (mmd_term + distill) + lambda2 * con
