"""Adaptability reinforcement: noisy views, teacher-student consistency, EMA.

The student is trained by gradient on one noisy view of each batch; a
teacher, the exponential moving average of the student, sees an independently
noised view, and the squared distance between their class-token
representations is the intra-domain consistency loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import NoiseSpec
from .diffcore import Tensor
from .encoder import EncoderOutput, class_token
from .losses import LossBreakdown, bi_directional_distillation, classification_loss, mmd, total_loss
from .model import BidaModel
from .tokenizer import SOURCE, TARGET, PatchBatch


@dataclass
class TeacherStudent:
    student: BidaModel
    teacher: BidaModel
    decay: float = 0.99

    @classmethod
    def from_student(cls, student: BidaModel, decay: float = 0.99) -> "TeacherStudent":
        return cls(student, student.copy(), decay)

    def sync_teacher(self):
        for k, p in self.student.params.items():
            self.teacher.params[k].data = p.data.copy()


def _crop_rescale(x: np.ndarray, side: int) -> np.ndarray:
    p = x.shape[0]
    if side >= p:
        return x
    off = (p - side) // 2
    crop = x[off : off + side, off : off + side]
    idx = np.minimum((np.arange(p) * side) // p, side - 1)
    return crop[idx][:, idx]


def apply_noise(patch, spec: NoiseSpec, rng: np.random.Generator):
    """Perturb every sample of a patch batch (B x p x p x d).

    Accepts a :class:`PatchBatch` (labels and domain tags carried over) or a
    bare array.
    """
    batch = patch if isinstance(patch, PatchBatch) else None
    x = np.array(batch.data if batch is not None else patch, dtype=np.float64)
    B = len(x)
    if "rotation" in spec.kinds:
        turns = rng.integers(0, 4, B)
        for i in range(B):
            if turns[i]:
                x[i] = np.rot90(x[i], turns[i], axes=(0, 1))
    if "crop" in spec.kinds:
        sides = rng.choice(np.asarray(spec.crop_sides), B)
        for i in range(B):
            x[i] = _crop_rescale(x[i], int(sides[i]))
    if "radiation" in spec.kinds:
        lo, hi = spec.gain_range
        x = x * rng.uniform(lo, hi, (B, 1, 1, x.shape[3]))
        x = x + rng.normal(0.0, spec.sigma, x.shape)
    if "gaussian" in spec.kinds and spec.sigma > 0:
        x = x + rng.normal(0.0, spec.sigma, x.shape)
    if batch is None:
        return x
    return PatchBatch(x, batch.domain, batch.labels)


def consistency_loss(teacher_tokens, student_tokens: Tensor) -> Tensor:
    """Mean squared difference; the teacher side is a constant."""
    t = teacher_tokens.data if isinstance(teacher_tokens, Tensor) else np.asarray(teacher_tokens)
    diff = dc.sub(student_tokens, t)
    return dc.mean(dc.mul(diff, diff))


def intra_domain_consistency(teacher_s, student_s, teacher_t, student_t) -> Tensor:
    return dc.add(consistency_loss(teacher_s, student_s), consistency_loss(teacher_t, student_t))


def ema_update(ts: TeacherStudent, decay: float | None = None):
    """teacher <- decay * teacher + (1 - decay) * student, for every tensor."""
    a = ts.decay if decay is None else decay
    for k, sp in ts.student.params.items():
        tp = ts.teacher.params[k]
        tp.data = a * tp.data + (1.0 - a) * sp.data


@dataclass
class StepBatch:
    """One minibatch.  ``xt[:len(xp)]`` are the pseudo-labelled target samples
    paired with the same-class source samples ``xp``."""

    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray | None = None
    xp: np.ndarray | None = None
    warmup: bool = False

    @property
    def pairs(self) -> int:
        return 0 if self.xp is None else len(self.xp)


def compute_losses(ts: TeacherStudent, batch: StepBatch, cfg, rng: np.random.Generator,
                   frozen: dict | None = None) -> dict:
    """Forward pass of the student (with graph) and teacher (without).

    Returns the individual loss tensors/floats and the assembled total.
    ``frozen`` optionally caches the quantities backpropagation treats as
    constants (teacher class tokens and distillation soft labels); entries
    already present are reused instead of recomputed.
    """
    frozen = {} if frozen is None else frozen
    model = ts.student
    noisy = cfg.use_ars
    adapt = not batch.warmup and cfg.adapts_target and batch.xt is not None
    P = batch.pairs if adapt and cfg.use_coupled else 0

    def view(x):
        return apply_noise(x, cfg.noise, rng) if noisy else x

    xs1 = view(batch.xs) if noisy else None
    xs2 = view(batch.xs)
    src_in = xs2 if P == 0 else np.concatenate([xs2, view(batch.xp)])
    seq_src = model.encode(src_in, SOURCE)
    B = len(batch.xs)
    if P:
        seq_s, seq_p = dc.split(seq_src, [B, P], axis=0)
    else:
        seq_s, seq_p = seq_src, None
    out = {"cls": classification_loss(model.logits(seq_s), batch.ys), "mmd": 0.0, "distill": 0.0, "con": 0.0}

    seq_t = None
    if adapt:
        xt1 = view(batch.xt) if noisy else None
        seq_t = model.encode(view(batch.xt), TARGET)
        if cfg.use_mmd:
            out["mmd"] = mmd(class_token(seq_s), class_token(seq_t))
        if P:
            seq_tp = dc.split(seq_t, [P, len(batch.xt) - P], axis=0)[0] if P < len(batch.xt) else seq_t
            t_st, t_ts = model.couple(seq_p, seq_tp, "mca" if cfg.mca else "cmca")
            enc = EncoderOutput(seq_p, seq_tp, t_st, t_ts, model.logits(seq_p), model.logits(seq_tp),
                                model.logits(t_st), model.logits(t_ts))
            if cfg.use_mmd:
                out["mmd"] = dc.add(out["mmd"], mmd(class_token(t_st), class_token(t_ts)))
            if cfg.use_distill:
                out["distill"] = bi_directional_distillation(enc, ("t",) if cfg.mca else ("s", "t"), frozen)

    if cfg.use_ars:
        with dc.no_grad():
            if "teacher_s" not in frozen:
                frozen["teacher_s"] = class_token(ts.teacher.encode(xs1, SOURCE)).data
            if seq_t is not None and "teacher_t" not in frozen:
                frozen["teacher_t"] = class_token(ts.teacher.encode(xt1, TARGET)).data
        teach_s, teach_t = frozen["teacher_s"], frozen.get("teacher_t")
        out["con"] = consistency_loss(teach_s, class_token(seq_s))
        if seq_t is not None:
            out["con"] = dc.add(out["con"], consistency_loss(teach_t, class_token(seq_t)))

    out["total"] = total_loss(out["cls"], out["mmd"], out["distill"], out["con"], cfg.lambda1, cfg.lambda2)
    return out


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def ars_step(ts: TeacherStudent, batch: StepBatch, cfg, rng: np.random.Generator, optimizer) -> LossBreakdown:
    """Noisy forward, backward, student update, then the EMA teacher update."""
    losses = compute_losses(ts, batch, cfg, rng)
    ts.student.zero_grad()
    dc.backward(losses["total"])
    optimizer.step(ts.student.params)
    ema_update(ts)
    return LossBreakdown(
        cls=_value(losses["cls"]),
        mmd=_value(losses["mmd"]),
        bi_distill=_value(losses["distill"]),
        con=_value(losses["con"]),
        total=_value(losses["total"]),
        pseudo_count=batch.pairs,
    )
