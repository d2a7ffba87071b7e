"""Training loop, checkpointing and the lambda grid search.

One epoch is a pass over the sampled source training set in minibatches of
``batch_size``.  Each step also draws ``batch_size`` target samples; the ones
currently holding a pseudo-label are paired with same-class source samples
and feed the coupled branch.  Pseudo-labels are refreshed at the start of
every epoch from the teacher's target branch.

During the warm-up epochs only the source side is trained.  When adaptation
starts, the target tokenizer and branch are initialised from the source ones
and the teacher is re-synchronised with the student, so the first
pseudo-labels come from a trained classifier rather than random weights.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ars import StepBatch, TeacherStudent, ars_step
from .config import LAMBDA_GRID, TrainConfig
from .errors import CompatibilityError, ConfigError, DataError
from .evaluation import Metrics, confusion, metrics
from .formats import decode_text, encode_text, read_checkpoint, write_checkpoint
from .losses import PseudoLabelSet, pair_samples, select_pseudo_labels
from .model import BidaModel
from .optim import Adam
from .synthdata import Scene, extract_patches, normalize_bands
from .tokenizer import SOURCE, TARGET

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss_total", "loss_cls", "loss_mmd", "loss_distill", "loss_con", "pseudo_count", "target_oa")


@dataclass
class DataPools:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray
    yt: np.ndarray  # evaluation only
    classes: int


def sample_pools(cfg: TrainConfig, source: Scene, target: Scene) -> DataPools:
    if source.bands != target.bands:
        raise CompatibilityError(f"source has {source.bands} bands, target has {target.bands}")
    classes = source.classes
    counts = source.class_counts(classes)
    if np.any(counts == 0):
        raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no labelled source pixels")
    if target.labels.max() >= classes:
        raise DataError("target labels include classes unseen in the source scene")
    # every scene is min-max normalised per band before patches are cut
    source, target = normalize_bands(source), normalize_bands(target)
    rng = np.random.default_rng([cfg.seed, 1])
    coords = source.labeled_coords()
    labs = source.labels[coords[:, 0], coords[:, 1]]
    picks = []
    for c in range(classes):
        idx = np.flatnonzero(labs == c)
        picks.append(rng.choice(idx, min(cfg.source_per_class, idx.size), replace=False))
    src = extract_patches(source, coords[np.sort(np.concatenate(picks))], cfg.patch, SOURCE)
    tcoords = target.labeled_coords()
    tpick = np.sort(rng.choice(len(tcoords), min(cfg.target_pool, len(tcoords)), replace=False))
    tgt = extract_patches(target, tcoords[tpick], cfg.patch, TARGET)
    return DataPools(src.data, src.labels, tgt.data, tgt.labels, classes)


class Trainer:
    def __init__(self, cfg: TrainConfig, source: Scene, target: Scene, pools: DataPools | None = None):
        self.cfg = cfg
        self.pools = pools or sample_pools(cfg, source, target)
        self.dims = cfg.dims(self.pools.xs.shape[3], self.pools.classes)
        self.ts = TeacherStudent.from_student(BidaModel.init(self.dims, cfg.seed), cfg.ema_decay)
        self.opt = Adam(cfg.lr)
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.epoch = 0
        self.log: list[dict] = []
        self.pseudo = PseudoLabelSet()

    @property
    def eval_domain(self) -> str:
        # with no target-side loss the target branch is never trained
        return TARGET if self.cfg.adapts_target else SOURCE

    def _start_adaptation(self):
        model = self.ts.student
        model.copy_branch("src", "tgt")
        model.seed_coupled("src")
        self.opt.reset(model.names("tgt") + model.names("cpl"))
        self.ts.sync_teacher()

    def refresh_pseudo_labels(self):
        q = self.ts.teacher.predict_proba(self.pools.xt, TARGET)
        self.pseudo = select_pseudo_labels(q, self.pools.classes)

    def _target_batch(self, n):
        idx = self.rng.choice(len(self.pools.xt), min(n, len(self.pools.xt)), replace=False)
        is_pl = np.zeros(len(self.pools.xt), dtype=bool)
        lab = np.full(len(self.pools.xt), -1)
        is_pl[self.pseudo.indices] = True
        lab[self.pseudo.indices] = self.pseudo.labels
        idx = np.concatenate([idx[is_pl[idx]], idx[~is_pl[idx]]])
        n_pl = int(is_pl[idx].sum())
        chosen = PseudoLabelSet(idx[:n_pl], lab[idx[:n_pl]], np.zeros(n_pl))
        partners = pair_samples(self.pools.ys, chosen, self.rng)
        return self.pools.xt[idx], (self.pools.xs[partners] if n_pl else None)

    def run_epoch(self) -> dict:
        cfg = self.cfg
        warm = self.epoch < cfg.warmup_epochs
        adapting = not warm and cfg.adapts_target
        if adapting and self.epoch == cfg.warmup_epochs:
            self._start_adaptation()
        if adapting and cfg.use_coupled:
            self.refresh_pseudo_labels()
        else:
            self.pseudo = PseudoLabelSet()

        self.opt.lr = cfg.lr_at(self.epoch)
        order = self.rng.permutation(len(self.pools.xs))
        rows = []
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            xt = xp = None
            if adapting:
                xt, xp = self._target_batch(cfg.batch_size)
            batch = StepBatch(self.pools.xs[sel], self.pools.ys[sel], xt, xp, warmup=warm)
            rows.append(ars_step(self.ts, batch, cfg, self.rng, self.opt))

        row = {"epoch": self.epoch}
        for key in ("loss_total", "loss_cls", "loss_mmd", "loss_distill", "loss_con"):
            row[key] = float(np.mean([r.as_row()[key] for r in rows])) if rows else 0.0
        row["pseudo_count"] = len(self.pseudo)
        row["target_oa"] = self.evaluate().oa
        self.log.append(row)
        log.info("epoch %d total %.4f oa %.4f pseudo %d", self.epoch, row["loss_total"], row["target_oa"],
                 row["pseudo_count"])
        self.epoch += 1
        return row

    def fit(self, epochs: int | None = None) -> list[dict]:
        end = self.cfg.epochs if epochs is None else self.epoch + epochs
        while self.epoch < end:
            self.run_epoch()
        return self.log

    def predict(self, x, domain: str | None = None) -> np.ndarray:
        return np.argmax(self.ts.student.predict_proba(x, domain or self.eval_domain), axis=1)

    def evaluate(self, x=None, y=None) -> Metrics:
        x = self.pools.xt if x is None else x
        y = self.pools.yt if y is None else y
        return metrics(confusion(self.predict(x), y, self.pools.classes))

    # persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"__config__": encode_text(self.cfg.to_json())}
        meta = {
            "epoch": self.epoch,
            "adam_t": self.opt.moments["t"],
            "rng": self.rng.bit_generator.state,
            "log": self.log,
            "bands": self.dims.bands,
            "classes": self.dims.classes,
        }
        arrays["__meta__"] = encode_text(json.dumps(meta))
        for k, p in self.ts.student.params.items():
            arrays[f"student/{k}"] = p.data
        for k, p in self.ts.teacher.params.items():
            arrays[f"teacher/{k}"] = p.data
        for k in sorted(self.opt.moments["m"]):
            arrays[f"adam.m/{k}"] = self.opt.moments["m"][k]
            arrays[f"adam.v/{k}"] = self.opt.moments["v"][k]
        return arrays

    def save(self, path):
        write_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path, source: Scene, target: Scene) -> "Trainer":
        arrays = read_checkpoint(path)
        cfg = TrainConfig.from_dict(json.loads(decode_text(arrays["__config__"])))
        tr = cls(cfg, source, target)
        tr.restore(arrays)
        return tr

    def restore(self, arrays: dict[str, np.ndarray]):
        meta = json.loads(decode_text(arrays["__meta__"]))
        check_compatible(meta, self.dims.bands, self.dims.classes)
        self.ts.student.load_state({k[8:]: v for k, v in arrays.items() if k.startswith("student/")})
        self.ts.teacher.load_state({k[8:]: v for k, v in arrays.items() if k.startswith("teacher/")})
        self.opt.moments = {
            "t": int(meta["adam_t"]),
            "m": {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")},
            "v": {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")},
        }
        self.rng.bit_generator.state = meta["rng"]
        self.epoch = int(meta["epoch"])
        self.log = list(meta["log"])


def check_compatible(meta: dict, bands: int, classes: int):
    if meta["bands"] != bands:
        raise CompatibilityError(f"checkpoint expects {meta['bands']} bands, data has {bands}")
    if meta["classes"] != classes:
        raise CompatibilityError(f"checkpoint expects {meta['classes']} classes, data has {classes}")


def load_model(path) -> tuple[TrainConfig, BidaModel, dict]:
    """Student model and config from a checkpoint, without the training data."""
    arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(json.loads(decode_text(arrays["__config__"])))
    meta = json.loads(decode_text(arrays["__meta__"]))
    dims = cfg.dims(meta["bands"], meta["classes"])
    model = BidaModel.init(dims, cfg.seed)
    model.load_state({k[8:]: v for k, v in arrays.items() if k.startswith("student/")})
    return cfg, model, meta


def train(cfg: TrainConfig, source: Scene, target: Scene) -> Trainer:
    tr = Trainer(cfg, source, target)
    tr.fit()
    return tr


def write_log(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


@dataclass
class GridResult:
    best: tuple
    surface: np.ndarray  # rows lambda1, cols lambda2
    grid: tuple = field(default=LAMBDA_GRID)


def lambda_grid_search(cfg: TrainConfig, source: Scene, target: Scene, grid=LAMBDA_GRID,
                       epochs: int | None = None) -> GridResult:
    """Short run per (lambda1, lambda2) pair; target OA of the last epoch."""
    grid = tuple(grid)
    pools = sample_pools(cfg, source, target)
    surface = np.zeros((len(grid), len(grid)))
    for i, l1 in enumerate(grid):
        for j, l2 in enumerate(grid):
            run = cfg.replace(lambda1=l1, lambda2=l2, epochs=cfg.epochs if epochs is None else epochs)
            tr = Trainer(run, source, target, pools)
            tr.fit()
            surface[i, j] = tr.log[-1]["target_oa"] if tr.log else tr.evaluate().oa
    i, j = np.unravel_index(np.argmax(surface), surface.shape)
    return GridResult((grid[i], grid[j]), surface, grid)


def write_surface(res: GridResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda1", "lambda2", "target_oa"])
        for i, l1 in enumerate(res.grid):
            for j, l2 in enumerate(res.grid):
                w.writerow([l1, l2, repr(float(res.surface[i, j]))])


def gradient_check(cfg: TrainConfig, bands: int = 6, classes: int = 3, seed: int = 0,
                   step: float = 1e-5) -> dict[str, float]:
    """Worst finite-difference relative error of the total loss per parameter.

    A random source/target minibatch of ``cfg.batch_size`` patches is drawn;
    the first two target samples are paired with source samples so every
    loss term and every parameter group is active.  Noise views, soft labels
    and the teacher are held fixed across evaluations.
    """
    from . import diffcore as dc
    from .ars import compute_losses

    rng = np.random.default_rng(seed)
    dims = cfg.dims(bands, classes)
    model = BidaModel.init(dims, seed)
    ts = TeacherStudent.from_student(model, cfg.ema_decay)
    # a teacher that differs from the student keeps the consistency term non-trivial
    for p in ts.teacher.params.values():
        p.data = p.data + rng.normal(0, 0.05, p.shape)
    B, p = cfg.batch_size, cfg.patch
    xs = rng.uniform(0, 1, (B, p, p, bands))
    xt = rng.uniform(0, 1, (B, p, p, bands))
    ys = rng.integers(0, classes, B)
    batch = StepBatch(xs, ys, xt, xs[: min(2, B)].copy())
    frozen: dict = {}
    noise_seed = int(rng.integers(2**31))

    def f():
        return compute_losses(ts, batch, cfg, np.random.default_rng(noise_seed), frozen)["total"]

    return dc.gradient_errors(f, model.params, step)


# ---------------------------------------------------------------- ablations

LOSS_LADDER = (
    ("cls", dict(source_only=True, no_mmd=True, no_distill=True, no_ars=True)),
    ("+mmd", dict(no_distill=True, no_ars=True)),
    ("+mmd+bi-distill", dict(no_ars=True)),
    ("+mmd+bi-distill+ars", dict()),
)
BRANCH_LADDER = (
    ("SD-b", dict(source_only=True, no_mmd=True, no_distill=True, no_ars=True)),
    ("(SD+TD)-b", dict(no_coupled=True, no_distill=True, no_ars=True)),
    ("MCA", dict(mca=True, no_ars=True)),
    ("CMCA", dict(no_ars=True)),
)
NOISE_LADDER = (
    ("none", dict(noise={"kinds": ()})),
    ("RC", dict(noise={"kinds": ("crop",)})),
    ("RC+gauss", dict(noise={"kinds": ("crop", "gaussian")})),
    ("RC+gauss+radiation", dict(noise={"kinds": ("crop", "gaussian", "radiation")})),
)
TOKENIZER_PAIR = (
    ("patch", dict(patch_tokenizer=True)),
    ("semantic", dict()),
)
LADDERS = {"loss": LOSS_LADDER, "branch": BRANCH_LADDER, "noise": NOISE_LADDER, "tokenizer": TOKENIZER_PAIR}


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    changes = dict(overrides)
    if "noise" in changes:
        noise = dict(cfg.to_dict()["noise"])
        noise.update(changes.pop("noise"))
        changes["noise"] = noise
    return TrainConfig.from_dict({**cfg.to_dict(), **changes})


@dataclass
class AblationRow:
    ladder: str
    name: str
    oas: list  # final-epoch target OA per seed

    @property
    def mean(self) -> float:
        return float(np.mean(self.oas))


def run_ablation(cfg: TrainConfig, source: Scene, target: Scene, ladders=("loss",), seeds=(0,),
                 progress=None) -> list[AblationRow]:
    """Train every ladder row for every seed; report the last-epoch target OA.

    Rows sharing a seed share the sampled pools, so they differ only in the
    ablation switches.
    """
    rows = []
    for ladder in ladders:
        if ladder not in LADDERS:
            raise ConfigError(f"unknown ladder {ladder!r}; choose from {sorted(LADDERS)}")
        for name, overrides in LADDERS[ladder]:
            oas = []
            for seed in seeds:
                run = apply_overrides(cfg, {**overrides, "seed": seed})
                tr = Trainer(run, source, target)
                tr.fit()
                oas.append(tr.log[-1]["target_oa"] if tr.log else tr.evaluate().oa)
                if progress:
                    progress(ladder, name, seed, oas[-1])
            rows.append(AblationRow(ladder, name, oas))
    return rows


def write_ablation(rows: list[AblationRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ladder", "row", "mean_target_oa"] + [f"seed{i}" for i in range(max(len(r.oas) for r in rows))])
        for r in rows:
            w.writerow([r.ladder, r.name, repr(r.mean)] + [repr(float(v)) for v in r.oas])
