"""Confusion matrices, OA / CA / kappa, and report/feature export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Metrics:
    oa: float
    kappa: float | None  # None when chance agreement is 1 and OA < 1
    ca: dict[int, float]
    confusion: ConfusionMatrix

    def to_json(self) -> dict:
        return {
            "oa": self.oa,
            "kappa": self.kappa,
            "ca": {str(k): v for k, v in self.ca.items()},
            "confusion": self.confusion.counts.tolist(),
        }


def confusion(preds, truths, classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ContractError(f"{len(preds)} predictions for {len(truths)} truths")
    for name, ids in (("prediction", preds), ("truth", truths)):
        if ids.size and (ids.min() < 0 or ids.max() >= classes):
            raise ContractError(f"{name} id out of range [0, {classes})")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> Metrics:
    c = np.asarray(cm.counts, dtype=np.int64)
    n = c.sum()
    if n == 0:
        raise ContractError("metrics of an empty confusion matrix")
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    oa = np.trace(c) / n
    pe = float((rows * cols).sum()) / float(n * n)
    if pe == 1.0:
        kappa = 1.0 if oa == 1.0 else None
    else:
        kappa = float((oa - pe) / (1.0 - pe))
    ca = {int(k): float(c[k, k] / rows[k]) for k in range(len(c)) if rows[k] > 0}
    return Metrics(float(oa), kappa, ca, ConfusionMatrix(c))


def write_report(m: Metrics, json_path, csv_path=None):
    Path(json_path).write_text(json.dumps(m.to_json(), indent=2))
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["oa", m.oa])
            w.writerow(["kappa", "" if m.kappa is None else m.kappa])
            for k, v in m.ca.items():
                w.writerow([f"ca_{k}", v])


def export_features(model, batch, path, domain: str | None = None):
    """CSV rows of ``domain_tag, class, f_0 .. f_{d_map-1}`` (class tokens)."""
    from .tokenizer import TARGET

    domain = domain or (batch.domain[0] if len(batch) else TARGET)
    feats = model.features(batch.data, domain) if len(batch) else np.zeros((0, model.dims.d_map))
    labels = batch.labels if batch.labels is not None else np.full(len(batch), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "class"] + [f"f{i}" for i in range(feats.shape[1])])
        for tag, lab, row in zip(batch.domain, labels, feats):
            w.writerow([tag, int(lab)] + [repr(float(v)) for v in row])
