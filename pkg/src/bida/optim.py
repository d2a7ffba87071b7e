"""Adaptive-moment (Adam) updates on named parameter tensors."""

from __future__ import annotations

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


def optimizer_step(params: dict, grads: dict, moments: dict, lr: float) -> None:
    """One in-place Adam update.

    ``moments`` holds ``m``/``v`` dicts and the step counter ``t``; missing
    entries are created as zeros.
    """
    moments["t"] = t = moments.get("t", 0) + 1
    m, v = moments.setdefault("m", {}), moments.setdefault("v", {})
    c1, c2 = 1.0 - BETA1**t, 1.0 - BETA2**t
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        mk = m.get(name)
        if mk is None:
            mk = m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        vk = v[name]
        mk *= BETA1
        mk += (1.0 - BETA1) * g
        vk *= BETA2
        vk += (1.0 - BETA2) * g * g
        p -= lr * (mk / c1) / (np.sqrt(vk / c2) + EPS)


class Adam:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.moments: dict = {"t": 0, "m": {}, "v": {}}

    def step(self, params: dict):
        optimizer_step(
            {k: p.data for k, p in params.items()},
            {k: p.grad for k, p in params.items()},
            self.moments,
            self.lr,
        )

    def reset(self, names):
        for k in names:
            self.moments["m"].pop(k, None)
            self.moments["v"].pop(k, None)
