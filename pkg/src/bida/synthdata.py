"""Synthetic cross-domain hyperspectral scenes.

Classes share a common smooth base spectrum and differ by a few Gaussian
bumps, so they are fine-grained but separable.  Scenes are blob maps of
classes; a target domain is the same generator with another seed followed by
a per-band gain/offset, a sinusoidal wavelength warp and extra noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractError
from .formats import read_cube, read_labels, write_cube, write_labels
from .tokenizer import PatchBatch

MIN_CLASS_PIXELS = 200


@dataclass
class Scene:
    cube: np.ndarray  # H x W x d float32 in [0, 1]
    labels: np.ndarray  # H x W int32, -1 = unlabeled

    def __post_init__(self):
        self.cube = np.asarray(self.cube, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.cube.ndim != 3 or self.labels.shape != self.cube.shape[:2]:
            raise ContractError(f"cube {self.cube.shape} and labels {self.labels.shape} disagree")

    @property
    def bands(self) -> int:
        return self.cube.shape[2]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1

    def labeled_coords(self) -> np.ndarray:
        return np.argwhere(self.labels >= 0)

    def class_counts(self, classes: int | None = None) -> np.ndarray:
        lab = self.labels[self.labels >= 0]
        return np.bincount(lab, minlength=classes or self.classes)


@dataclass
class ClassSignature:
    mean: np.ndarray
    noise_scale: float = 0.03
    blob_sigma: float = 6.0


@dataclass
class DomainShiftSpec:
    gain: np.ndarray
    offset: np.ndarray
    warp_amplitude: float = 0.0
    noise_sigma: float = 0.0
    warp_cycles: float = 1.0
    warp_phase: float = 0.0

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        if np.any(self.gain <= 0):
            raise ConfigError("domain-shift gains must be positive")

    @classmethod
    def identity(cls, bands: int) -> "DomainShiftSpec":
        return cls(np.ones(bands), np.zeros(bands))

    @classmethod
    def standard(cls, bands: int, seed: int) -> "DomainShiftSpec":
        """The frozen preset used by the ablation protocol."""
        rng = np.random.default_rng(seed)
        return cls(
            gain=rng.uniform(0.85, 1.15, bands),
            offset=rng.uniform(-0.05, 0.05, bands),
            warp_amplitude=1.0,
            noise_sigma=0.02,
            warp_phase=rng.uniform(0, 2 * np.pi),
        )


def make_signatures(classes: int, bands: int, seed: int, bump_height: float = 0.08) -> list[ClassSignature]:
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, bands)
    # vegetation-like base: low visible, red edge, high NIR plateau
    base = 0.08 + 0.35 / (1.0 + np.exp(-(x - 0.45) / 0.05)) + 0.05 * np.exp(-((x - 0.2) ** 2) / 0.005)
    sigs = []
    for _ in range(200):
        sigs = []
        for c in range(classes):
            spec = base * rng.uniform(0.85, 1.15)
            for _ in range(rng.integers(2, 5)):
                centre, width = rng.uniform(0.05, 0.95), rng.uniform(0.04, 0.12)
                spec = spec + rng.uniform(-1, 1) * bump_height * np.exp(-((x - centre) ** 2) / (2 * width**2))
            sigs.append(ClassSignature(np.clip(spec, 0.02, 0.95)))
        corr = np.corrcoef(np.stack([s.mean for s in sigs]))
        if np.max(corr[np.triu_indices(classes, 1)], initial=-1.0) < 0.995:
            return sigs
    raise ConfigError("could not draw sufficiently distinct class signatures")


def _label_map(classes, H, W, rng, sigma):
    fields = np.stack([gaussian_filter(rng.normal(size=(H, W)), sigma, mode="wrap") for _ in range(classes)])
    fields /= fields.std(axis=(1, 2), keepdims=True)
    return np.argmax(fields, axis=0)


def generate_scene(classes: int, H: int, W: int, bands: int, signatures=None, seed: int = 0,
                   boundary_unlabeled: bool = True) -> Scene:
    if H < 13 or W < 13 or classes < 2:
        raise ConfigError("scenes need H, W >= 13 and at least two classes")
    if classes * MIN_CLASS_PIXELS > H * W:
        raise ConfigError(f"{classes} classes cannot each get {MIN_CLASS_PIXELS} pixels in {H}x{W}")
    if signatures is None:
        signatures = make_signatures(classes, bands, seed)
    if len(signatures) != classes or any(len(s.mean) != bands for s in signatures):
        raise ConfigError("signatures do not match the class count / band count")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        lab = _label_map(classes, H, W, rng, signatures[0].blob_sigma)
        labels = lab.astype(np.int32)
        if boundary_unlabeled:
            labels[_mixed_neighbourhood(lab)] = -1
        counts = np.bincount(labels[labels >= 0], minlength=classes)
        if counts.min() >= MIN_CLASS_PIXELS and counts.min() >= 0.25 * counts.max():
            break
    else:
        raise ConfigError("could not draw a balanced label map")

    means = np.stack([s.mean for s in signatures])
    scales = np.array([s.noise_scale for s in signatures])
    x = np.linspace(0.0, 1.0, bands)
    # low-rank smooth spectral variability plus white noise and illumination
    basis = np.stack([np.cos(np.pi * k * x) for k in range(1, 5)])
    coef = rng.normal(size=(H, W, len(basis))) / np.arange(1, len(basis) + 1)
    smooth = coef @ basis
    illum = 1.0 + 0.05 * gaussian_filter(rng.normal(size=(H, W)), 2.0) / 0.14
    cube = means[lab] * illum[..., None] + scales[lab][..., None] * (smooth + 0.5 * rng.normal(size=(H, W, bands)))
    cube = np.clip(cube, 0.0, 1.0)

    return Scene(cube, labels)


def _mixed_neighbourhood(lab):
    H, W = lab.shape
    pad = np.pad(lab, 1, mode="edge")
    mixed = np.zeros((H, W), dtype=bool)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            mixed |= pad[dr : dr + H, dc : dc + W] != lab
    return mixed


def _warp(cube: np.ndarray, amplitude: float, cycles: float, phase: float) -> np.ndarray:
    d = cube.shape[-1]
    b = np.arange(d, dtype=np.float64)
    src = np.clip(b + amplitude * np.sin(2 * np.pi * cycles * b / d + phase), 0, d - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, d - 1)
    frac = src - lo
    return cube[..., lo] * (1 - frac) + cube[..., hi] * frac


def apply_domain_shift(scene: Scene, shift: DomainShiftSpec, seed: int = 0) -> Scene:
    cube = scene.cube.astype(np.float64)
    if len(shift.gain) != cube.shape[2] or len(shift.offset) != cube.shape[2]:
        raise ConfigError("shift gain/offset length must equal the band count")
    if shift.warp_amplitude:
        cube = _warp(cube, shift.warp_amplitude, shift.warp_cycles, shift.warp_phase)
    cube = cube * shift.gain + shift.offset
    if shift.noise_sigma:
        cube = cube + np.random.default_rng(seed).normal(0.0, shift.noise_sigma, cube.shape)
    return Scene(np.clip(cube, 0.0, 1.0), scene.labels.copy())


def make_domain_pair(classes=5, size=128, bands=32, seed=7, targets=1, signature_seed=None,
                     bump_height: float = 0.08):
    """Source scene plus ``targets`` shifted target scenes sharing class signatures."""
    sigs = make_signatures(classes, bands, seed if signature_seed is None else signature_seed, bump_height)
    source = generate_scene(classes, size, size, bands, sigs, seed)
    out = []
    for k in range(1, targets + 1):
        base = generate_scene(classes, size, size, bands, sigs, seed + 1000 * k)
        out.append(apply_domain_shift(base, DomainShiftSpec.standard(bands, seed + 1000 * k + 1), seed + 1000 * k + 2))
    return source, out


def normalize_bands(scene: Scene) -> Scene:
    """Per-band min-max rescaling of a whole scene to [0, 1].

    Constant bands map to 0.  Each scene is normalised with its own extremes,
    as is usual for hyperspectral inputs.
    """
    cube = scene.cube.astype(np.float64)
    lo = cube.min(axis=(0, 1))
    span = cube.max(axis=(0, 1)) - lo
    out = np.where(span > 0, (cube - lo) / np.where(span > 0, span, 1.0), 0.0)
    return Scene(out, scene.labels.copy())


def extract_patches(scene: Scene, coords=None, patch: int = 13, domain: str = "source") -> PatchBatch:
    """One mirror-padded patch per coordinate; labels are the centre pixels'."""
    if patch % 2 == 0:
        raise ConfigError(f"patch size must be odd, got {patch}")
    coords = scene.labeled_coords() if coords is None else np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    r = patch // 2
    padded = np.pad(scene.cube, ((r, r), (r, r), (0, 0)), mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(0, 1))
    data = win[coords[:, 0], coords[:, 1]].transpose(0, 2, 3, 1).astype(np.float64)
    return PatchBatch(data, np.full(len(coords), domain), scene.labels[coords[:, 0], coords[:, 1]])


def write_scene(scene: Scene, path):
    """Write ``path`` (cube) and its ``.lbl`` sibling (labels)."""
    path = Path(path)
    write_cube(path, scene.cube)
    write_labels(label_path(path), scene.labels)


def read_scene(path) -> Scene:
    path = Path(path)
    cube = read_cube(path)
    labels = read_labels(label_path(path))
    if labels.shape != cube.shape[:2]:
        raise ContractError(f"label raster {labels.shape} does not match cube {cube.shape[:2]}")
    return Scene(cube, labels)


def label_path(cube_path) -> Path:
    return Path(cube_path).with_suffix(".lbl")
