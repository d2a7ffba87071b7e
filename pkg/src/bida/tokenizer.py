"""Semantic tokenizer: attention-weighted spectral pooling over a patch.

A small spatial-spectral extractor scores every pixel of a 13x13 patch for
each of ``L`` tokens; a softmax over the 169 pixel positions turns the scores
into attention maps, every token is the attention-weighted mean spectrum
mapped to ``d_map`` by a 1x1 convolution, and a learnable class token is
prepended at slot 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import ModelDims
from .diffcore import Tensor
from .errors import ConfigError, ContractError

SOURCE, TARGET = "source", "target"


@dataclass
class PatchBatch:
    """``data`` is B x p x p x d; ``domain`` holds one tag per sample."""

    data: np.ndarray
    domain: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[1] != self.data.shape[2]:
            raise ContractError(f"patch batch must be B x p x p x d, got {self.data.shape}")
        self.domain = np.broadcast_to(np.asarray(self.domain), (len(self.data),)).copy()
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.data),):
                raise ContractError("labels must hold one class id per patch")

    def __len__(self):
        return len(self.data)

    def subset(self, idx) -> "PatchBatch":
        labels = None if self.labels is None else self.labels[idx]
        return PatchBatch(self.data[idx], self.domain[idx], labels)


def extractor_bands(dims: ModelDims) -> int:
    return dims.bands - dims.spectral_kernel + 1


def patch_grid(tokens: int) -> tuple[int, int]:
    rows = int(np.floor(np.sqrt(tokens)))
    while tokens % rows:
        rows -= 1
    return rows, tokens // rows


def init_tokenizer(dims: ModelDims, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    p = {}
    if dims.patch_tokenizer:
        rows, cols = patch_grid(dims.tokens)
        fan_in = (dims.patch // rows) * (dims.patch // cols) * dims.bands
        p[f"{prefix}.tok.patch"] = Tensor(rng.normal(0, 1 / np.sqrt(fan_in), (fan_in, dims.d_map)), True)
    else:
        if dims.bands < dims.spectral_kernel + 1:
            raise ConfigError(
                f"{dims.bands} bands is too few for spectral kernel {dims.spectral_kernel}"
                f" (need at least {dims.spectral_kernel + 1})"
            )
        k, c = dims.spectral_kernel, dims.extractor_channels
        c2 = c * extractor_bands(dims)
        p[f"{prefix}.tok.conv3d"] = Tensor(rng.normal(0, np.sqrt(2 / (9 * k)), (3, 3, k, 1, c)), True)
        p[f"{prefix}.tok.conv2d"] = Tensor(rng.normal(0, np.sqrt(2 / (9 * c2)), (3, 3, c2, dims.tokens)), True)
        p[f"{prefix}.tok.map"] = Tensor(rng.normal(0, 1 / np.sqrt(dims.bands), (dims.bands, dims.d_map)), True)
    p[f"{prefix}.tok.cls"] = Tensor(rng.normal(0, 0.02, (dims.d_map,)), True)
    return p


def spatial_spectral_extract(x, params: dict, prefix: str, dims: ModelDims) -> Tensor:
    """Conv3d-ReLU-MaxPool then Conv2d-ReLU-MaxPool; returns B x p x p x L."""
    x = dc.as_tensor(x)
    if x.ndim != 4 or x.shape[3] != dims.bands:
        raise ContractError(f"expected B x p x p x {dims.bands} patches, got {x.shape}")
    if dims.bands < dims.spectral_kernel + 1:
        raise ConfigError(f"{dims.bands} bands is too few for spectral kernel {dims.spectral_kernel}")
    B, h, w, d = x.shape
    v = dc.conv3d(dc.reshape(x, (B, h, w, d, 1)), params[f"{prefix}.tok.conv3d"])
    v = dc.relu(v)
    v = dc.reshape(v, (B, h, w, -1))
    v = dc.maxpool2d(v)
    v = dc.relu(dc.conv2d(v, params[f"{prefix}.tok.conv2d"]))
    return dc.maxpool2d(v)


def pool_tokens(projection: Tensor, x, map_w: Tensor, return_attention: bool = False):
    """Softmax over pixel positions per token channel, then ``M(A^T X)``."""
    x = dc.as_tensor(x)
    B, h, w, L = projection.shape
    attn = dc.softmax(dc.reshape(projection, (B, h * w, L)), axis=1)
    pooled = dc.matmul(dc.transpose(attn, (0, 2, 1)), dc.reshape(x, (B, h * w, x.shape[3])))
    tokens = dc.matmul(pooled, map_w)
    if return_attention:
        return tokens, attn
    return tokens


def prepend_class_token(tokens: Tensor, cls: Tensor) -> Tensor:
    B, _, dm = tokens.shape
    slot = dc.add(np.zeros((B, 1, dm)), dc.reshape(cls, (1, 1, dm)))
    return dc.concat([slot, tokens], axis=1)


def patch_tokens(x, params: dict, prefix: str, dims: ModelDims) -> Tensor:
    """Ablation tokenizer: split the patch into an L-block grid, flatten each
    block and map it linearly to ``d_map``."""
    x = dc.as_tensor(x)
    B, p, _, d = x.shape
    rows, cols = patch_grid(dims.tokens)
    bh, bw = p // rows, p // cols
    r0, c0 = (p - rows * bh) // 2, (p - cols * bw) // 2
    v = dc.slice_(x, (slice(None), slice(r0, r0 + rows * bh), slice(c0, c0 + cols * bw)))
    v = dc.reshape(v, (B, rows, bh, cols, bw, d))
    v = dc.transpose(v, (0, 1, 3, 2, 4, 5))
    v = dc.reshape(v, (B, rows * cols, bh * bw * d))
    return dc.matmul(v, params[f"{prefix}.tok.patch"])


def tokenize(x, params: dict, prefix: str, dims: ModelDims) -> Tensor:
    """Patches B x p x p x d to a token sequence B x (L+1) x d_map."""
    if dims.patch_tokenizer:
        tokens = patch_tokens(x, params, prefix, dims)
    else:
        proj = spatial_spectral_extract(x, params, prefix, dims)
        tokens = pool_tokens(proj, x, params[f"{prefix}.tok.map"])
    return prepend_class_token(tokens, params[f"{prefix}.tok.cls"])
