"""Triple-branch transformer encoder.

The source and target branches are post-LN transformer stacks with one
learnable positional embedding per branch, added to Q, K and V at every
layer.  The coupled branch takes the branch outputs, projects them with the
source/target first-layer Q/K/V weights and runs coupled cross-attention:
queries ``[Q_s; Q_t]`` attend over keys ``[K_t; K_s]`` in one softmax, the
result is split back per domain and each half goes through the coupled
branch's (shared) residual FFN block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import ModelDims
from .diffcore import Tensor
from .errors import ConfigError, ContractError


@dataclass
class EncoderOutput:
    t_s: Tensor | None = None
    t_t: Tensor | None = None
    t_st: Tensor | None = None
    t_ts: Tensor | None = None
    logits_s: Tensor | None = None
    logits_t: Tensor | None = None
    logits_st: Tensor | None = None
    logits_ts: Tensor | None = None


def _ffn_params(p, prefix, dims, rng):
    dm, hid = dims.d_map, dims.ffn_mult * dims.d_map
    p[f"{prefix}.ln1.g"] = Tensor(np.ones(dm), True)
    p[f"{prefix}.ln1.b"] = Tensor(np.zeros(dm), True)
    p[f"{prefix}.ffn.w1"] = Tensor(rng.normal(0, np.sqrt(2 / dm), (dm, hid)), True)
    p[f"{prefix}.ffn.b1"] = Tensor(np.zeros(hid), True)
    p[f"{prefix}.ffn.w2"] = Tensor(rng.normal(0, 1 / np.sqrt(hid), (hid, dm)), True)
    p[f"{prefix}.ffn.b2"] = Tensor(np.zeros(dm), True)
    p[f"{prefix}.ln2.g"] = Tensor(np.ones(dm), True)
    p[f"{prefix}.ln2.b"] = Tensor(np.zeros(dm), True)


def init_branch(dims: ModelDims, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    dm = dims.d_map
    p = {f"{prefix}.pe": Tensor(rng.normal(0, 0.02, (dims.tokens + 1, dm)), True)}
    for i in range(dims.depth):
        lp = f"{prefix}.layer{i}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{lp}.{name}"] = Tensor(rng.normal(0, 1 / np.sqrt(dm), (dm, dm)), True)
        _ffn_params(p, lp, dims, rng)
    return p


def init_coupled(dims: ModelDims, rng: np.random.Generator, prefix: str = "cpl") -> dict[str, Tensor]:
    dm = dims.d_map
    p = {f"{prefix}.wo": Tensor(rng.normal(0, 1 / np.sqrt(dm), (dm, dm)), True)}
    _ffn_params(p, prefix, dims, rng)
    return p


def init_head(dims: ModelDims, rng: np.random.Generator, prefix: str = "head") -> dict[str, Tensor]:
    return {
        f"{prefix}.w": Tensor(rng.normal(0, 1 / np.sqrt(dims.d_map), (dims.d_map, dims.classes)), True),
        f"{prefix}.b": Tensor(np.zeros(dims.classes), True),
    }


def qkv_project(tokens, params: dict, prefix: str, layer: int):
    tokens = dc.as_tensor(tokens)
    pe = params[f"{prefix}.pe"]
    if tokens.ndim != 3 or tokens.shape[1:] != pe.shape:
        raise ContractError(f"tokens {tokens.shape} do not match positional embedding {pe.shape}")
    lp = f"{prefix}.layer{layer}"
    return tuple(dc.add(dc.matmul(tokens, params[f"{lp}.{n}"]), pe) for n in ("wq", "wk", "wv"))


def _heads(x: Tensor, h: int) -> Tensor:
    B, n, dm = x.shape
    return dc.transpose(dc.reshape(x, (B, n, h, dm // h)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    B, h, n, dk = x.shape
    return dc.reshape(dc.transpose(x, (0, 2, 1, 3)), (B, n, h * dk))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, return_attention: bool = False):
    """Per-head ``softmax(QK^T / sqrt(d_k)) V`` with heads concatenated
    (no output projection)."""
    dm = q.shape[-1]
    if dm % heads:
        raise ConfigError(f"head count {heads} does not divide width {dm}")
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    scores = dc.mul(dc.matmul(qh, dc.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dm // heads))
    attn = dc.softmax(scores, axis=-1)
    out = _merge(dc.matmul(attn, vh))
    return (out, attn) if return_attention else out


def msa(q, k, v, heads: int, wo: Tensor, return_attention: bool = False):
    out, attn = attention(q, k, v, heads, return_attention=True)
    out = dc.matmul(out, wo)
    return (out, attn) if return_attention else out


def _affine_ln(x, params, prefix):
    return dc.add(dc.mul(dc.layer_norm(x), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _ffn(x, params, prefix):
    hid = dc.gelu(dc.add(dc.matmul(x, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    return dc.add(dc.matmul(hid, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])


def residual_ffn(tokens, attended, params: dict, prefix: str) -> Tensor:
    """``LN(x + FFN(x))`` with ``x = LN(tokens + attended)``."""
    x = _affine_ln(dc.add(tokens, attended), params, f"{prefix}.ln1")
    return _affine_ln(dc.add(x, _ffn(x, params, prefix)), params, f"{prefix}.ln2")


def encoder_block(tokens, params: dict, prefix: str, layer: int, heads: int) -> Tensor:
    q, k, v = qkv_project(tokens, params, prefix, layer)
    lp = f"{prefix}.layer{layer}"
    return residual_ffn(tokens, msa(q, k, v, heads, params[f"{lp}.wo"]), params, lp)


def branch_forward(tokens, params: dict, prefix: str, depth: int, heads: int) -> Tensor:
    if depth < 1:
        raise ConfigError("branch depth must be at least 1")
    x = dc.as_tensor(tokens)
    for i in range(depth):
        x = encoder_block(x, params, prefix, i, heads)
    return x


def cmca(qs, ks, vs, qt, kt, vt, heads: int, wo: Tensor, return_attention: bool = False):
    """Coupled multi-head cross-attention.

    Returns the attended (pre-residual) outputs for the source and target
    query rows.  Attention matrices are 2(L+1) x 2(L+1) per head.
    """
    if not (qs.shape == ks.shape == vs.shape == qt.shape == kt.shape == vt.shape):
        raise ContractError(
            f"cmca: source/target Q/K/V shapes differ: {qs.shape}, {ks.shape}, {vs.shape}, "
            f"{qt.shape}, {kt.shape}, {vt.shape}"
        )
    n = qs.shape[1]
    q = dc.concat([qs, qt], axis=1)
    k = dc.concat([kt, ks], axis=1)
    v = dc.concat([vt, vs], axis=1)
    out, attn = msa(q, k, v, heads, wo, return_attention=True)
    o_s, o_t = dc.split(out, [n, n], axis=1)
    return (o_s, o_t, attn) if return_attention else (o_s, o_t)


def mca(qs, ks, vs, qt, kt, vt, heads: int, wo: Tensor, return_attention: bool = False):
    """Plain cross-attention ablation: each domain's queries see only the
    other domain's keys and values."""
    o_s, a_s = msa(qs, kt, vt, heads, wo, return_attention=True)
    o_t, a_t = msa(qt, ks, vs, heads, wo, return_attention=True)
    return (o_s, o_t, (a_s, a_t)) if return_attention else (o_s, o_t)


def coupled_branch(t_s, t_t, params: dict, heads: int, mode: str = "cmca",
                   src: str = "src", tgt: str = "tgt", prefix: str = "cpl"):
    """Coupled representations ``(T_{s->t}, T_{t->s})`` from branch outputs."""
    qs, ks, vs = qkv_project(t_s, params, src, 0)
    qt, kt, vt = qkv_project(t_t, params, tgt, 0)
    fn = {"cmca": cmca, "mca": mca}[mode]
    o_s, o_t = fn(qs, ks, vs, qt, kt, vt, heads, params[f"{prefix}.wo"])
    return residual_ffn(t_s, o_s, params, prefix), residual_ffn(t_t, o_t, params, prefix)


def class_token(seq: Tensor) -> Tensor:
    return dc.slice_(seq, (slice(None), 0))


def classify(token, params: dict, prefix: str = "head") -> Tensor:
    return dc.add(dc.matmul(dc.as_tensor(token), params[f"{prefix}.w"]), params[f"{prefix}.b"])
