"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward closure on the output tensor when
gradient recording is on and at least one input requires a gradient.  The
graph is implicit in those parent links; :func:`backward` sorts it
topologically, pushes gradients through once in reverse order, accumulates
into the leaves and then drops the links.

Layouts are channels-last throughout: images are ``B x H x W x C`` and 3-D
volumes ``B x H x W x D x C`` with ``D`` the spectral axis.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, OracleError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    # a sum is finite iff no entry is inf/nan, barring overflow of the sum itself
    if not np.isfinite(data.sum()) and not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result("div", out, (a, b), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result("log", out, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), lambda g: (g / (2.0 * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result("gelu", x.data * cdf, (x,), bw)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ContractError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(out)


def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result("sum", np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in axis]))
    if n == 0:
        raise ContractError(f"mean over empty extent, shape {x.shape}")
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _result("mean", np.asarray(out), (x,), lambda g: (_expand(g, x.shape, axis, keepdims) / n,))


def max_(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    idx = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(gx, np.expand_dims(idx, ax), gk, axis=ax)
        return (gx,)

    return _result("max", out, (x,), bw)


# ---------------------------------------------------------------- normalizers


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


def layer_norm(x, axis: int = -1, eps: float = 1e-9) -> Tensor:
    """Zero-mean, unit-variance normalisation along ``axis`` (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result("layer_norm", xhat, (x,), bw)


# ---------------------------------------------------------------- shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), bw)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"transpose: {axes} is not a permutation for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat: empty input list")
    ax = axis % xs[0].ndim
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ContractError(f"concat: shapes {[t.shape for t in xs]} disagree off axis {axis}")
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result("concat", np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def slice_(x, index) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    x = as_tensor(x)
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (slice, int, np.integer, type(Ellipsis))) and i is not None:
            raise ContractError(f"slice: unsupported index {i!r}")
    out = x.data[index]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _result("slice", np.array(out), (x,), bw)


def split(x, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    x = as_tensor(x)
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ContractError(f"split: sizes {list(sizes)} do not cover extent {x.shape[ax]}")
    pieces, start = [], 0
    for n in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + n)
        pieces.append(slice_(x, tuple(idx)))
        start += n
    return pieces


# ---------------------------------------------------------------- convolutions


def conv2d(x, w) -> Tensor:
    """Stride-1, same-padded, bias-free 2-D convolution.

    ``x``: B x H x W x Cin, ``w``: kh x kw x Cin x Cout (odd kernel sides).
    Computed as one matmul against all kernel taps followed by a shifted sum,
    which keeps memory at O(B*H*W*kh*kw*Cout).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise ContractError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    wmat = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    z = (xp.reshape(-1, cin) @ wmat).reshape(B, H + 2 * ph, W + 2 * pw, kh, kw, cout)
    out = np.zeros((B, H, W, cout))
    for i in range(kh):
        for j in range(kw):
            out += z[:, i : i + H, j : j + W, i, j, :]

    def bw(g):
        gz = np.zeros_like(z)
        for i in range(kh):
            for j in range(kw):
                gz[:, i : i + H, j : j + W, i, j, :] = g
        gz = gz.reshape(-1, kh * kw * cout)
        gx = gw = None
        if w.requires_grad:
            gw = (xp.reshape(-1, cin).T @ gz).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        if x.requires_grad:
            gxp = (gz @ wmat.T).reshape(xp.shape)
            gx = gxp[:, ph : ph + H, pw : pw + W, :].copy()
        return gx, gw

    return _result("conv2d", out, (x, w), bw)


def conv3d(x, w) -> Tensor:
    """Stride-1, bias-free 3-D convolution, same-padded spatially and valid
    along the spectral axis.

    ``x``: B x H x W x D x Cin, ``w``: kh x kw x kd x Cin x Cout; the output
    is B x H x W x (D - kd + 1) x Cout.  The spectral taps are folded into a
    banded (Toeplitz) matrix so the whole op is a single matmul over spatial
    neighbourhoods.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 5 or w.ndim != 5 or x.shape[4] != w.shape[3] or w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
        raise ContractError(f"conv3d: input {x.shape} incompatible with kernel {w.shape}")
    B, H, W, D, cin = x.shape
    kh, kw, kd, _, cout = w.shape
    dout = D - kd + 1
    if dout < 1:
        raise ContractError(f"conv3d: spectral kernel {kd} longer than {D} bands")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: B x H x W x D x Cin x kh x kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 5, 6, 3, 4)).reshape(B * H * W, kh * kw * D * cin)
    s = np.arange(dout)
    toep = np.zeros((kh, kw, D, cin, dout, cout))
    for k in range(kd):
        toep[:, :, s + k, :, s, :] = w.data[:, :, k]
    tmat = toep.reshape(kh * kw * D * cin, dout * cout)
    out = (cols @ tmat).reshape(B, H, W, dout, cout)

    def bw(g):
        g2 = g.reshape(B * H * W, dout * cout)
        gx = gw = None
        if w.requires_grad:
            gt = (cols.T @ g2).reshape(kh, kw, D, cin, dout, cout)
            gw = np.zeros_like(w.data)
            for k in range(kd):
                gw[:, :, k] = gt[:, :, s + k, :, s, :].sum(axis=0)
        if x.requires_grad:
            gc = (g2 @ tmat.T).reshape(B, H, W, kh, kw, D, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + H, j : j + W] += gc[:, :, :, i, j]
            gx = gxp[:, ph : ph + H, pw : pw + W].copy()
        return gx, gw

    return _result("conv3d", out, (x, w), bw)


def maxpool2d(x, kernel: int = 3) -> Tensor:
    """Stride-1, same-padded spatial max-pool over B x H x W x C.

    Ties resolve to the first maximal tap in row-major kernel order.  The
    pool is computed separably (row maxima, then column maxima), which keeps
    that tie rule: the earliest kernel row holding the maximum wins, and
    within it the earliest column.
    """
    x = as_tensor(x)
    if x.ndim != 4 or kernel % 2 == 0:
        raise ContractError(f"maxpool2d: needs rank-4 input and odd kernel, got {x.shape}, {kernel}")
    B, H, W, C = x.shape
    p = kernel // 2
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=-np.inf)
    rowmax = xp[:, :, 0:W].copy()
    for j in range(1, kernel):
        np.maximum(rowmax, xp[:, :, j : j + W], out=rowmax)
    out = rowmax[:, 0:H].copy()
    for i in range(1, kernel):
        np.maximum(out, rowmax[:, i : i + H], out=out)

    def route(windows, target, g, grad_of_input):
        # send g to the first window equal to the running maximum
        taken = np.zeros(target.shape, dtype=bool)
        for view, win in windows:
            hit = win == target
            hit &= ~taken
            taken |= hit
            grad_of_input[view] += g * hit

    def bw(g):
        grow = np.zeros(rowmax.shape)
        route([((slice(None), slice(i, i + H)), rowmax[:, i : i + H]) for i in range(kernel)], out, g, grow)
        gxp = np.zeros(xp.shape)
        route([((slice(None), slice(None), slice(j, j + W)), xp[:, :, j : j + W]) for j in range(kernel)],
              rowmax, grow, gxp)
        return (gxp[:, p : p + H, p : p + W, :].copy(),)

    return _result("maxpool2d", out, (x,), bw)


# ---------------------------------------------------------------- dispatch

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *xs, axis=0: concat(xs, axis=axis),
    "split": split,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "conv2d": conv2d,
    "conv3d": conv3d,
    "maxpool2d": maxpool2d,
}


def apply_primitive(op: str, inputs: Sequence, **attrs):
    """Apply a named primitive; ``attrs`` carries axis/shape/size arguments."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ---------------------------------------------------------------- oracle


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    den = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / den, initial=0.0))


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. every entry of ``x`` (in place)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def _check_deterministic(f):
    with no_grad():
        a, b = f().data, f().data
    if not np.array_equal(a, b):
        raise OracleError("function under finite-difference check is not deterministic")


def finite_difference_check(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` takes no arguments and closes over ``x``, which must be a leaf with
    ``requires_grad``.  Error per coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    errs = gradient_errors(f, {"x": x}, step)
    return errs["x"]


def gradient_errors(f: Callable[[], Tensor], params: dict, step: float = 1e-5) -> dict:
    """Per-parameter max relative error of the analytic gradient of ``f()``."""
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    _check_deterministic(f)
    for p in params.values():
        if not p.requires_grad:
            raise ContractError("finite-difference check needs requires_grad leaves")
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    return {k: _relative_error(analytic[k], numeric_gradient(f, p, step)) for k, p in params.items()}
