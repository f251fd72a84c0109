"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the fusion network needs are provided. Every op checks
shapes up front; there is no implicit broadcasting apart from bias addition
inside ``linear`` and ``conv2d_same`` (use :func:`expand` otherwise).

Each differentiable op returns a new :class:`Tensor` holding references to
its parents and a closure that pushes the output gradient back to them.
:meth:`Tensor.backward` replays those closures in reverse topological order,
summing gradients over fan-out.

Storage defaults to float32; reductions accumulate in float64. Use
``default_dtype(np.float64)`` for gradient checking.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_dtype = np.float32
_grad_enabled = True


def get_default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    _dtype = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype):
    prev = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextmanager
def no_grad():
    """Disable graph recording (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar ------------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        g = np.asarray(g, dtype=t.data.dtype)
        t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None],
          op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, *ts: Tensor) -> None:
    s = ts[0].shape
    for t in ts[1:]:
        if t.shape != s:
            raise ShapeError(f"{op}: shape mismatch {s} vs {t.shape}")


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)
    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    return _node(a.data * a.data.dtype.type(s), (a,), lambda g: _accum(a, g * s), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.maximum(a.data, a.data.dtype.type(0)), (a,),
                 lambda g: _accum(a, g * mask), "relu")


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) at the storage precision."""
    dt = a.data.dtype
    y = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(dt)
    y = np.clip(y, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))
    return _node(y, (a,), lambda g: _accum(a, g * y * (1.0 - y)), "sigmoid")


_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    th = np.tanh(_GELU_K * (x + _GELU_C * (x * x * x)))
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
        _accum(a, g * d)
    return _node(y.astype(x.dtype), (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _node(y, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and structure

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    s = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    return _node(s, (a,), lambda g: _accum(a, np.full(a.shape, g, dtype=a.data.dtype)), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        m = np.asarray(a.data.mean(dtype=np.float64), dtype=a.data.dtype)
        return _node(m, (a,), lambda g: _accum(a, np.full(a.shape, g / n, dtype=a.data.dtype)), "mean")
    ax = axis % a.ndim
    n = a.shape[ax]
    m = a.data.mean(axis=ax, dtype=np.float64).astype(a.data.dtype)
    return _node(m, (a,), lambda g: _accum(a, np.repeat(np.expand_dims(g / n, ax), n, axis=ax)),
                 "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {src} -> {tuple(shape)}: {exc}") from exc
    return _node(y, (a,), lambda g: _accum(a, g.reshape(src)), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)), "transpose")


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of size ``n`` (explicit broadcast)."""
    y = np.broadcast_to(a.data, (n,) + a.shape)
    return _node(y, (a,), lambda g: _accum(a, g.sum(axis=0, dtype=np.float64)), "expand")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    if not ts:
        raise ShapeError("concat of nothing")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * nd
            idx[ax] = slice(lo, hi)
            _accum(t, g[tuple(idx)])
    return _node(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack feature maps along the channel axis ((C, H, W) or (B, C, H, W))."""
    return concat([a, b], axis=-3)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with identical leading dims."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)
    return _node(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis of ``x``; W is (out, in)."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs weight {W.shape}")
    y = x.data @ W.data.T
    if b is not None:
        y += b.data

    def bw(g):
        _accum(x, g @ W.data)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        # a single row makes matmul slower than a plain outer product
        _accum(W, np.outer(g2[0], x2[0]) if g2.shape[0] == 1 else g2.T @ x2)
        if b is not None:
            _accum(b, g2.sum(axis=0, dtype=np.float64))
    parents = (x, W) if b is None else (x, W, b)
    return _node(y, parents, bw, "linear")


# ---------------------------------------------------------------------------
# convolution / pooling / patches

def _with_batch(x: Tensor, fn: Callable[[Tensor], Tensor], rank: int) -> Tensor:
    if x.ndim == rank:
        return _unbatch(fn(_batch(x)))
    if x.ndim == rank + 1:
        return fn(x)
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _batch(x: Tensor) -> Tensor:
    return reshape(x, (1,) + x.shape)


def _unbatch(x: Tensor) -> Tensor:
    return reshape(x, x.shape[1:])


def conv2d_same(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero padding (k-1)/2; spatial size preserved.

    ``x`` is (C_in, H, W) or (B, C_in, H, W); ``W`` is (C_out, C_in, k, k).
    """
    if W.ndim != 4 or W.shape[2] != W.shape[3] or W.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d_same: kernel must be (C_out, C_in, k, k) with odd k, got {W.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"conv2d_same: bias {b.shape} vs {W.shape[0]} output channels")
    return _with_batch(x, lambda xb: _conv2d(xb, W, b), 3)


def _conv2d(x: Tensor, W: Tensor, b: Tensor | None) -> Tensor:
    B, C, H, Wd = x.shape
    Co, Ci, k, _ = W.shape
    if C != Ci:
        raise ShapeError(f"conv2d_same: input has {C} channels, kernel expects {Ci}")
    p = (k - 1) // 2
    Wm = W.data.reshape(Co, Ci * k * k)
    if k == 1:
        y = np.matmul(Wm, x.data.reshape(B, C, H * Wd))
        if b is not None:
            y += b.data[:, None]

        def bw1(g):
            g3 = g.reshape(B, Co, H * Wd)
            if W.requires_grad:
                cols = x.data.reshape(B, C, H * Wd)
                _accum(W, np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(W.shape))
            if b is not None:
                _accum(b, g3.sum(axis=(0, 2), dtype=np.float64))
            if x.requires_grad:
                _accum(x, np.matmul(Wm.T, g3).reshape(x.shape))
        parents = (x, W) if b is None else (x, W, b)
        return _node(y.reshape(B, Co, H, Wd), parents, bw1, "conv2d")

    # im2col over the row-flattened padded image: output pixel (r, c) of tap (i, j)
    # reads flat index (r + i) * Wp + c + j, so every tap is one contiguous slice.
    # The p extra columns per row are junk and are dropped (forward) or fed zero
    # gradient (backward).
    Hp, Wp = H + 2 * p, Wd + 2 * p
    L = H * Wp
    xf = np.zeros((B, C, Hp * Wp + 2 * p), dtype=x.data.dtype)
    xf[:, :, :Hp * Wp].reshape(B, C, Hp, Wp)[:, :, p:p + H, p:p + Wd] = x.data
    cols = np.empty((B, C, k * k, L), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            o = i * Wp + j
            cols[:, :, i * k + j] = xf[:, :, o:o + L]
    cols = cols.reshape(B, C * k * k, L)
    y = np.matmul(Wm, cols).reshape(B, Co, H, Wp)[..., :Wd].copy()
    if b is not None:
        y += b.data[:, None, None]

    def bw(g):
        gf = np.zeros((B, Co, H, Wp), dtype=g.dtype)
        gf[..., :Wd] = g
        gf = gf.reshape(B, Co, L)
        if W.requires_grad:
            _accum(W, np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(W.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3), dtype=np.float64))
        if x.requires_grad:
            dcols = np.matmul(Wm.T, gf).reshape(B, C, k * k, L)
            dxf = np.zeros((B, C, Hp * Wp + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    o = i * Wp + j
                    dxf[:, :, o:o + L] += dcols[:, :, i * k + j]
            _accum(x, dxf[:, :, :Hp * Wp].reshape(B, C, Hp, Wp)[:, :, p:p + H, p:p + Wd])
    parents = (x, W) if b is None else (x, W, b)
    return _node(y, parents, bw, "conv2d")


def _region_starts(n: int, m: int) -> np.ndarray:
    return np.array([(i * n) // m for i in range(m)], dtype=np.intp)


def adaptive_max_pool(x: Tensor, out: tuple[int, int]) -> Tensor:
    """Max over the regions [floor(i H/h), floor((i+1) H/h)); ties go to the first
    element in row-major order."""
    h, w = out
    H, W = x.shape[-2:]
    if x.ndim not in (3, 4):
        raise ShapeError(f"adaptive_max_pool: expected (C,H,W) or (B,C,H,W), got {x.shape}")
    if h > H or w > W or h < 1 or w < 1:
        raise ShapeError(f"adaptive_max_pool: cannot pool {H}x{W} to {h}x{w}")
    if (h, w) == (H, W):
        return _node(x.data, (x,), lambda g: _accum(x, g), "adaptive_max_pool")
    rs, cs = _region_starts(H, h), _region_starts(W, w)
    rsz = np.diff(np.append(rs, H))
    csz = np.diff(np.append(cs, W))
    y = np.maximum.reduceat(np.maximum.reduceat(x.data, rs, axis=-2), cs, axis=-1)

    def bw(g):
        full = np.repeat(np.repeat(y, rsz, axis=-2), csz, axis=-1)
        idx = np.arange(H * W).reshape(H, W)
        cand = np.where(x.data == full, idx, H * W)
        first = np.minimum.reduceat(np.minimum.reduceat(cand, rs, axis=-2), cs, axis=-1)
        first_full = np.repeat(np.repeat(first, rsz, axis=-2), csz, axis=-1)
        gfull = np.repeat(np.repeat(g, rsz, axis=-2), csz, axis=-1)
        _accum(x, np.where(idx == first_full, gfull, 0))
    return _node(y, (x,), bw, "adaptive_max_pool")


def patchify(x: Tensor, P: int) -> Tensor:
    """(C, S, S) -> (N, C*P*P) non-overlapping patches in row-major patch order.

    Each patch is flattened channel-major: channel, then row, then column.
    A leading batch axis is carried through.
    """
    if x.ndim not in (3, 4) or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"patchify: expected square (C,S,S) or (B,C,S,S), got {x.shape}")
    S = x.shape[-1]
    if P < 1 or S % P:
        raise ShapeError(f"patchify: image side {S} not divisible by patch {P}")
    return _with_batch(x, lambda xb: _patchify(xb, P), 3)


def _patchify(x: Tensor, P: int) -> Tensor:
    B, C, S, _ = x.shape
    n = S // P
    y = x.data.reshape(B, C, n, P, n, P).transpose(0, 2, 4, 1, 3, 5).reshape(B, n * n, C * P * P)

    def bw(g):
        _accum(x, g.reshape(B, n, n, C, P, P).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, S, S))
    return _node(y, (x,), bw, "patchify")


def unpatchify(patches: np.ndarray, C: int, P: int) -> np.ndarray:
    """Inverse of :func:`patchify` on raw arrays, (N, C*P*P) -> (C, S, S)."""
    N = patches.shape[0]
    n = int(round(math.sqrt(N)))
    return patches.reshape(n, n, C, P, P).transpose(2, 0, 3, 1, 4).reshape(C, n * P, n * P)


# ---------------------------------------------------------------------------
# normalisation / transformer blocks

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalisation over the last axis, then affine."""
    D = x.shape[-1]
    if gain.shape != (D,) or shift.shape != (D,):
        raise ShapeError(f"layer_norm: affine params must be ({D},)")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    dt = x.data.dtype
    y = (xhat * gain.data + shift.data).astype(dt)

    def bw(g):
        gd = g.astype(np.float64)
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (gd * xhat).sum(axis=lead))
        _accum(shift, gd.sum(axis=lead))
        if x.requires_grad:
            dxh = gd * gain.data
            dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, dx)
    return _node(y, (x, gain, shift), bw, "layer_norm")


def multi_head_self_attention(Z: Tensor, params: dict[str, Tensor], heads: int) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads, concatenated and projected.

    ``params`` holds ``wq, bq, wk, bk, wv, bv, wo, bo`` with (D, D) weights.
    ``Z`` is (N, D) or (B, N, D).
    """
    if Z.ndim not in (2, 3):
        raise ShapeError(f"attention: expected (N,D) or (B,N,D), got {Z.shape}")
    D = Z.shape[-1]
    if heads < 1 or D % heads:
        raise ShapeError(f"attention: embed dim {D} not divisible by {heads} heads")
    return _with_batch(Z, lambda zb: _mhsa(zb, params, heads), 2)


def _mhsa(Z: Tensor, p: dict[str, Tensor], h: int) -> Tensor:
    B, N, D = Z.shape
    d = D // h

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, N, h, d)), (0, 2, 1, 3))       # (B, h, N, d)

    q = split(linear(Z, p["wq"], p["bq"]))
    k = split(linear(Z, p["wk"], p["bk"]))
    v = split(linear(Z, p["wv"], p["bv"]))
    att = softmax(scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d)), axis=-1)
    ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (B, N, D))
    return linear(ctx, p["wo"], p["bo"])


def feed_forward(Z: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Tokenwise two-layer MLP with GELU: W2 gelu(W1 z + b1) + b2."""
    return linear(gelu(linear(Z, params["w1"], params["b1"])), params["w2"], params["b2"])


# ---------------------------------------------------------------------------
# losses

def binary_cross_entropy_with_logits(z: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Batch mean of per-sample summed BCE of sigmoid(z).

    Logits are clipped to the range whose probabilities lie in [eps, 1-eps],
    which matches clamping the probabilities. The gradient sigmoid(z) - y is
    passed through the clip so saturated wrong predictions still learn.
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"bce: target {y.shape} vs prediction {z.shape}")
    lim = math.log((1.0 - eps) / eps)
    zc = np.clip(z.data.astype(np.float64), -lim, lim)
    B = z.shape[0] if z.ndim > 2 else 1
    # -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
    per = np.logaddexp(0.0, zc) - y * zc
    loss = np.asarray(per.sum() / B, dtype=z.data.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * zc))

    def bw(g):
        _accum(z, g * (sig - y) / B)
    return _node(loss, (z,), bw, "bce_logits")


def binary_cross_entropy(p: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Batch mean of per-sample summed BCE on probabilities clamped to [eps, 1-eps]."""
    y = np.asarray(target, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"bce: target {y.shape} vs prediction {p.shape}")
    pc = np.clip(p.data.astype(np.float64), eps, 1.0 - eps)
    B = p.shape[0] if p.ndim > 2 else 1
    loss = np.asarray(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / B, dtype=p.data.dtype)

    def bw(g):
        _accum(p, g * (-y / pc + (1.0 - y) / (1.0 - pc)) / B)
    return _node(loss, (p,), bw, "bce")
