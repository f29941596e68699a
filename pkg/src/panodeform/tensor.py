"""Dense f64 tensors with reverse-mode automatic differentiation.

Everything downstream (embedding layers, attention, losses) is built from the
operations in this module.  Arrays are float64, row-major, and immutable once
produced by an op; gradients are accumulated per backward() call.  Spatial maps
use the H x W x C layout throughout the repo.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


class NumericError(RuntimeError):
    """A tensor came out non-finite (NaN/Inf), or a numerical check failed."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    # single-pass screen: any inf/nan makes the sum non-finite; confirm with a
    # full scan so huge-but-finite sums are not misreported
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise NumericError("non-finite values in tensor")
    return arr


class Tensor:
    """Value/gradient pair plus links into the computation graph.

    `data` is a C-contiguous float64 array.  `grad` is populated (same shape)
    by backward() for every node with requires_grad.  Non-leaf tensors carry
    a backward closure and their parent nodes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._backward = None
        out._parents = ()
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions carry the real semantics.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor.

        Visits each reachable node exactly once in reverse topological order.
        Gradients of all nodes touched by this call are reset first, so
        repeated backward calls do not leak accumulation across graphs.
        """
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward() without seed needs a scalar")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.shape:
                raise ShapeError("seed gradient shape mismatch")

        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            node.grad = None
        self.grad = seed.copy()
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add g into t.grad.

    `fresh` marks arrays the caller just allocated and will not reuse; they
    can be adopted directly instead of copied.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if fresh else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    same = a.shape == b.shape == data.shape

    def bwd(g):
        if same:
            _accum(a, g)
            _accum(b, g)
        else:
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), fresh=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), fresh=True)

    return _make(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def bwd(g):
        _accum(a, g * c, fresh=True)

    return _make(data, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product; inner dimensions must agree."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T, fresh=True)
        _accum(b, a.data.T @ g, fresh=True)

    return _make(data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D token stacks; one graph node."""
    if x.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear shapes: {x.shape} @ {w.shape} + {b.shape}")
    data = x.data @ w.data + b.data

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ w.data.T, fresh=True)
        if w.requires_grad:
            _accum(w, x.data.T @ g, fresh=True)
        if b.requires_grad:
            _accum(b, g.sum(axis=0), fresh=True)

    return _make(data, (x, w, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over one shared leading axis: (B,M,K) @ (B,K,N)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ np.swapaxes(b.data, 1, 2), fresh=True)
        _accum(b, np.swapaxes(a.data, 1, 2) @ g, fresh=True)

    return _make(data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _make(data, (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU."""
    k = 0.7978845608028654  # sqrt(2/pi)
    x = a.data
    inner = k * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = k * (1.0 + 3 * 0.044715 * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        _accum(a, g * local, fresh=True)

    return _make(data, (a,), bwd)


def clamp(a: Tensor, lo, hi) -> Tensor:
    """Hard clamp; backward passes 1 inside [lo, hi] and 0 outside.

    Bounds may be scalars or arrays broadcastable against a.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo >= hi):
        raise ShapeError("clamp requires lo < hi")
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * inside, fresh=True)

    return _make(data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    data = np.array(a.data.sum())

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.shape).copy(), fresh=True)

    return _make(data, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    data = np.array(a.data.mean())

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.shape).copy(), fresh=True)

    return _make(data, (a,), bwd)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; scatter-add on the way back."""
    if a.ndim != 2:
        raise ShapeError("take_rows expects a 2-D tensor")
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        if not a.requires_grad:
            return
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        _accum(a, acc, fresh=True)

    return _make(data, (a,), bwd)


# ---------------------------------------------------------------------------
# normalization / activation over distributions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`."""
    axis = axis if axis >= 0 else a.ndim + axis
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot), fresh=True)

    return _make(data, (a,), bwd)


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    c = a.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layernorm affine parameters must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def bwd(g):
        _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0), fresh=True)
        _accum(beta, g.reshape(-1, c).sum(axis=0), fresh=True)
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * (gx - m1 - xhat * m2), fresh=True)

    return _make(data, (a, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# spatial sampling


def _bilinear_parts(f: np.ndarray, coords: np.ndarray, border: str):
    """Shared bilinear machinery.

    Returns corner values and fractional weights for coords (N,2) in (y, x)
    order over an H x W x C map.  `clamp` clips the continuous coordinate to
    the image rectangle (so the coordinate gradient dies outside); `wrap_horizontal`
    wraps x periodically and clamps y, matching seam-continuous panoramas.
    """
    h, w, _ = f.shape
    y = coords[:, 0]
    x = coords[:, 1]
    if border == "clamp":
        y = np.clip(y, 0.0, h - 1.0)
        x = np.clip(x, 0.0, w - 1.0)
        ymask = (coords[:, 0] >= 0.0) & (coords[:, 0] <= h - 1.0)
        xmask = (coords[:, 1] >= 0.0) & (coords[:, 1] <= w - 1.0)
    elif border == "wrap_horizontal":
        y = np.clip(y, 0.0, h - 1.0)
        ymask = (coords[:, 0] >= 0.0) & (coords[:, 0] <= h - 1.0)
        x = np.mod(x, w)
        xmask = np.ones_like(ymask)
    else:
        raise ValueError(f"unknown border mode {border!r}")

    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    fy = y - y0
    fx = x - x0
    y0 = np.clip(y0, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if border == "wrap_horizontal":
        x1 = np.mod(x0 + 1, w)
    else:
        x1 = np.minimum(x0 + 1, w - 1)
    return y0, y1, x0, x1, fy, fx, ymask, xmask


def _scatter_rows(idx: np.ndarray, contrib: np.ndarray, rows: int, c: int) -> np.ndarray:
    """Sum (N, C) contributions into rows of an (rows, C) accumulator."""
    full = idx[:, None] * c + np.arange(c, dtype=np.intp)[None, :]
    return np.bincount(full.ravel(), weights=contrib.ravel(), minlength=rows * c).reshape(rows, c)


def bilinear_sample(f: Tensor, coords: Tensor, border: str = "clamp") -> Tensor:
    """Sample an H x W x C map at N fractional (y, x) positions.

    Gradients flow into both the map and the coordinates, enabling learned
    sampling offsets to be trained end to end.
    """
    if f.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError("bilinear_sample expects f[H,W,C] and coords[N,2]")
    h, w, c = f.shape
    y0, y1, x0, x1, fy, fx, ymask, xmask = _bilinear_parts(f.data, coords.data, border)
    flat = f.data.reshape(-1, c)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    v00 = flat[i00]
    v01 = flat[i01]
    v10 = flat[i10]
    v11 = flat[i11]
    wy = fy[:, None]
    wx = fx[:, None]
    top = v00 * (1.0 - wx) + v01 * wx
    bot = v10 * (1.0 - wx) + v11 * wx
    data = top * (1.0 - wy) + bot * wy

    def bwd(g):
        if f.requires_grad:
            acc = _scatter_rows(i00, g * ((1 - wy) * (1 - wx)), h * w, c)
            acc += _scatter_rows(i01, g * ((1 - wy) * wx), h * w, c)
            acc += _scatter_rows(i10, g * (wy * (1 - wx)), h * w, c)
            acc += _scatter_rows(i11, g * (wy * wx), h * w, c)
            _accum(f, acc.reshape(f.shape), fresh=True)
        if coords.requires_grad:
            dy = (bot - top) * ymask[:, None]
            dx = ((v01 - v00) * (1 - wy) + (v11 - v10) * wy) * xmask[:, None]
            gc = np.empty_like(coords.data)
            gc[:, 0] = (g * dy).sum(axis=1)
            gc[:, 1] = (g * dx).sum(axis=1)
            _accum(coords, gc, fresh=True)

    return _make(data, (f, coords), bwd)


def deform_channels(f: Tensor, offsets: Tensor, border: str = "clamp") -> Tensor:
    """Gather each channel at its own displaced position.

    out[i,j,c] bilinearly reads channel c of f at (i, j) + offsets[i,j,c,:].
    This is per-channel bilinear sampling fused into one graph node; gradients
    reach both the feature map and the offsets.  Integer offsets reproduce
    exact grid values, so a zero offset field is a bitwise identity.
    """
    h, w, c = f.shape
    if offsets.shape != (h, w, c, 2):
        raise ShapeError(f"offsets must be {(h, w, c, 2)}, got {offsets.shape}")
    base_y = np.arange(h, dtype=np.float64)[:, None, None]
    base_x = np.arange(w, dtype=np.float64)[None, :, None]
    y = base_y + offsets.data[..., 0]
    x = base_x + offsets.data[..., 1]
    if border == "clamp":
        yc = np.clip(y, 0.0, h - 1.0)
        xc = np.clip(x, 0.0, w - 1.0)
        ymask = (y >= 0.0) & (y <= h - 1.0)
        xmask = (x >= 0.0) & (x <= w - 1.0)
    elif border == "wrap_horizontal":
        yc = np.clip(y, 0.0, h - 1.0)
        ymask = (y >= 0.0) & (y <= h - 1.0)
        xc = np.mod(x, w)
        xmask = np.ones_like(ymask)
    else:
        raise ValueError(f"unknown border mode {border!r}")

    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    fy = yc - y0
    fx = xc - x0
    y0 = np.clip(y0, 0, h - 1)
    x0 = np.clip(x0, 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.mod(x0 + 1, w) if border == "wrap_horizontal" else np.minimum(x0 + 1, w - 1)

    ch = np.broadcast_to(np.arange(c, dtype=np.intp), (h, w, c))
    flat = f.data.reshape(-1)
    i00 = (y0 * w + x0) * c + ch
    i01 = (y0 * w + x1) * c + ch
    i10 = (y1 * w + x0) * c + ch
    i11 = (y1 * w + x1) * c + ch
    v00 = flat[i00]
    v01 = flat[i01]
    v10 = flat[i10]
    v11 = flat[i11]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    data = top * (1 - fy) + bot * fy

    def bwd(g):
        if f.requires_grad:
            n = h * w * c
            acc = np.bincount(i00.ravel(), weights=(g * ((1 - fy) * (1 - fx))).ravel(), minlength=n)
            acc += np.bincount(i01.ravel(), weights=(g * ((1 - fy) * fx)).ravel(), minlength=n)
            acc += np.bincount(i10.ravel(), weights=(g * (fy * (1 - fx))).ravel(), minlength=n)
            acc += np.bincount(i11.ravel(), weights=(g * (fy * fx)).ravel(), minlength=n)
            _accum(f, acc.reshape(f.shape), fresh=True)
        if offsets.requires_grad:
            go = np.empty_like(offsets.data)
            go[..., 0] = g * (bot - top) * ymask
            go[..., 1] = g * ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * xmask
            _accum(offsets, go, fresh=True)

    return _make(data, (f, offsets), bwd)


@lru_cache(maxsize=64)
def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense 1-D bilinear resampling matrix, align-corners=false convention."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.clip(i0, 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m[np.arange(n_out), i0] += 1.0 - frac
    m[np.arange(n_out), i1] += frac
    return m


def upsample_bilinear(f: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an H x W x C map (align-corners=false)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("target size must be positive")
    h, w, _ = f.shape
    if out_h == h and out_w == w:
        return reshape(f, f.shape)  # identity, but keeps a graph node
    c = f.shape[2]
    mh = _resample_matrix(h, out_h)
    mw = _resample_matrix(w, out_w)

    def resample(arr, a, b):
        # rows: (h,w,c) -> (H,w,c); then columns via a transpose round-trip
        t = (a @ arr.reshape(arr.shape[0], -1)).reshape(a.shape[0], arr.shape[1], c)
        t = np.swapaxes(t, 0, 1)
        t = (b @ t.reshape(t.shape[0], -1)).reshape(b.shape[0], a.shape[0], c)
        return np.ascontiguousarray(np.swapaxes(t, 0, 1))

    data = resample(f.data, mh, mw)

    def bwd(g):
        _accum(f, resample(g, mh.T, mw.T), fresh=True)

    return _make(data, (f,), bwd)


def avg_pool(f: Tensor, ratio: int) -> Tensor:
    """Mean over non-overlapping ratio x ratio blocks of an H x W x C map."""
    h, w, c = f.shape
    if ratio == 1:
        return reshape(f, f.shape)
    if h % ratio or w % ratio:
        raise ShapeError(f"pool ratio {ratio} does not divide {h}x{w}")
    hh, ww = h // ratio, w // ratio
    data = f.data.reshape(hh, ratio, ww, ratio, c).mean(axis=(1, 3))

    def bwd(g):
        gg = np.broadcast_to(
            g[:, None, :, None, :] / (ratio * ratio), (hh, ratio, ww, ratio, c)
        )
        _accum(f, np.ascontiguousarray(gg.reshape(h, w, c)), fresh=True)

    return _make(data, (f,), bwd)


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution over an H x W x Cin map, zero padding 1, given stride.

    Weights are (3, 3, Cin, Cout).  Output is (H/stride, W/stride, Cout);
    H and W must be divisible by the stride.
    """
    h, wd, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise ShapeError(f"conv weights {w.shape} do not fit input {x.shape}")
    cout = w.shape[3]
    if h % stride or wd % stride:
        raise ShapeError("conv stride must divide spatial dims")
    oh, ow = h // stride, wd // stride
    xp = np.zeros((h + 2, wd + 2, cin))
    xp[1:-1, 1:-1] = x.data
    taps = []
    out = np.broadcast_to(b.data, (oh, ow, cout)).copy()
    for u in range(3):
        for v in range(3):
            tap = xp[u : u + h : stride, v : v + wd : stride]
            taps.append(tap)
            out += (tap.reshape(-1, cin) @ w.data[u, v]).reshape(oh, ow, cout)
    data = out

    def bwd(g):
        g2 = g.reshape(-1, cout)
        if b.requires_grad:
            _accum(b, g2.sum(axis=0), fresh=True)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i, (u, v) in enumerate((u, v) for u in range(3) for v in range(3)):
                gw[u, v] = taps[i].reshape(-1, cin).T @ g2
            _accum(w, gw, fresh=True)
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for i, (u, v) in enumerate((u, v) for u in range(3) for v in range(3)):
                gp[u : u + h : stride, v : v + wd : stride] += (g2 @ w.data[u, v].T).reshape(
                    oh, ow, cin
                )
            _accum(x, np.ascontiguousarray(gp[1:-1, 1:-1]), fresh=True)

    return _make(data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# losses

IGNORE_LABEL = 255


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-softmax over non-ignored positions.

    `logits` has class scores on the last axis; `labels` matches the leading
    shape with integer entries in [0, K) or ignore_index.  An empty valid set
    yields 0 with zero gradient.
    """
    k = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = logits.data.reshape(-1, k)
    lab = labels.reshape(-1)
    valid = lab != ignore_index
    n = int(valid.sum())
    if n and (lab[valid].min() < 0 or lab[valid].max() >= k):
        raise ShapeError("labels out of class range")
    if n == 0:
        return _make(np.array(0.0), (logits,), lambda g: _accum(logits, np.zeros_like(logits.data)))

    rows = np.nonzero(valid)[0]
    z = flat[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), lab[rows]]
    data = np.array((logsum - picked).sum() / n)

    def bwd(g):
        if not logits.requires_grad:
            return
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), lab[rows]] -= 1.0
        acc = np.zeros_like(flat)
        acc[rows] = p * (float(g) / n)
        _accum(logits, acc.reshape(logits.shape), fresh=True)

    return _make(data, (logits,), bwd)


_KL_EPS = 1e-12


def kl_div(p_ref: Tensor, p: Tensor) -> Tensor:
    """KL(p_ref || p) along the last axis, averaged over leading positions.

    Both arguments are probability distributions; entries are floored at 1e-12
    inside the logs so exact zeros are safe.
    """
    if p_ref.shape != p.shape:
        raise ShapeError("kl_div operands must share a shape")
    n_pos = max(1, int(np.prod(p.shape[:-1])))
    a = np.maximum(p_ref.data, _KL_EPS)
    bb = np.maximum(p.data, _KL_EPS)
    data = np.array((p_ref.data * (np.log(a) - np.log(bb))).sum() / n_pos)

    def bwd(g):
        s = float(g) / n_pos
        if p_ref.requires_grad:
            inside = (np.log(a) - np.log(bb)) + p_ref.data * (p_ref.data > _KL_EPS) / a
            _accum(p_ref, inside * s, fresh=True)
        if p.requires_grad:
            _accum(p, -(p_ref.data / bb) * (p.data > _KL_EPS) * s, fresh=True)

    return _make(data, (p_ref, p), bwd)
