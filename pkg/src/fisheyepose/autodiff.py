"""Minimal reverse-mode autodiff on float64 numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure and parent
links.  Ops build the graph eagerly; backward() runs a topological sweep
from a scalar root and accumulates into .grad.  Everything is float64 and
the op set is exactly what the pose network and its losses need: dense
affine maps, strided convolution, the four global/channel reductions used
by the attention blocks, softmax, and the two losses.

Image-shaped ops accept either (C, H, W) or (N, C, H, W); the unbatched
form is promoted internally and squeezed back on output.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block.  Values are unaffected."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.values.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse sweep from a scalar root.  One sweep per forward graph."""
        if self.values.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.values.shape}")
        if self._backward_done:
            raise RuntimeError(
                "backward() already ran for this graph; rerun the forward pass "
                "before differentiating again"
            )
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no recorded graph")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
        self._backward_done = True

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _wire(values, parents, backward_fn) -> Tensor:
    parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.values.shape} and {b.values.shape}") from None

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.values.shape))
        _accum(b, _unbroadcast(g, b.values.shape))

    return _wire(values, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.values.shape} and {b.values.shape}") from None

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.values, a.values.shape))
        _accum(b, _unbroadcast(g * a.values, b.values.shape))

    return _wire(values, (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(
            f"matmul needs two 2-D operands, got shapes {a.values.shape} and {b.values.shape}"
        )
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.values.shape} vs {b.values.shape}")
    values = a.values @ b.values

    def backward_fn(g):
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    return _wire(values, (a, b), backward_fn)


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    values = t.values.reshape(shape)

    def backward_fn(g):
        _accum(t, g.reshape(t.values.shape))

    return _wire(values, (t,), backward_fn)


def concat(ts, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    values = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.values.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _wire(values, tuple(ts), backward_fn)


def relu(t) -> Tensor:
    t = as_tensor(t)
    mask = t.values > 0
    values = np.where(mask, t.values, 0.0)

    def backward_fn(g):
        _accum(t, g * mask)

    return _wire(values, (t,), backward_fn)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    x = t.values
    values = np.empty_like(x)
    pos = x >= 0
    values[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    values[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        _accum(t, g * values * (1.0 - values))

    return _wire(values, (t,), backward_fn)


def softmax(t, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    z = t.values - t.values.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    values = ez / ez.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        dot = (g * values).sum(axis=axis, keepdims=True)
        _accum(t, values * (g - dot))

    return _wire(values, (t,), backward_fn)


def reduce_sum(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    values = t.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            _accum(t, np.broadcast_to(g, t.values.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, np.broadcast_to(g, t.values.shape))

    return _wire(values, (t,), backward_fn)


def mean(t, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    count = t.values.size if axis is None else t.values.shape[axis]
    return mul(reduce_sum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def linear(x, w, b=None) -> Tensor:
    """Affine map y = x @ w.T + b with w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    single = x.values.ndim == 1
    xv = x.values[None, :] if single else x.values
    if xv.ndim != 2 or w.values.ndim != 2 or xv.shape[1] != w.values.shape[1]:
        raise ShapeError(f"linear: input shape {x.values.shape} vs weight shape {w.values.shape}")
    values = xv @ w.values.T
    if b is not None:
        b = as_tensor(b)
        if b.values.shape != (w.values.shape[0],):
            raise ShapeError(f"linear: bias shape {b.values.shape} vs weight shape {w.values.shape}")
        values = values + b.values
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None, :] if single else g
        _accum(x, (gm @ w.values)[0] if single else gm @ w.values)
        _accum(w, gm.T @ xv)
        if b is not None:
            _accum(b, gm.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _wire(values, parents, backward_fn)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, c * kh * kw)


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation with zero padding, via im2col.

    x: (C, H, W) or (N, C, H, W); w: (O, C, kh, kw); b: (O,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    single = x.values.ndim == 3
    xv = x.values[None] if single else x.values
    if xv.ndim != 4 or w.values.ndim != 4 or xv.shape[1] != w.values.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.values.shape} vs weight shape {w.values.shape}")
    n, c, h, wid = xv.shape
    o, _, kh, kw = w.values.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wid + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: kernel {w.values.shape} with stride {stride} does not fit "
            f"input shape {x.values.shape}"
        )
    xp = np.pad(xv, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xv
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    wmat = w.values.reshape(o, c * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        if b.values.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.values.shape} vs weight shape {w.values.shape}")
        out = out + b.values
    values = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if single:
        values = values[0]

    def backward_fn(g):
        gm = (g[None] if single else g).transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        _accum(w, (gm.T @ cols).reshape(w.values.shape))
        if b is not None:
            _accum(b, gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw)
            if kh == sh and kw == sw and ph == 0 and pw == 0 and oh * sh == h and ow * sw == wid:
                # Non-overlapping patches tile the input exactly.
                dx = dcols.transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h, wid)
            else:
                dxp = np.zeros((n, c, h + 2 * ph, wid + 2 * pw))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                dx = dxp[:, :, ph : ph + h, pw : pw + wid]
            _accum(x, dx[0] if single else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _wire(values, parents, backward_fn)


def _promote_nchw(t: Tensor):
    if t.values.ndim == 3:
        return t.values[None], True
    if t.values.ndim == 4:
        return t.values, False
    raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got shape {t.values.shape}")


def global_avg_pool(t) -> Tensor:
    """Mean over the spatial axes: (N, C, H, W) -> (N, C)."""
    t = as_tensor(t)
    xv, single = _promote_nchw(t)
    _, _, h, w = xv.shape
    values = xv.mean(axis=(2, 3))
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None] if single else g
        dx = np.broadcast_to(gm[:, :, None, None] / (h * w), xv.shape)
        _accum(t, dx[0] if single else dx)

    return _wire(values, (t,), backward_fn)


def global_max_pool(t) -> Tensor:
    """Max over the spatial axes; ties route gradient to the first in scan order."""
    t = as_tensor(t)
    xv, single = _promote_nchw(t)
    n, c, h, w = xv.shape
    flat = xv.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    values = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None] if single else g
        dflat = np.zeros((n, c, h * w))
        np.put_along_axis(dflat, idx[:, :, None], gm[:, :, None], axis=2)
        dx = dflat.reshape(xv.shape)
        _accum(t, dx[0] if single else dx)

    return _wire(values, (t,), backward_fn)


def channel_mean_map(t) -> Tensor:
    """Mean over the channel axis, keeping it: (N, C, H, W) -> (N, 1, H, W)."""
    t = as_tensor(t)
    xv, single = _promote_nchw(t)
    c = xv.shape[1]
    values = xv.mean(axis=1, keepdims=True)
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None] if single else g
        dx = np.broadcast_to(gm / c, xv.shape)
        _accum(t, dx[0] if single else dx)

    return _wire(values, (t,), backward_fn)


def channel_max_map(t) -> Tensor:
    """Max over the channel axis, keeping it; first-channel tie-break."""
    t = as_tensor(t)
    xv, single = _promote_nchw(t)
    idx = xv.argmax(axis=1)[:, None]
    values = np.take_along_axis(xv, idx, axis=1)
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None] if single else g
        dx = np.zeros(xv.shape)
        np.put_along_axis(dx, idx, gm, axis=1)
        _accum(t, dx[0] if single else dx)

    return _wire(values, (t,), backward_fn)


def scale_by_channel(t, v) -> Tensor:
    """Multiply each channel plane by a per-channel weight: (N, C) or (C,)."""
    t, v = as_tensor(t), as_tensor(v)
    xv, single = _promote_nchw(t)
    vv = v.values[None] if v.values.ndim == 1 else v.values
    if vv.shape != xv.shape[:2]:
        raise ShapeError(
            f"scale_by_channel: weights shape {v.values.shape} vs feature shape {t.values.shape}"
        )
    values = xv * vv[:, :, None, None]
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None] if single else g
        dt = gm * vv[:, :, None, None]
        _accum(t, dt[0] if single else dt)
        dv = (gm * xv).sum(axis=(2, 3))
        _accum(v, dv[0] if v.values.ndim == 1 else dv)

    return _wire(values, (t, v), backward_fn)


def scale_by_map(t, m) -> Tensor:
    """Multiply every channel by a single spatial map: (N, 1, H, W) or (1, H, W)."""
    t, m = as_tensor(t), as_tensor(m)
    xv, single = _promote_nchw(t)
    mv = m.values[None] if m.values.ndim == 3 else m.values
    if mv.shape != (xv.shape[0], 1, xv.shape[2], xv.shape[3]):
        raise ShapeError(
            f"scale_by_map: map shape {m.values.shape} vs feature shape {t.values.shape}"
        )
    values = xv * mv
    if single:
        values = values[0]

    def backward_fn(g):
        gm = g[None] if single else g
        dt = gm * mv
        _accum(t, dt[0] if single else dt)
        dm = (gm * xv).sum(axis=1, keepdims=True)
        _accum(m, dm[0] if m.values.ndim == 3 else dm)

    return _wire(values, (t, m), backward_fn)


def cross_entropy(logits, classes) -> Tensor:
    """Mean cross-entropy between logits (N, K) and integer class labels (N,)."""
    logits = as_tensor(logits)
    single = logits.values.ndim == 1
    lv = logits.values[None] if single else logits.values
    cls = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    if lv.ndim != 2 or cls.shape != (lv.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits shape {logits.values.shape} vs labels shape {cls.shape}"
        )
    if np.any(cls < 0) or np.any(cls >= lv.shape[1]):
        raise ShapeError(f"cross_entropy: label outside [0, {lv.shape[1]})")
    n = lv.shape[0]
    m = lv.max(axis=1, keepdims=True)
    z = lv - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    picked = lv[np.arange(n), cls]
    values = np.float64((lse - picked).mean())
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(n), cls] -= 1.0
        d *= float(g) / n
        _accum(logits, d[0] if single else d)

    return _wire(values, (logits,), backward_fn)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"mse: shapes differ, {a.values.shape} vs {b.values.shape}")
    diff = a.values - b.values
    n = max(diff.size, 1)
    values = np.float64((diff * diff).sum() / n)

    def backward_fn(g):
        d = (2.0 / n) * float(g) * diff
        _accum(a, d)
        _accum(b, -d)

    return _wire(values, (a, b), backward_fn)


def grad_check(fn, params, eps: float = 1e-5) -> float:
    """Compare analytic gradients of fn() against central differences.

    fn takes no arguments, reads the given parameter Tensors, and returns a
    scalar Tensor.  Returns the maximum guarded relative error
    |a - n| / max(1, |a| + |n|) over every element of every parameter.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check parameters must require gradients")
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.values.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_hi = float(fn().values)
                flat[i] = orig - eps
                f_lo = float(fn().values)
                flat[i] = orig
                num = (f_hi - f_lo) / (2.0 * eps)
                err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]) + abs(num))
                if err > worst:
                    worst = err
    return worst


_CKPT_MAGIC = "FPCKPT"
_CKPT_VERSION = 1


def save_params(path, params) -> None:
    """Write named float64 arrays to a deterministic binary checkpoint.

    Records are sorted by name so equal parameter sets always produce
    byte-identical files.
    """
    items = []
    for name in sorted(params):
        arr = params[name]
        if isinstance(arr, Tensor):
            arr = arr.values
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"invalid parameter name {name!r}")
        items.append((name, arr))
    with open(path, "wb") as f:
        f.write(f"{_CKPT_MAGIC} {_CKPT_VERSION} {len(items)}\n".encode("ascii"))
        for name, arr in items:
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"{name} {arr.ndim} {dims}\n".encode("ascii"))
            f.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict:
    """Read a checkpoint written by save_params; returns name -> ndarray."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) != 3 or header[0] != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        if int(header[1]) != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header[1]}")
        count = int(header[2])
        out = {}
        for _ in range(count):
            line = f.readline().decode("ascii").split()
            if len(line) < 2:
                raise ValueError(f"{path}: truncated checkpoint header")
            name = line[0]
            ndim = int(line[1])
            shape = tuple(int(d) for d in line[2 : 2 + ndim])
            if len(shape) != ndim:
                raise ValueError(f"{path}: malformed record header for {name!r}")
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = f.read(size * 8)
            if len(raw) != size * 8:
                raise ValueError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out
