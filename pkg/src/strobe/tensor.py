"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the operators the detector needs are provided. Every op works on
``(C, H, W)`` feature maps and preserves the input dtype, so the same code
runs in float32 for training/inference and in float64 for gradient checks.

Recording is opt-in::

    with Tape() as tape:
        y = conv2d(x, w, b)
        loss = total(y)
    backward(tape, loss)
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

_active: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("tape", default=None)

# im2col buffers above this many elements are built in row chunks when no grad is recorded
_CHUNK_ELEMS = 1 << 24


class Tensor:
    """Array plus gradient bookkeeping.

    Leaves created with ``requires_grad=True`` own a ``grad`` buffer of the
    same shape; tensors produced on a tape are marked ``requires_grad`` and
    receive gradients only transiently during :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def __enter__(self):
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc):
        _active.reset(self._token)
        return False


class no_tape:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._token = _active.set(None)

    def __exit__(self, *exc):
        _active.reset(self._token)
        return False


def _emit(data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), bw))
    return out


def recording() -> bool:
    return _active.get() is not None


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf reached from ``loss``."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if loss._tape is not tape or not tape.records:
        raise RuntimeError("backward called before a recorded forward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                inp.grad += gi
            else:
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
    tape.records.clear()


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return _emit(a.data * k, (a,), lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def total(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),))


def dot(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant array ``w``."""
    w = np.asarray(w, dtype=x.dtype)
    return _emit(np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), lambda g: (g * w,))


# ---------------------------------------------------------------- convolution

def _im2col(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    c = xp.shape[0]
    return win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """Cross-correlation of a ``(C, H, W)`` map with ``(O, C, kh, kw)`` kernels, zero padded."""
    c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, got {c}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"bias shape {b.shape} does not match {o} output channels")
    if padding is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same-size padding needs odd kernels")
        padding = (kh - 1) // 2
    p = padding
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    w2 = w.data.reshape(o, -1)
    need_grad = recording() and (x.requires_grad or w.requires_grad or (b is not None and b.requires_grad))

    if not need_grad and c * kh * kw * ho * wo > _CHUNK_ELEMS:
        rows = max(1, _CHUNK_ELEMS // (c * kh * kw * wo))
        out = np.empty((o, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
        for r0 in range(0, ho, rows):
            r1 = min(ho, r0 + rows)
            part = xp[:, r0 * stride:(r1 - 1) * stride + kh]
            out[:, r0:r1] = (w2 @ _im2col(part, kh, kw, stride, r1 - r0, wo)).reshape(o, r1 - r0, wo)
        if b is not None:
            out += b.data[:, None, None]
        return Tensor(out)

    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = w2 @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(o, ho, wo)

    def bw(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = dxp[:, p:p + h, p:p + wd] if p else dxp
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _emit(out, inputs, bw if b is not None else (lambda g: bw(g)[:2]))


# ---------------------------------------------------------------- normalization

def group_norm(x: Tensor, groups: int, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    c, h, wd = x.shape
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.data.reshape(groups, -1)
    n = xg.shape[1]
    mean = xg.mean(axis=1, keepdims=True)
    var = ((xg - mean) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(c, h, wd)
    out = xhat * gain.data[:, None, None] + bias.data[:, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(1, 2)) if gain.requires_grad else None
        gbias = g.sum(axis=(1, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gain.data[:, None, None]).reshape(groups, -1)
            xh = xhat.reshape(groups, -1)
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                              - xh * (dxhat * xh).sum(axis=1, keepdims=True))
            gx = gx.reshape(c, h, wd)
        return gx, gg, gbias

    return _emit(out.astype(x.dtype, copy=False), (x, gain, bias), bw)


# ---------------------------------------------------------------- pooling / resampling

def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2; gradient goes to the first maximum in row-major order."""
    c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {h}x{wd}")
    win = x.data.reshape(c, h // 2, 2, wd // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, wd // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (np.arange(4) == arg[..., None]) * g[..., None]
        gx = onehot.reshape(c, h // 2, wd // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, wd)
        return (gx.astype(x.dtype, copy=False),)

    return _emit(out, (x,), bw)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - f)
    np.add.at(m, (np.arange(n_out), i1), f)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centers (align_corners=False), edge-clamped."""
    c, h, wd = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError("output dims must be positive")
    if (out_h, out_w) == (h, wd):
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    ry = _resize_matrix(h, out_h, x.dtype)
    rx = _resize_matrix(wd, out_w, x.dtype)
    out = np.einsum("oh,chw,pw->cop", ry, x.data, rx, optimize=True)
    return _emit(out, (x,), lambda g: (np.einsum("oh,cop,pw->chw", ry, g, rx, optimize=True),))


def warp_matrix(shape_in, shape_out, affine) -> sp.csr_matrix:
    """Sparse sampling operator of an inverse-mapped bilinear warp.

    ``affine`` (2x3) maps output pixel coords ``(col, row, 1)`` to source
    ``(col, row)``; samples outside the source read as zero.
    """
    hi, wi = shape_in
    ho, wo = shape_out
    a = np.asarray(affine, dtype=np.float64)
    v, u = np.mgrid[0:ho, 0:wo]
    u = u.ravel().astype(np.float64)
    v = v.ravel().astype(np.float64)
    sx = a[0, 0] * u + a[0, 1] * v + a[0, 2]
    sy = a[1, 0] * u + a[1, 1] * v + a[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    rows, cols, vals = [], [], []
    out_idx = np.arange(ho * wo)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xx, yy = x0 + dx, y0 + dy
        ok = (xx >= 0) & (xx < wi) & (yy >= 0) & (yy < hi) & (wgt != 0)
        rows.append(out_idx[ok])
        cols.append(yy[ok] * wi + xx[ok])
        vals.append(wgt[ok])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ho * wo, hi * wi),
    )


def bilinear_warp(x: Tensor, affine, out_shape=None) -> Tensor:
    c, h, wd = x.shape
    out_shape = out_shape or (h, wd)
    m = warp_matrix((h, wd), out_shape, affine).astype(x.dtype)
    out = (m @ x.data.reshape(c, -1).T).T.reshape(c, *out_shape)
    mt = m.T.tocsr()
    return _emit(np.ascontiguousarray(out), (x,),
                 lambda g: ((mt @ g.reshape(c, -1).T).T.reshape(c, h, wd),))


# ---------------------------------------------------------------- layout

def concat_channels(*xs: Tensor) -> Tensor:
    hw = xs[0].shape[1:]
    for t in xs:
        if t.shape[1:] != hw:
            raise ValueError(f"spatial mismatch {t.shape[1:]} vs {hw}")
    sizes = np.cumsum([t.shape[0] for t in xs])[:-1]
    return _emit(np.concatenate([t.data for t in xs], axis=0), xs, lambda g: tuple(np.split(g, sizes)))


def crop(x: Tensor, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    c, h, wd = x.shape
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= wd):
        raise ValueError(f"crop [{y0}:{y1}, {x0}:{x1}] outside {h}x{wd}")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, y0:y1, x0:x1] = g
        return (gx,)

    return _emit(x.data[:, y0:y1, x0:x1].copy(), (x,), bw)


def paste(base: Tensor, patch: Tensor, y0: int, x0: int) -> Tensor:
    """Copy of ``base`` with ``patch`` written at ``(y0, x0)``; everything else untouched."""
    ph, pw = patch.shape[1:]
    if patch.shape[0] != base.shape[0] or y0 + ph > base.shape[1] or x0 + pw > base.shape[2]:
        raise ValueError("patch does not fit")
    out = base.data.copy()
    out[:, y0:y0 + ph, x0:x0 + pw] = patch.data

    def bw(g):
        gb = g.copy()
        gb[:, y0:y0 + ph, x0:x0 + pw] = 0
        return gb, g[:, y0:y0 + ph, x0:x0 + pw]

    return _emit(out, (base, patch), bw)


def custom(value, inputs: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]]) -> Tensor:
    """Scalar op with precomputed input gradients (used by the detection losses)."""
    return _emit(np.asarray(value), tuple(inputs), lambda g: tuple(None if gi is None else g * gi for gi in grads))


# ---------------------------------------------------------------- checking

@dataclass
class GradReport:
    max_rel_error: float
    per_input: list

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               seed: int = 0, max_entries: Optional[int] = None) -> GradReport:
    """Central finite differences against the tape gradient.

    ``fn`` maps tensors to a tensor; it is reduced to a scalar with a fixed
    random projection. The error of entry ``i`` is
    ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max|n|)``, which keeps entries with
    vanishing gradient from dominating. ``max_entries`` subsamples large inputs.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with no_tape():
        out = fn(*leaves)
    proj = rng.standard_normal(out.shape)

    with Tape() as tape:
        loss = dot(fn(*leaves), proj)
    backward(tape, loss)

    def f(vals):
        with no_tape():
            return float((fn(*[Tensor(v) for v in vals]).data * proj).sum())

    per_input = []
    for k, a in enumerate(arrays):
        idx = np.arange(a.size)
        if max_entries is not None and a.size > max_entries:
            idx = rng.choice(a.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            vals = [v.copy() for v in arrays]
            flat = vals[k].reshape(-1)
            flat[i] += h
            fp = f(vals)
            flat[i] -= 2 * h
            fm = f(vals)
            num[n] = (fp - fm) / (2 * h)
        ana = leaves[k].grad.reshape(-1)[idx]
        floor = max(1e-3 * np.abs(num).max(), 1e-12)
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        per_input.append(float(rel.max()) if len(rel) else 0.0)
    return GradReport(max(per_input) if per_input else 0.0, per_input)
