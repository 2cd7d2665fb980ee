"""Minimal reverse-mode differentiable substrate for the prediction model.

Float64 tensors, an explicitly recorded operation tape, and exactly the
operators the encoder-decoder needs.  Gradients of leaf tensors accumulate
additively across backward calls until zeroed; intermediate gradients are
scratch state local to one backward pass.

Run operators inside ``with Tape() as tape`` to record them; without an
active tape they execute as plain numpy (inference mode).
"""

from __future__ import annotations

import math
import threading

import numpy as np

LOG_DIAG_MIN = -4.0
LOG_DIAG_MAX = 4.0


class ShapeError(ValueError):
    """Operand shapes incompatible for an operator."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "leaf")

    def __init__(self, value, requires_grad: bool = False, leaf: bool = True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.leaf = leaf

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named leaf tensor; names are hierarchical and unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.value

    @value.setter
    def value(self, v):
        self.tensor.value = np.asarray(v, dtype=np.float64)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.value.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Records operations for one forward pass; replayed in reverse by backward()."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def record(self, entry):
        self._entries.append(entry)

    def backward(self, loss: Tensor):
        """Populate gradients of every reachable leaf tensor with requires_grad."""
        if loss.value.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        holders: dict[int, Tensor] = {id(loss): loss}

        def get(t: Tensor):
            return grads.get(id(t))

        def acc(t: Tensor, g):
            if not t.requires_grad:
                return
            g = np.asarray(g, dtype=np.float64)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
                holders[key] = t
        for entry in reversed(self._entries):
            entry(get, acc)
        for key, g in grads.items():
            t = holders[key]
            if t.leaf and t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def _make_output(value, *inputs: Tensor) -> Tensor:
    tracked = any(t.requires_grad for t in inputs)
    return Tensor(value, requires_grad=tracked, leaf=False)


def _record(bwd):
    tape = _active_tape()
    if tape is not None:
        tape.record(bwd)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / glue operators


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(a.value + b.value, a, b)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        acc(a, _unbroadcast(g, a.value.shape))
        acc(b, _unbroadcast(g, b.value.shape))

    if out.requires_grad:
        _record(bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(a.value - b.value, a, b)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        acc(a, _unbroadcast(g, a.value.shape))
        acc(b, _unbroadcast(-g, b.value.shape))

    if out.requires_grad:
        _record(bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _make_output(a.value * b.value, a, b)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        acc(a, _unbroadcast(g * b.value, a.value.shape))
        acc(b, _unbroadcast(g * a.value, b.value.shape))

    if out.requires_grad:
        _record(bwd)
    return out


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = _make_output(a.value * c, a)

    def bwd(get, acc):
        g = get(out)
        if g is not None:
            acc(a, g * c)

    if out.requires_grad:
        _record(bwd)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = _make_output(np.log(a.value), a)

    def bwd(get, acc):
        g = get(out)
        if g is not None:
            acc(a, g / a.value)

    if out.requires_grad:
        _record(bwd)
    return out


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = _make_output(a.value.sum(axis=axis), a)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        if axis is None:
            acc(a, np.broadcast_to(g, a.value.shape))
        else:
            acc(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    if out.requires_grad:
        _record(bwd)
    return out


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _make_output(np.concatenate([t.value for t in ts], axis=axis), *ts)
    sizes = [t.value.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            acc(t, piece)

    if out.requires_grad:
        _record(bwd)
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = _make_output(np.stack([t.value for t in ts], axis=axis), *ts)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        for i, t in enumerate(ts):
            acc(t, np.take(g, i, axis=axis))

    if out.requires_grad:
        _record(bwd)
    return out


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = _make_output(a.value[..., start:stop], a)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        acc(a, full)

    if out.requires_grad:
        _record(bwd)
    return out


def pick(a, idx) -> Tensor:
    """Per-row column gather: a[i, idx[i]] for a 2-d tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.value.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.value.shape[0]:
        raise ShapeError(f"pick: need (n, d) tensor and (n,) indices, got {a.value.shape} and {idx.shape}")
    rows = np.arange(a.value.shape[0])
    out = _make_output(a.value[rows, idx], a)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        full = np.zeros_like(a.value)
        full[rows, idx] = g
        acc(a, full)

    if out.requires_grad:
        _record(bwd)
    return out


# ---------------------------------------------------------------------------
# network operators


def affine(x, w, b) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(
            f"affine: x trailing dim {x.value.shape[-1]} does not match w rows {w.value.shape[0]}"
        )
    if b.value.shape != (w.value.shape[1],):
        raise ShapeError(f"affine: b shape {b.value.shape} does not match w cols {w.value.shape[1]}")
    out = _make_output(x.value @ w.value + b.value, x, w, b)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        acc(x, g @ w.value.T)
        xv = x.value.reshape(-1, x.value.shape[-1])
        gv = g.reshape(-1, g.shape[-1])
        acc(w, xv.T @ gv)
        acc(b, gv.sum(axis=0))

    if out.requires_grad:
        _record(bwd)
    return out


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0.0
    out = _make_output(np.where(mask, x.value, slope * x.value), x)

    def bwd(get, acc):
        g = get(out)
        if g is not None:
            acc(x, np.where(mask, g, slope * g))

    if out.requires_grad:
        _record(bwd)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make_output(y, x)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        dot = (g * y).sum(axis=axis, keepdims=True)
        acc(x, y * (g - dot))

    if out.requires_grad:
        _record(bwd)
    return out


class BatchNormState:
    """Running statistics for one batch_norm layer (population convention)."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.running_mean.shape[0], self.momentum, self.eps)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Normalize rows of a (n, d) tensor; inference mode is a fixed affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.value.ndim != 2:
        raise ShapeError(f"batch_norm expects (n, d) input, got {x.value.shape}")
    n, d = x.value.shape
    if gamma.value.shape != (d,) or beta.value.shape != (d,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({d},)")
    if training:
        mean = x.value.mean(axis=0)
        var = x.value.var(axis=0)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (x.value - mean) * inv_std
    out = _make_output(x_hat * gamma.value + beta.value, x, gamma, beta)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        acc(gamma, (g * x_hat).sum(axis=0))
        acc(beta, g.sum(axis=0))
        if training:
            gm = g.mean(axis=0)
            gxm = (g * x_hat).mean(axis=0)
            acc(x, gamma.value * inv_std * (g - gm - x_hat * gxm))
        else:
            acc(x, g * gamma.value * inv_std)

    if out.requires_grad:
        _record(bwd)
    return out


def max_pool_over_set(x, segments=None):
    """Element-wise max over a (n, d) stack of feature rows.

    With `segments` (a sequence of (start, stop) row ranges) one pooled row
    is produced per segment; empty segments yield zero rows.  Returns the
    pooled tensor and the argmax row indices (-1 for empty segments), which
    also define where gradients route: 1.0 to each argmax position only.
    """
    x = as_tensor(x)
    if x.value.ndim != 2:
        raise ShapeError(f"max_pool_over_set expects (n, d) input, got {x.value.shape}")
    n, d = x.value.shape
    if segments is None:
        if n == 0:
            raise ValueError("max_pool_over_set of an empty set without segments")
        seg = np.array([[0, n]], dtype=np.int64)
        squeeze = True
    else:
        seg = np.asarray(segments, dtype=np.int64).reshape(-1, 2)
        squeeze = False
    pooled = np.zeros((seg.shape[0], d), dtype=np.float64)
    argmax = np.full((seg.shape[0], d), -1, dtype=np.int64)
    for i, (lo, hi) in enumerate(seg):
        if hi > lo:
            block = x.value[lo:hi]
            local = np.argmax(block, axis=0)
            argmax[i] = lo + local
            pooled[i] = block[local, np.arange(d)]
    value = pooled[0] if squeeze else pooled
    out = _make_output(value, x)

    def bwd(get, acc):
        g = get(out)
        if g is None:
            return
        g2 = g.reshape(seg.shape[0], d)
        full = np.zeros_like(x.value)
        valid = argmax >= 0
        np.add.at(full, (argmax[valid], np.where(valid)[1]), g2[valid])
        acc(x, full)

    if out.requires_grad:
        _record(bwd)
    return out, (argmax[0] if squeeze else argmax)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step with gate order (input, forget, candidate, output).

    c' = sigmoid(f) * c + sigmoid(i) * tanh(g);  h' = sigmoid(o) * tanh(c').
    """
    x, h, c, wx, wh, b = map(as_tensor, (x, h, c, wx, wh, b))
    bsz, input_dim = x.value.shape
    hidden = h.value.shape[1]
    if wx.value.shape != (input_dim, 4 * hidden):
        raise ShapeError(f"lstm_cell: wx shape {wx.value.shape}, expected {(input_dim, 4 * hidden)}")
    if wh.value.shape != (hidden, 4 * hidden):
        raise ShapeError(f"lstm_cell: wh shape {wh.value.shape}, expected {(hidden, 4 * hidden)}")
    if b.value.shape != (4 * hidden,):
        raise ShapeError(f"lstm_cell: b shape {b.value.shape}, expected {(4 * hidden,)}")
    if c.value.shape != h.value.shape:
        raise ShapeError("lstm_cell: h and c shapes differ")
    gates = x.value @ wx.value + h.value @ wh.value + b.value
    ai, af, ag, ao = np.split(gates, 4, axis=1)
    i = _sigmoid(ai)
    f = _sigmoid(af)
    g = np.tanh(ag)
    o = _sigmoid(ao)
    c2v = f * c.value + i * g
    tanh_c2 = np.tanh(c2v)
    h2v = o * tanh_c2
    tracked = any(t.requires_grad for t in (x, h, c, wx, wh, b))
    h2 = Tensor(h2v, requires_grad=tracked, leaf=False)
    c2 = Tensor(c2v, requires_grad=tracked, leaf=False)

    def bwd(get, acc):
        dh2 = get(h2)
        dc2_in = get(c2)
        if dh2 is None and dc2_in is None:
            return
        if dh2 is None:
            dh2 = np.zeros_like(h2v)
        dc2 = np.zeros_like(c2v) if dc2_in is None else dc2_in.copy()
        do = dh2 * tanh_c2
        dc2 += dh2 * o * (1.0 - tanh_c2 * tanh_c2)
        di = dc2 * g
        df = dc2 * c.value
        dg = dc2 * i
        dc = dc2 * f
        da = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        acc(x, da @ wx.value.T)
        acc(h, da @ wh.value.T)
        acc(c, dc)
        acc(wx, x.value.T @ da)
        acc(wh, h.value.T @ da)
        acc(b, da.sum(axis=0))

    if tracked:
        _record(bwd)
    return h2, c2


def _tri_pairs(dim: int):
    return [(i, j) for i in range(dim) for j in range(i)]


def gaussian_nll(target, mean, chol, wrap_heading: bool = True) -> Tensor:
    """Negative log density of `target` under N(mean, L L^T).

    `chol` packs, along its last axis, `dim` log-diagonal values (clamped to
    [-4, 4] before exponentiation) followed by the strict lower triangle of
    L in row-major order.  When `wrap_heading` is set the last residual
    component is treated as an angle and wrapped into (-pi, pi].  Leading
    dimensions broadcast elementwise; the result drops the last axis.
    """
    target, mean, chol = as_tensor(target), as_tensor(mean), as_tensor(chol)
    if target.requires_grad:
        raise ValueError("gaussian_nll target must be a constant")
    dim = mean.value.shape[-1]
    packed = dim + dim * (dim - 1) // 2
    if target.value.shape != mean.value.shape:
        raise ShapeError(f"gaussian_nll: target {target.value.shape} vs mean {mean.value.shape}")
    if chol.value.shape[:-1] != mean.value.shape[:-1] or chol.value.shape[-1] != packed:
        raise ShapeError(
            f"gaussian_nll: chol shape {chol.value.shape}, expected (..., {packed}) matching mean"
        )
    if not (np.all(np.isfinite(mean.value)) and np.all(np.isfinite(chol.value))):
        raise FloatingPointError("gaussian_nll: non-finite mean or chol input")
    resid = target.value - mean.value
    if wrap_heading and dim == 3:
        resid = resid.copy()
        wrapped = (resid[..., 2] + math.pi) % (2 * math.pi) - math.pi
        resid[..., 2] = np.where(wrapped == -math.pi, math.pi, wrapped)
    log_d_raw = chol.value[..., :dim]
    clamp_mask = (log_d_raw >= LOG_DIAG_MIN) & (log_d_raw <= LOG_DIAG_MAX)
    log_d = np.clip(log_d_raw, LOG_DIAG_MIN, LOG_DIAG_MAX)
    d = np.exp(log_d)
    lower = chol.value[..., dim:]
    pairs = _tri_pairs(dim)

    # forward substitution: solve L z = resid
    z = np.zeros_like(resid)
    for i in range(dim):
        s = resid[..., i].copy()
        for m, (pi, pj) in enumerate(pairs):
            if pi == i:
                s -= lower[..., m] * z[..., pj]
        z[..., i] = s / d[..., i]
    nll_v = 0.5 * (z * z).sum(axis=-1) + log_d.sum(axis=-1) + 0.5 * dim * math.log(2 * math.pi)
    out = _make_output(nll_v, mean, chol)

    def bwd(get, acc):
        gup = get(out)
        if gup is None:
            return
        # w = L^-T z via back substitution
        w = np.zeros_like(z)
        for i in reversed(range(dim)):
            s = z[..., i].copy()
            for m, (pi, pj) in enumerate(pairs):
                if pj == i:
                    s -= lower[..., m] * w[..., pi]
            w[..., i] = s / d[..., i]
        acc(mean, -w * gup[..., None])
        dchol = np.zeros_like(chol.value)
        dchol[..., :dim] = (clamp_mask * (-w * z * d + 1.0)) * gup[..., None]
        for m, (pi, pj) in enumerate(pairs):
            dchol[..., dim + m] = -w[..., pi] * z[..., pj] * gup
        acc(chol, dchol)

    if out.requires_grad:
        _record(bwd)
    return out


def packed_covariance(chol_params: np.ndarray, dim: int) -> np.ndarray:
    """Expand packed Cholesky parameters into dense covariance matrices."""
    chol_params = np.asarray(chol_params, dtype=np.float64)
    L = build_cholesky(chol_params, dim)
    return L @ np.swapaxes(L, -1, -2)


def build_cholesky(chol_params: np.ndarray, dim: int) -> np.ndarray:
    """Dense lower-triangular L from packed parameters (same clamping as the NLL)."""
    chol_params = np.asarray(chol_params, dtype=np.float64)
    lead = chol_params.shape[:-1]
    L = np.zeros(lead + (dim, dim), dtype=np.float64)
    d = np.exp(np.clip(chol_params[..., :dim], LOG_DIAG_MIN, LOG_DIAG_MAX))
    for i in range(dim):
        L[..., i, i] = d[..., i]
    for m, (i, j) in enumerate(_tri_pairs(dim)):
        L[..., i, j] = chol_params[..., dim + m]
    return L
