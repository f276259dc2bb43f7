"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Design notes:

* A dynamic tape records operations as they execute (execution order is a
  topological order); ``Tape.backward`` walks it once in reverse.
* Everything is float64. Every primitive checks its output for NaN/inf and
  raises :class:`NumericalError` naming the offending node.
* The backward seed may carry extra *leading* axes relative to the output
  shape. Seeding with an identity block therefore yields a full Jacobian in
  a single reverse sweep (used for the kinematics Jacobian). To keep that
  transparent, every pullback treats a tensor's own axes as the trailing
  ones; axis arguments are normalized to negative indices at record time.
* The module-level math functions (``sin``, ``matmul``, ...) accept either
  :class:`Tensor` or plain numpy input and fall back to numpy when no tensor
  is involved, so numerical code can be written once and run with or without
  gradient tracking.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, NumericalError, ValidationError

_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """Dense float64 array with gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_needs")

    # Make ndarray <op> Tensor defer to our reflected operators instead of
    # numpy attempting elementwise object math.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        # _needs: gradient must flow here (leaf param or depends on one)
        self._needs = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "inputs", "pullback", "name", "index")

    def __init__(self, out, inputs, pullback, name, index):
        self.out = out
        self.inputs = inputs
        self.pullback = pullback
        self.name = name
        self.index = index


class Tape:
    """Records operations for one (or more) forward passes.

    Used as a context manager; ops executed inside record nodes whenever an
    input needs gradients. ``backward`` may be called several times.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def _record(self, out, inputs, pullback, name):
        out._needs = True
        self.nodes.append(_Node(out, inputs, pullback, name, len(self.nodes)))

    def backward(self, output: Tensor, seed=None):
        """Accumulate gradients of ``output`` into leaf ``.grad`` fields.

        ``seed`` defaults to ones in the output's shape. It may carry extra
        leading axes (e.g. an identity block) in which case every leaf
        gradient gains the same leading axes: a full Jacobian in one sweep.
        """
        if seed is None:
            seed = np.ones(output.data.shape)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape[seed.ndim - output.data.ndim:] != output.data.shape:
            raise ValidationError(
                f"backward seed trailing shape {seed.shape} does not match output {output.data.shape}"
            )
        grads: dict[Tensor, np.ndarray] = {output: seed}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            try:
                parent_grads = node.pullback(g)
            except FloatingPointError as exc:  # pragma: no cover - defensive
                raise NumericalError(f"pullback of node {node.index} ({node.name}) failed: {exc}")
            for t, gt in zip(node.inputs, parent_grads):
                if gt is None or not t._needs:
                    continue
                acc = grads.get(t)
                grads[t] = gt if acc is None else acc + gt
        for t, g in grads.items():
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _check_finite(data: np.ndarray, name: str):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{name}'")


def _unbroadcast(g: np.ndarray, shape: tuple, extra: int) -> np.ndarray:
    """Reduce ``g`` (seed prefix + broadcast of ``shape``) to prefix + shape."""
    while g.ndim - extra > len(shape):
        g = g.sum(axis=extra)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[extra + i] != 1:
            g = g.sum(axis=extra + i, keepdims=True)
    return g


def _finish(out_data, inputs, make_pull, name):
    """Wrap op output; record on the active tape when gradients are needed."""
    _check_finite(out_data, name)
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t._needs for t in inputs):
        tape._record(out, inputs, make_pull(), name)
    return out


# ---------------------------------------------------------------------------
# binary elementwise ops


def _binary(a, b, name, fwd, da, db):
    if not _any_tensor(a, b):
        with np.errstate(all="ignore"):
            out = fwd(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        _check_finite(out, name)
        return out
    a, b = _coerce(a), _coerce(b)
    with np.errstate(all="ignore"):
        out_data = fwd(a.data, b.data)
    out_ndim = out_data.ndim
    na, nb = a._needs, b._needs

    def make_pull():
        def pull(g):
            extra = g.ndim - out_ndim
            ga = _unbroadcast(da(g, a.data, b.data), a.data.shape, extra) if na else None
            gb = _unbroadcast(db(g, a.data, b.data), b.data.shape, extra) if nb else None
            return ga, gb

        return pull

    return _finish(out_data, (a, b), make_pull, name)


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, "mul", lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        a, b, "div", lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


# ---------------------------------------------------------------------------
# unary elementwise ops


def _unary(x, name, fwd, dx):
    if not isinstance(x, Tensor):
        with np.errstate(all="ignore"):
            out = fwd(np.asarray(x, dtype=np.float64))
        _check_finite(out, name)
        return out
    with np.errstate(all="ignore"):
        out_data = fwd(x.data)
    out_ndim = out_data.ndim

    def make_pull():
        def pull(g):
            return (dx(g, x.data, out_data),)

        return pull

    return _finish(out_data, (x,), make_pull, name)


def neg(x):
    return _unary(x, "neg", lambda v: -v, lambda g, v, o: -g)


def sin(x):
    return _unary(x, "sin", np.sin, lambda g, v, o: g * np.cos(v))


def cos(x):
    return _unary(x, "cos", np.cos, lambda g, v, o: -g * np.sin(v))


def exp(x):
    return _unary(x, "exp", np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary(x, "log", np.log, lambda g, v, o: g / v)


def sqrt(x):
    return _unary(x, "sqrt", np.sqrt, lambda g, v, o: g * 0.5 / o)


def tanh(x):
    return _unary(x, "tanh", np.tanh, lambda g, v, o: g * (1.0 - o * o))


def sigmoid(x):
    def _sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    return _unary(x, "sigmoid", _sig, lambda g, v, o: g * o * (1.0 - o))


def absolute(x):
    return _unary(x, "abs", np.abs, lambda g, v, o: g * np.sign(v))


def power(x, p):
    if not isinstance(p, (int, float)):
        raise ValidationError("power expects a scalar constant exponent")
    p = float(p)
    return _unary(x, "pow", lambda v: v**p, lambda g, v, o: g * p * v ** (p - 1.0))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes through the interior only."""
    lo_a = np.asarray(lo, dtype=np.float64)
    hi_a = np.asarray(hi, dtype=np.float64)
    if not isinstance(x, Tensor):
        out = np.clip(np.asarray(x, dtype=np.float64), lo_a, hi_a)
        _check_finite(out, "clip")
        return out
    out_data = np.clip(x.data, lo_a, hi_a)
    mask = (x.data >= lo_a) & (x.data <= hi_a)

    def make_pull():
        def pull(g):
            return (g * mask,)

        return pull

    return _finish(out_data, (x,), make_pull, "clip")


def silu(x):
    """x * sigmoid(x), the smooth gating nonlinearity used by the models."""
    return mul(x, sigmoid(x))


# ---------------------------------------------------------------------------
# matmul


def _swap_last(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    if not _any_tensor(a, b):
        out = np.matmul(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
        _check_finite(out, "matmul")
        return out
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError("matmul requires operands with ndim >= 2")
    out_data = np.matmul(a.data, b.data)
    na, nb = a._needs, b._needs

    def make_pull():
        def pull(g):
            extra = g.ndim - out_data.ndim
            ga = gb = None
            if na:
                ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.data.shape, extra)
            if nb:
                gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.data.shape, extra)
            return ga, gb

        return pull

    return _finish(out_data, (a, b), make_pull, "matmul")


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(-ndim, 0))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if a >= 0:
            a -= ndim
        if not (-ndim <= a < 0):
            raise ValidationError(f"axis {a} out of range for ndim {ndim}")
        axes.append(a)
    return tuple(sorted(set(axes)))


def _reduce(x, axis, keepdims, name, fwd, scale):
    if not isinstance(x, Tensor):
        x_arr = np.asarray(x, dtype=np.float64)
        axes = _norm_axes(axis, x_arr.ndim)
        out = fwd(x_arr, axes, keepdims)
        _check_finite(out, name)
        return out
    axes = _norm_axes(axis, x.data.ndim)
    out_data = fwd(x.data, axes, keepdims)
    in_shape = x.data.shape
    count = scale(x.data, axes)

    def make_pull():
        def pull(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            extra = gg.ndim - x.data.ndim
            target = gg.shape[:extra] + in_shape
            return (np.broadcast_to(gg, target) / count,)

        return pull

    return _finish(out_data, (x,), make_pull, name)


def sum_(x, axis=None, keepdims=False):
    return _reduce(
        x, axis, keepdims, "sum", lambda v, ax, kd: v.sum(axis=ax, keepdims=kd), lambda v, ax: 1.0
    )


def mean_(x, axis=None, keepdims=False):
    def n_elems(v, ax):
        n = 1
        for a in ax:
            n *= v.shape[a]
        return float(n)

    return _reduce(
        x, axis, keepdims, "mean", lambda v, ax, kd: v.mean(axis=ax, keepdims=kd), n_elems
    )


# ---------------------------------------------------------------------------
# normalizations


def softmax(x, axis: int = -1, mask=None):
    """Softmax over the last axis.

    ``mask`` (broadcastable boolean, True = excluded) zeroes positions by
    assigning them -inf logits before normalization; gradients at excluded
    positions are exactly zero. Fully masked rows are rejected.
    """
    if axis != -1:
        raise ValidationError("softmax supports axis=-1 only")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        xshape = x.shape if isinstance(x, Tensor) else np.shape(x)
        if np.any(np.all(np.broadcast_to(mask, xshape), axis=-1)):
            raise ValidationError("softmax mask excludes an entire row")

    def _fwd(v):
        if mask is not None:
            v = np.where(mask, -np.inf, v)
        shifted = v - v.max(axis=-1, keepdims=True)
        with np.errstate(all="ignore"):
            e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    if not isinstance(x, Tensor):
        out = _fwd(np.asarray(x, dtype=np.float64))
        _check_finite(out, "softmax")
        return out
    # -inf entries (attention masking) are legal pre-softmax inputs
    if np.any(np.isnan(x.data)):
        raise NumericalError("non-finite values produced by op 'softmax' (NaN input)")
    out_data = _fwd(x.data)
    _check_finite(out_data, "softmax")
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and x._needs:

        def pull(g):
            inner = (g * out_data).sum(axis=-1, keepdims=True)
            return ((g - inner) * out_data,)

        tape._record(out, (x,), pull, "softmax")
    return out


def layer_norm(x, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance (no affine part)."""

    def _stats(v):
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return xc * inv, inv

    if not isinstance(x, Tensor):
        out, _ = _stats(np.asarray(x, dtype=np.float64))
        _check_finite(out, "layer_norm")
        return out
    xhat, inv = _stats(x.data)

    def make_pull():
        def pull(g):
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - xhat * gx),)

        return pull

    return _finish(xhat, (x,), make_pull, "layer_norm")


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64).reshape(shape)
    out_data = x.data.reshape(shape)
    in_shape = x.data.shape
    out_ndim = out_data.ndim

    def make_pull():
        def pull(g):
            extra = g.ndim - out_ndim
            return (g.reshape(g.shape[:extra] + in_shape),)

        return pull

    return _finish(out_data, (x,), make_pull, "reshape")


def swapaxes(x, a: int, b: int):
    if a >= 0 or b >= 0:
        raise ValidationError("swapaxes requires negative axis indices")
    if not isinstance(x, Tensor):
        return np.swapaxes(np.asarray(x, dtype=np.float64), a, b)
    out_data = np.swapaxes(x.data, a, b)

    def make_pull():
        def pull(g):
            return (np.swapaxes(g, a, b),)

        return pull

    return _finish(out_data, (x,), make_pull, "swapaxes")


def broadcast_to(x, shape):
    """Broadcast trailing dims of ``x`` to ``shape``."""
    shape = tuple(int(s) for s in shape)
    if not isinstance(x, Tensor):
        return np.broadcast_to(np.asarray(x, dtype=np.float64), shape).copy()
    out_data = np.broadcast_to(x.data, shape).copy()
    in_shape = x.data.shape

    def make_pull():
        def pull(g):
            extra = g.ndim - len(shape)
            # collapse the dims broadcast added on the left of in_shape
            lead = len(shape) - len(in_shape)
            gg = g
            for _ in range(lead):
                gg = gg.sum(axis=extra)
            return (_unbroadcast(gg, in_shape, extra),)

        return pull

    return _finish(out_data, (x,), make_pull, "broadcast")


def concat(parts, axis: int = -1):
    if axis >= 0:
        raise ValidationError("concat requires a negative axis index")
    if not any(isinstance(p, Tensor) for p in parts):
        out = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
        _check_finite(out, "concat")
        return out
    ts = [_coerce(p) for p in parts]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    needs = [t._needs for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def make_pull():
        def pull(g):
            pieces = np.split(g, splits, axis=axis)
            return tuple(p if n else None for p, n in zip(pieces, needs))

        return pull

    return _finish(out_data, tuple(ts), make_pull, "concat")


def getitem(x, idx):
    """Basic slicing. Ellipsis-led indices stay valid under Jacobian seeding."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (i is Ellipsis or i is None or isinstance(i, (int, slice))):
            raise ValidationError("slice supports ints, slices, None and Ellipsis only")
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)[idx]
    out_data = x.data[idx].copy()
    in_shape = x.data.shape
    out_ndim = out_data.ndim
    leads_ellipsis = idx and idx[0] is Ellipsis

    def make_pull():
        def pull(g):
            extra = g.ndim - out_ndim
            z = np.zeros(g.shape[:extra] + in_shape)
            full_idx = idx if leads_ellipsis else (slice(None),) * extra + idx
            z[full_idx] = g
            return (z,)

        return pull

    return _finish(out_data, (x,), make_pull, "slice")


# ---------------------------------------------------------------------------
# nearest-rotation projection (used by the kinematics root)


def _vex(k):
    """Inverse of the cross-product matrix: vex([w]_x) = w."""
    return np.stack([k[..., 2, 1], k[..., 0, 2], k[..., 1, 0]], axis=-1)


def _cross_matrix(w):
    z = np.zeros(w.shape[:-1])
    return np.stack(
        [
            np.stack([z, -w[..., 2], w[..., 1]], axis=-1),
            np.stack([w[..., 2], z, -w[..., 0]], axis=-1),
            np.stack([-w[..., 1], w[..., 0], z], axis=-1),
        ],
        axis=-2,
    )


def _svd_orthogonalize_fwd(m: np.ndarray):
    if m.shape[-2:] != (3, 3):
        raise ValidationError(f"svd_orthogonalize expects trailing 3x3, got {m.shape}")
    _check_finite(m, "svd_orthogonalize")
    u, s, vt = np.linalg.svd(m)
    norm = np.linalg.norm(m, axis=(-2, -1), keepdims=False)
    tiny = s < (1e-12 * norm[..., None])
    if np.any(tiny.sum(axis=-1) >= 2):
        raise DegenerateInputError(
            "svd_orthogonalize: input is rank deficient (two or more near-zero singular values)"
        )
    det = np.linalg.det(np.matmul(u, vt))
    d = np.ones_like(s)
    d[..., 2] = np.sign(det)
    r = np.matmul(u * d[..., None, :], vt)
    return r


def svd_orthogonalize(m):
    """Project a (batched) 3x3 matrix to the nearest rotation (Frobenius)."""
    if not isinstance(m, Tensor):
        return _svd_orthogonalize_fwd(np.asarray(m, dtype=np.float64))
    r = _svd_orthogonalize_fwd(m.data)
    s_sym = np.matmul(_swap_last(r), m.data)  # symmetric factor of m = r @ s
    tr = np.trace(s_sym, axis1=-2, axis2=-1)
    t_mat = tr[..., None, None] * np.eye(3) - s_sym
    if np.any(np.abs(np.linalg.det(t_mat)) < 1e-12):
        raise DegenerateInputError(
            "svd_orthogonalize: gradient undefined (nearest rotation not locally unique)"
        )
    t_inv = np.linalg.inv(t_mat)

    def make_pull():
        def pull(g):
            b = np.matmul(_swap_last(r), g)
            w = _vex(b - _swap_last(b))
            c = np.einsum("...ij,...j->...i", t_inv, w)
            return (np.matmul(r, _cross_matrix(c)),)

        return pull

    return _finish(r, (m,), make_pull, "svd_orthogonalize")


# ---------------------------------------------------------------------------
# parameter store and checkpoints


def param(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class ParamStore:
    """Ordered name -> Tensor mapping with optimizer helpers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        t = param(data, name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._params.items() if t.grad is not None}

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        for n, t in self._params.items():
            key = prefix + n
            if key not in arrays:
                raise ValidationError(f"checkpoint is missing parameter {key!r}")
            if arrays[key].shape != t.data.shape:
                raise ValidationError(
                    f"checkpoint shape mismatch for {key!r}: "
                    f"{arrays[key].shape} vs {t.data.shape}"
                )
            t.data = np.array(arrays[key], dtype=np.float64)


class SgdMomentum:
    """Plain minibatch gradient descent with momentum."""

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.9):
        self.store = store
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {n: np.zeros_like(t.data) for n, t in store._params.items()}

    def step(self):
        for n, t in self.store._params.items():
            if t.grad is None:
                continue
            v = self.velocity[n]
            v *= self.momentum
            v -= self.lr * t.grad
            t.data = t.data + v

    def state(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.velocity.items()}

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = ""):
        for n in self.velocity:
            key = prefix + n
            if key in arrays:
                self.velocity[n] = np.array(arrays[key], dtype=np.float64)


# checkpoint file: one JSON header line, then a flat little-endian float64 blob


def save_arrays(path: str, arrays: dict[str, np.ndarray]):
    names = list(arrays)
    shapes = [list(np.asarray(arrays[n]).shape) for n in names]
    offsets = []
    off = 0
    for n in names:
        offsets.append(off)
        off += int(np.asarray(arrays[n]).size)
    header = json.dumps({"names": names, "shapes": shapes, "offsets": offsets})
    blob = np.concatenate(
        [np.ascontiguousarray(arrays[n], dtype="<f8").ravel() for n in names]
    ) if names else np.zeros(0, dtype="<f8")
    dir_ = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=dir_, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(header.encode("utf-8") + b"\n")
            f.write(blob.astype("<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        header_line = f.readline()
        blob = f.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        names, shapes, offsets = header["names"], header["shapes"], header["offsets"]
    except (ValueError, KeyError) as exc:
        raise ValidationError(f"malformed checkpoint header in {path}: {exc}")
    flat = np.frombuffer(blob, dtype="<f8")
    out = {}
    for n, shp, off in zip(names, shapes, offsets):
        size = int(np.prod(shp)) if shp else 1
        out[n] = flat[off : off + size].reshape(shp).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str = ""
    worst_index: tuple = ()
    failures: list = field(default_factory=list)

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e}"
            + (f" at {self.worst_param}{self.worst_index}" if self.worst_param else "")
        )


def grad_check(f, xs, tol: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*xs)`` to central differences.

    Relative error uses a unit floor: |a - b| / max(1, |a|, |b|), so tiny
    gradients are compared absolutely.
    """
    if isinstance(xs, (Tensor, np.ndarray)):
        xs = [xs]
    xs = [x if isinstance(x, Tensor) else param(np.asarray(x, dtype=np.float64), f"arg{k}")
          for k, x in enumerate(xs)]
    for x in xs:
        x.grad = None
    with Tape() as tape:
        y = f(*xs)
        if not isinstance(y, Tensor) or y.data.shape != ():
            raise ValidationError("grad_check expects f to return a scalar Tensor")
        tape.backward(y, np.ones(()))
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]

    max_rel = 0.0
    worst = ("", ())
    failures = []
    for k, x in enumerate(xs):
        flat = x.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            yp = f(*xs)
            yp = yp.data if isinstance(yp, Tensor) else np.asarray(yp)
            flat[i] = orig - h
            ym = f(*xs)
            ym = ym.data if isinstance(ym, Tensor) else np.asarray(ym)
            flat[i] = orig
            fd = float((yp - ym) / (2.0 * h))
            an = float(analytic[k].ravel()[i])
            rel = abs(an - fd) / max(1.0, abs(an), abs(fd))
            if rel > max_rel:
                max_rel = rel
                worst = (x.name or f"arg{k}", np.unravel_index(i, x.data.shape))
            if rel > tol:
                failures.append(
                    (x.name or f"arg{k}", np.unravel_index(i, x.data.shape), an, fd, rel)
                )
    return GradCheckReport(
        passed=not failures,
        max_rel_error=max_rel,
        worst_param=worst[0],
        worst_index=worst[1],
        failures=failures,
    )
