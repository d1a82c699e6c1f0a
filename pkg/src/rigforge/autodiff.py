"""Reverse-mode automatic differentiation over dense f64 tensors.

Define-by-run: ops executed inside a ``with Tape() as tape:`` block append
records in execution order (already a topological order), and
``backward(tape, root)`` replays them in reverse. No graph reuse; one
backward per tape. Fixed subgradient conventions: relu'(0) = 0, abs'(0) = 0,
clamp' = 0 on the boundary.
"""

from __future__ import annotations

import json
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatch,
    NonFiniteValue,
    NonScalarRoot,
    ShapeMismatch,
    VersionMismatch,
)

_state = threading.local()

_DEBUG_NONFINITE = False


def set_debug_nonfinite(enabled: bool) -> None:
    """When enabled, every op output is checked for NaN/inf."""
    global _DEBUG_NONFINITE
    _DEBUG_NONFINITE = enabled


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Execution-ordered op records; context manager for recording."""

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, out, parents, vjp):
        self._nodes.append((out, parents, vjp))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ShapeMismatch(f"tensors are at most 4-D, got {self.data.ndim}-D")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, vjp) -> Tensor:
    if _DEBUG_NONFINITE and not np.isfinite(data).all():
        raise NonFiniteValue("op produced a non-finite value")
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        tape._record(out, parents, vjp)
    return out


def custom_node(inputs, value, vjp) -> Tensor:
    """Extension point for ops with hand-written vector-Jacobian products.

    ``vjp(grad_out)`` must return one gradient array (or None) per input.
    """
    return _make(value, [as_tensor(x) for x in inputs], vjp)


# --- primitives ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        [a, b],
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        [a, b],
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        [a, b],
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        [a, b],
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return _make(
        a.data @ b.data,
        [a, b],
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")
    return _make(a.data.T.copy(), [a], lambda g: (g.T.copy(),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def slice_(a, key):
    a = as_tensor(a)
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    return _make(out.copy(), [a], vjp)


def broadcast_to(a, shape):
    a = as_tensor(a)
    return _make(
        np.broadcast_to(a.data, shape).copy(),
        [a],
        lambda g: (_unbroadcast(g, a.shape),),
    )


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), [a], vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, g / count),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), [a], vjp)


def relu(a):
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), [a], lambda g: (g * (a.data > 0),))


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _make(s, [a], lambda g: (g * s * (1.0 - s),))


def softplus(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    return _make(np.logaddexp(0.0, a.data), [a], lambda g: (g * s,))


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, [a], lambda g: (g * e,))


def abs_(a):
    a = as_tensor(a)
    return _make(np.abs(a.data), [a], lambda g: (g * np.sign(a.data),))


def sqrt(a):
    a = as_tensor(a)
    r = np.sqrt(a.data)
    return _make(r, [a], lambda g: (g * 0.5 / r,))


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    return _make(out, [a], lambda g: (g * inside,))


def gather_rows(a, idx):
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx].copy(), [a], vjp)


def scatter_add_rows(a, idx, n_rows):
    """Rows of ``a`` summed into an (n_rows, ...) array at positions idx."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, idx, a.data)
    return _make(out, [a], lambda g: (g[idx].copy(),))


def spectral_diffuse_node(u, times, basis, M):
    """Heat diffusion as a differentiable op (gradients w.r.t. u and times)."""
    from . import operators

    u, times = as_tensor(u), as_tensor(times)
    value = operators.spectral_diffuse(u.data, times.data, basis, M)

    def vjp(g):
        return operators.spectral_diffuse_vjp(u.data, times.data, basis, M, g)

    return _make(value, [u, times], vjp)


# --- backward and checks ------------------------------------------------------


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every requires_grad leaf."""
    if root.size != 1:
        raise NonScalarRoot(f"root has shape {root.shape}")
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    tape._consumed = True
    produced = {id(out) for out, _, _ in tape._nodes}
    if id(root) not in produced:
        if root.requires_grad:
            seed = np.ones(root.shape)
            root.grad = seed if root.grad is None else root.grad + seed
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for out, parents, vjp in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in produced:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            else:
                # leaves accumulate across backward calls until zero_grad
                p.grad = pg.copy() if p.grad is None else p.grad + pg


def grad_check(f, x: Tensor, h: float = 1e-5, max_coords: int = 200, seed: int = 0):
    """Max relative error between backward and central differences at x."""
    with Tape() as tape:
        x.requires_grad = True
        x.zero_grad()
        y = f(x)
        backward(tape, y)
    analytic = x.grad.copy() if x.grad is not None else np.zeros(x.shape)

    def value(data):
        return float(f(Tensor(data)).data)

    flat = x.data.ravel()
    numeric = np.zeros_like(analytic).ravel()
    if flat.size <= max_coords:
        for i in range(flat.size):
            bump = flat.copy()
            bump[i] += h
            fp = value(bump.reshape(x.shape))
            bump[i] -= 2 * h
            fm = value(bump.reshape(x.shape))
            numeric[i] = (fp - fm) / (2 * h)
        numeric = numeric.reshape(x.shape)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
        return np.abs(analytic - numeric).max() / denom
    # random directional projections for large inputs
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(25):
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v.ravel())
        fp = value(x.data + h * v)
        fm = value(x.data - h * v)
        num = (fp - fm) / (2 * h)
        ana = float((analytic * v).sum())
        worst = max(worst, abs(ana - num) / max(abs(num), abs(ana), 1e-12))
    return worst


# --- Adam ---------------------------------------------------------------------


def adam_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """Bias-corrected Adam update, in place on the parameter arrays."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# --- checkpoint file ----------------------------------------------------------
# layout (little-endian):
#   magic "RFCK" | u32 version | u64 json_len | json header | f64 payload
# header: {"arrays": [[name, shape], ...], "meta": {...}, "adam": bool, "adam_t": int}
# payload: each array flattened in header order, then adam m/v pairs per array.

_RFCK_MAGIC = b"RFCK"
_RFCK_VERSION = 1


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    meta: dict | None = None,
    adam_state: dict | None = None,
) -> None:
    names = sorted(params)
    header = {
        "arrays": [[n, list(params[n].shape)] for n in names],
        "meta": meta or {},
        "adam": adam_state is not None,
        "adam_t": int(adam_state["t"]) if adam_state else 0,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    parts = [_RFCK_MAGIC, struct.pack("<IQ", _RFCK_VERSION, len(hbytes)), hbytes]
    for n in names:
        parts.append(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    if adam_state is not None:
        for n in names:
            parts.append(np.ascontiguousarray(adam_state["m"][n], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(adam_state["v"][n], dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path):
    """Returns (params, meta, adam_state-or-None)."""
    blob = Path(path).read_bytes()
    if blob[:4] != _RFCK_MAGIC:
        raise ChecksumMismatch(f"{path}: bad magic")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != _RFCK_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    header = json.loads(blob[16 : 16 + hlen].decode())
    off = 16 + hlen

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
        off += arr.nbytes
        return arr.reshape(shape).copy()

    params = {name: take(shape) for name, shape in header["arrays"]}
    adam_state = None
    if header["adam"]:
        adam_state = {"t": header["adam_t"], "m": {}, "v": {}}
        for name, shape in header["arrays"]:
            adam_state["m"][name] = take(shape)
            adam_state["v"][name] = take(shape)
    if len(blob) != off:
        raise ChecksumMismatch(f"{path}: size mismatch")
    return params, header["meta"], adam_state
