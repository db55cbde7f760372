"""Small reverse-mode autodiff engine over numpy arrays.

Enough machinery for dense networks, affine-coupling flows and the VAE
objective: a :class:`Tensor` records the operations applied to it, and
``loss.backward()`` walks the tape in reverse topological order. Also here:
dense layers, Adam, central-difference gradient checking and the ``PSSW``
weight file format.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ---------------------------------------------------
    def _make(self, data, parents, backward):
        needs = any(p.requires_grad for p in parents)
        return Tensor(data, needs, parents if needs else (), backward if needs else None)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype).reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return self._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return self._make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return self._make(
            a.data / b.data,
            (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self
        return self._make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return self._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))

    def __getitem__(self, idx):
        a = self

        def back(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g) if _is_fancy(idx) else out.__setitem__(idx, g)
            return (out,)

        return self._make(a.data[idx], (a,), back)

    # -- reductions & reshapes ----------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        return self._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self):
        a = self
        return self._make(a.data.T, (a,), lambda g: (g.T,))


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


# -- elementwise functions ----------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return x._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return x._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return x._make(out, (x,), lambda g: (g * (1 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return x._make(out, (x,), lambda g: (g * out * (1 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return x._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo, hi) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    inside = (x.data >= lo) & (x.data <= hi)
    return x._make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def concat(xs: Sequence[Tensor], axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return xs[0]._make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back)


def where(cond, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b`` (``cond`` is a constant mask)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return a._make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
    )


# -- layers ----------------------------------------------------------------

def dense_forward(x, weights, bias) -> Tensor:
    """Affine map ``x @ weights + bias``."""
    return as_tensor(x) @ weights + bias


def gaussian_log_density(v, mean, logvar) -> Tensor:
    """Sum over the last axis of diagonal-Gaussian log densities."""
    v, mean, logvar = as_tensor(v), as_tensor(mean), as_tensor(logvar)
    diff = v - mean
    per_dim = (logvar + diff * diff * exp(-logvar) + LOG_2PI) * -0.5
    return per_dim.sum(axis=-1)


ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "linear": lambda x: x,
}


class ParamStore:
    """Named trainable arrays plus optimizer state.

    Insertion order is the serialization order, so stores built the same way
    write identical files.
    """

    def __init__(self, seed=0, dtype=np.float32):
        self.params: Dict[str, Tensor] = {}
        self.seed = seed
        self.step = 0
        self.dtype = np.dtype(dtype)
        self.opt_state: Dict[str, Dict[str, np.ndarray]] = {}
        self.rng = np.random.default_rng(seed)

    def add(self, name, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = parameter(value, dtype=self.dtype)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k!r}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
            t.grad = None
        self.opt_state = {}
        return self

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def init_dense(store: ParamStore, name, n_in, n_out, zero=False):
    """Register ``{name}.W`` (He-uniform, or zeros) and ``{name}.b`` (zeros)."""
    if zero:
        W = np.zeros((n_in, n_out))
    else:
        bound = math.sqrt(6.0 / n_in)
        W = store.rng.uniform(-bound, bound, size=(n_in, n_out))
    return store.add(f"{name}.W", W), store.add(f"{name}.b", np.zeros(n_out))


class MLP:
    """Stack of dense layers with a shared hidden activation."""

    def __init__(self, store: ParamStore, name, sizes, activation="relu", out_activation="linear", zero_last=False):
        self.names = []
        for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            lname = f"{name}.{li}"
            init_dense(store, lname, a, b, zero=zero_last and li == len(sizes) - 2)
            self.names.append(lname)
        self.store = store
        self.activation = activation
        self.out_activation = out_activation

    def __call__(self, x, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        p = params if params is not None else self.store.params
        h = as_tensor(x)
        for li, lname in enumerate(self.names):
            h = dense_forward(h, p[f"{lname}.W"], p[f"{lname}.b"])
            act = self.activation if li < len(self.names) - 1 else self.out_activation
            h = ACTIVATIONS[act](h)
        return h


# -- Adam -------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 10

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size and epochs must be positive")


def adam_step(store: ParamStore, grads: Dict[str, np.ndarray], cfg: AdamConfig) -> ParamStore:
    """One bias-corrected Adam update, in place; returns ``store``."""
    store.step += 1
    t = store.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        p = store.params[name]
        st = store.opt_state.get(name)
        if st is None:
            st = store.opt_state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        g = np.asarray(g, dtype=p.dtype)
        st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * g
        st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * (g * g)
        m_hat = st["m"] / bc1
        v_hat = st["v"] / bc2
        p.data = (p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.dtype)
    return store


def iterate_minibatches(n, batch_size, rng) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i: i + batch_size] for i in range(0, n, batch_size)]


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    tolerance: float
    n_probed: Dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def grad_check(
    closure: Callable[[Dict[str, Tensor]], Tensor],
    params: Dict[str, np.ndarray],
    tolerance=1e-4,
    step=1e-5,
    max_probes=40,
    seed=0,
    floor=1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``closure`` maps a dict of float64 tensors to a scalar tensor. Large
    blocks are probed at ``max_probes`` random entries. Relative error per
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tensors = {k: parameter(v) for k, v in base.items()}
    out = closure(tensors)
    out.backward()
    rng = np.random.default_rng(seed)
    errors, probed = {}, {}

    def value(name, flat_idx, delta):
        arrs = {k: Tensor(v) for k, v in base.items()}
        arr = base[name].copy()
        arr.reshape(-1)[flat_idx] += delta
        arrs[name] = Tensor(arr)
        return float(closure(arrs).data)

    for name, arr in base.items():
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        size = arr.size
        idxs = np.arange(size) if size <= max_probes else rng.choice(size, max_probes, replace=False)
        worst = 0.0
        for fi in idxs:
            num = (value(name, fi, step) - value(name, fi, -step)) / (2 * step)
            a = float(analytic.reshape(-1)[fi])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        errors[name] = worst
        probed[name] = len(idxs)
    return GradCheckReport(errors, tolerance, probed)


# -- weight files -------------------------------------------------------------
#
# "PSSW", u32 version, u32 array count, then per array:
#   u32 name length, name (utf-8), u32 rank, rank x u32 dims,
#   little-endian float32 payload.

WEIGHT_MAGIC = b"PSSW"
WEIGHT_VERSION = 1


def write_weights(arrays: Dict[str, np.ndarray]) -> bytes:
    out = bytearray(WEIGHT_MAGIC)
    out += struct.pack("<II", WEIGHT_VERSION, len(arrays))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    return bytes(out)


def read_weights(data: bytes, offset=0):
    """Parse a PSSW blob; returns ``(arrays, end_offset)``."""
    if data[offset: offset + 4] != WEIGHT_MAGIC:
        raise ValueError("not a PSSW weight blob")
    version, count = struct.unpack_from("<II", data, offset + 4)
    if version != WEIGHT_VERSION:
        raise ValueError(f"unsupported weight format version {version}")
    pos = offset + 12
    arrays: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos: pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(data):
                raise ValueError(f"array {name!r} is truncated")
            arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise ValueError("truncated weight blob") from exc
    return arrays, pos
