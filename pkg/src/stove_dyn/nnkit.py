"""Dense-layer network kernel: parameter store, tape-based reverse mode, Adam.

The forward code of a model is written once against an *ops* object.  Two
implementations exist:

* :class:`Tape` records every primitive so :meth:`Tape.backprop` can return
  gradients aligned with the :class:`ParamStore` flat index.
* :data:`EVAL` evaluates the same primitives on plain arrays with no
  bookkeeping; used for rollouts, planning and filtering.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "ParamStore",
    "Node",
    "Tape",
    "EvalOps",
    "EVAL",
    "AdamState",
    "dense_affine",
    "pair_affine",
    "pair_concat",
    "lr_schedule",
    "adam_update",
    "glorot_uniform",
    "save_params",
    "load_params",
]


# --------------------------------------------------------------------------
# Parameters


class ParamStore:
    """Named parameter blocks backed by one contiguous float64 vector."""

    def __init__(self, shapes: dict[str, tuple[int, ...]] | Iterable[tuple[str, tuple[int, ...]]]):
        items = list(shapes.items()) if isinstance(shapes, dict) else list(shapes)
        self._index: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in items:
            if name in self._index:
                raise ValueError(f"duplicate parameter block {name!r}")
            shape = tuple(int(s) for s in shape)
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            self._index[name] = (offset, offset + size, shape)
            offset += size
        self.flat = np.zeros(offset, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.flat.size

    @property
    def names(self) -> list[str]:
        return list(self._index)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._index[name][2]

    def span(self, name: str) -> tuple[int, int]:
        start, stop, _ = self._index[name]
        return start, stop

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        start, stop, shape = self._index[name]
        return self.flat[start:stop].reshape(shape)

    def __setitem__(self, name: str, value) -> None:
        start, stop, shape = self._index[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != shape:
            raise ValueError(f"block {name!r} has shape {shape}, got {value.shape}")
        self.flat[start:stop] = value.ravel()

    def items(self):
        for name in self._index:
            yield name, self[name]

    def block_of(self, flat_index: int) -> str:
        for name, (start, stop, _) in self._index.items():
            if start <= flat_index < stop:
                return name
        raise IndexError(flat_index)

    def copy(self) -> "ParamStore":
        out = ParamStore([(n, s) for n, (_, _, s) in self._index.items()])
        out.flat[:] = self.flat
        return out


def glorot_uniform(params: ParamStore, rng: np.random.Generator, weight_names: Iterable[str]) -> None:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) for weight matrices; everything else stays 0."""
    for name in weight_names:
        fan_in, fan_out = params.shape(name)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-bound, bound, size=(fan_in, fan_out))


# --------------------------------------------------------------------------
# Primitives shared by both evaluation modes


def dense_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``; leading axes are batch axes."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2 or b.shape != (w.shape[1],):
        raise ValueError(
            f"affine shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    if w.shape[1] == 1:
        # BLAS matrix-vector kernels can round a row differently depending on
        # where it sits in the batch; a row-wise reduction does not
        return (x * w[:, 0]).sum(axis=-1, keepdims=True) + b
    return x @ w + b


def pair_concat(x: np.ndarray) -> np.ndarray:
    """``[..., O, d] -> [..., O, O, 2d]`` with entry ``(o, o')`` = ``concat(x[o], x[o'])``."""
    n = x.shape[-2]
    left = np.broadcast_to(x[..., :, None, :], x.shape[:-1] + (n, x.shape[-1]))
    right = np.broadcast_to(x[..., None, :, :], x.shape[:-1] + (n, x.shape[-1]))
    return np.concatenate([left, right], axis=-1)


def pair_affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine layer applied to :func:`pair_concat` of ``x`` without materialising it."""
    d = x.shape[-1]
    if w.shape[0] != 2 * d or b.shape != (w.shape[1],):
        raise ValueError(
            f"pair affine shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    own = x @ w[:d]
    other = x @ w[d:]
    return own[..., :, None, :] + other[..., None, :, :] + b


def set_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum over ``axis`` whose result does not depend on the order of the entries.

    Sorting first fixes the summation order, so permuting the summed axis
    gives bit-identical output.
    """
    return np.sort(x, axis=axis).sum(axis=axis)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class EvalOps:
    """Plain-array implementation of the primitive set (no gradient tracking)."""

    def __init__(self, params: ParamStore | None = None):
        self.params = params

    def bind(self, params: ParamStore) -> "EvalOps":
        return EvalOps(params)

    def param(self, name: str) -> np.ndarray:
        return self.params[name]

    def const(self, value) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)

    @staticmethod
    def value(x) -> np.ndarray:
        return x

    affine = staticmethod(dense_affine)

    @staticmethod
    def relu(x):
        return np.maximum(x, 0.0)

    tanh = staticmethod(np.tanh)
    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    sigmoid = staticmethod(_sigmoid)
    softplus = staticmethod(_softplus)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def scale(a, c: float):
        return a * c

    @staticmethod
    def square(a):
        return a * a

    @staticmethod
    def sum(a, axis=None):
        return np.sum(a, axis=axis)

    @staticmethod
    def mean(a):
        return np.mean(a)

    @staticmethod
    def concat(parts, axis=-1):
        return np.concatenate(parts, axis=axis)

    @staticmethod
    def slice(a, start: int, stop: int):
        return a[..., start:stop]

    @staticmethod
    def reshape(a, shape):
        return np.reshape(a, shape)

    @staticmethod
    def expand(a, axis: int):
        return np.expand_dims(a, axis)

    @staticmethod
    def masked_sum(a, mask, axis: int):
        return set_sum(a * mask, axis)

    @staticmethod
    def pair_affine(x, w, b):
        return pair_affine(x, w, b)


EVAL = EvalOps()


# --------------------------------------------------------------------------
# Tape


@dataclass(eq=False)
class Node:
    id: int
    value: np.ndarray
    op: str
    inputs: tuple[int, ...]
    fn: Callable | None = None          # forward: (*input values) -> value
    vjp: Callable | None = None         # backward: (grad_out, *input values) -> tuple of grads
    param: str | None = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records primitives in topological order and differentiates them in reverse."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    # ---- leaves
    def _push(self, value, op, inputs=(), fn=None, vjp=None, param=None) -> Node:
        node = Node(len(self.nodes), value, op, tuple(n.id for n in inputs), fn, vjp, param)
        self.nodes.append(node)
        return node

    def param(self, name: str) -> Node:
        node = self._param_nodes.get(name)
        if node is None:
            node = self._push(self.params[name].copy(), "param", param=name)
            self._param_nodes[name] = node
        return node

    def const(self, value) -> Node:
        return self._push(np.asarray(value, dtype=np.float64), "const")

    @staticmethod
    def value(x) -> np.ndarray:
        return x.value if isinstance(x, Node) else x

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    def _op(self, op, inputs, fn, vjp) -> Node:
        inputs = [self._lift(x) for x in inputs]
        value = fn(*(n.value for n in inputs))
        return self._push(value, op, inputs, fn, vjp)

    # ---- primitives
    def affine(self, x, w, b) -> Node:
        def vjp(g, xv, wv, bv):
            gx = g @ wv.T
            gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return gx, gw, gb

        return self._op("affine", (x, w, b), dense_affine, vjp)

    def relu(self, x) -> Node:
        return self._op("relu", (x,), EvalOps.relu, lambda g, xv: (g * (xv > 0),))

    def tanh(self, x) -> Node:
        def vjp(g, xv):
            t = np.tanh(xv)
            return (g * (1.0 - t * t),)

        return self._op("tanh", (x,), np.tanh, vjp)

    def sigmoid(self, x) -> Node:
        def vjp(g, xv):
            s = _sigmoid(xv)
            return (g * s * (1.0 - s),)

        return self._op("sigmoid", (x,), _sigmoid, vjp)

    def softplus(self, x) -> Node:
        return self._op("softplus", (x,), _softplus, lambda g, xv: (g * _sigmoid(xv),))

    def exp(self, x) -> Node:
        return self._op("exp", (x,), np.exp, lambda g, xv: (g * np.exp(xv),))

    def log(self, x) -> Node:
        return self._op("log", (x,), np.log, lambda g, xv: (g / xv,))

    def add(self, a, b) -> Node:
        return self._op(
            "add", (a, b), np.add,
            lambda g, av, bv: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
        )

    def sub(self, a, b) -> Node:
        return self._op(
            "sub", (a, b), np.subtract,
            lambda g, av, bv: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)),
        )

    def mul(self, a, b) -> Node:
        return self._op(
            "mul", (a, b), np.multiply,
            lambda g, av, bv: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a, c: float) -> Node:
        c = float(c)
        return self._op("scale", (a,), lambda av: av * c, lambda g, av: (g * c,))

    def square(self, a) -> Node:
        return self._op("square", (a,), lambda av: av * av, lambda g, av: (2.0 * g * av,))

    def sum(self, a, axis=None) -> Node:
        def vjp(g, av):
            if axis is None:
                return (np.broadcast_to(g, av.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

        return self._op("sum", (a,), lambda av: np.sum(av, axis=axis), vjp)

    def mean(self, a) -> Node:
        def vjp(g, av):
            return (np.full(av.shape, g / av.size),)

        return self._op("mean", (a,), np.mean, vjp)

    def concat(self, parts, axis=-1) -> Node:
        parts = [self._lift(p) for p in parts]
        sizes = [p.value.shape[axis] for p in parts]
        bounds = np.cumsum([0] + sizes)

        def fn(*vals):
            return np.concatenate(vals, axis=axis)

        def vjp(g, *vals):
            out = []
            for lo, hi in zip(bounds[:-1], bounds[1:]):
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                out.append(g[tuple(index)])
            return tuple(out)

        return self._op("concat", parts, fn, vjp)

    def slice(self, a, start: int, stop: int) -> Node:
        def vjp(g, av):
            out = np.zeros_like(av)
            out[..., start:stop] = g
            return (out,)

        return self._op("slice", (a,), lambda av: av[..., start:stop], vjp)

    def reshape(self, a, shape) -> Node:
        return self._op(
            "reshape", (a,), lambda av: np.reshape(av, shape),
            lambda g, av: (np.reshape(g, av.shape),),
        )

    def expand(self, a, axis: int) -> Node:
        return self._op(
            "expand", (a,), lambda av: np.expand_dims(av, axis),
            lambda g, av: (np.reshape(g, av.shape),),
        )

    def masked_sum(self, a, mask, axis: int) -> Node:
        mask = np.asarray(mask, dtype=np.float64)

        def vjp(g, av):
            return (np.broadcast_to(np.expand_dims(g, axis) * mask, av.shape).copy(),)

        return self._op("masked_sum", (a,), lambda av: set_sum(av * mask, axis), vjp)

    def pair_affine(self, x, w, b) -> Node:
        def vjp(g, xv, wv, bv):
            d = xv.shape[-1]
            g_own = g.sum(axis=-2)
            g_other = g.sum(axis=-3)
            gx = g_own @ wv[:d].T + g_other @ wv[d:].T
            flat_x = xv.reshape(-1, d)
            gw = np.concatenate([
                flat_x.T @ g_own.reshape(-1, g.shape[-1]),
                flat_x.T @ g_other.reshape(-1, g.shape[-1]),
            ])
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return gx, gw, gb

        return self._op("pair_affine", (x, w, b), pair_affine, vjp)

    # ---- differentiation
    def backprop(self, loss: Node) -> np.ndarray:
        """Gradient of scalar ``loss`` w.r.t. every parameter, aligned to the flat index."""
        if loss.value.size != 1:
            raise ValueError(f"loss node must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        out = np.zeros(self.params.size, dtype=np.float64)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.param is not None:
                start, stop = self.params.span(node.param)
                out[start:stop] += g.ravel()
                continue
            if node.vjp is None:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            for i, gi in zip(node.inputs, node.vjp(g, *vals)):
                if self.nodes[i].op == "const":
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return out

    def replay(self) -> bool:
        """Re-run every recorded primitive and check the outputs match bit for bit."""
        for node in self.nodes:
            if node.fn is None:
                continue
            again = node.fn(*(self.nodes[i].value for i in node.inputs))
            if not np.array_equal(again, node.value):
                return False
        return True


# --------------------------------------------------------------------------
# Optimisation


def lr_schedule(step: int) -> float:
    """2e-3 * exp(-0.04 * step)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return 2e-3 * math.exp(-40e-3 * step)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls(np.zeros(params.size), np.zeros(params.size), 0)


def adam_update(
    params: ParamStore,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam step, applied in place; returns ``(params, state)``."""
    if grads.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ValueError(
            f"gradient/moment length mismatch: params {params.size}, "
            f"grads {grads.shape}, moments {state.m.shape}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise FloatingPointError(f"non-finite gradient in block {params.block_of(bad)!r}")
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grads
    state.v *= beta2
    state.v += (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# --------------------------------------------------------------------------
# Checkpoint file ("STVP")

_MAGIC = b"STVP"
_VERSION = 1


def save_params(params: ParamStore, path: str | Path) -> None:
    chunks = [_MAGIC, struct.pack("<HQ", _VERSION, len(params.names))]
    for name, block in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", block.ndim))
        chunks.append(struct.pack(f"<{block.ndim}Q", *block.shape))
        chunks.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamStore:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<HQ", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<HQ")
    blocks = []
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        blocks.append((name, tuple(dims), arr))
    params = ParamStore([(name, dims) for name, dims, _ in blocks])
    for name, _, arr in blocks:
        params[name] = arr
    return params
