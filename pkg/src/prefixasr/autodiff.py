"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: a ``Tape`` records every differentiable operation as it
executes and ``backward`` replays the record in reverse. There is no
broadcasting anywhere; every operation checks its exact shape contract and
raises ``ShapeError`` otherwise, which trades a little convenience for the
elimination of silent shape bugs.

All arithmetic is 64-bit. Normalizing operations (softmax, log_softmax,
logsumexp) subtract the per-slice maximum before exponentiating.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A dense float64 array plus grad bookkeeping flags.

    ``requires_grad`` marks leaves whose gradient is wanted; it propagates
    to operation outputs so backward knows which paths carry gradient.
    ``name`` identifies parameter leaves in the map returned by backward.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def _shapes(*tensors: Tensor) -> str:
    return " and ".join(str(t.data.shape) for t in tensors)


class _Node:
    __slots__ = ("name", "inputs", "out", "backward")

    def __init__(self, name, inputs, out, backward):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of operations; confined to one logical thread."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record_op(self, name: str, inputs: list[Tensor], out_data: np.ndarray, backward) -> Tensor:
        """Create the output tensor of an operation and record its backward rule.

        ``backward(g)`` must return one gradient array (or None) per input,
        in input order. Operations whose inputs carry no gradient are not
        recorded; their output is a plain constant.
        """
        requires = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=requires)
        if requires:
            self._nodes.append(_Node(name, list(inputs), out, backward))
        return out

    # ---- arithmetic -------------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add: shapes {_shapes(a, b)}")
        return self.record_op("add", [a, b], a.data + b.data, lambda g: (g, g))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul: shapes {_shapes(a, b)}")
        ad, bd = a.data, b.data
        return self.record_op("mul", [a, b], ad * bd, lambda g: (g * bd, g * ad))

    def scale(self, x: Tensor, c: float) -> Tensor:
        c = float(c)
        return self.record_op("scale", [x], x.data * c, lambda g: (g * c,))

    def add_last(self, x: Tensor, v: Tensor) -> Tensor:
        """Add vector ``v`` along the last axis of ``x`` (explicit bias add)."""
        if x.data.ndim < 1 or v.data.shape != x.data.shape[-1:]:
            raise ShapeError(f"add_last: shapes {_shapes(x, v)}")
        axes = tuple(range(x.data.ndim - 1))
        return self.record_op("add_last", [x, v], x.data + v.data,
                              lambda g: (g, g.sum(axis=axes) if axes else g.copy()))

    def mul_last(self, x: Tensor, v: Tensor) -> Tensor:
        """Multiply ``x`` by vector ``v`` along its last axis (explicit gain)."""
        if x.data.ndim < 1 or v.data.shape != x.data.shape[-1:]:
            raise ShapeError(f"mul_last: shapes {_shapes(x, v)}")
        xd, vd = x.data, v.data
        axes = tuple(range(x.data.ndim - 1))
        return self.record_op("mul_last", [x, v], xd * vd,
                              lambda g: (g * vd, (g * xd).sum(axis=axes) if axes else g * xd))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: shapes {_shapes(a, b)}")
        ad, bd = a.data, b.data
        return self.record_op("matmul", [a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))

    def outer_add(self, a: Tensor, b: Tensor) -> Tensor:
        """[T,J] + [U,J] -> [T,U,J]; every pair of rows summed."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
            raise ShapeError(f"outer_add: shapes {_shapes(a, b)}")
        out = a.data[:, None, :] + b.data[None, :, :]
        return self.record_op("outer_add", [a, b], out, lambda g: (g.sum(axis=1), g.sum(axis=0)))

    # ---- structure --------------------------------------------------------

    def transpose(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2:
            raise ShapeError(f"transpose: shape {x.data.shape}")
        return self.record_op("transpose", [x], x.data.T.copy(), lambda g: (g.T,))

    def reshape(self, x: Tensor, shape) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != x.data.size:
            raise ShapeError(f"reshape: {x.data.shape} to {shape}")
        old = x.data.shape
        return self.record_op("reshape", [x], x.data.reshape(shape), lambda g: (g.reshape(old),))

    def concat(self, xs: list[Tensor], axis: int = 0) -> Tensor:
        if not xs:
            raise ShapeError("concat: empty input list")
        nd = xs[0].data.ndim
        for x in xs[1:]:
            if x.data.ndim != nd:
                raise ShapeError(f"concat: shapes {_shapes(*xs)}")
            for ax in range(nd):
                if ax != axis % nd and x.data.shape[ax] != xs[0].data.shape[ax]:
                    raise ShapeError(f"concat: shapes {_shapes(*xs)}")
        sizes = [x.data.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        out = np.concatenate([x.data for x in xs], axis=axis)
        return self.record_op("concat", list(xs), out,
                              lambda g: tuple(np.split(g, splits, axis=axis)))

    def slice(self, x: Tensor, key: tuple) -> Tensor:
        """Slice with a tuple of python ``slice`` objects, one per axis."""
        if len(key) != x.data.ndim or not all(isinstance(k, type(np.s_[0:1])) for k in key):
            raise ShapeError(f"slice: key {key} on shape {x.data.shape}")
        shape = x.data.shape

        def bwd(g):
            gx = np.zeros(shape)
            gx[key] = g
            return (gx,)

        return self.record_op("slice", [x], x.data[key].copy(), bwd)

    def rows(self, x: Tensor, start: int, stop: int) -> Tensor:
        key = (np.s_[start:stop],) + tuple(np.s_[:] for _ in range(x.data.ndim - 1))
        return self.slice(x, key)

    def embedding_gather(self, table: Tensor, indices) -> Tensor:
        """Gather rows of a 2-D table; backward scatter-adds into those rows."""
        if table.data.ndim != 2:
            raise ShapeError(f"embedding_gather: table shape {table.data.shape}")
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError(f"embedding_gather: indices shape {idx.shape}")
        n = table.data.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError(f"embedding_gather: index out of range for table with {n} rows")
        shape = table.data.shape

        def bwd(g):
            gt = np.zeros(shape)
            np.add.at(gt, idx, g)
            return (gt,)

        return self.record_op("embedding_gather", [table], table.data[idx].copy(), bwd)

    def pick_per_row(self, x: Tensor, cols) -> Tensor:
        """out[i] = x[i, cols[i]]; backward scatters into the picked cells."""
        idx = np.asarray(cols, dtype=np.int64)
        if x.data.ndim != 2 or idx.ndim != 1 or idx.size != x.data.shape[0]:
            raise ShapeError(f"pick_per_row: shape {x.data.shape}, cols {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
            raise ShapeError(f"pick_per_row: column out of range for {x.data.shape}")
        n, shape = idx.size, x.data.shape

        def bwd(g):
            gx = np.zeros(shape)
            gx[np.arange(n), idx] = g
            return (gx,)

        return self.record_op("pick_per_row", [x], x.data[np.arange(n), idx].copy(), bwd)

    # ---- nonlinearities and reductions ------------------------------------

    def gelu(self, x: Tensor) -> Tensor:
        xd = x.data
        phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
        out = xd * phi
        dens = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return self.record_op("gelu", [x], out, lambda g: (g * (phi + xd * dens),))

    def tanh(self, x: Tensor) -> Tensor:
        t = np.tanh(x.data)
        return self.record_op("tanh", [x], t, lambda g: (g * (1.0 - t * t),))

    def softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        return self.record_op("softmax", [x], s,
                              lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))

    def log_softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        m = x.data.max(axis=axis, keepdims=True)
        z = x.data - m
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True)) + m
        out = x.data - lse
        sm = np.exp(out)
        return self.record_op("log_softmax", [x], out,
                              lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))

    def logsumexp(self, x: Tensor, axis: int = -1) -> Tensor:
        m = x.data.max(axis=axis, keepdims=True)
        e = np.exp(x.data - m)
        s = e.sum(axis=axis, keepdims=True)
        out = (np.log(s) + m).squeeze(axis=axis)
        sm = e / s

        def bwd(g):
            return (np.expand_dims(g, axis) * sm,)

        return self.record_op("logsumexp", [x], out, bwd)

    def layer_norm(self, x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
        mu = x.data.mean(axis=axis, keepdims=True)
        var = x.data.var(axis=axis, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        y = (x.data - mu) * inv

        def bwd(g):
            gm = g.mean(axis=axis, keepdims=True)
            gym = (g * y).mean(axis=axis, keepdims=True)
            return (inv * (g - gm - y * gym),)

        return self.record_op("layer_norm", [x], y, bwd)

    def reduce_sum(self, x: Tensor) -> Tensor:
        shape = x.data.shape
        return self.record_op("reduce_sum", [x], np.asarray(x.data.sum()),
                              lambda g: (np.full(shape, float(g)),))


def backward(tape: Tape, loss: Tensor, params=None) -> dict[str, Tensor]:
    """Accumulate gradients of a scalar loss over the tape, newest node first.

    Returns a map from leaf name to gradient for every named requires_grad
    leaf encountered on the tape. ``params`` (a name -> Tensor mapping) may
    add parameters that never reached the tape; those get exact zeros, as do
    recorded leaves the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced: set[int] = set()
    leaves: dict[int, Tensor] = {}
    for node in tape._nodes:
        produced.add(id(node.out))
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced and inp.name is not None:
                leaves[key] = inp
    # Also register named requires_grad leaves whose gradient never arrived.
    for node in tape._nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.name is not None and id(inp) not in produced:
                leaves.setdefault(id(inp), inp)
    out: dict[str, Tensor] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        out[leaf.name] = Tensor(g if g is not None else np.zeros_like(leaf.data))
    if params is not None:
        for name, p in params.items():
            if name not in out:
                out[name] = Tensor(np.zeros_like(p.data))
    return out


def finite_difference_check(loss_fn, params: dict[str, Tensor], step: float = 1e-6,
                            order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the computation from scratch on a fresh tape,
    reading the live ``params`` tensors, and return ``(tape, loss)``. It is
    called twice up front; disagreement means it is not deterministic and is
    rejected.

    ``order`` picks the central scheme: 2 for the classic two-point stencil,
    4 for the five-point one, which tolerates a larger step and therefore a
    lower roundoff floor on small-gradient entries.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    if order not in (2, 4):
        raise ValueError("finite_difference_check: order must be 2 or 4")
    tape, loss = loss_fn()
    _, loss2 = loss_fn()
    if float(loss.data) != float(loss2.data):
        raise ValueError("finite_difference_check: loss_fn is not deterministic")
    analytic = backward(tape, loss, params=params)

    def evaluate(flat, i, delta):
        orig = flat[i]
        flat[i] = orig + delta
        val = float(loss_fn()[1].data)
        flat[i] = orig
        return val

    worst = 0.0
    for name, p in params.items():
        ga = analytic[name].data.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            if order == 2:
                numeric = (evaluate(flat, i, step) - evaluate(flat, i, -step)) / (2.0 * step)
            else:
                numeric = (8.0 * (evaluate(flat, i, step) - evaluate(flat, i, -step))
                           - (evaluate(flat, i, 2 * step) - evaluate(flat, i, -2 * step))
                           ) / (12.0 * step)
            err = abs(ga[i] - numeric) / max(1e-12, abs(ga[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
