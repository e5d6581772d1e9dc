"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records primitive operations in creation order, which is a
topological order by construction. :func:`backward` walks the record in
reverse and accumulates gradients into a :class:`ParamVector` with the same
layout as the parameters that were read onto the tape.

Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamVector:
    """Flat float64 buffer plus an ordered ``(name, shape)`` layout."""

    values: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]
    _offsets: dict[str, tuple[int, int, tuple[int, ...]]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("ParamVector values must be one-dimensional")
        self.layout = [(str(n), tuple(int(d) for d in s)) for n, s in self.layout]
        offsets = {}
        pos = 0
        for name, shape in self.layout:
            if name in offsets:
                raise ValueError(f"duplicate parameter segment {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            offsets[name] = (pos, pos + size, shape)
            pos += size
        if pos != self.values.size:
            raise ShapeError(
                f"layout describes {pos} values but buffer holds {self.values.size}"
            )
        self._offsets = offsets

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        layout = [(k, np.shape(v)) for k, v in arrays.items()]
        flat = [np.asarray(v, dtype=np.float64).ravel() for v in arrays.values()]
        values = np.concatenate(flat) if flat else np.zeros(0)
        return cls(values, layout)

    @classmethod
    def zeros(cls, layout: Sequence[tuple[str, tuple[int, ...]]]) -> "ParamVector":
        size = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
        return cls(np.zeros(size), list(layout))

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def segment(self, name: str) -> np.ndarray:
        """Writable view of one named segment, in its declared shape."""
        start, stop, shape = self._offsets[name]
        return self.values[start:stop].reshape(shape)

    def span(self, name: str) -> tuple[int, int]:
        start, stop, _ = self._offsets[name]
        return start, stop

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.layout))

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), list(self.layout))

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), list(self.layout))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


# ---------------------------------------------------------------------------
# recording


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Node:
    """Handle to one recorded value. Supports ``+ - * @``, unary ``-`` and indexing."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        op = self.tape.ops[self.index]
        return f"Node(#{self.index} {op}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.tape.mul(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __getitem__(self, key):
        return self.tape.take(self, key)

    def sum(self, axis=None):
        return self.tape.sum(self, axis)

    def mean(self, axis=None):
        return self.tape.mean(self, axis)


VJP = Callable[[np.ndarray], tuple]


class Tape:
    """Append-only computation record.

    Each entry is ``(op, operand indices, value, vjp)``; operands always precede
    the node that consumes them. A finished tape is never mutated by
    :func:`backward`, so it can be differentiated more than once.
    """

    def __init__(self) -> None:
        self.ops: list[str] = []
        self.operands: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.vjps: list[VJP | None] = []
        # parameter-read nodes: node index -> (source ParamVector id, segment name)
        self.reads: dict[int, tuple[int, str]] = {}
        self.sources: dict[int, ParamVector] = {}

    def __len__(self) -> int:
        return len(self.ops)

    def _record(self, op: str, operands: tuple[Node, ...], value, vjp: VJP | None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        for o in operands:
            if o.tape is not self:
                raise ValueError("operand belongs to a different tape")
        idx = len(self.ops)
        self.ops.append(op)
        self.operands.append(tuple(o.index for o in operands))
        self.values.append(value)
        self.vjps.append(vjp)
        return Node(self, idx, value)

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            return x
        return self.constant(x)

    # -- leaves ------------------------------------------------------------

    def constant(self, value) -> Node:
        return self._record("constant", (), np.array(value, dtype=np.float64), None)

    def watch(self, params: ParamVector) -> dict[str, Node]:
        """Read every segment of ``params`` onto the tape as differentiable leaves."""
        self.sources[id(params)] = params
        nodes = {}
        for name in params.names:
            node = self._record("param", (), params.segment(name), None)
            self.reads[node.index] = (id(params), name)
            nodes[name] = node
        return nodes

    def frozen(self, params: ParamVector) -> dict[str, Node]:
        """Read ``params`` as constants; they never receive gradient."""
        return {name: self.constant(params.segment(name)) for name in params.names}

    # -- elementwise -------------------------------------------------------

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._record(
            "add", (a, b), a.value + b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._record(
            "add", (a, b), a.value - b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def neg(self, a: Node) -> Node:
        return self._record("mul", (a,), -a.value, lambda g: (-g,))

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        va, vb = a.value, b.value
        return self._record(
            "mul", (a, b), va * vb,
            lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
        )

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._record("relu", (a,), a.value * mask, lambda g: (g * mask,))

    def sigmoid(self, a: Node) -> Node:
        y = _sigmoid(a.value)
        return self._record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))

    def log_sigmoid(self, a: Node) -> Node:
        x = a.value
        return self._record(
            "log-sigmoid", (a,), -_softplus(-x), lambda g: (g * _sigmoid(-x),)
        )

    def softplus(self, a: Node) -> Node:
        """``log(1 + exp(x))``; recorded as a negated log-sigmoid of ``-x``."""
        return self.neg(self.log_sigmoid(self.neg(a)))

    def exp(self, a: Node) -> Node:
        y = np.exp(a.value)
        return self._record("exp", (a,), y, lambda g: (g * y,))

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        va, vb = a.value, b.value
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul of {va.shape} and {vb.shape}")
        return self._record(
            "matmul", (a, b), va @ vb, lambda g: (g @ vb.T, va.T @ g)
        )

    def affine(self, x: Node, w: Node, b: Node) -> Node:
        """``x @ w + b`` for a batch ``x`` of shape (n, d_in)."""
        vx, vw = x.value, w.value
        if vx.ndim != 2 or vw.ndim != 2 or vx.shape[1] != vw.shape[0]:
            raise ShapeError(f"affine input {vx.shape} against weights {vw.shape}")
        if b.shape != (vw.shape[1],):
            raise ShapeError(f"bias {b.shape} does not match weights {vw.shape}")
        return self._record(
            "affine", (x, w, b), vx @ vw + b.value,
            lambda g: (g @ vw.T, vx.T @ g, g.sum(axis=0)),
        )

    # -- reductions --------------------------------------------------------

    def sum(self, a: Node, axis=None) -> Node:
        shape = a.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._record("sum", (a,), a.value.sum(axis=axis), vjp)

    def mean(self, a: Node, axis=None) -> Node:
        shape = a.shape
        count = a.value.size if axis is None else shape[axis]

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

        return self._record("mean", (a,), a.value.mean(axis=axis), vjp)

    def sum_of_squares(self, a: Node, axis=None) -> Node:
        v = a.value

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (2.0 * v * g,)

        return self._record("sum-of-squares", (a,), (v * v).sum(axis=axis), vjp)

    def max(self, a: Node, axis: int = -1) -> Node:
        """Max along ``axis``; the gradient goes to the first maximiser."""
        v = a.value
        arg = np.argmax(v, axis=axis)
        out = np.take_along_axis(v, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

        def vjp(g):
            grad = np.zeros_like(v)
            np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
            return (grad,)

        return self._record("max", (a,), out, vjp)

    def softmax(self, a: Node, axis: int = -1) -> Node:
        v = a.value
        z = np.exp(v - v.max(axis=axis, keepdims=True))
        y = z / z.sum(axis=axis, keepdims=True)

        def vjp(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return self._record("softmax", (a,), y, vjp)

    def cosine_similarity(self, a: Node, b: Node) -> Node:
        """Pairwise cosine between rows of ``a`` (n, d) and rows of ``b`` (m, d).

        A zero-norm row yields cosine 0 against everything and no gradient.
        """
        va, vb = a.value, b.value
        if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[1]:
            raise ShapeError(f"cosine of {va.shape} against {vb.shape}")
        na = np.linalg.norm(va, axis=1)
        nb = np.linalg.norm(vb, axis=1)
        ia = np.divide(1.0, na, out=np.zeros_like(na), where=na > 0)
        ib = np.divide(1.0, nb, out=np.zeros_like(nb), where=nb > 0)
        ua, ub = va * ia[:, None], vb * ib[:, None]
        cos = ua @ ub.T

        def vjp(g):
            # d cos / d a_i = (u_b - cos * u_a) / |a_i|
            ga = (g @ ub - (g * cos).sum(axis=1, keepdims=True) * ua) * ia[:, None]
            gb = (g.T @ ua - (g * cos).sum(axis=0)[:, None] * ub) * ib[:, None]
            return ga, gb

        return self._record("cosine-similarity", (a, b), cos, vjp)

    # -- structure ---------------------------------------------------------

    def concat(self, parts: Iterable, axis: int = -1) -> Node:
        nodes = tuple(self._lift(p) for p in parts)
        sizes = [n.shape[axis] for n in nodes]
        cuts = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, cuts, axis=axis))

        return self._record(
            "concat", nodes, np.concatenate([n.value for n in nodes], axis=axis), vjp
        )

    def take(self, a: Node, key) -> Node:
        shape = a.shape

        def vjp(g):
            grad = np.zeros(shape)
            np.add.at(grad, key, g)
            return (grad,)

        return self._record("index", (a,), a.value[key], vjp)

    def reshape(self, a: Node, shape) -> Node:
        old = a.shape
        return self._record(
            "reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),)
        )


def backward(tape: Tape, loss: Node, params: ParamVector | None = None) -> ParamVector:
    """Gradient of the scalar ``loss`` with respect to every watched segment.

    ``params`` selects which watched ParamVector to report on; it may be
    omitted when exactly one was watched. Segments that do not influence the
    loss get exact zeros.
    """
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if params is None:
        if len(tape.sources) != 1:
            raise ValueError("specify which watched ParamVector to differentiate")
        params = next(iter(tape.sources.values()))
    target = id(params)

    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    out = params.zeros_like()
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        read = tape.reads.get(i)
        if read is not None:
            if read[0] == target:
                start, stop = out.span(read[1])
                out.values[start:stop] += g.ravel()
            continue
        vjp = tape.vjps[i]
        if vjp is None:
            continue
        for j, gj in zip(tape.operands[i], vjp(g)):
            if grads[j] is None:
                grads[j] = np.array(gj, dtype=np.float64)
            else:
                grads[j] = grads[j] + gj
    return out


# ---------------------------------------------------------------------------
# feed-forward networks


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def layout(self, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
        out = []
        dims = self.dims
        for i in range(len(dims) - 1):
            out.append((f"{prefix}{i}.W", (dims[i], dims[i + 1])))
            out.append((f"{prefix}{i}.b", (dims[i + 1],)))
        return out

    def num_params(self) -> int:
        d = self.dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    arrays = {}
    for name, shape in spec.layout(prefix):
        fan_in = spec.dims[int(name[len(prefix):].split(".")[0])]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return arrays


def mlp_graph(tape: Tape, spec: MlpSpec, nodes: dict[str, Node], x: Node, prefix: str = "") -> Node:
    """Record an MLP applied to a batch ``x`` of shape (n, input_dim)."""
    if x.value.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"MLP expects (n, {spec.input_dim}) input, got {x.shape}")
    act = tape.tanh if spec.activation == "tanh" else tape.relu
    h = x
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        h = tape.affine(h, nodes[f"{prefix}{i}.W"], nodes[f"{prefix}{i}.b"])
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_forward(spec: MlpSpec, params: ParamVector, x, prefix: str = "") -> np.ndarray:
    """Evaluate the MLP without recording; accepts a single vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"MLP expects input dim {spec.input_dim}, got shape {x.shape}")
    expected = dict(spec.layout(prefix))
    for name, shape in expected.items():
        if name not in params._offsets or params._offsets[name][2] != shape:
            raise ShapeError(f"parameter {name!r} missing or not shaped {shape}")
    h = x
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        h = h @ params.segment(f"{prefix}{i}.W") + params.segment(f"{prefix}{i}.b")
        if i < n_layers - 1:
            h = np.tanh(h) if spec.activation == "tanh" else np.maximum(h, 0.0)
    return h[0] if single else h


# ---------------------------------------------------------------------------
# verification


LossBuilder = Callable[[Tape, dict[str, Node]], Node]


def value_and_grad(loss_fn: LossBuilder, params: ParamVector) -> tuple[float, ParamVector]:
    tape = Tape()
    loss = loss_fn(tape, tape.watch(params))
    return float(loss.value), backward(tape, loss, params)


def finite_diff_check(
    loss_fn: LossBuilder,
    params: ParamVector,
    step: float = 1e-5,
    components: Sequence[int] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn(tape, nodes)`` must build a scalar loss from the watched
    parameter nodes. The error per component is
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    _, grad = value_and_grad(loss_fn, params)
    if components is None:
        components = range(len(params))

    def evaluate(values: np.ndarray) -> float:
        tape = Tape()
        probe = params.with_values(values)
        return float(loss_fn(tape, tape.watch(probe)).value)

    worst = 0.0
    base = params.values
    for i in components:
        hi = base.copy()
        lo = base.copy()
        hi[i] += step
        lo[i] -= step
        f_hi, f_lo = evaluate(hi), evaluate(lo)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise FloatingPointError(f"non-finite loss while probing component {i}")
        numeric = (f_hi - f_lo) / (2.0 * step)
        analytic = grad.values[i]
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
