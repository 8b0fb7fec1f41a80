"""Minimal reverse-mode differentiation over static numpy graphs.

A :class:`Graph` is built once from named input slots, :class:`Parameter`
leaves and primitive ops, then evaluated any number of times with
:func:`evaluate` or differentiated with :func:`gradient`.  Leading (batch)
dimensions are free; shapes are checked per node at evaluation time.

Example::

    g = Graph()
    x = g.input("x", (None, 2))
    w = Parameter("w", np.eye(2))
    g.output("y", g.reduce_sum(g.square(g.matmul(x, g.param(w)))))
    grads = gradient(g, {"x": np.ones((3, 2))})
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Iterable, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.1


def default_dtype() -> np.dtype:
    """Working precision: ``MMFC_PRECISION`` = f32 (default) or f64."""
    prec = os.environ.get("MMFC_PRECISION", "f32").lower()
    if prec in ("f64", "float64", "64"):
        return np.dtype(np.float64)
    if prec in ("f32", "float32", "32"):
        return np.dtype(np.float32)
    raise ValueError(f"MMFC_PRECISION must be f32 or f64, got {prec!r}")


class GraphError(ValueError):
    """Malformed graph or evaluation request."""


class ShapeError(GraphError):
    def __init__(self, node: str, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.node = node
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"shape mismatch at node {node!r} ({op}): input shapes {self.shapes}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NonFiniteError(GraphError):
    def __init__(self, node: str, op: str):
        self.node = node
        self.op = op
        super().__init__(f"non-finite value produced at node {node!r} ({op})")


class ConfigError(ValueError):
    """Invalid optimizer or training configuration."""


@dataclass(eq=False)
class Parameter:
    name: str
    tensor: np.ndarray
    grad: np.ndarray | None = None
    lr_scale: float = 1.0  # multiplies the optimizer step size for this tensor
    # Adam moments, persisted per parameter
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor)
        if self.tensor.dtype.kind != "f":
            self.tensor = self.tensor.astype(default_dtype())
        if self.grad is None:
            self.grad = np.zeros_like(self.tensor)
        if self.grad.shape != self.tensor.shape:
            raise ShapeError(self.name, "parameter", [self.tensor.shape, self.grad.shape])

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.tensor)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype or default_dtype())


# --------------------------------------------------------------------------
# primitive ops: name -> (forward(attrs, *vals), backward(attrs, g, out, *vals))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def _bin_likelihood(y, mu, s):
    # mass of Logistic(mu, s) on [y - 1/2, y + 1/2]; evaluated on the side of
    # the median that avoids cancellation
    v = y - mu
    sign = np.where(v > 0, -1.0, 1.0).astype(v.dtype)
    upper = _sigmoid(sign * (v + 0.5) / s)
    lower = _sigmoid(sign * (v - 0.5) / s)
    return np.abs(upper - lower)


def _dlogistic(t):
    st = _sigmoid(t)
    return st * (1.0 - st)


def _matmul_fwd(a, x, w):
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError("inner dimensions differ")
    return x @ w


def _matmul_bwd(a, g, out, x, w):
    gx = g @ w.T
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return gx, gw


def _bin_lik_bwd(a, g, out, y, mu, s):
    ta = (y - mu + 0.5) / s
    tb = (y - mu - 0.5) / s
    da, db = _dlogistic(ta), _dlogistic(tb)
    gy = g * (da - db) / s
    gs = -g * (da * ta - db * tb) / s
    return _unbroadcast(gy, y.shape), _unbroadcast(-gy, mu.shape), _unbroadcast(gs, s.shape)


def _reduce_bwd(g, shape, axis, keepdims, scale=1.0):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g * scale, shape).copy(),)


def _mean_scale(shape, axis):
    if axis is None:
        return 1.0 / max(1, int(np.prod(shape)))
    axes = (axis,) if isinstance(axis, int) else axis
    return 1.0 / int(np.prod([shape[a] for a in axes]))


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (lambda a, x, y: x + y,
            lambda a, g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))),
    "sub": (lambda a, x, y: x - y,
            lambda a, g, o, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))),
    "mul": (lambda a, x, y: x * y,
            lambda a, g, o, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))),
    "scale": (lambda a, x: x * a["c"], lambda a, g, o, x: (g * a["c"],)),
    "neg": (lambda a, x: -x, lambda a, g, o, x: (-g,)),
    "leaky_relu": (lambda a, x: np.where(x > 0, x, x * a["slope"]),
                   lambda a, g, o, x: (np.where(x > 0, g, g * a["slope"]),)),
    "tanh": (lambda a, x: np.tanh(x), lambda a, g, o, x: (g * (1.0 - o * o),)),
    "sigmoid": (lambda a, x: _sigmoid(x), lambda a, g, o, x: (g * o * (1.0 - o),)),
    "softplus": (lambda a, x: _softplus(x), lambda a, g, o, x: (g * _sigmoid(x),)),
    "exp": (lambda a, x: np.exp(x), lambda a, g, o, x: (g * o,)),
    "log": (lambda a, x: np.log(x), lambda a, g, o, x: (g / x,)),
    "square": (lambda a, x: x * x, lambda a, g, o, x: (2.0 * g * x,)),
    "maximum": (lambda a, x: np.maximum(x, a["floor"]),
                lambda a, g, o, x: (np.where(x >= a["floor"], g, 0.0),)),
    "concat": (lambda a, x, y: np.concatenate((x, y), axis=-1),
               lambda a, g, o, x, y: (g[..., : x.shape[-1]], g[..., x.shape[-1]:])),
    "slice": (lambda a, x: x[..., a["start"]:a["stop"]],
              lambda a, g, o, x: (_slice_bwd(g, x, a),)),
    "reshape": (lambda a, x: x.reshape(a["shape"]), lambda a, g, o, x: (g.reshape(x.shape),)),
    "reduce_sum": (lambda a, x: np.sum(x, axis=a["axis"], keepdims=a["keepdims"]),
                   lambda a, g, o, x: _reduce_bwd(g, x.shape, a["axis"], a["keepdims"])),
    "reduce_mean": (lambda a, x: np.mean(x, axis=a["axis"], keepdims=a["keepdims"]),
                    lambda a, g, o, x: _reduce_bwd(g, x.shape, a["axis"], a["keepdims"],
                                                   _mean_scale(x.shape, a["axis"]))),
    "log_softmax": (lambda a, x: _log_softmax(x),
                    lambda a, g, o, x: (g - np.exp(o) * g.sum(axis=-1, keepdims=True),)),
    "bin_likelihood": (lambda a, y, mu, s: _bin_likelihood(y, mu, s), _bin_lik_bwd),
}


def _slice_bwd(g, x, a):
    out = np.zeros_like(x)
    out[..., a["start"]:a["stop"]] = g
    return out


PRIMITIVES = tuple(_OPS)


# --------------------------------------------------------------------------


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "name")

    def __init__(self, graph: "Graph", index: int, op: str, inputs: tuple, attrs: dict, name: str):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name

    def __repr__(self):
        return f"Node({self.name}, op={self.op})"

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, other)
        return self.graph.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.graph.neg(self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))


class Graph:
    """Ordered, acyclic list of nodes.  Creation order is a topological order."""

    def __init__(self, name: str = "graph", dtype=None):
        self.name = name
        self.dtype = np.dtype(dtype) if dtype is not None else default_dtype()
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.input_shapes: dict[str, tuple | None] = {}
        self.outputs: dict[str, Node] = {}
        self._params: dict[int, Node] = {}

    # -- leaves
    def _add(self, op, inputs=(), attrs=None, name=None) -> Node:
        for inp in inputs:
            if not isinstance(inp, Node) or inp.graph is not self:
                raise GraphError(f"{op}: operand does not belong to graph {self.name!r}")
        idx = len(self.nodes)
        node = Node(self, idx, op, tuple(inputs), attrs or {}, name or f"{op}_{idx}")
        self.nodes.append(node)
        return node

    def input(self, name: str, shape: tuple | None = None) -> Node:
        if name in self.inputs:
            raise GraphError(f"duplicate input slot {name!r}")
        node = self._add("input", name=name)
        self.inputs[name] = node
        self.input_shapes[name] = tuple(shape) if shape is not None else None
        return node

    def param(self, p: Parameter) -> Node:
        node = self._params.get(id(p))
        if node is None:
            node = self._add("param", attrs={"param": p}, name=p.name)
            self._params[id(p)] = node
        return node

    def const(self, value) -> Node:
        return self._add("const", attrs={"value": np.asarray(value, dtype=self.dtype)})

    def output(self, name: str, node: Node) -> Node:
        if node.graph is not self:
            raise GraphError("output node belongs to another graph")
        self.outputs[name] = node
        return node

    @property
    def parameters(self) -> list[Parameter]:
        return [n.attrs["param"] for n in self._params.values()]

    # -- ops
    def matmul(self, x, w):
        return self._add("matmul", (x, w))

    def add(self, x, y):
        return self._add("add", (x, y))

    def sub(self, x, y):
        return self._add("sub", (x, y))

    def mul(self, x, y):
        return self._add("mul", (x, y))

    def scale(self, x, c: float):
        return self._add("scale", (x,), {"c": float(c)})

    def neg(self, x):
        return self._add("neg", (x,))

    def leaky_relu(self, x, slope: float = LEAKY_SLOPE):
        return self._add("leaky_relu", (x,), {"slope": float(slope)})

    def tanh(self, x):
        return self._add("tanh", (x,))

    def sigmoid(self, x):
        return self._add("sigmoid", (x,))

    def softplus(self, x):
        return self._add("softplus", (x,))

    def exp(self, x):
        return self._add("exp", (x,))

    def log(self, x):
        return self._add("log", (x,))

    def square(self, x):
        return self._add("square", (x,))

    def maximum(self, x, floor: float):
        """Lower bound; gradient passes only where ``x >= floor``."""
        return self._add("maximum", (x,), {"floor": float(floor)})

    def concat(self, x, y):
        return self._add("concat", (x, y))

    def slice_last(self, x, start: int, stop: int):
        return self._add("slice", (x,), {"start": int(start), "stop": int(stop)})

    def reshape(self, x, shape: tuple):
        return self._add("reshape", (x,), {"shape": tuple(shape)})

    def reduce_sum(self, x, axis=None, keepdims: bool = False):
        return self._add("reduce_sum", (x,), {"axis": axis, "keepdims": keepdims})

    def reduce_mean(self, x, axis=None, keepdims: bool = False):
        return self._add("reduce_mean", (x,), {"axis": axis, "keepdims": keepdims})

    def log_softmax(self, x):
        return self._add("log_softmax", (x,))

    def bin_likelihood(self, y, mu, s):
        """Probability mass of Logistic(mu, s) on the unit bin centred at y."""
        return self._add("bin_likelihood", (y, mu, s))


# --------------------------------------------------------------------------


def _check_input(graph: Graph, name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=graph.dtype)
    want = graph.input_shapes[name]
    if want is not None:
        ok = arr.ndim == len(want) and all(w is None or w == d for w, d in zip(want, arr.shape))
        if not ok:
            raise ShapeError(name, "input", [arr.shape], f"expected {want}")
    return arr


def _forward(graph: Graph, inputs: Mapping[str, np.ndarray], check_finite: bool) -> list:
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise GraphError(f"unbound input slots: {sorted(missing)}")
    vals: list = [None] * len(graph.nodes)
    for node in graph.nodes:
        op = node.op
        if op == "input":
            vals[node.index] = _check_input(graph, node.name, inputs[node.name])
            continue
        if op == "param":
            vals[node.index] = node.attrs["param"].tensor
            continue
        if op == "const":
            vals[node.index] = node.attrs["value"]
            continue
        args = [vals[i.index] for i in node.inputs]
        try:
            with np.errstate(all="ignore"):
                out = _OPS[op][0](node.attrs, *args)
        except ValueError as exc:
            raise ShapeError(node.name, op, [a.shape for a in args], str(exc)) from None
        out = np.asarray(out)
        if check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(node.name, op)
        vals[node.index] = out
    return vals


def evaluate(graph: Graph, inputs: Mapping[str, np.ndarray], check_finite: bool = True) -> dict[str, np.ndarray]:
    """Run the graph forward; returns fresh arrays for every named output."""
    vals = _forward(graph, inputs, check_finite)
    return {name: np.array(vals[n.index], copy=True) for name, n in graph.outputs.items()}


def gradient(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    wrt: Iterable[Parameter | str] | None = None,
    output: str | None = None,
    check_finite: bool = True,
) -> dict[str, np.ndarray]:
    """Reverse-mode derivative of a scalar output.

    ``wrt`` holds Parameters (their ``grad`` is overwritten) and/or input
    slot names; defaults to every parameter in the graph.  Returns a map from
    parameter/input name to gradient, plus ``"__value__"`` with the output and
    ``"__outputs__"`` with every named output of the forward pass.
    """
    if output is None:
        if len(graph.outputs) != 1:
            raise GraphError("graph has several outputs; name the one to differentiate")
        output = next(iter(graph.outputs))
    out_node = graph.outputs[output]
    wrt = list(graph.parameters if wrt is None else wrt)
    targets: dict[int, object] = {}
    for w in wrt:
        if isinstance(w, Parameter):
            node = graph._params.get(id(w))
            if node is not None:
                targets[node.index] = w
        else:
            targets[graph.inputs[w].index] = w

    vals = _forward(graph, inputs, check_finite)
    y = vals[out_node.index]
    if y.size != 1:
        raise GraphError(f"gradient needs a scalar output; {output!r} has shape {y.shape}")

    # nodes on a path from a target to the output
    needs = [False] * len(graph.nodes)
    for node in graph.nodes:
        needs[node.index] = node.index in targets or any(needs[i.index] for i in node.inputs)

    grads: list = [None] * len(graph.nodes)
    grads[out_node.index] = np.ones_like(y)
    for node in reversed(graph.nodes[: out_node.index + 1]):
        g = grads[node.index]
        if g is None or not node.inputs:
            continue
        args = [vals[i.index] for i in node.inputs]
        with np.errstate(all="ignore"):
            in_grads = _OPS[node.op][1](node.attrs, g, vals[node.index], *args)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not needs[inp.index]:
                continue
            prev = grads[inp.index]
            grads[inp.index] = ig if prev is None else prev + ig

    result: dict = {"__value__": y.reshape(()),
                    "__outputs__": {name: vals[n.index] for name, n in graph.outputs.items()}}
    for w in wrt:
        if isinstance(w, Parameter):
            node = graph._params.get(id(w))
            g = grads[node.index] if node is not None else None
            w.grad = np.zeros_like(w.tensor) if g is None else np.asarray(g, dtype=w.tensor.dtype).reshape(w.shape)
            result[w.name] = w.grad
        else:
            idx = graph.inputs[w].index
            g = grads[idx]
            result[w] = np.zeros_like(vals[idx]) if g is None else g
    return result


# --------------------------------------------------------------------------


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    t: int = 1,
) -> None:
    """In-place Adam update with bias correction; ``t`` counts from 1."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if t < 1:
        raise ConfigError(f"Adam step index starts at 1, got {t}")
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        if p.m is None:
            p.m = np.zeros_like(p.tensor)
            p.v = np.zeros_like(p.tensor)
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * g * g
        step = lr * p.lr_scale * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.tensor = (p.tensor - step).astype(p.tensor.dtype, copy=False)


# --------------------------------------------------------------------------
# layers


class Dense:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or default_dtype()
        self.weight = Parameter(f"{name}.weight", glorot_uniform(rng, fan_in, fan_out, dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(fan_out, dtype=dtype))

    @property
    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, g: Graph, x: Node) -> Node:
        return g.matmul(x, g.param(self.weight)) + g.param(self.bias)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.tensor + self.bias.tensor


class MLP:
    """Two dense layers with a leaky-relu in between."""

    def __init__(self, name: str, fan_in: int, hidden: int, fan_out: int, rng, dtype=None):
        self.l1 = Dense(f"{name}.l1", fan_in, hidden, rng, dtype)
        self.l2 = Dense(f"{name}.l2", hidden, fan_out, rng, dtype)

    @property
    def params(self) -> list[Parameter]:
        return self.l1.params + self.l2.params

    def __call__(self, g: Graph, x: Node) -> Node:
        return self.l2(g, g.leaky_relu(self.l1(g, x)))

    def apply(self, x: np.ndarray) -> np.ndarray:
        h = self.l1.apply(x)
        return self.l2.apply(np.where(h > 0, h, h * LEAKY_SLOPE))


# --------------------------------------------------------------------------
# checkpoints

PARAM_MAGIC = b"MMFCPARM"
PARAM_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_parameters(fh: BinaryIO, params: Sequence[Parameter], sections: Mapping[str, bytes] | None = None):
    fh.write(PARAM_MAGIC)
    fh.write(struct.pack("<HI", PARAM_VERSION, len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        fh.write(struct.pack("<H", len(name)))
        fh.write(name)
        arr = np.ascontiguousarray(p.tensor, dtype="<f4")
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())
    # optional section-tagged trailer: 4-byte tag, u32 length, bytes
    for tag, blob in (sections or {}).items():
        t = tag.encode("ascii")
        if len(t) != 4:
            raise CheckpointError(f"section tag must be 4 ASCII bytes, got {tag!r}")
        fh.write(t)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def parameters_to_bytes(params: Sequence[Parameter], sections: Mapping[str, bytes] | None = None) -> bytes:
    buf = io.BytesIO()
    write_parameters(buf, params, sections)
    return buf.getvalue()


def _take(buf: memoryview, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError("truncated parameter file")
    return bytes(buf[pos:pos + n]), pos + n


def parameters_from_bytes(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, bytes]]:
    buf = memoryview(data)
    magic, pos = _take(buf, 0, 8)
    if magic != PARAM_MAGIC:
        raise CheckpointError("not an MMFC parameter file")
    raw, pos = _take(buf, pos, 6)
    version, count = struct.unpack("<HI", raw)
    if version != PARAM_VERSION:
        raise CheckpointError(f"unsupported parameter file version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 2)
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, nlen)
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 1)
        (rank,) = struct.unpack("<B", raw)
        raw, pos = _take(buf, pos, 4 * rank)
        dims = struct.unpack(f"<{rank}I", raw)
        n = int(np.prod(dims)) if rank else 1
        raw, pos = _take(buf, pos, 4 * n)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    sections: dict[str, bytes] = {}
    while pos < len(buf):
        tag, pos = _take(buf, pos, 4)
        raw, pos = _take(buf, pos, 4)
        (length,) = struct.unpack("<I", raw)
        blob, pos = _take(buf, pos, length)
        sections[tag.decode("ascii")] = blob
    return tensors, sections


def load_into(params: Sequence[Parameter], tensors: Mapping[str, np.ndarray]):
    for p in params:
        if p.name not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
        arr = tensors[p.name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {p.name!r}: checkpoint shape {arr.shape} != {p.shape}")
        p.tensor = arr.astype(p.tensor.dtype)
        p.zero_grad()
        p.m = p.v = None
