"""Dense float64 tensors and a reverse-mode differentiation engine.

The backward pass emits new graph nodes built from the same primitive set,
so gradients are themselves differentiable (reverse-over-reverse). This is
what makes gradients-of-gradients cheap: one extra graph extension instead
of a finite-difference sweep per coordinate.

Graphs are immutable once built. `evaluate` / `Program.run` re-bind leaf
values, so a graph constructed once can be evaluated many times with
different inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "Program",
    "EngineError",
    "ShapeError",
    "NumericOverflowError",
    "leaf",
    "const",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "smul",
    "matmul",
    "transpose",
    "bias_add",
    "sum_all",
    "expand",
    "sum_rows",
    "sum_cols",
    "sub_col",
    "rowmax",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "scale",
    "evaluate",
    "grad_nodes",
    "backward",
    "second_order_grad",
]


class EngineError(Exception):
    """Base class for graph construction/evaluation failures."""


class ShapeError(EngineError):
    """Operand shapes incompatible with the primitive's rule."""


class NumericOverflowError(EngineError):
    """A node produced NaN or Inf during evaluation."""


class Node:
    """One primitive operation (or leaf/constant) in a computation graph.

    Immutable. `shape` is fixed at construction, so re-binding leaves must
    preserve the shapes used to build the graph.
    """

    __slots__ = ("op", "inputs", "shape", "meta")

    def __init__(self, op, inputs, shape, meta=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(shape)
        self.meta = meta

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"


def _as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def leaf(name, shape):
    """A named input/parameter placeholder bound at evaluation time."""
    return Node("leaf", (), tuple(int(s) for s in shape), meta=name)


def const(value):
    arr = _as_array(value)
    return Node("const", (), arr.shape, meta=arr)


def _require(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def _same_shape(op, a, b):
    _require(a.shape == b.shape, op, f"shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape("add", a, b)
    return Node("add", (a, b), a.shape)


def sub(a, b):
    _same_shape("sub", a, b)
    return Node("sub", (a, b), a.shape)


def mul(a, b):
    _same_shape("mul", a, b)
    return Node("mul", (a, b), a.shape)


def div(a, b):
    _same_shape("div", a, b)
    return Node("div", (a, b), a.shape)


def neg(a):
    return Node("neg", (a,), a.shape)


def smul(a, c):
    """Multiply by a plain python float constant."""
    return Node("smul", (a,), a.shape, meta=float(c))


def matmul(a, b):
    _require(len(a.shape) == 2 and len(b.shape) == 2, "matmul", "operands must be 2-D")
    _require(
        a.shape[1] == b.shape[0],
        "matmul",
        f"inner dims differ: {a.shape} @ {b.shape}",
    )
    return Node("matmul", (a, b), (a.shape[0], b.shape[1]))


def transpose(a):
    _require(len(a.shape) == 2, "transpose", "operand must be 2-D")
    return Node("transpose", (a,), (a.shape[1], a.shape[0]))


def bias_add(m, v):
    """Row-broadcast add of a vector [d] onto a matrix [n, d]."""
    _require(len(m.shape) == 2 and len(v.shape) == 1, "bias_add", "need matrix and vector")
    _require(m.shape[1] == v.shape[0], "bias_add", f"width mismatch {m.shape} + {v.shape}")
    return Node("bias_add", (m, v), m.shape)


def sum_all(a):
    return Node("sum_all", (a,), ())


def expand(a, shape):
    """Broadcast a scalar to the given shape."""
    _require(a.shape == (), "expand", "input must be scalar")
    return Node("expand", (a,), tuple(shape))


def sum_rows(a):
    """Column sums: [n, d] -> [d]."""
    _require(len(a.shape) == 2, "sum_rows", "operand must be 2-D")
    return Node("sum_rows", (a,), (a.shape[1],))


def _tile_rows(a, n):
    return Node("tile_rows", (a,), (n, a.shape[0]))


def sum_cols(a):
    """Row sums with keepdims: [n, d] -> [n, 1]."""
    _require(len(a.shape) == 2, "sum_cols", "operand must be 2-D")
    return Node("sum_cols", (a,), (a.shape[0], 1))


def _tile_cols(a, d):
    return Node("tile_cols", (a,), (a.shape[0], d))


def sub_col(m, c):
    """Subtract a column [n, 1] from every column of [n, d]."""
    _require(len(m.shape) == 2 and c.shape == (m.shape[0], 1), "sub_col", f"bad shapes {m.shape}, {c.shape}")
    return Node("sub_col", (m, c), m.shape)


def rowmax(a):
    """Row-wise max [n, d] -> [n, 1]; treated as locally constant (zero grad)."""
    _require(len(a.shape) == 2, "rowmax", "operand must be 2-D")
    return Node("rowmax", (a,), (a.shape[0], 1))


def relu(a):
    return Node("relu", (a,), a.shape)


def _step(a):
    # derivative of relu; 0 at exactly 0 by the subgradient convention
    return Node("step", (a,), a.shape)


def exp(a):
    return Node("exp", (a,), a.shape)


def log(a):
    return Node("log", (a,), a.shape)


def sqrt(a):
    return Node("sqrt", (a,), a.shape)


def absolute(a):
    return Node("abs", (a,), a.shape)


def _sign(a):
    return Node("sign", (a,), a.shape)


def scale(a, s):
    """Multiply a by a scalar node."""
    _require(s.shape == (), "scale", "scale factor must be scalar node")
    return Node("scale", (a, s), a.shape)


# ---------------------------------------------------------------------------
# forward kernels

_FORWARD = {
    "const": lambda n: n.meta,
    "add": lambda n, a, b: a + b,
    "sub": lambda n, a, b: a - b,
    "mul": lambda n, a, b: a * b,
    "div": lambda n, a, b: a / b,
    "neg": lambda n, a: -a,
    "smul": lambda n, a: a * n.meta,
    "matmul": lambda n, a, b: a @ b,
    "transpose": lambda n, a: a.T,
    "bias_add": lambda n, a, b: a + b,
    "sum_all": lambda n, a: np.asarray(a.sum()),
    "expand": lambda n, a: np.broadcast_to(a, n.shape),
    "sum_rows": lambda n, a: a.sum(axis=0),
    "tile_rows": lambda n, a: np.broadcast_to(a, n.shape),
    "sum_cols": lambda n, a: a.sum(axis=1, keepdims=True),
    "tile_cols": lambda n, a: np.broadcast_to(a, n.shape),
    "sub_col": lambda n, a, b: a - b,
    "rowmax": lambda n, a: a.max(axis=1, keepdims=True),
    "relu": lambda n, a: np.maximum(a, 0.0),
    "step": lambda n, a: (a > 0.0).astype(np.float64),
    "exp": lambda n, a: np.exp(a),
    "log": lambda n, a: np.log(a),
    "sqrt": lambda n, a: np.sqrt(a),
    "abs": lambda n, a: np.abs(a),
    "sign": lambda n, a: np.sign(a),
    "scale": lambda n, a, s: a * s,
}


def _topo_order(outputs):
    """Iterative post-order over the DAG rooted at `outputs`."""
    order = []
    seen = set()
    stack = [(n, False) for n in reversed(outputs)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            order.append(node)
            continue
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for inp in reversed(node.inputs):
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


class Program:
    """A graph compiled to a fixed evaluation order for repeated runs.

    `run` checks finiteness of the requested outputs only; use `evaluate`
    for the per-node overflow check.
    """

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.order = _topo_order(self.outputs)
        self.leaves = [n for n in self.order if n.op == "leaf"]

    def run(self, bindings, check_finite=True):
        values = {}
        forward = _FORWARD
        for node in self.order:
            if node.op == "leaf":
                try:
                    val = bindings[node]
                except KeyError:
                    raise EngineError(f"unbound leaf '{node.meta}'") from None
                val = np.asarray(val, dtype=np.float64)
                if val.shape != node.shape:
                    raise ShapeError(
                        f"leaf '{node.meta}': bound value shape {val.shape} != declared {node.shape}"
                    )
                values[id(node)] = val
            else:
                args = [values[id(i)] for i in node.inputs]
                # non-finite values become NumericOverflowError below, so
                # numpy's own warnings are redundant noise
                with np.errstate(all="ignore"):
                    values[id(node)] = forward[node.op](node, *args)
        out = [values[id(n)] for n in self.outputs]
        if check_finite:
            for node, val in zip(self.outputs, out):
                if not np.all(np.isfinite(val)):
                    raise NumericOverflowError(f"non-finite output from node {node.op}")
        return out


def evaluate(root, bindings, by_name=False):
    """Evaluate a graph. Purely functional: bindings are never mutated.

    bindings maps leaf Node -> array, or leaf name -> array if `by_name`.
    Every node's output is checked for NaN/Inf.
    """
    order = _topo_order([root])
    if by_name:
        named = {n.meta: n for n in order if n.op == "leaf"}
        bindings = {named[k]: v for k, v in bindings.items() if k in named}
    values = {}
    for node in order:
        if node.op == "leaf":
            if node not in bindings:
                raise EngineError(f"unbound leaf '{node.meta}'")
            val = np.asarray(bindings[node], dtype=np.float64)
            if val.shape != node.shape:
                raise ShapeError(
                    f"leaf '{node.meta}': bound value shape {val.shape} != declared {node.shape}"
                )
        else:
            args = [values[id(i)] for i in node.inputs]
            with np.errstate(all="ignore"):
                val = _FORWARD[node.op](node, *args)
        if not np.all(np.isfinite(val)):
            raise NumericOverflowError(f"non-finite value produced by node {node.op}")
        values[id(node)] = val
    return values[id(root)]


# ---------------------------------------------------------------------------
# reverse mode: adjoints built from the primitives above

def _vjp(node, g):
    """Adjoint expressions for each input of `node`, given output adjoint g.

    Returns a tuple aligned with node.inputs; None means no gradient flows
    (step/sign/rowmax are treated as locally constant).
    """
    op = node.op
    a = node.inputs[0] if node.inputs else None
    b = node.inputs[1] if len(node.inputs) > 1 else None
    if op == "add":
        return (g, g)
    if op == "sub":
        return (g, neg(g))
    if op == "mul":
        return (mul(g, b), mul(g, a))
    if op == "div":
        return (div(g, b), neg(div(mul(g, a), mul(b, b))))
    if op == "neg":
        return (neg(g),)
    if op == "smul":
        return (smul(g, node.meta),)
    if op == "matmul":
        return (matmul(g, transpose(b)), matmul(transpose(a), g))
    if op == "transpose":
        return (transpose(g),)
    if op == "bias_add":
        return (g, sum_rows(g))
    if op == "sum_all":
        return (expand(g, a.shape),)
    if op == "expand":
        return (sum_all(g),)
    if op == "sum_rows":
        return (_tile_rows(g, a.shape[0]),)
    if op == "tile_rows":
        return (sum_rows(g),)
    if op == "sum_cols":
        return (_tile_cols(g, a.shape[1]),)
    if op == "tile_cols":
        return (sum_cols(g),)
    if op == "sub_col":
        return (g, neg(sum_cols(g)))
    if op == "relu":
        return (mul(g, _step(a)),)
    if op == "exp":
        return (mul(g, node),)
    if op == "log":
        return (div(g, a),)
    if op == "sqrt":
        return (div(g, smul(node, 2.0)),)
    if op == "abs":
        return (mul(g, _sign(a)),)
    if op == "scale":
        s = b
        return (scale(g, s), sum_all(mul(g, a)))
    if op in ("step", "sign", "rowmax"):
        return tuple(None for _ in node.inputs)
    raise EngineError(f"no vjp rule for op '{op}'")


def grad_nodes(root, wrt):
    """Symbolic gradient: new nodes expressing d(root)/d(leaf) for each leaf.

    The original graph is never mutated; the adjoint graph only references it.
    """
    if root.shape != ():
        raise EngineError(f"backward requires a scalar root, got shape {root.shape}")
    wrt = list(wrt)
    for w in wrt:
        if w.op != "leaf":
            raise EngineError("gradients are only available w.r.t. leaves")
    order = _topo_order([root])
    adjoint = {id(root): const(np.float64(1.0))}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or not node.inputs:
            continue
        contributions = _vjp(node, g)
        for inp, contrib in zip(node.inputs, contributions):
            if contrib is None:
                continue
            prev = adjoint.get(id(inp))
            adjoint[id(inp)] = contrib if prev is None else add(prev, contrib)
    out = []
    for w in wrt:
        gw = adjoint.get(id(w))
        if gw is None:
            gw = const(np.zeros(w.shape))
        out.append(gw)
    return out


def backward(root, bindings, wrt, by_name=False):
    """Evaluate d(root)/d(leaf) for each requested leaf."""
    wrt = list(wrt)
    grads = grad_nodes(root, wrt)
    if by_name:
        named = {n.meta: n for n in _topo_order([root]) if n.op == "leaf"}
        bindings = {named[k]: v for k, v in bindings.items() if k in named}
    return {w: evaluate(g, bindings) for w, g in zip(wrt, grads)}


def second_order_grad(root, bindings, inner_wrt, functional, outer_wrt):
    """Gradient of a scalar functional of first-order gradients.

    `functional` receives the list of gradient nodes (aligned with
    inner_wrt) and must return a scalar Node built from engine primitives.
    """
    inner = grad_nodes(root, list(inner_wrt))
    obj = functional(inner)
    if not isinstance(obj, Node):
        raise EngineError("functional must return an engine Node")
    if obj.shape != ():
        raise EngineError(f"functional must be scalar-valued, got shape {obj.shape}")
    outer = list(outer_wrt)
    outer_grads = grad_nodes(obj, outer)
    return {w: evaluate(g, bindings) for w, g in zip(outer, outer_grads)}
