"""MLP model family: flat parameter views, soft-label cross-entropy, local SGD.

Loss/gradient graphs are built once per (architecture, batch size, label
kind) and cached; training re-binds leaves instead of rebuilding graphs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """MLP architecture: input size, hidden widths, class count. ReLU hidden."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ModelError("layer_sizes needs at least input and output")
        if any(s <= 0 for s in sizes):
            raise ModelError(f"layer sizes must be positive: {sizes}")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def classes(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def n_params(self):
        total = 0
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            total += fan_in * fan_out + fan_out
        return total

    def layer_slices(self):
        """(W_slice, b_slice, fan_in, fan_out) per layer, in flat-vector order."""
        out = []
        off = 0
        for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:]):
            w_sl = slice(off, off + fan_in * fan_out)
            off += fan_in * fan_out
            b_sl = slice(off, off + fan_out)
            off += fan_out
            out.append((w_sl, b_sl, fan_in, fan_out))
        return out


@dataclass
class ParamVector:
    """Flattened model weights (or weight deltas / residuals)."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.spec.n_params,):
            raise ModelError(
                f"param vector length {self.values.shape} != expected ({self.spec.n_params},)"
            )

    def to_layers(self):
        """Unflatten into [(W [in,out], b [out]), ...]."""
        layers = []
        for w_sl, b_sl, fan_in, fan_out in self.spec.layer_slices():
            w = self.values[w_sl].reshape(fan_in, fan_out)
            b = self.values[b_sl]
            layers.append((w, b))
        return layers

    @classmethod
    def from_layers(cls, layers, spec):
        flat = np.concatenate([np.concatenate((w.ravel(), b)) for w, b in layers])
        return cls(flat, spec)

    @classmethod
    def zeros(cls, spec):
        return cls(np.zeros(spec.n_params), spec)

    def copy(self):
        return ParamVector(self.values.copy(), self.spec)


@dataclass
class Batch:
    """Inputs [n, d] with either hard class labels [n] or label logits [n, C]."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ModelError(f"inputs must be [n, d] with n >= 1, got {self.inputs.shape}")
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            self.labels = labels.astype(np.int64)
        elif labels.ndim == 2:
            self.labels = labels.astype(np.float64)
        else:
            raise ModelError(f"labels must be [n] indices or [n, C] logits, got {labels.shape}")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ModelError("inputs/labels row count mismatch")

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def hard_labels(self):
        return self.labels.ndim == 1


def init_params(spec, seed):
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for fan_in, fan_out in zip(spec.layer_sizes, spec.layer_sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        layers.append((w, b))
    return ParamVector.from_layers(layers, spec)


# ---------------------------------------------------------------------------
# graph construction

@dataclass
class LossGraph:
    """Leaves and roots of one compiled loss computation."""

    spec: ModelSpec
    n: int
    label_mode: str  # "hard" or "logits"
    x: eg.Node
    target: eg.Node  # one-hot leaf, or label-logit leaf
    weights: list = field(default_factory=list)  # (w_leaf, b_leaf) per layer
    logits: eg.Node = None
    loss: eg.Node = None

    def weight_leaves(self):
        out = []
        for w, b in self.weights:
            out.extend((w, b))
        return out

    def bind_params(self, params, bindings):
        for (w_leaf, b_leaf), (w, b) in zip(self.weights, params.to_layers()):
            bindings[w_leaf] = w
            bindings[b_leaf] = b
        return bindings


def _softmax_node(z):
    """Row softmax via max-subtraction; the max is treated as constant."""
    m = eg.rowmax(z)
    e = eg.exp(eg.sub_col(z, m))
    ssum = eg.sum_cols(e)
    inv = eg.div(eg.const(np.ones(ssum.shape)), ssum)
    return eg.mul(e, eg._tile_cols(inv, z.shape[1]))


def _log_softmax_node(z):
    m = eg.rowmax(z)
    shifted = eg.sub_col(z, m)
    lse = eg.log(eg.sum_cols(eg.exp(shifted)))
    return eg.sub_col(shifted, lse)


def build_loss_graph(spec, n, label_mode):
    """Forward + cross-entropy graph for a batch of n samples.

    label_mode "hard": target leaf holds a one-hot [n, C] matrix.
    label_mode "logits": target leaf holds trainable label logits [n, C];
    the training target is their row softmax.
    """
    if label_mode not in ("hard", "logits"):
        raise ModelError(f"unknown label mode {label_mode!r}")
    x = eg.leaf("x", (n, spec.input_dim))
    h = x
    weights = []
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes, spec.layer_sizes[1:])):
        w = eg.leaf(f"w{i}", (fan_in, fan_out))
        b = eg.leaf(f"b{i}", (fan_out,))
        weights.append((w, b))
        z = eg.bias_add(eg.matmul(h, w), b)
        h = eg.relu(z) if i < spec.n_layers - 1 else z
    logits = h
    target_leaf = eg.leaf("target", (n, spec.classes))
    target = _softmax_node(target_leaf) if label_mode == "logits" else target_leaf
    logp = _log_softmax_node(logits)
    loss = eg.smul(eg.sum_all(eg.mul(target, logp)), -1.0 / n)
    return LossGraph(
        spec=spec, n=n, label_mode=label_mode, x=x, target=target_leaf,
        weights=weights, logits=logits, loss=loss,
    )


_GRAPH_CACHE = {}


def _programs(spec, n, label_mode):
    """(graph, loss_program, loss+grad_program) cached per shape."""
    key = (spec.layer_sizes, n, label_mode)
    hit = _GRAPH_CACHE.get(key)
    if hit is None:
        g = build_loss_graph(spec, n, label_mode)
        loss_prog = eg.Program([g.loss])
        grads = eg.grad_nodes(g.loss, g.weight_leaves())
        grad_prog = eg.Program([g.loss] + grads)
        logits_prog = eg.Program([g.logits])
        hit = (g, loss_prog, grad_prog, logits_prog)
        _GRAPH_CACHE[key] = hit
    return hit


def _target_matrix(batch, classes):
    if batch.hard_labels:
        if batch.labels.min() < 0 or batch.labels.max() >= classes:
            raise ModelError("hard labels out of range")
        t = np.zeros((batch.n, classes))
        t[np.arange(batch.n), batch.labels] = 1.0
        return t
    if batch.labels.shape[1] != classes:
        raise ModelError(
            f"label logits width {batch.labels.shape[1]} != classes {classes}"
        )
    return batch.labels


def _bindings(graph, params, batch):
    if batch.inputs.shape[1] != graph.spec.input_dim:
        raise ModelError(
            f"input width {batch.inputs.shape[1]} != model input {graph.spec.input_dim}"
        )
    b = {graph.x: batch.inputs, graph.target: _target_matrix(batch, graph.spec.classes)}
    return graph.bind_params(params, b)


def loss(params, batch):
    """Mean cross-entropy between softmax(logits) and the target distribution."""
    mode = "hard" if batch.hard_labels else "logits"
    graph, loss_prog, _, _ = _programs(params.spec, batch.n, mode)
    return float(loss_prog.run(_bindings(graph, params, batch))[0])


def loss_and_gradient(params, batch):
    """(loss, flat gradient) in one pass."""
    mode = "hard" if batch.hard_labels else "logits"
    graph, _, grad_prog, _ = _programs(params.spec, batch.n, mode)
    out = grad_prog.run(_bindings(graph, params, batch))
    loss_val = float(out[0])
    flat = np.concatenate([a.ravel() for a in out[1:]])
    return loss_val, ParamVector(flat, params.spec)


def weight_gradient(params, batch):
    """Flat gradient of the batch loss w.r.t. all weights and biases."""
    return loss_and_gradient(params, batch)[1]


def predict_logits(params, inputs):
    inputs = np.asarray(inputs, dtype=np.float64)
    spec = params.spec
    graph, _, _, logits_prog = _programs(spec, inputs.shape[0], "hard")
    b = {graph.x: inputs, graph.target: np.zeros((inputs.shape[0], spec.classes))}
    graph.bind_params(params, b)
    return logits_prog.run(b)[0]


def local_sgd(params, client_data, k, lr, batch_size, rng):
    """K plain-SGD steps over without-replacement minibatches.

    Minibatches are consecutive slices of a shuffled permutation; a short
    tail is used as-is and the permutation is redrawn once exhausted.
    """
    new_params, _ = local_sgd_with_stats(params, client_data, k, lr, batch_size, rng)
    return new_params


def local_sgd_with_stats(params, client_data, k, lr, batch_size, rng):
    """local_sgd plus the mean of the k minibatch losses (free to record)."""
    if client_data.n < 1:
        raise ModelError("client data is empty")
    if k < 1:
        raise ModelError("k must be >= 1")
    if lr < 0:
        raise ModelError("lr must be >= 0")
    w = params.values.copy()
    perm = rng.permutation(client_data.n)
    pos = 0
    losses = []
    pv = ParamVector(w, params.spec)
    for _ in range(k):
        if pos >= len(perm):
            perm = rng.permutation(client_data.n)
            pos = 0
        idx = perm[pos:pos + batch_size]
        pos += batch_size
        batch = Batch(client_data.inputs[idx], client_data.labels[idx])
        step_loss, grad = loss_and_gradient(pv, batch)
        losses.append(step_loss)
        pv = ParamVector(pv.values - lr * grad.values, params.spec)
    return pv, float(np.mean(losses))
