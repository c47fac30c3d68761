"""Dense-network numeric kernel.

2-D float64 tensors (vectors are columns, batches are column blocks), a
replayable operation tape for reverse-mode gradients, bias-corrected Adam
with decoupled weight decay, and a central finite-difference gradient
checker. The op set is fixed: matmul, add, elementwise activations,
reductions, column-wise cosine, logit cross-entropy and token softmax
cross-entropy. There is no general autodiff; the architecture this kernel
serves is closed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError, UsageError

Matrix = np.ndarray

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")


def as_matrix(x, name: str = "tensor") -> Matrix:
    """Coerce to a 2-D float64 array; reject non-finite entries.

    1-D input is treated as a single column vector.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeError(f"{name}: expected at most 2 dimensions, got {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ShapeError(f"{name}: contains non-finite entries")
    return np.ascontiguousarray(a)


def stable_sigmoid(x: Matrix) -> Matrix:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Node:
    """A value in one forward pass. Leaves are constants or parameters."""

    __slots__ = ("value",)

    def __init__(self, value: Matrix):
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise UsageError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value[0, 0])


class Param(Node):
    """A learnable leaf; identity is stable across forward passes."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(as_matrix(value, name))
        self.name = name


@dataclass
class DenseLayer:
    weight: Param  # (out, in)
    bias: Param  # (out, 1)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.bias.value.shape != (self.weight.value.shape[0], 1):
            raise ShapeError(
                f"bias shape {self.bias.value.shape} inconsistent with "
                f"weight shape {self.weight.value.shape}"
            )


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int, activation: str, name: str) -> DenseLayer:
    """Scaled-uniform init in +-sqrt(6/(fan_in+fan_out)); zero bias."""
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return DenseLayer(
        weight=Param(w, f"{name}.weight"),
        bias=Param(np.zeros((out_dim, 1)), f"{name}.bias"),
        activation=activation,
    )


class Tape:
    """Ordered record of forward ops; backward replays it in reverse.

    Ops are recorded eagerly in execution order, so the reversed record is a
    valid topological order regardless of batch content.
    """

    def __init__(self):
        self._entries: list[tuple[Node, Callable]] = []
        self._params: list[Param] = []
        self._param_ids: set[int] = set()

    # -- recording -----------------------------------------------------

    def _record(self, out: Node, parents: tuple[Node, ...], bw: Callable) -> Node:
        for p in parents:
            if isinstance(p, Param) and id(p) not in self._param_ids:
                self._param_ids.add(id(p))
                self._params.append(p)
        self._entries.append((out, bw))
        return out

    def constant(self, value) -> Node:
        """A leaf that never receives gradient."""
        return Node(as_matrix(value, "constant"))

    def detach(self, x: Node) -> Node:
        """Stop-gradient: same value, severed from the graph."""
        return Node(x.value)

    # -- primitive ops -------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.shape[1] != vb.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {va.shape} x {vb.shape}")
        out = Node(va @ vb)

        def bw(g, sink):
            sink(a, g @ vb.T)
            sink(b, va.T @ g)

        return self._record(out, (a, b), bw)

    def add(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.shape == vb.shape:
            out = Node(va + vb)

            def bw(g, sink):
                sink(a, g)
                sink(b, g)

        elif vb.shape == (va.shape[0], 1):  # bias broadcast over columns
            out = Node(va + vb)

            def bw(g, sink):
                sink(a, g)
                sink(b, g.sum(axis=1, keepdims=True))

        else:
            raise ShapeError(f"add: incompatible shapes {va.shape} and {vb.shape}")
        return self._record(out, (a, b), bw)

    def sub(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"sub: shapes differ, {a.value.shape} vs {b.value.shape}")
        out = Node(a.value - b.value)

        def bw(g, sink):
            sink(a, g)
            sink(b, -g)

        return self._record(out, (a, b), bw)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mul: shapes differ, {a.value.shape} vs {b.value.shape}")
        va, vb = a.value, b.value
        out = Node(va * vb)

        def bw(g, sink):
            sink(a, g * vb)
            sink(b, g * va)

        return self._record(out, (a, b), bw)

    def affine(self, x: Node, scale: float = 1.0, shift: float = 0.0) -> Node:
        out = Node(scale * x.value + shift)

        def bw(g, sink):
            sink(x, scale * g)

        return self._record(out, (x,), bw)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        out = Node(np.where(mask, x.value, 0.0))

        def bw(g, sink):
            sink(x, g * mask)

        return self._record(out, (x,), bw)

    def sigmoid(self, x: Node) -> Node:
        # clamped to the open interval so saturated heads keep the (0,1) contract
        s = np.clip(stable_sigmoid(x.value), 1e-12, 1.0 - 1e-12)
        out = Node(s)

        def bw(g, sink):
            sink(x, g * s * (1.0 - s))

        return self._record(out, (x,), bw)

    def tanh(self, x: Node) -> Node:
        t = np.tanh(x.value)
        out = Node(t)

        def bw(g, sink):
            sink(x, g * (1.0 - t * t))

        return self._record(out, (x,), bw)

    def sqrt(self, x: Node) -> Node:
        v = np.sqrt(x.value)
        out = Node(v)
        # subgradient 0 at x == 0 so hinge compositions stay finite
        safe = np.where(v > 0, v, 1.0)

        def bw(g, sink):
            sink(x, np.where(v > 0, g * 0.5 / safe, 0.0))

        return self._record(out, (x,), bw)

    def sum_rows(self, x: Node) -> Node:
        """Column-wise sum over rows: (r, c) -> (1, c)."""
        out = Node(x.value.sum(axis=0, keepdims=True))
        rows = x.value.shape[0]

        def bw(g, sink):
            sink(x, np.repeat(g, rows, axis=0))

        return self._record(out, (x,), bw)

    def sum_all(self, x: Node) -> Node:
        out = Node(np.array([[x.value.sum()]]))
        shape = x.value.shape

        def bw(g, sink):
            sink(x, np.full(shape, g[0, 0]))

        return self._record(out, (x,), bw)

    def mean_all(self, x: Node) -> Node:
        n = x.value.size
        out = Node(np.array([[x.value.mean()]]))
        shape = x.value.shape

        def bw(g, sink):
            sink(x, np.full(shape, g[0, 0] / n))

        return self._record(out, (x,), bw)

    def concat_rows(self, *xs: Node) -> Node:
        cols = {x.value.shape[1] for x in xs}
        if len(cols) != 1:
            raise ShapeError(f"concat_rows: column counts differ: {sorted(cols)}")
        out = Node(np.concatenate([x.value for x in xs], axis=0))
        offsets = np.cumsum([0] + [x.value.shape[0] for x in xs])

        def bw(g, sink):
            for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
                sink(x, g[lo:hi, :])

        return self._record(out, tuple(xs), bw)

    def take_cols(self, x: Node, idx: np.ndarray) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        out = Node(x.value[:, idx])
        shape = x.value.shape

        def bw(g, sink):
            buf = np.zeros(shape)
            np.add.at(buf, (slice(None), idx), g)
            sink(x, buf)

        return self._record(out, (x,), bw)

    def cosine_cols(self, a: Node, b: Node) -> Node:
        """Column-wise cosine similarity: (d, c) x (d, c) -> (1, c)."""
        if a.value.shape != b.value.shape:
            raise ShapeError(f"cosine: shapes differ, {a.value.shape} vs {b.value.shape}")
        va, vb = a.value, b.value
        na = np.linalg.norm(va, axis=0, keepdims=True)
        nb = np.linalg.norm(vb, axis=0, keepdims=True)
        if np.any(na == 0) or np.any(nb == 0):
            raise ShapeError("cosine undefined for zero-norm embedding")
        dot = (va * vb).sum(axis=0, keepdims=True)
        c = dot / (na * nb)
        out = Node(c)

        def bw(g, sink):
            sink(a, g * (vb / (na * nb) - c * va / (na * na)))
            sink(b, g * (va / (na * nb) - c * vb / (nb * nb)))

        return self._record(out, (a, b), bw)

    def bce_logits(self, logits: Node, labels: Matrix) -> Node:
        """Per-pair binary cross-entropy from logits, (1, c) -> (1, c).

        Stable form max(x,0) - x*y + log(1+exp(-|x|)); gradient sigmoid(x)-y.
        """
        x = logits.value
        y = np.asarray(labels, dtype=np.float64).reshape(x.shape)
        val = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
        out = Node(val)

        def bw(g, sink):
            sink(logits, g * (stable_sigmoid(x) - y))

        return self._record(out, (logits,), bw)

    def token_xent(self, logits: Node, token_ids: np.ndarray, pad_mask: np.ndarray, n_positions: int, vocab_size: int) -> Node:
        """Per-sample mean softmax cross-entropy over non-PAD positions.

        logits: (n_positions * vocab_size, batch), position-major.
        token_ids: (n_positions, batch) int ids; pad_mask: 1 where scorable.
        Returns (1, batch) of mean negative log-likelihoods.
        """
        batch = logits.value.shape[1]
        if logits.value.shape[0] != n_positions * vocab_size:
            raise ShapeError(
                f"token_xent: logits rows {logits.value.shape[0]} != "
                f"{n_positions}x{vocab_size}"
            )
        ids = np.asarray(token_ids, dtype=np.intp).reshape(n_positions, batch)
        mask = np.asarray(pad_mask, dtype=np.float64).reshape(n_positions, batch)
        t_eff = mask.sum(axis=0)
        if np.any(t_eff == 0):
            raise ShapeError("token_xent: sequence with no scorable (non-PAD) tokens")

        cube = logits.value.reshape(n_positions, vocab_size, batch)
        shifted = cube - cube.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz  # (L, V, B)
        pos_idx = np.arange(n_positions)[:, None]
        batch_idx = np.arange(batch)[None, :]
        nll = -logp[pos_idx, ids, batch_idx]  # (L, B)
        out = Node(((nll * mask).sum(axis=0) / t_eff).reshape(1, batch))

        softmax = np.exp(logp)

        def bw(g, sink):
            grad = softmax.copy()
            grad[pos_idx, ids, batch_idx] -= 1.0
            grad *= (mask / t_eff[None, :])[:, None, :]
            grad *= g.reshape(1, 1, batch)
            sink(logits, grad.reshape(n_positions * vocab_size, batch))

        return self._record(out, (logits,), bw)

    # -- backward ------------------------------------------------------

    def backward(self, loss: Node, loss_grad=None) -> dict[Param, Matrix]:
        """Gradient of `loss` w.r.t. every parameter touched; clears the tape."""
        if not self._entries:
            raise UsageError("backward called with no recorded forward ops")
        if loss_grad is None:
            seed = np.ones_like(loss.value)
        else:
            seed = np.asarray(loss_grad, dtype=np.float64)
            if seed.shape != loss.value.shape:
                raise ShapeError(
                    f"loss grad shape {seed.shape} != output shape {loss.value.shape}"
                )
        grads: dict[int, Matrix] = {id(loss): seed}

        def sink(node: Node, contrib: Matrix):
            key = id(node)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib

        for node, bw in reversed(self._entries):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            bw(g, sink)

        out = {p: grads.get(id(p), np.zeros_like(p.value)) for p in self._params}
        self.clear()
        return out

    def clear(self) -> None:
        self._entries.clear()
        self._params.clear()
        self._param_ids.clear()


def dense_forward(layer: DenseLayer, x: Node, tape: Tape) -> Node:
    """activation(W @ x + b), with x as (in, batch) columns."""
    w = layer.weight.value
    if x.value.shape[0] != w.shape[1]:
        raise ShapeError(
            f"dense_forward: input shape {x.value.shape} incompatible with "
            f"weight shape {w.shape}"
        )
    h = tape.add(tape.matmul(layer.weight, x), layer.bias)
    if layer.activation == "identity":
        return h
    if layer.activation == "relu":
        return tape.relu(h)
    if layer.activation == "sigmoid":
        return tape.sigmoid(h)
    return tape.tanh(h)


# -- Adam ---------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)  # id(param) -> moment
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Param], grads: dict[Param, Matrix]) -> None:
    """Bias-corrected Adam update, in place. Weight decay is decoupled:
    applied directly to the parameter, outside the moment machinery."""
    for p in params:
        g = grads[p]
        if not np.all(np.isfinite(g)):
            raise UsageError(f"non-finite gradient for parameter {p.name!r}; step aborted")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p in params:
        g = grads[p]
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        else:
            v = state.v[key]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[key] = m
        state.v[key] = v
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay > 0.0:
            update = update + state.lr * state.weight_decay * p.value
        p.value = p.value - update


# -- finite-difference gradient checking --------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    passed: bool
    worst_param: str = ""


def grad_check(
    forward: Callable[[], tuple[Tape, Node]],
    params: list[Param],
    tolerance: float,
    *,
    samples: int = 120,
    step: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    `forward` must build a fresh tape and return (tape, scalar loss node);
    it is called repeatedly with perturbed parameter values and must be a
    deterministic function of those values.
    """
    if tolerance <= 0:
        raise UsageError("tolerance must be > 0")
    _, loss_a = forward()
    tape, loss_b = forward()
    if loss_a.item() != loss_b.item():
        raise UsageError("forward closure is not deterministic: two calls disagree")
    grads = tape.backward(loss_b)

    coords = [(p, i) for p in params for i in range(p.value.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > samples:
        picked = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in picked]

    worst = 0.0
    worst_name = ""
    for p, i in coords:
        orig = p.value.flat[i]
        p.value.flat[i] = orig + step
        f_plus = forward()[1].item()
        p.value.flat[i] = orig - step
        f_minus = forward()[1].item()
        p.value.flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * step)
        g = grads.get(p)
        an = 0.0 if g is None else float(g.reshape(-1)[i])
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        if rel > worst:
            worst = rel
            worst_name = f"{p.name}[{i}]"
    return GradCheckReport(
        max_rel_error=worst,
        n_checked=len(coords),
        tolerance=tolerance,
        passed=worst < tolerance,
        worst_param=worst_name,
    )
