"""Tape — minimal reverse-mode differentiation over numpy arrays.

Operations record a node (inputs, output, backward closure) on a Tape as they
run. Because nodes are appended in execution order, the list is already
topologically sorted; ``Tape.backward`` walks it once in reverse. A tape built
with ``record=False`` evaluates the same operations without keeping anything.
"""

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf, log_softmax, softmax

logger = logging.getLogger(__name__)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

IGNORE_INDEX = -1


class Variable:
    """A value on the tape plus its accumulated gradient."""

    __slots__ = ("value", "grad", "name", "requires_grad")

    def __init__(self, value, name: str | None = None, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return np.shape(self.value)

    def __repr__(self) -> str:
        return f"Variable(name={self.name!r}, shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[Variable, ...]
    output: Variable
    backward: Callable[[np.ndarray], tuple]


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.visits = 0

    def leaf(self, value, name: str | None = None) -> Variable:
        return Variable(value, name=name, requires_grad=self.record)

    def constant(self, value, name: str | None = None) -> Variable:
        return Variable(value, name=name, requires_grad=False)

    def push(self, op: str, inputs: tuple[Variable, ...], value, backward) -> Variable:
        out = Variable(value, name=op)
        if self.record and any(v.requires_grad for v in inputs):
            out.requires_grad = True
            self.nodes.append(Node(op, inputs, out, backward))
        return out

    def backward(self, loss: Variable) -> None:
        """Accumulate dLoss/dv into ``v.grad`` for every leaf reachable from ``loss``.

        Intermediate gradients are dropped as soon as their node has been
        processed.
        """
        if np.size(loss.value) != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        loss.grad = np.ones_like(loss.value, dtype=np.float64)
        for node in reversed(self.nodes):
            self.visits += 1
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi
            if node.output is not loss:
                node.output.grad = None


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes numpy broadcasting added to reach it from ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- primitives ---


def add(tape: Tape, a: Variable, b: Variable) -> Variable:
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, a_shape), unbroadcast(g, b_shape)

    return tape.push("add", (a, b), a.value + b.value, backward)


def matmul(tape: Tape, x: Variable, w: Variable) -> Variable:
    """x (..., F) @ w (F, N)."""
    xv, wv = x.value, w.value

    def backward(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return tape.push("matmul", (x, w), xv @ wv, backward)


def gelu(tape: Tape, x: Variable) -> Variable:
    """Exact (erf) GELU: x·Φ(x)."""
    xv = x.value
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))

    def backward(g):
        return (g * (cdf + xv * _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)),)

    return tape.push("gelu", (x,), xv * cdf, backward)


def clip_unit(tape: Tape, y: Variable) -> Variable:
    """σ clamp to [0, 1]; gradient passes on (0, 1) only."""
    yv = y.value

    def backward(g):
        return (np.where((yv > 0.0) & (yv < 1.0), g, 0.0),)

    return tape.push("clip", (y,), np.clip(yv, 0.0, 1.0), backward)


def logistic(tape: Tape, y: Variable) -> Variable:
    s = 0.5 * (1.0 + np.tanh(0.5 * y.value))

    def backward(g):
        return (g * s * (1.0 - s),)

    return tape.push("logistic", (y,), s, backward)


def straight_through(tape: Tape, p: Variable, value: np.ndarray, grad_fn) -> Variable:
    """Forward ``value`` (e.g. sampled spikes), backward ``grad_fn(g, p)``."""
    pv = p.value

    def backward(g):
        return (grad_fn(g, pv),)

    return tape.push("sample", (p,), value, backward)


def mean_time(tape: Tape, x: Variable) -> Variable:
    """Mean over axis 1 of (batch, L, N)."""
    L = x.shape[1]

    def backward(g):
        return (np.repeat(g[:, None, :] / L, L, axis=1),)

    return tape.push("mean_time", (x,), x.value.mean(axis=1), backward)


def last_step(tape: Tape, x: Variable) -> Variable:
    """Final time step of (batch, L, N)."""
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, -1] = g
        return (gx,)

    return tape.push("last_step", (x,), x.value[:, -1], backward)


def batch_norm(
    tape: Tape,
    x: Variable,
    gamma: Variable,
    beta: Variable,
    eps: float = 1e-5,
    running: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Variable, tuple[np.ndarray, np.ndarray]]:
    """Normalize each channel of (batch, L, N) over batch×time.

    With ``running=(mean, var)`` the given statistics are used instead of the
    batch ones. Returns the output and the statistics that were applied.
    """
    xv = x.value
    axes = tuple(range(xv.ndim - 1))
    if running is None:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
    else:
        mean, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = gamma.value
    batch_stats = running is None

    def backward(g):
        g_gamma = np.sum(g * xhat, axis=axes)
        g_beta = np.sum(g, axis=axes)
        gxhat = g * gv
        if batch_stats:
            gx = inv * (
                gxhat
                - gxhat.mean(axis=axes)
                - xhat * (gxhat * xhat).mean(axis=axes)
            )
        else:
            gx = gxhat * inv
        return gx, g_gamma, g_beta

    out = tape.push("batch_norm", (x, gamma, beta), xhat * gv + beta.value, backward)
    return out, (mean, var)


def layer_norm(tape: Tape, x: Variable, gamma: Variable, beta: Variable, eps: float = 1e-5) -> Variable:
    """Normalize over the channel axis at every (batch, time) position."""
    xv = x.value
    mean = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    gv = gamma.value
    axes = tuple(range(xv.ndim - 1))

    def backward(g):
        gxhat = g * gv
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes)

    return tape.push("layer_norm", (x, gamma, beta), xhat * gv + beta.value, backward)


def softmax_cross_entropy(tape: Tape, logits: Variable, labels: np.ndarray) -> Variable:
    """Mean cross-entropy over positions whose label is not IGNORE_INDEX.

    logits are (batch, C) with labels (batch,), or (batch, L, C) with labels (batch, L).
    """
    lv = logits.value
    num_classes = lv.shape[-1]
    flat = lv.reshape(-1, num_classes)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    valid = y != IGNORE_INDEX
    count = max(int(valid.sum()), 1)
    safe_y = np.where(valid, y, 0)
    logp = log_softmax(flat, axis=-1)
    picked = logp[np.arange(flat.shape[0]), safe_y]
    loss = -np.sum(np.where(valid, picked, 0.0)) / count

    def backward(g):
        probs = softmax(flat, axis=-1)
        probs[np.arange(flat.shape[0]), safe_y] -= 1.0
        probs *= (valid / count)[:, None]
        return ((g * probs).reshape(lv.shape),)

    return tape.push("cross_entropy", (logits,), np.asarray(loss), backward)
