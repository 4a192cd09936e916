"""Tape-based reverse-mode differentiation over the kernels in :mod:`tensor`.

Every op accepts :class:`Var` or plain arrays. When none of the inputs is a
``Var`` the op just evaluates the kernel and returns an array, so the same
model code serves both the taped training path and plain inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class ContractError(ValueError):
    pass


class Var:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value: np.ndarray, tape: "Tape", node_id: int):
        self.value = value
        self.tape = tape
        self.id = node_id

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    # activation pattern of a piecewise op (relu sign, max-pool argmax)
    pattern: np.ndarray | None = None


@dataclass
class Tape:
    """Append-only record of one forward evaluation."""

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Var] = field(default_factory=dict)

    def _append(self, node: Node, value: np.ndarray) -> Var:
        self.nodes.append(node)
        return Var(value, self, len(self.nodes) - 1)

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        var = self._append(Node("param", (), None), np.asarray(value))
        self.params[name] = var
        return var

    def record(self, op: str, inputs: Sequence, value: np.ndarray, vjp, pattern=None) -> Var:
        ids = tuple(v.id if isinstance(v, Var) else -1 for v in inputs)
        return self._append(Node(op, ids, vjp, pattern), value)

    def patterns(self) -> list[np.ndarray]:
        return [n.pattern for n in self.nodes if n.pattern is not None]

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of the scalar ``loss`` for every registered parameter."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss is not a node of this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for idx in range(loss.id, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            for src, contrib in zip(node.inputs, node.vjp(g)):
                if src < 0 or contrib is None:
                    continue
                grads[src] = contrib if grads[src] is None else grads[src] + contrib
        out = {}
        for name, var in self.params.items():
            g = grads[var.id]
            out[name] = np.zeros_like(var.value) if g is None else g
        return out


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("add", (a, b), out,
                       lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, np.shape(bv))))


def add_n(*xs):
    total = xs[0]
    for x in xs[1:]:
        total = add(total, x)
    return total


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("hadamard", (a, b), out,
                       lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def scale(a, k: float):
    av = value(a)
    out = av * k
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("scale", (a,), out, lambda g: (g * k,))


def one_minus(a):
    av = value(a)
    out = 1 - av
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("one_minus", (a,), out, lambda g: (-g,))


def tanh(a):
    out = np.tanh(value(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def sigmoid(a):
    out = T.sigmoid(value(a))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def relu(a):
    av = value(a)
    out = T.relu(av)
    tape = _tape_of(a)
    if tape is None:
        return out
    active = av > 0
    return tape.record("relu", (a,), out, lambda g: (g * active,), pattern=active)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}


def activation(name: str, a):
    try:
        return ACTIVATIONS[name](a)
    except KeyError:
        raise T.ConfigError(f"unknown activation {name!r}") from None


def getitem(a, index):
    av = value(a)
    out = av[index]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return (full,)

    return tape.record("getitem", (a,), out, vjp)


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("reshape", (a,), out, lambda g: (g.reshape(av.shape),))


def total(a):
    av = value(a)
    out = np.asarray(av.sum())
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("sum", (a,), out, lambda g: (np.broadcast_to(g, av.shape).copy(),))


# -- structured ops -----------------------------------------------------------

def conv2d(x, kernel, bias=None, stride: int = 1):
    xv, kv = value(x), value(kernel)
    bv = None if bias is None else value(bias)
    out = T.conv2d(xv, kv, bv, stride)
    tape = _tape_of(x, kernel, bias)
    if tape is None:
        return out

    def vjp(g):
        gx = T.conv2d_grad_input(g, kv, xv.shape, stride) if isinstance(x, Var) else None
        gk = T.conv2d_grad_kernel(xv, g, kv.shape, stride) if isinstance(kernel, Var) else None
        gb = None
        if isinstance(bias, Var):
            gb = g.sum(axis=(-2, -1)) if g.ndim == 3 else g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return tape.record("conv2d", (x, kernel, bias), out, vjp)


def linear(weight, x, bias=None):
    wv, xv = value(weight), value(x)
    bv = None if bias is None else value(bias)
    out = T.linear(wv, xv, bv)
    tape = _tape_of(weight, x, bias)
    if tape is None:
        return out

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        gw = g2.T @ x2 if isinstance(weight, Var) else None
        gx = (g @ wv) if isinstance(x, Var) else None
        gb = g2.sum(axis=0) if isinstance(bias, Var) else None
        return gw, gx, gb

    return tape.record("linear", (weight, x, bias), out, vjp)


def mean_pool(x, region=None):
    """Spatial mean over the full map or a one-based inclusive region."""
    xv = value(x)
    h, w = xv.shape[-2:]
    if region is None:
        rows, cols = slice(0, h), slice(0, w)
        out = T.mean_pool_spatial(xv)
    else:
        rows, cols = T.region_slices(region, h, w)
        out = T.subregion_mean_pool(xv, region)
    tape = _tape_of(x)
    if tape is None:
        return out
    count = (rows.stop - rows.start) * (cols.stop - cols.start)

    def vjp(g):
        full = np.zeros_like(xv)
        full[..., rows, cols] = (g / count)[..., None, None]
        return (full,)

    return tape.record("mean_pool", (x,), out, vjp)


def max_pool(x, region=None):
    xv = value(x)
    h, w = xv.shape[-2:]
    rows, cols = (slice(0, h), slice(0, w)) if region is None else T.region_slices(region, h, w)
    block = xv[..., rows, cols]
    out = block.max(axis=(-2, -1))
    tape = _tape_of(x)
    if tape is None:
        return out

    flat = block.reshape(*block.shape[:-2], -1)
    arg = flat.argmax(axis=-1)

    def vjp(g):
        gblock = np.zeros_like(flat)
        np.put_along_axis(gblock, arg[..., None], g[..., None], axis=-1)
        full = np.zeros_like(xv)
        full[..., rows, cols] = gblock.reshape(block.shape)
        return (full,)

    return tape.record("max_pool", (x,), out, vjp, pattern=arg)


def take_rows(table, ids):
    """Embedding lookup ``table[ids]`` along the first axis."""
    tv = value(table)
    ids = np.asarray(ids)
    out = tv[ids]
    tape = _tape_of(table)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids, g)
        return (full,)

    return tape.record("take_rows", (table,), out, vjp)


def resize(x, target):
    """Bicubic resize of the last two axes; a fixed linear map."""
    xv = value(x)
    h, w = xv.shape[-2:]
    th, tw = target
    if (h, w) == (th, tw):
        return x
    ry = T.bicubic_matrix(h, th).astype(xv.dtype)
    rx = T.bicubic_matrix(w, tw).astype(xv.dtype)
    out = ry @ xv @ rx.T
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record("bicubic_resize", (x,), out, lambda g: (ry.T @ g @ rx,))


def cross_entropy(logits, targets, weights=None):
    """Sum over rows of ``-weight * log softmax(logits)[target]``."""
    lv = value(logits)
    targets = np.asarray(targets)
    logp = T.log_softmax(lv)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = np.ones_like(picked) if weights is None else np.asarray(weights, dtype=lv.dtype)
    out = np.asarray(-(w * picked).sum())
    tape = _tape_of(logits)
    if tape is None:
        return out

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1, axis=-1)
        return (grad * (w * g)[..., None],)

    return tape.record("cross_entropy", (logits,), out, vjp)


# -- gradient checking --------------------------------------------------------

def relative_error(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


@dataclass
class GradCheckReport:
    max_error: float
    per_param: dict[str, float]
    coordinates: int
    skipped_kinks: int = 0


def _evaluate(fn, params):
    tape = Tape()
    out = fn({k: tape.param(k, v) for k, v in params.items()})
    return np.asarray(value(out)).reshape(()), tape.patterns()


def _same_patterns(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[[dict], object], params: dict[str, np.ndarray], eps: float = 1e-5,
               n_coords: int = 200, seed: int = 0, probe_dtype=np.longdouble) -> GradCheckReport:
    """Compare taped gradients of ``fn(params)`` with central differences.

    ``fn`` receives a mapping of parameter name to ``Var`` and must return a
    scalar. The analytic pass runs in float64; the +-eps probes run in
    ``probe_dtype`` (extended precision by default) so that their rounding
    noise stays far below the 1e-8 error floor.

    Coordinates whose probes flip a relu or max-pool decision are not
    differentiable inside the probe interval; they are skipped and replaced
    by further random coordinates.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = fn({k: tape.param(k, v) for k, v in params.items()})
    base_patterns = tape.patterns()
    if not isinstance(loss, Var):
        # constant fragment: nothing on the tape depends on the parameters
        analytic = {k: np.zeros_like(v) for k, v in params.items()}
    else:
        analytic = tape.backward(loss)

    probe = {k: v.astype(probe_dtype) for k, v in params.items()}
    coords = [(k, i) for k in sorted(params) for i in range(params[k].size)]
    order = np.random.default_rng(seed).permutation(len(coords))
    per_param: dict[str, float] = {}
    checked = skipped = 0
    for pick in order:
        if checked >= n_coords:
            break
        name, flat_idx = coords[pick]
        flat = probe[name].reshape(-1)
        orig = flat[flat_idx]
        flat[flat_idx] = orig + probe_dtype(eps)
        f_plus, pat_plus = _evaluate(fn, probe)
        flat[flat_idx] = orig - probe_dtype(eps)
        f_minus, pat_minus = _evaluate(fn, probe)
        flat[flat_idx] = orig
        if not (_same_patterns(pat_plus, base_patterns) and _same_patterns(pat_minus, base_patterns)):
            skipped += 1
            continue
        numeric = float((f_plus - f_minus) / (2 * probe_dtype(eps)))
        err = float(relative_error(analytic[name].reshape(-1)[flat_idx], numeric))
        per_param[name] = max(per_param.get(name, 0.0), err)
        checked += 1
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(worst, per_param, checked, skipped)
