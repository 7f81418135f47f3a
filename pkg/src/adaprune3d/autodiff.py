"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records nodes in creation order, which is a topological order
because every op only consumes existing nodes.  Each node keeps the forward
function that produced it, so :meth:`Tape.replay` can recompute the whole graph
after parameters are perturbed in place; :func:`grad_check` relies on that.

Random quantities (gate noise) and piecewise-constant decisions (safety-floor
argmax) are drawn when the graph is built and frozen into the node, so a replay
with identical inputs is bit-for-bit identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AdaPruneError, ConfigurationError, UsageError

__all__ = [
    "Node", "Tape", "backward", "grad_check", "GradCheckReport",
    "add", "sub", "mul", "scale", "neg", "relu", "abs_", "sigmoid", "sum_", "mean",
    "reshape", "variance", "l1_normalize", "affine", "conv3d", "softmax_cross_entropy",
    "ste_gate", "SGD", "Adam",
]


class Node:
    __slots__ = ("id", "op", "parents", "value", "ctx", "fwd", "bwd", "tape", "name", "kink")

    def __init__(self, tape, op, parents, fwd, bwd, kink=None, name=None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.parents = parents
        self.fwd = fwd
        self.bwd = bwd
        self.kink = kink
        self.name = name
        self.value, self.ctx = fwd(*[p.value for p in parents]) if parents else (None, None)

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


class Tape:
    """Ordered node list plus a registry of named parameter leaves."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _leaf(self, op, value, name=None):
        node = Node(self, op, (), None, None, name=name)
        node.value = value
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        """Register a trainable leaf.  ``value`` is used without copying."""
        if name in self.params:
            raise UsageError(f"parameter {name!r} registered twice")
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        node = self._leaf("param", value, name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._leaf("const", np.asarray(value, dtype=self.dtype))

    def push(self, op, parents, fwd, bwd, kink=None) -> Node:
        node = Node(self, op, tuple(parents), fwd, bwd, kink=kink)
        self.nodes.append(node)
        return node

    def replay(self) -> None:
        for node in self.nodes:
            if node.parents:
                node.value, node.ctx = node.fwd(*[p.value for p in node.parents])

    def kink_pattern(self):
        return [node.kink(node) for node in self.nodes if node.kink is not None]


def _node(x, tape: Tape) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise UsageError("at least one operand must be a graph node")


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _node(a, tape), _node(b, tape)
    sa, sb = a.shape, b.shape
    return tape.push("add", (a, b), lambda x, y: (x + y, None),
                     lambda g, ctx: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _node(a, tape), _node(b, tape)
    sa, sb = a.shape, b.shape
    return tape.push("sub", (a, b), lambda x, y: (x - y, None),
                     lambda g, ctx: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    """Broadcasting elementwise product (frame/channel/feature reweighting)."""
    tape = _tape_of(a, b)
    a, b = _node(a, tape), _node(b, tape)
    sa, sb = a.shape, b.shape

    def fwd(x, y):
        return x * y, (x, y)

    def bwd(g, ctx):
        x, y = ctx
        return _unbroadcast(g * y, sa), _unbroadcast(g * x, sb)

    return tape.push("mul", (a, b), fwd, bwd)


def scale(a: Node, k: float):
    return a.tape.push("scale", (a,), lambda x: (x * k, None), lambda g, ctx: (g * k,))


def neg(a: Node):
    return scale(a, -1.0)


def relu(a: Node):
    def fwd(x):
        return np.maximum(x, 0), x > 0

    return a.tape.push("relu", (a,), fwd, lambda g, mask: (g * mask,),
                       kink=lambda n: n.ctx)


def abs_(a: Node):
    # subgradient 0 at x == 0
    def fwd(x):
        return np.abs(x), np.sign(x)

    return a.tape.push("abs", (a,), fwd, lambda g, sign: (g * sign,),
                       kink=lambda n: n.ctx)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Node):
    def fwd(x):
        s = _sigmoid(x)
        return s, s

    return a.tape.push("sigmoid", (a,), fwd, lambda g, s: (g * s * (1 - s),))


# --------------------------------------------------------------------------
# reductions and shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Node, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axis(axis, len(shape))

    def bwd(g, ctx):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.push("sum", (a,), lambda x: (x.sum(axis=axes, keepdims=keepdims), None), bwd)


def mean(a: Node, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axis(axis, len(shape))
    count = int(np.prod([shape[i] for i in axes]))
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a: Node, shape):
    src = a.shape
    return a.tape.push("reshape", (a,), lambda x: (x.reshape(shape), None),
                       lambda g, ctx: (g.reshape(src),))


def variance(a: Node, axis=-1):
    """Population variance (divide by D) along ``axis``."""
    def fwd(x):
        centered = x - x.mean(axis=axis, keepdims=True)
        return (centered**2).mean(axis=axis), centered

    def bwd(g, centered):
        d = centered.shape[axis]
        return (2.0 * np.expand_dims(g, axis) * centered / d,)

    return a.tape.push("variance", (a,), fwd, bwd)


def l1_normalize(a: Node, axis=-1):
    """Rescale nonnegative entries to sum to one; an all-zero slice maps to uniform.

    The uniform fallback is constant, so its gradient is zero.
    """
    def fwd(x):
        s = x.sum(axis=axis, keepdims=True)
        zero = s == 0
        d = x.shape[axis]
        y = np.where(zero, 1.0 / d, x / np.where(zero, 1, s)).astype(x.dtype, copy=False)
        return y, (y, s, zero)

    def bwd(g, ctx):
        y, s, zero = ctx
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0, (g - inner) / np.where(zero, 1, s)),)

    return a.tape.push("l1_normalize", (a,), fwd, bwd)


# --------------------------------------------------------------------------
# layers

def affine(x: Node, w, b):
    """``x @ w.T + b`` for a batch x of shape (N, in) and w of shape (out, in)."""
    tape = _tape_of(x, w, b)
    x, w, b = _node(x, tape), _node(w, tape), _node(b, tape)
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ConfigurationError(f"affine shape mismatch: x{x.shape} W{w.shape} b{b.shape}")

    def fwd(xv, wv, bv):
        return xv @ wv.T + bv, (xv, wv)

    def bwd(g, ctx):
        xv, wv = ctx
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return tape.push("affine", (x, w, b), fwd, bwd)


def _conv_out(dims, kernel, stride, padding):
    return tuple((d + 2 * p - k) // s + 1 for d, k, s, p in zip(dims, kernel, stride, padding))


def _im2col(xv, kernel, stride, pad_lo, pad_hi):
    """Rows (n, t, h, w) x columns (k_t, k_h, k_w, c) of a (N, T, C, H, W) array.

    Gathering from a channels-last copy keeps every column block contiguous.
    """
    (s_t, s_h, s_w) = stride
    xcl = np.ascontiguousarray(xv.transpose(0, 1, 3, 4, 2))
    xp = np.pad(xcl, ((0, 0), (pad_lo[0], pad_hi[0]), (pad_lo[1], pad_hi[1]), (pad_lo[2], pad_hi[2]), (0, 0)))
    win = sliding_window_view(xp, kernel, axis=(1, 2, 3))[:, ::s_t, ::s_h, ::s_w]
    n, t_o, h_o, w_o = win.shape[:4]
    return win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * t_o * h_o * w_o, -1), (n, t_o, h_o, w_o)


def conv3d(x: Node, w, b, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Batched 3D cross-correlation via im2col.

    x: (N, T, C_in, H, W), w: (C_out, C_in, K_t, K_h, K_w), b: (C_out,);
    result: (N, T_out, C_out, H_out, W_out).  The input gradient is the
    correlation of the zero-dilated output gradient with the flipped kernel.
    """
    tape = _tape_of(x, w, b)
    x, w, b = _node(x, tape), _node(w, tape), _node(b, tape)
    n, t, c, h, wd = x.shape
    c_out, c_in, k_t, k_h, k_w = w.shape
    if c != c_in:
        raise ConfigurationError(f"conv3d: input has {c} channels, weights expect {c_in}")
    kernel = (k_t, k_h, k_w)
    stride, padding = tuple(stride), tuple(padding)
    t_o, h_o, w_o = _conv_out((t, h, wd), kernel, stride, padding)
    if min(t_o, h_o, w_o) < 1:
        raise ConfigurationError("conv3d: input smaller than kernel")
    if any(p > k - 1 for p, k in zip(padding, kernel)):
        raise ConfigurationError("conv3d: padding must not exceed kernel size - 1")
    back_lo = tuple(k - 1 - p for k, p in zip(kernel, padding))
    back_hi = tuple(lo + (d + 2 * p - k) % s for lo, d, p, k, s in
                    zip(back_lo, (t, h, wd), padding, kernel, stride))

    def fwd(xv, wv, bv):
        cols, _ = _im2col(xv, kernel, stride, padding, padding)
        wm = wv.transpose(0, 2, 3, 4, 1).reshape(c_out, -1)
        out = (cols @ wm.T + bv).reshape(n, t_o, h_o, w_o, c_out).transpose(0, 1, 4, 2, 3)
        return np.ascontiguousarray(out), (cols, wv)

    need_x, need_w = x.op != "const", w.op != "const"

    def bwd(g, ctx):
        cols, wv = ctx
        go = g.transpose(0, 1, 3, 4, 2).reshape(-1, c_out)
        gw = None
        if need_w:
            gw = (go.T @ cols).reshape(c_out, k_t, k_h, k_w, c_in).transpose(0, 4, 1, 2, 3)
        gb = go.sum(axis=0)
        if not need_x:
            return None, gw, gb
        if stride == (1, 1, 1):
            gd = g
        else:
            s_t, s_h, s_w = stride
            gd = np.zeros((n, (t_o - 1) * s_t + 1, c_out, (h_o - 1) * s_h + 1, (w_o - 1) * s_w + 1), g.dtype)
            gd[:, ::s_t, :, ::s_h, ::s_w] = g
        gcols, _ = _im2col(gd, kernel, (1, 1, 1), back_lo, back_hi)
        wflip = wv[:, :, ::-1, ::-1, ::-1].transpose(1, 2, 3, 4, 0).reshape(c_in, -1)
        gx = (gcols @ wflip.T).reshape(n, t, h, wd, c_in).transpose(0, 1, 4, 2, 3)
        return gx, gw, gb

    return tape.push("conv3d", (x, w, b), fwd, bwd)


def softmax_cross_entropy(logits: Node, labels):
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]

    def fwd(z):
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return -logp[np.arange(n), labels].mean(), np.exp(logp)

    def bwd(g, probs):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1
        return (g * grad / n,)

    return logits.tape.push("softmax_ce", (logits,), fwd, bwd)


def ste_gate(x, theta, tau: float, noise=None, hard: bool = True):
    """Straight-through threshold gate.

    Forward is ``1[(x - theta + n) / tau >= 0]`` (or the sigmoid itself with
    ``hard=False``); backward always differentiates ``sigmoid((x - theta + n)/tau)``.
    ``noise`` is a fixed array drawn by the caller, or ``None`` for n = 0.
    """
    if tau <= 0:
        raise ConfigurationError(f"gate temperature must be > 0, got {tau}")
    tape = _tape_of(x, theta)
    x, theta = _node(x, tape), _node(theta, tape)
    sx, st = x.shape, theta.shape

    def fwd(xv, tv):
        z = xv - tv
        if noise is not None:
            z = z + noise
        z = z / tau
        s = _sigmoid(z)
        y = (z >= 0).astype(s.dtype) if hard else s
        return y, s

    def bwd(g, s):
        d = g * s * (1 - s) / tau
        return _unbroadcast(d, sx), _unbroadcast(-d, st)

    kink = (lambda n: n.value > 0.5) if hard else None
    return tape.push("ste_gate", (x, theta), fwd, bwd, kink=kink)


# --------------------------------------------------------------------------

def backward(tape: Tape, loss: Node) -> dict:
    """Gradients of scalar ``loss`` w.r.t. every registered parameter."""
    if loss.tape is not tape:
        raise UsageError("loss node belongs to a different tape")
    if np.ndim(loss.value) != 0 and np.size(loss.value) != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
    grads = {loss.id: np.ones_like(np.asarray(loss.value))}
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None)
        if g is None or not node.parents:
            if g is not None:
                grads[node.id] = g
            continue
        for parent, pg in zip(node.parents, node.bwd(g, node.ctx)):
            if parent.id >= node.id:
                raise AdaPruneError(f"cycle detected at node {node.id} ({node.op})")
            if pg is None or parent.op == "const":
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    out = {}
    for name, p in tape.params.items():
        g = grads.get(p.id)
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=p.value.dtype).reshape(p.shape)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    checked: int = 0
    excluded: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.max_rel_error.values())


def _rel_err(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(tape: Tape, loss: Node, h: float = 1e-5, tol: float = 1e-4,
               params=None, max_coords=None, rng=None) -> GradCheckReport:
    """Compare analytic gradients with central differences (float64 tapes only).

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.  A coordinate is
    excluded when the +h / -h replays disagree on the activation pattern of any
    kinked op (relu, abs, hard gate), i.e. the perturbation straddles a kink.
    ``max_coords`` samples that many coordinates per parameter.
    """
    if tape.dtype != np.float64:
        raise UsageError("grad_check requires a float64 tape")
    tape.replay()
    analytic = backward(tape, loss)
    names = list(tape.params) if params is None else list(params)
    rng = np.random.default_rng(0) if rng is None else rng
    report = GradCheckReport(tol=tol)
    for name in names:
        value = tape.params[name].value
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            tape.replay()
            f_plus, pat_plus = float(loss.value), tape.kink_pattern()
            flat[i] = orig - h
            tape.replay()
            f_minus, pat_minus = float(loss.value), tape.kink_pattern()
            flat[i] = orig
            if any(not np.array_equal(p, m) for p, m in zip(pat_plus, pat_minus)):
                report.excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, _rel_err(float(analytic[name].reshape(-1)[i]), numeric))
            report.checked += 1
        report.max_rel_error[name] = worst
    tape.replay()
    return report


# --------------------------------------------------------------------------
# optimizers (update parameter arrays in place)

class SGD:
    def __init__(self, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self._velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self._velocity[name] = v
            p -= (self.lr * v).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, lr=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self._m, self._v, self._t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> None:
        self._t += 1
        b1, b2 = self.betas
        for name, g in grads.items():
            m = b1 * self._m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self._v.get(name, 0.0) + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1**self._t)
            v_hat = v / (1 - b2**self._t)
            p = params[name]
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)
