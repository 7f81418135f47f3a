"""Adaptive activation pruning: threshold controller, gates and pruning plans.

The controller pools the first conv layer's output over (T, H, W) and feeds the
per-channel means to three small heads (affine -> ReLU -> affine -> sigmoid),
one per pruning dimension.  The resulting threshold triple is shared by every
pruned layer of that sample.

Mask rule (used for inference plans): an element survives iff its normalized
importance is strictly greater than the threshold, so ``L == theta`` is pruned.
The training gate instead retains the boundary, ``1[(x - theta + n)/tau >= 0]``;
the two differ only on that measure-zero set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .ava import ImportanceProfile
from .errors import ConfigurationError
from .tensor import Tensor4D, avgpool3d_global

__all__ = [
    "DIMENSIONS", "ControllerParams", "ControllerOutput", "GateConfig", "PruningPlan",
    "controller_thresholds", "controller_graph", "ste_gate", "build_plan", "apply_plan",
    "aap_loss", "gate_masks_graph",
]

DIMENSIONS = ("frame", "channel", "feature")
_HEADS = ("fr", "ch", "fe")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


@dataclass
class ControllerParams:
    """Weights of the three threshold heads, keyed ``"{head}.{w1,b1,w2,b2}"``."""

    arrays: dict

    @classmethod
    def init(cls, c_in: int, hidden: int = 16, theta_init=0.5, rng=None, dtype=np.float32):
        """Random hidden layer, zero output weights, output bias at logit(theta_init).

        ``theta_init`` is a scalar or one value per head (frame, channel, feature).
        """
        rng = np.random.default_rng(0) if rng is None else rng
        thetas = np.broadcast_to(np.asarray(theta_init, dtype=np.float64), (3,))
        arrays = {}
        for head, th in zip(_HEADS, thetas):
            arrays[f"{head}.w1"] = (rng.standard_normal((hidden, c_in)) * np.sqrt(2.0 / c_in)).astype(dtype)
            arrays[f"{head}.b1"] = np.zeros(hidden, dtype)
            arrays[f"{head}.w2"] = np.zeros((1, hidden), dtype)
            arrays[f"{head}.b2"] = np.array([np.log(th / (1 - th))], dtype)
        return cls(arrays)

    @classmethod
    def zeros(cls, c_in: int, hidden: int = 16, dtype=np.float32):
        arrays = {}
        for head in _HEADS:
            arrays[f"{head}.w1"] = np.zeros((hidden, c_in), dtype)
            arrays[f"{head}.b1"] = np.zeros(hidden, dtype)
            arrays[f"{head}.w2"] = np.zeros((1, hidden), dtype)
            arrays[f"{head}.b2"] = np.zeros(1, dtype)
        return cls(arrays)

    @property
    def c_in(self) -> int:
        return self.arrays["fr.w1"].shape[1]

    @property
    def hidden(self) -> int:
        return self.arrays["fr.w1"].shape[0]

    def flops(self, conv1_numel: int) -> int:
        """Pooling adds plus two affine layers per head (1 MAC = 2 FLOPs)."""
        c, hdn = self.c_in, self.hidden
        return int(conv1_numel + 3 * (2 * c * hdn + 2 * hdn))


@dataclass(frozen=True)
class ControllerOutput:
    theta_fr: float
    theta_ch: float
    theta_fe: float

    def __getitem__(self, dim: str) -> float:
        return {"frame": self.theta_fr, "channel": self.theta_ch, "feature": self.theta_fe}[dim]

    def as_tuple(self):
        return (self.theta_fr, self.theta_ch, self.theta_fe)

    @property
    def total(self) -> float:
        return self.theta_fr + self.theta_ch + self.theta_fe


@dataclass(frozen=True)
class GateConfig:
    tau: float = 0.1
    eps: float = 0.01**2
    lam: float = 0.01
    train_mode: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.eps < 0:
            raise ConfigurationError(f"eps (noise variance) must be >= 0, got {self.eps}")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be > 0, got {self.lam}")


def controller_thresholds(conv1_out: Tensor4D, p: ControllerParams) -> ControllerOutput:
    pooled = avgpool3d_global(conv1_out).astype(np.float64)
    if pooled.shape != (p.c_in,):
        raise ConfigurationError(f"controller expects {p.c_in} channels, got {pooled.shape[0]}")
    thetas = []
    for head in _HEADS:
        a = p.arrays
        hidden = np.maximum(a[f"{head}.w1"].astype(np.float64) @ pooled + a[f"{head}.b1"], 0)
        z = a[f"{head}.w2"].astype(np.float64) @ hidden + a[f"{head}.b2"]
        thetas.append(float(_sigmoid(z[0])))
    return ControllerOutput(*thetas)


def controller_graph(conv1_out: ad.Node, nodes: dict) -> dict:
    """Batched thresholds; ``nodes`` maps ``"{head}.{w1,...}"`` to graph nodes.

    Returns ``{"frame": (N,), "channel": (N,), "feature": (N,)}`` nodes.
    """
    pooled = ad.mean(conv1_out, axis=(1, 3, 4))
    out = {}
    for head, dim in zip(_HEADS, DIMENSIONS):
        hidden = ad.relu(ad.affine(pooled, nodes[f"{head}.w1"], nodes[f"{head}.b1"]))
        z = ad.affine(hidden, nodes[f"{head}.w2"], nodes[f"{head}.b2"])
        out[dim] = ad.reshape(ad.sigmoid(z), (pooled.shape[0],))
    return out


def ste_gate(x, theta, cfg: GateConfig, rng=None, hard: bool = True):
    """Gate node with hard forward and sigmoid backward.

    In train mode a fresh ``n ~ N(0, eps)`` of ``x``'s shape is drawn from
    ``rng``; in eval mode ``n = 0``.  Plain-array inputs are lifted onto a new
    float64 tape.
    """
    if not isinstance(x, ad.Node) and not isinstance(theta, ad.Node):
        tape = ad.Tape(np.float64)
        x = tape.param("x", np.asarray(x, dtype=np.float64))
        theta = tape.param("theta", np.asarray(theta, dtype=np.float64))
    noise = None
    if cfg.train_mode and cfg.eps > 0:
        rng = np.random.default_rng() if rng is None else rng
        dtype = x.value.dtype if isinstance(x, ad.Node) else np.float64
        noise = (rng.standard_normal(np.shape(x.value)) * np.sqrt(cfg.eps)).astype(dtype)
    return ad.ste_gate(x, theta, cfg.tau, noise=noise, hard=hard)


class PruningPlan:
    """Retention masks of one layer input for one sample.

    ``frame_mask`` is bool[T], ``channel_mask`` bool[T, C] and ``feature_mask``
    bool[T, H*W].  Channel and feature masks are cleared on pruned frames at
    construction, so frame pruning always dominates.
    """

    __slots__ = ("frame_mask", "channel_mask", "feature_mask", "height", "width")

    def __init__(self, frame_mask, channel_mask, feature_mask, height, width):
        fm = np.asarray(frame_mask, dtype=bool)
        cm = np.asarray(channel_mask, dtype=bool) & fm[:, None]
        em = np.asarray(feature_mask, dtype=bool).reshape(fm.shape[0], -1) & fm[:, None]
        if cm.shape[0] != fm.shape[0] or em.shape[1] != height * width:
            raise ConfigurationError("plan masks have inconsistent shapes")
        self.frame_mask, self.channel_mask, self.feature_mask = fm, cm, em
        self.height, self.width = int(height), int(width)

    @classmethod
    def full(cls, t, c, h, w):
        return cls(np.ones(t, bool), np.ones((t, c), bool), np.ones((t, h * w), bool), h, w)

    @property
    def dims(self):
        return (self.frame_mask.size, self.channel_mask.shape[1], self.height, self.width)

    def element_mask(self) -> np.ndarray:
        """bool[T, C, H, W] of retained activation elements."""
        t, c, h, w = self.dims
        return self.channel_mask[:, :, None, None] & self.feature_mask.reshape(t, 1, h, w)

    def retained_fractions(self) -> dict:
        return {
            "frame": float(self.frame_mask.mean()),
            "channel": float(self.channel_mask.mean()),
            "feature": float(self.feature_mask.mean()),
        }

    def satisfies_floor(self) -> bool:
        if not self.frame_mask.any():
            return False
        kept = self.frame_mask
        return bool(self.channel_mask[kept].any(axis=1).all() and self.feature_mask[kept].any(axis=1).all())

    def __eq__(self, other):
        if not isinstance(other, PruningPlan):
            return NotImplemented
        return (self.dims == other.dims and np.array_equal(self.frame_mask, other.frame_mask)
                and np.array_equal(self.channel_mask, other.channel_mask)
                and np.array_equal(self.feature_mask, other.feature_mask))

    def __repr__(self):
        f = self.retained_fractions()
        return (f"PruningPlan(dims={self.dims}, frame={f['frame']:.2f}, "
                f"channel={f['channel']:.2f}, feature={f['feature']:.2f})")


def threshold_masks(n_fr, n_ch, n_fe, theta, dims=DIMENSIONS, floor=True):
    """Frame/channel/feature keep masks from normalized importances (no plan object)."""
    keep_fr = n_fr > theta[0] if "frame" in dims else np.ones(n_fr.shape, bool)
    keep_ch = n_ch > theta[1] if "channel" in dims else np.ones(n_ch.shape, bool)
    keep_fe = n_fe > theta[2] if "feature" in dims else np.ones(n_fe.shape, bool)
    keep_ch = keep_ch & keep_fr[:, None]
    keep_fe = keep_fe & keep_fr[:, None]
    if floor:
        if not keep_fr.any():
            keep_fr[np.argmax(n_fr)] = True
        for t in np.flatnonzero(keep_fr):
            if not keep_ch[t].any():
                keep_ch[t, np.argmax(n_ch[t])] = True
            if not keep_fe[t].any():
                keep_fe[t, np.argmax(n_fe[t])] = True
    return keep_fr, keep_ch, keep_fe


def build_plan(profile: ImportanceProfile, theta: ControllerOutput, dims=DIMENSIONS,
               height=None, width=None) -> PruningPlan:
    """Threshold the normalized profile (``L <= theta`` is pruned), then apply the safety floor."""
    t, c = profile.l_ch.shape
    hw = profile.l_fe.shape[1]
    if height is None:
        height = width = int(round(np.sqrt(hw)))
    if height * width != hw:
        raise ConfigurationError(f"feature count {hw} does not factor as {height}x{width}")
    fr, ch, fe = threshold_masks(profile.n_fr, profile.n_ch, profile.n_fe, theta.as_tuple(), dims)
    return PruningPlan(fr, ch, fe, height, width)


def apply_plan(x: Tensor4D, plan: PruningPlan) -> Tensor4D:
    if tuple(x.shape) != plan.dims:
        raise ConfigurationError(f"plan dims {plan.dims} do not match tensor {x.shape}")
    return Tensor4D(np.where(plan.element_mask(), x.data, 0).astype(x.dtype), dtype=x.dtype)


def aap_loss(ce, theta, lam: float):
    """``ce - lam * (theta_fr + theta_ch + theta_fe)``; batched thetas are averaged.

    ``theta`` is a :class:`ControllerOutput` or a dict of (N,) threshold nodes.
    """
    if not lam > 0:
        raise ConfigurationError(f"lambda must be > 0, got {lam}")
    if isinstance(theta, ControllerOutput):
        if isinstance(ce, ad.Node):
            return ad.sub(ce, ce.tape.const(lam * theta.total))
        return float(ce) - lam * theta.total
    total = None
    for dim in DIMENSIONS:
        m = ad.mean(theta[dim])
        total = m if total is None else ad.add(total, m)
    return ad.sub(ce, ad.scale(total, lam))


def gate_masks_graph(normalized: dict, theta: dict, gates: dict, shape, rng=None, dims=DIMENSIONS):
    """Element mask node (N, T, C, H, W) from per-dimension STE gates.

    ``gates`` maps dimension to :class:`GateConfig`.  Disabled dimensions gate
    to one.  The safety floor is decided on the hard forward values and frozen
    as a constant: a floored entry reads 1 with gradient scaled by zero.
    """
    n, t, c, h, w = shape
    hard = {}
    gate_nodes = {}
    for dim in DIMENSIONS:
        if dim not in dims:
            continue
        th = ad.reshape(theta[dim], (n, 1))
        gate_nodes[dim] = ste_gate(normalized[dim], th, gates[dim], rng=rng)
        hard[dim] = gate_nodes[dim].value > 0.5
    # safety floor, per sample
    keep = {
        "frame": hard.get("frame", np.ones((n, t), bool)).copy(),
        "channel": hard.get("channel", np.ones((n, t * c), bool)).reshape(n, t, c).copy(),
        "feature": hard.get("feature", np.ones((n, t * h * w), bool)).reshape(n, t, h * w).copy(),
    }
    floors = {d: np.zeros_like(keep[d]) for d in DIMENSIONS}
    for i in range(n):
        fr = keep["frame"][i]
        if not fr.any():
            j = np.argmax(normalized["frame"].value[i])
            floors["frame"][i, j] = True
            fr[j] = True
        for dim, dd in (("channel", c), ("feature", h * w)):
            kept = keep[dim][i] & fr[:, None]
            vals = normalized[dim].value[i].reshape(t, dd)
            for tt in np.flatnonzero(fr):
                if not kept[tt].any():
                    j = np.argmax(vals[tt])
                    if not keep[dim][i, tt, j]:
                        floors[dim][i, tt, j] = True
    dtype = normalized["frame"].value.dtype
    shapes = {"frame": (n, t, 1, 1, 1), "channel": (n, t, c, 1, 1), "feature": (n, t, 1, h, w)}
    mask = None
    for dim in DIMENSIONS:
        if dim not in gate_nodes:
            continue
        g = gate_nodes[dim]
        fl = floors[dim].reshape(g.shape).astype(dtype)
        if fl.any():
            g = ad.add(ad.mul(g, 1 - fl), fl)
        g = ad.reshape(g, shapes[dim])
        mask = g if mask is None else ad.mul(mask, g)
    return mask
