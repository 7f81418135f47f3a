"""Activation variability amplification.

Three attention stages reweight an activation tensor along frames, channels
and spatial features (ReLU after each).  Each stage also yields a nonnegative
importance vector: the weight magnitude times the mean absolute activation of
the slice it scales.  Importance vectors are l1-normalized; their population
variances summed over stages and layers form the term subtracted from the
training loss.

Stage inputs: frame importance reads the raw tensor ``X``, channel importance
reads ``X_FR = relu(X * w_fr)``, feature importance reads
``X_CH = relu(X_FR * w_ch)``.  The stage output is ``X_FE = relu(X_CH * w_fe)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, UsageError
from .tensor import FlatView, Tensor4D

__all__ = [
    "AvaParams", "ImportanceProfile", "compute_l_fr", "compute_l_ch", "compute_l_fe",
    "l1_normalize", "ava_forward", "hoyer", "ava_loss", "ava_graph",
]


@dataclass
class AvaParams:
    w_fr: np.ndarray
    w_ch: np.ndarray
    w_fe: np.ndarray

    @classmethod
    def ones(cls, t, c, h, w, dtype=np.float32):
        return cls(np.ones(t, dtype), np.ones(c, dtype), np.ones(h * w, dtype))

    def check(self, t, c, hw):
        if self.w_fr.shape != (t,) or self.w_ch.shape != (c,) or self.w_fe.shape != (hw,):
            raise ConfigurationError(
                f"AVA weights {self.w_fr.shape}/{self.w_ch.shape}/{self.w_fe.shape} "
                f"do not match activation T={t}, C={c}, H*W={hw}"
            )


def l1_normalize(v) -> np.ndarray:
    """Scale a nonnegative array to sum to one; all-zero input maps to uniform."""
    v = np.asarray(v, dtype=np.float64)
    s = v.sum()
    if s == 0:
        return np.full(v.shape, 1.0 / v.size)
    return v / s


@dataclass
class ImportanceProfile:
    """Raw and l1-normalized importances of one layer for one sample.

    ``l_fr`` has shape (T,), ``l_ch`` (T, C) and ``l_fe`` (T, H*W); channel and
    feature vectors are normalized jointly over all their entries.
    """

    l_fr: np.ndarray
    l_ch: np.ndarray
    l_fe: np.ndarray

    def __post_init__(self):
        self.n_fr = l1_normalize(self.l_fr)
        self.n_ch = l1_normalize(self.l_ch)
        self.n_fe = l1_normalize(self.l_fe)

    @property
    def var_fr(self) -> float:
        return float(self.n_fr.var())

    @property
    def var_ch(self) -> float:
        return float(self.n_ch.var())

    @property
    def var_fe(self) -> float:
        return float(self.n_fe.var())

    @property
    def var_ava(self) -> float:
        return self.var_fr + self.var_ch + self.var_fe


def _check_len(w, n, what):
    w = np.asarray(w)
    if w.shape != (n,):
        raise ConfigurationError(f"{what} has shape {w.shape}, expected ({n},)")
    return w


def compute_l_fr(x: FlatView, w_fr) -> np.ndarray:
    t, hw, c = x.shape
    w_fr = _check_len(w_fr, t, "w_fr")
    m = np.abs(x.matrix().astype(np.float64))
    return np.abs(w_fr) / (c * hw) * m.sum(axis=(1, 2))


def compute_l_ch(x: FlatView, w_ch) -> np.ndarray:
    t, hw, c = x.shape
    w_ch = _check_len(w_ch, c, "w_ch")
    m = np.abs(x.matrix().astype(np.float64))
    return np.abs(w_ch)[None, :] / hw * m.sum(axis=1)


def compute_l_fe(x: FlatView, w_fe) -> np.ndarray:
    t, hw, c = x.shape
    w_fe = _check_len(w_fe, hw, "w_fe")
    m = np.abs(x.matrix().astype(np.float64))
    return np.abs(w_fe)[None, :] / c * m.sum(axis=2)


def ava_forward(x: Tensor4D, p: AvaParams):
    """Reweight ``x`` along frames, channels and features; return (X_FE, profile)."""
    t, c, h, w = x.shape
    p.check(t, c, h * w)
    data = x.data
    dt = data.dtype
    l_fr = compute_l_fr(x.flat(), p.w_fr)
    x_fr = Tensor4D(np.maximum(data * p.w_fr.astype(dt)[:, None, None, None], 0), dtype=dt)
    l_ch = compute_l_ch(x_fr.flat(), p.w_ch)
    x_ch = Tensor4D(np.maximum(x_fr.data * p.w_ch.astype(dt)[None, :, None, None], 0), dtype=dt)
    l_fe = compute_l_fe(x_ch.flat(), p.w_fe)
    x_fe = np.maximum(x_ch.data * p.w_fe.astype(dt).reshape(1, 1, h, w), 0)
    return Tensor4D(x_fe, dtype=dt), ImportanceProfile(l_fr, l_ch, l_fe)


def hoyer(x) -> float:
    """Hoyer sparsity (sqrt(D) - |x|_1/|x|_2) / (sqrt(D) - 1) of a simplex vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    if d < 2:
        raise UsageError("Hoyer measure needs D >= 2")
    if (x < 0).any() or abs(x.sum() - 1.0) > 1e-6:
        raise UsageError("Hoyer measure expects a point on the probability simplex")
    # scaling by the max makes the uniform vector all ones, so both endpoints are exact
    y = x / x.max()
    ratio = np.sqrt(y.sum() ** 2 / (y * y).sum())
    root = np.sqrt(d)
    return float((root - ratio) / (root - 1))


def ava_loss(ce, var_f, beta: float):
    """``ce - beta * var_f`` as a graph node (or plain float for float inputs)."""
    if not beta > 0:
        raise ConfigurationError(f"beta must be > 0, got {beta}")
    if isinstance(ce, ad.Node) or isinstance(var_f, ad.Node):
        tape = ce.tape if isinstance(ce, ad.Node) else var_f.tape
        var_f = var_f if isinstance(var_f, ad.Node) else tape.const(var_f)
        return ad.sub(ce, ad.scale(var_f, beta))
    return float(ce) - beta * float(var_f)


def ava_graph(x: ad.Node, w_fr: ad.Node, w_ch: ad.Node, w_fe: ad.Node):
    """Batched AVA stage on a (N, T, C, H, W) node.

    Returns ``(x_fe, normalized, var_ava)`` where ``normalized`` maps
    ``"frame"``/``"channel"``/``"feature"`` to (N, T), (N, T*C), (N, T*H*W)
    nodes and ``var_ava`` has shape (N,).
    """
    n, t, c, h, w = x.shape
    l_fr = ad.mul(ad.mean(ad.abs_(x), axis=(2, 3, 4)), ad.abs_(w_fr))
    x_fr = ad.relu(ad.mul(x, ad.reshape(w_fr, (1, t, 1, 1, 1))))
    l_ch = ad.mul(ad.mean(ad.abs_(x_fr), axis=(3, 4)), ad.abs_(w_ch))
    x_ch = ad.relu(ad.mul(x_fr, ad.reshape(w_ch, (1, 1, c, 1, 1))))
    l_fe = ad.mul(ad.reshape(ad.mean(ad.abs_(x_ch), axis=2), (n, t, h * w)), ad.abs_(w_fe))
    x_fe = ad.relu(ad.mul(x_ch, ad.reshape(w_fe, (1, 1, 1, h, w))))
    normalized = {
        "frame": ad.l1_normalize(l_fr, axis=-1),
        "channel": ad.l1_normalize(ad.reshape(l_ch, (n, t * c)), axis=-1),
        "feature": ad.l1_normalize(ad.reshape(l_fe, (n, t * h * w)), axis=-1),
    }
    var_ava = ad.add(ad.add(ad.variance(normalized["frame"]), ad.variance(normalized["channel"])),
                     ad.variance(normalized["feature"]))
    return x_fe, normalized, var_ava
