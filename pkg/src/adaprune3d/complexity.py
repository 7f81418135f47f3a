"""Spatial and temporal information content of clips, and the FLOPs-vs-complexity fit.

Both scores are ``log(1 + E_high / E_low)`` with orthonormal DCT-II energies:

* spatial: 2D DCT of every frame (channels averaged first); a coefficient
  (u, v) is high-frequency iff ``u >= split*H`` or ``v >= split*W``; energies
  are averaged over frames.
* temporal: 1D DCT along time for every pixel; index ``k >= split*T`` is high;
  energies are averaged over pixels.

``E_low`` includes the DC coefficient.  The default split is the half band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct, dctn

from .errors import NumericalError, UsageError
from .tensor import Tensor4D

__all__ = ["ComplexityScore", "RegressionResult", "complexity_scores", "fit_flops_regression",
           "log_energy_ratio"]


@dataclass(frozen=True)
class ComplexityScore:
    r_spatial: float
    r_temporal: float


@dataclass(frozen=True)
class RegressionResult:
    intercept: float
    b_spatial: float
    b_temporal: float
    r2: float

    @property
    def r(self) -> float:
        return math.sqrt(self.r2)

    @property
    def coefficients(self):
        return np.array([self.intercept, self.b_spatial, self.b_temporal])

    def predict(self, r_spatial, r_temporal):
        return self.intercept + self.b_spatial * np.asarray(r_spatial) + self.b_temporal * np.asarray(r_temporal)


def log_energy_ratio(e_high: float, e_low: float) -> float:
    if e_high == 0:
        return 0.0
    if e_low == 0:
        return math.inf
    return math.log1p(e_high / e_low)


def complexity_scores(clip, split: float = 0.5) -> ComplexityScore:
    data = clip.data if isinstance(clip, Tensor4D) else np.asarray(clip)
    if data.ndim != 4:
        raise UsageError(f"expected a (T, C, H, W) clip, got shape {data.shape}")
    frames = data.astype(np.float64).mean(axis=1)
    t, h, w = frames.shape
    if t < 2:
        raise UsageError("temporal complexity needs at least two frames")

    spec = dctn(frames, type=2, norm="ortho", axes=(1, 2)) ** 2
    high_sp = (np.arange(h)[:, None] >= split * h) | (np.arange(w)[None, :] >= split * w)
    e_high_s = spec[:, high_sp].sum(axis=1).mean()
    e_low_s = spec[:, ~high_sp].sum(axis=1).mean()

    temp = dct(frames, type=2, norm="ortho", axis=0) ** 2
    high_t = np.arange(t) >= split * t
    e_high_t = temp[high_t].sum(axis=0).mean()
    e_low_t = temp[~high_t].sum(axis=0).mean()
    return ComplexityScore(log_energy_ratio(e_high_s, e_low_s), log_energy_ratio(e_high_t, e_low_t))


def fit_flops_regression(samples) -> RegressionResult:
    """Ordinary least squares of FLOPs on ``[1, R^s, R^t]``.

    ``samples`` is an iterable of ``(r_spatial, r_temporal, flops)``.
    """
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 3:
        raise UsageError("need at least three (R^s, R^t, flops) samples")
    design = np.column_stack([np.ones(len(arr)), arr[:, 0], arr[:, 1]])
    y = arr[:, 2]
    rank = np.linalg.matrix_rank(design)
    if rank < 3:
        raise NumericalError(
            f"design matrix [1, R^s, R^t] has rank {rank} < 3; the complexity scores are "
            "constant or collinear across samples"
        )
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - design @ coef) ** 2).sum())
    r2 = 0.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return RegressionResult(float(coef[0]), float(coef[1]), float(coef[2]), r2)
