"""Structured-sparse 3D convolution, FLOP accounting and the dense-vs-pruned benchmark.

FLOP convention: one multiply-accumulate is two FLOPs.  Bias, ReLU, pooling and
attention reweighting are not part of the conv counts; the latter two are
itemized as AVA and controller overhead in :class:`RunReport`.

The pruned count charges every MAC a dense kernel would do except those whose
input operand is a pruned activation element.  MACs against zero padding are
charged exactly as in the dense count, so an all-true plan reproduces the dense
number and the ratio is comparable across layers.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import _kernel
from .aap import PruningPlan
from .errors import ConfigurationError
from .tensor import ConvSpec, Tensor4D, check_conv_input, conv3d_dense

__all__ = [
    "sparse_conv3d", "flop_count_dense", "flop_count_pruned", "axis_coverage",
    "LayerFlopReport", "RunReport", "bench", "forced_plan",
]

REPORT_SCHEMA_VERSION = 1


def _check_plan(x_dims, plan: PruningPlan):
    if tuple(x_dims) != plan.dims:
        raise ConfigurationError(f"plan dims {plan.dims} do not match input {tuple(x_dims)}")


def sparse_conv3d(x: Tensor4D, plan: PruningPlan, spec: ConvSpec) -> Tensor4D:
    """Convolve ``x`` as if pruned elements were zero, skipping their work.

    Pruned frames and channels are dropped from the gathered patch matrices
    and output rows with no retained feature in their receptive field are not
    computed; they read as bias.
    """
    check_conv_input(x, spec)
    _check_plan(x.shape, plan)
    t, c, h, w = x.shape
    frame_keep = None if plan.frame_mask.all() else plan.frame_mask
    channel_keep = None if plan.channel_mask.all() else plan.channel_mask
    feature_keep = None if plan.feature_mask.all() else plan.feature_mask.reshape(t, h, w)
    out = _kernel.conv3d_frames(x.data, spec.weights, spec.bias, spec.stride, spec.padding,
                                frame_keep, channel_keep, feature_keep)
    return Tensor4D(out, dtype=out.dtype)


def flop_count_dense(input_dims, spec: ConvSpec) -> int:
    t, c, h, w = input_dims
    if c != spec.c_in:
        raise ConfigurationError(f"input has {c} channels, layer expects {spec.c_in}")
    t_o, h_o, w_o = spec.output_dims(t, h, w)
    k_t, k_h, k_w = spec.kernel
    return 2 * k_t * k_h * k_w * spec.c_in * spec.c_out * t_o * h_o * w_o


def axis_coverage(size, kernel, stride, padding) -> np.ndarray:
    """Number of output positions along one axis whose window contains input index i."""
    out = (size + 2 * padding - kernel) // stride + 1
    i = np.arange(size)[:, None] + padding
    o = np.arange(out)[None, :] * stride
    return ((i >= o) & (i < o + kernel)).sum(axis=1)


def flop_count_pruned(input_dims, plan: PruningPlan, spec: ConvSpec) -> int:
    dense = flop_count_dense(input_dims, spec)
    _check_plan(input_dims, plan)
    t, c, h, w = input_dims
    (k_t, k_h, k_w), (s_t, s_h, s_w), (p_t, p_h, p_w) = spec.kernel, spec.stride, spec.padding
    cov = (axis_coverage(t, k_t, s_t, p_t)[:, None, None, None]
           * axis_coverage(h, k_h, s_h, p_h)[None, None, :, None]
           * axis_coverage(w, k_w, s_w, p_w)[None, None, None, :])
    pruned = ~plan.element_mask()
    skipped = int((cov * pruned).sum(dtype=np.int64))
    return dense - 2 * spec.c_out * skipped


@dataclass
class LayerFlopReport:
    layer: int
    dense_flops: int
    actual_flops: int
    retained_frame_fraction: float = 1.0
    retained_channel_fraction: float = 1.0
    retained_feature_fraction: float = 1.0

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "dense_flops": self.dense_flops,
            "actual_flops": self.actual_flops,
            "retained": {
                "frame": self.retained_frame_fraction,
                "channel": self.retained_channel_fraction,
                "feature": self.retained_feature_fraction,
            },
        }


@dataclass
class RunReport:
    layers: list = field(default_factory=list)
    controller_flops: int = 0
    ava_flops: int = 0
    head_flops: int = 0

    @property
    def dense_flops(self) -> int:
        return sum(r.dense_flops for r in self.layers)

    @property
    def actual_flops(self) -> int:
        return sum(r.actual_flops for r in self.layers)

    @property
    def pruning_rate(self) -> float:
        return self.dense_flops / (self.actual_flops + self.controller_flops + self.ava_flops)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "layers": [r.to_dict() for r in self.layers],
            "controller_flops": self.controller_flops,
            "ava_flops": self.ava_flops,
            "head_flops": self.head_flops,
            "pruning_rate": self.pruning_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["layer", "dense_flops", "actual_flops", "retained_frame",
                         "retained_channel", "retained_feature"])
        for r in self.layers:
            writer.writerow([r.layer, r.dense_flops, r.actual_flops, r.retained_frame_fraction,
                             r.retained_channel_fraction, r.retained_feature_fraction])
        return buf.getvalue()


# --------------------------------------------------------------------------
# benchmark

def forced_plan(x: Tensor4D, fraction: float, dim: str = "frame") -> PruningPlan:
    """Plan retaining the ``fraction`` largest-magnitude slices of ``dim`` (per frame)."""
    t, c, h, w = x.shape
    plan = PruningPlan.full(t, c, h, w)
    mag = np.abs(x.data)
    if dim == "frame":
        keep = max(1, int(round(fraction * t)))
        order = np.argsort(-mag.mean(axis=(1, 2, 3)), kind="stable")
        plan.frame_mask[:] = False
        plan.frame_mask[order[:keep]] = True
        plan.channel_mask &= plan.frame_mask[:, None]
        plan.feature_mask &= plan.frame_mask[:, None]
    elif dim == "channel":
        keep = max(1, int(round(fraction * c)))
        order = np.argsort(-mag.mean(axis=(2, 3)), axis=1, kind="stable")
        plan.channel_mask[:] = False
        np.put_along_axis(plan.channel_mask, order[:, :keep], True, axis=1)
    elif dim == "feature":
        keep = max(1, int(round(fraction * h * w)))
        order = np.argsort(-mag.mean(axis=1).reshape(t, h * w), axis=1, kind="stable")
        plan.feature_mask[:] = False
        np.put_along_axis(plan.feature_mask, order[:, :keep], True, axis=1)
    else:
        raise ConfigurationError(f"unknown pruning dimension {dim!r}")
    return plan


def bench(model, clips, repetitions: int = 5, fractions=(1.0, 0.75, 0.5, 0.25), warmup: int = 1,
          threads: int = 1, dim: str = "frame") -> dict:
    """Time the pruned conv layers dense vs sparse under forced retention fractions.

    Per-sample wall-clock is the sum over the pruned layers.  Dense and sparse
    runs of the same sample alternate back to back, and the reported speedup is
    the median of those paired ratios, which cancels slow drifts and bursts that
    hit both runs.
    """
    workloads = []
    for clip in clips:
        inputs = model.conv_inputs(clip)
        workloads.append([(x, spec) for i, (x, spec) in enumerate(inputs, 1) if i in model.config.pruned_layers])
    rows = []
    with threadpool_limits(limits=threads):
        for frac in fractions:
            plans = [[forced_plan(x, frac, dim) for x, _ in wl] for wl in workloads]
            dense_t, sparse_t = [], []
            for rep in range(warmup + repetitions):
                for wl, pl in zip(workloads, plans):
                    t0 = time.perf_counter()
                    for x, spec in wl:
                        conv3d_dense(x, spec)
                    t1 = time.perf_counter()
                    for (x, spec), plan in zip(wl, pl):
                        sparse_conv3d(x, plan, spec)
                    t2 = time.perf_counter()
                    if rep >= warmup:
                        dense_t.append(t1 - t0)
                        sparse_t.append(t2 - t1)
            rows.append({
                "retained_fraction": frac,
                "dense_mean_s": statistics.fmean(dense_t),
                "dense_std_s": statistics.pstdev(dense_t),
                "pruned_mean_s": statistics.fmean(sparse_t),
                "pruned_std_s": statistics.pstdev(sparse_t),
                "speedup": statistics.median(d / s for d, s in zip(dense_t, sparse_t)),
            })
    return {"schema_version": REPORT_SCHEMA_VERSION, "dimension": dim, "threads": threads,
            "repetitions": repetitions, "samples": len(clips), "sweep": rows}
