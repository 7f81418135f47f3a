"""Toy 3D CNN backbones with AVA instrumentation and an AAP controller.

Two families share one layer description: a VGG-style stack (``vgg3d``) and a
residual network with factorized (1xKxK then Kx1x1) convolutions
(``residual_2plus1d``).  Every conv layer is followed by ReLU and an AVA stage;
the input of conv layer ``k >= 2`` is the AVA output of layer ``k - 1``, masked
by the plan built from that stage's importance profile.  A residual layer adds
the *unmasked* AVA output of an earlier layer before its ReLU, so pruning never
reaches the skip path.

Layer indices are 1-based throughout; layer 1 feeds the controller and is
never pruned.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aap import (DIMENSIONS, ControllerOutput, ControllerParams, GateConfig, build_plan,
                  controller_graph, controller_thresholds, gate_masks_graph)
from .ava import AvaParams, ava_forward, ava_graph
from .errors import ConfigurationError, UsageError
from .sparse import LayerFlopReport, RunReport, flop_count_dense, flop_count_pruned, sparse_conv3d
from .tensor import ConvSpec, Tensor4D, conv3d_dense, read_array, write_array

__all__ = ["LayerConfig", "ModelConfig", "Model", "EvalResult", "forward_train_step1",
           "forward_train_step2", "forward_eval", "save_checkpoint", "load_checkpoint"]

FAMILIES = ("vgg3d", "residual_2plus1d")
CHECKPOINT_VERSION = 1


@dataclass
class LayerConfig:
    c_out: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)
    skip_from: int | None = None


@dataclass
class ModelConfig:
    family: str
    layers: list
    clip_shape: tuple = (8, 1, 16, 16)
    num_classes: int = 5
    controller_hidden: int = 16
    ava_layers: tuple | None = None
    pruned_layers: tuple | None = None
    dims: tuple = DIMENSIONS

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown model family {self.family!r}")
        self.layers = [l if isinstance(l, LayerConfig) else LayerConfig(**l) for l in self.layers]
        for l in self.layers:
            l.kernel, l.stride, l.padding = tuple(l.kernel), tuple(l.stride), tuple(l.padding)
        n = len(self.layers)
        self.clip_shape = tuple(self.clip_shape)
        self.dims = tuple(self.dims)
        if self.ava_layers is None:
            self.ava_layers = tuple(range(1, n + 1))
        if self.pruned_layers is None:
            self.pruned_layers = tuple(range(2, n + 1))
        self.ava_layers, self.pruned_layers = tuple(self.ava_layers), tuple(self.pruned_layers)
        if 1 in self.pruned_layers:
            raise ConfigurationError("layer 1 feeds the controller and cannot be pruned")
        for k in self.pruned_layers:
            if not 2 <= k <= n or (k - 1) not in self.ava_layers:
                raise ConfigurationError(f"pruned layer {k} needs an AVA stage on layer {k - 1}")
        for d in self.dims:
            if d not in DIMENSIONS:
                raise ConfigurationError(f"unknown pruning dimension {d!r}")
        self.activation_shapes()

    @classmethod
    def tiny_c3d(cls, **kw):
        layers = [LayerConfig(8), LayerConfig(16, stride=(1, 2, 2)), LayerConfig(32), LayerConfig(32)]
        return cls("vgg3d", layers, **kw)

    @classmethod
    def tiny_r2plus1d(cls, width: int = 16, blocks: int = 3, **kw):
        layers = [LayerConfig(width)]
        for b in range(blocks):
            first = len(layers) + 1
            layers.append(LayerConfig(width, (1, 3, 3), padding=(0, 1, 1)))
            layers.append(LayerConfig(width, (3, 1, 1), padding=(1, 0, 0), skip_from=first - 1))
        return cls("residual_2plus1d", layers, **kw)

    @classmethod
    def for_family(cls, family: str, **kw):
        if family == "vgg3d":
            return cls.tiny_c3d(**kw)
        if family == "residual_2plus1d":
            return cls.tiny_r2plus1d(**kw)
        raise ConfigurationError(f"unknown model family {family!r}")

    def activation_shapes(self):
        """(T, C, H, W) of every layer's output activation, index 0 = input clip."""
        t, c, h, w = self.clip_shape
        shapes = [(t, c, h, w)]
        for i, l in enumerate(self.layers, 1):
            dims = [(d + 2 * p - k) // s + 1 for d, k, s, p in zip((t, h, w), l.kernel, l.stride, l.padding)]
            if min(dims) < 1:
                raise ConfigurationError(f"layer {i} output is empty for input {(t, h, w)}")
            t, h, w = dims
            c = l.c_out
            if l.skip_from is not None:
                if not 1 <= l.skip_from < i or shapes[l.skip_from] != (t, c, h, w):
                    raise ConfigurationError(f"layer {i} skip source {l.skip_from} has the wrong shape")
            shapes.append((t, c, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layers"] = [LayerConfig(**l) for l in d["layers"]]
        return cls(**d)


def _sha(arrays) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


class Model:
    """Parameter store plus topology; all arrays are float32."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0,
                 theta_init=0.5):
        self.config = config
        self.shapes = config.activation_shapes()
        self.params = self._init_params(np.random.default_rng(seed), theta_init) if params is None else params

    def _init_params(self, rng, theta_init):
        p = {}
        for i, l in enumerate(self.config.layers, 1):
            c_in = self.shapes[i - 1][1]
            fan_in = c_in * int(np.prod(l.kernel))
            p[f"conv{i}.w"] = (rng.standard_normal((l.c_out, c_in, *l.kernel)) * np.sqrt(2.0 / fan_in)).astype(np.float32)
            p[f"conv{i}.b"] = np.zeros(l.c_out, np.float32)
        for i in self.config.ava_layers:
            t, c, h, w = self.shapes[i]
            for k, v in asdict(AvaParams.ones(t, c, h, w)).items():
                p[f"ava{i}.{k}"] = v
        c_last = self.shapes[-1][1]
        p["head.w"] = (rng.standard_normal((self.config.num_classes, c_last)) * np.sqrt(1.0 / c_last)).astype(np.float32)
        p["head.b"] = np.zeros(self.config.num_classes, np.float32)
        ctrl = ControllerParams.init(self.shapes[1][1], self.config.controller_hidden, theta_init, rng)
        for k, v in ctrl.arrays.items():
            p[f"ctrl.{k}"] = v
        return p

    # -- parameter groups -------------------------------------------------
    def group(self, name: str) -> list:
        prefix = {"backbone": ("conv", "head"), "ava": ("ava",), "controller": ("ctrl",)}[name]
        return [k for k in self.params if k.startswith(prefix)]

    def checksum(self, groups=("backbone", "ava")) -> str:
        return _sha({k: self.params[k] for g in groups for k in self.group(g)})

    def conv_spec(self, i: int) -> ConvSpec:
        l = self.config.layers[i - 1]
        return ConvSpec(self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], l.stride, l.padding)

    def ava_params(self, i: int) -> AvaParams:
        return AvaParams(self.params[f"ava{i}.w_fr"], self.params[f"ava{i}.w_ch"], self.params[f"ava{i}.w_fe"])

    def controller_params(self) -> ControllerParams:
        return ControllerParams({k[5:]: v for k, v in self.params.items() if k.startswith("ctrl.")})

    def set_controller_bias(self, thetas) -> None:
        """Set the controller heads to output ``thetas`` (frame, channel, feature) for any input."""
        for head, th in zip(("fr", "ch", "fe"), np.broadcast_to(thetas, (3,))):
            self.params[f"ctrl.{head}.w2"][:] = 0
            self.params[f"ctrl.{head}.b2"][:] = np.log(th / (1 - th))

    def ava_flops(self) -> int:
        # three reweighting multiplies and three importance accumulations per element
        return int(sum(6 * np.prod(self.shapes[i]) for i in self.config.ava_layers))

    def head_flops(self) -> int:
        t, c, h, w = self.shapes[-1]
        return int(t * c * h * w + 2 * c * self.config.num_classes)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- executor path ------------------------------------------------------
    def conv_inputs(self, clip: Tensor4D) -> list:
        """(input tensor, ConvSpec) for every conv layer on an unpruned forward."""
        res = forward_eval(self, clip, prune=False, keep_inputs=True)
        return res.conv_inputs


# --------------------------------------------------------------------------
# graph (training) path

def _register(tape: Tape, model: Model, trainable) -> dict:
    nodes = {}
    train = {k for g in trainable for k in model.group(g)}
    for k, v in model.params.items():
        nodes[k] = tape.param(k, v) if k in train else tape.const(v)
    return nodes


Tape = ad.Tape


def build_graph(model: Model, clips, tape: ad.Tape, trainable=("backbone", "ava"), gates=None,
                rng=None, dims=None):
    """Batched forward on ``clips`` (N, T, C, H, W).

    Without ``gates`` the network runs unpruned (step 1).  With ``gates`` (a
    dict dimension -> GateConfig) every pruned layer's input is multiplied by
    the STE gate mask derived from controller thresholds (step 2).

    Returns ``(logits, var_f, thetas)``; ``var_f`` has shape (N,), ``thetas``
    is ``None`` in step 1.
    """
    cfg = model.config
    dims = cfg.dims if dims is None else dims
    nodes = _register(tape, model, trainable)
    x = tape.const(np.asarray(clips))
    outs = {}
    var_f = None
    thetas = None
    normalized = {}
    for i, l in enumerate(cfg.layers, 1):
        inp = x if i == 1 else outs[i - 1]
        if gates is not None and i in cfg.pruned_layers:
            mask = gate_masks_graph(normalized[i - 1], thetas, gates, inp.shape, rng=rng, dims=dims)
            if mask is not None:
                inp = ad.mul(inp, mask)
        z = ad.conv3d(inp, nodes[f"conv{i}.w"], nodes[f"conv{i}.b"], l.stride, l.padding)
        if l.skip_from is not None:
            z = ad.add(z, outs[l.skip_from])
        a = ad.relu(z)
        if i == 1 and gates is not None:
            thetas = controller_graph(a, {k[5:]: v for k, v in nodes.items() if k.startswith("ctrl.")})
        if i in cfg.ava_layers:
            a, normalized[i], var = ava_graph(a, nodes[f"ava{i}.w_fr"], nodes[f"ava{i}.w_ch"], nodes[f"ava{i}.w_fe"])
            var_f = var if var_f is None else ad.add(var_f, var)
        outs[i] = a
    pooled = ad.mean(outs[len(cfg.layers)], axis=(1, 3, 4))
    logits = ad.affine(pooled, nodes["head.w"], nodes["head.b"])
    return logits, var_f, thetas


def forward_train_step1(model: Model, batch, tape: ad.Tape | None = None, trainable=("backbone", "ava")):
    """AVA-instrumented unpruned pass; returns ``(tape, logits, var_f)`` with var_f of shape (N,)."""
    tape = ad.Tape(np.float32) if tape is None else tape
    logits, var_f, _ = build_graph(model, batch, tape, trainable)
    return tape, logits, var_f


def forward_train_step2(model: Model, batch, gates: dict, rng=None, tape: ad.Tape | None = None,
                        trainable=("controller",), step1_done: bool = True):
    """Gated pass with frozen backbone (unless ``trainable`` says otherwise).

    Returns ``(tape, logits, thetas)``.
    """
    if not step1_done:
        raise UsageError("step-2 training needs a step-1 (train-ava) checkpoint")
    tape = ad.Tape(np.float32) if tape is None else tape
    logits, _, thetas = build_graph(model, batch, tape, trainable, gates=gates, rng=rng)
    return tape, logits, thetas


# --------------------------------------------------------------------------
# executor (inference) path

@dataclass
class EvalResult:
    logits: np.ndarray
    report: RunReport
    plans: dict
    theta: ControllerOutput | None
    profiles: dict = field(default_factory=dict)
    conv_inputs: list = field(default_factory=list)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))


def forward_eval(model: Model, clip: Tensor4D, theta: ControllerOutput | None = None,
                 prune: bool = True, dims=None, keep_inputs: bool = False) -> EvalResult:
    """Deterministic per-sample inference with hard plans and the sparse executor.

    ``theta`` overrides the controller; ``prune=False`` runs every layer dense.
    """
    cfg = model.config
    dims = cfg.dims if dims is None else dims
    if not isinstance(clip, Tensor4D):
        clip = Tensor4D(clip)
    if tuple(clip.shape) != cfg.clip_shape:
        raise ConfigurationError(f"clip shape {clip.shape} does not match model input {cfg.clip_shape}")
    outs, profiles, plans, layer_reports, inputs = {}, {}, {}, [], []
    ctrl = None
    for i, l in enumerate(cfg.layers, 1):
        spec = model.conv_spec(i)
        inp = clip if i == 1 else outs[i - 1]
        dense = flop_count_dense(inp.shape, spec)
        if keep_inputs:
            inputs.append((inp, spec))
        if prune and i in cfg.pruned_layers:
            plan = build_plan(profiles[i - 1], ctrl, dims, inp.height, inp.width)
            plans[i] = plan
            z = sparse_conv3d(inp, plan, spec).data
            fr = plan.retained_fractions()
            layer_reports.append(LayerFlopReport(i, dense, flop_count_pruned(inp.shape, plan, spec),
                                                 fr["frame"], fr["channel"], fr["feature"]))
        else:
            z = conv3d_dense(inp, spec).data
            layer_reports.append(LayerFlopReport(i, dense, dense))
        if l.skip_from is not None:
            z = z + outs[l.skip_from].data
        a = Tensor4D(np.maximum(z, 0))
        if i == 1 and prune:
            ctrl = theta if theta is not None else controller_thresholds(a, model.controller_params())
        if i in cfg.ava_layers:
            a, profiles[i] = ava_forward(a, model.ava_params(i))
        outs[i] = a
    pooled = outs[len(cfg.layers)].data.mean(axis=(0, 2, 3))
    logits = model.params["head.w"] @ pooled + model.params["head.b"]
    report = RunReport(layer_reports, ava_flops=model.ava_flops(), head_flops=model.head_flops())
    if prune and theta is None:
        report.controller_flops = model.controller_params().flops(int(np.prod(model.shapes[1])))
    return EvalResult(logits, report, plans, ctrl, profiles, inputs)


# --------------------------------------------------------------------------
# checkpoints: manifest.json + one f32 blob per parameter

def save_checkpoint(model: Model, path, metadata: dict | None = None) -> None:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in sorted(model.params.items()):
        fname = f"tensors/{name}.bin"
        write_array(path / fname, arr)
        files[name] = fname
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": files,
        "metadata": metadata or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Return ``(model, metadata)``."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"no checkpoint at {path} (missing manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    config = ModelConfig.from_dict(manifest["config"])
    params = {name: read_array(path / fname)[0] for name, fname in manifest["tensors"].items()}
    return Model(config, params), manifest.get("metadata", {})
