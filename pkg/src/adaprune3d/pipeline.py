"""Two-step training driver, evaluation and the ablation runner.

Step 1 trains backbone and AVA weights on ``CE - beta * var_f``.  Step 2
freezes them and trains the threshold controller on ``CE - lam * sum(theta)``
through straight-through gates.  Evaluation runs the per-sample executor with
hard plans and the sparse kernels.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aap import DIMENSIONS, GateConfig, aap_loss
from .ava import ava_loss
from .complexity import RegressionResult, complexity_scores, fit_flops_regression
from .data import Dataset, SyntheticDatasetSpec
from .errors import ConfigurationError, NumericalError
from .models import Model, ModelConfig, forward_eval, forward_train_step1, forward_train_step2

__all__ = ["RunConfig", "EvalSummary", "make_model", "train_ava", "train_aap", "evaluate",
           "ablate", "make_optimizer"]

log = logging.getLogger(__name__)

_DEFAULT_GATES = {
    "frame": {"tau": 0.02, "eps": 1e-5},
    "channel": {"tau": 0.002, "eps": 1e-7},
    "feature": {"tau": 2e-4, "eps": 1e-9},
}


@dataclass
class RunConfig:
    """Every knob of a run.  Loaded from JSON; unknown keys are rejected."""

    family: str = "vgg3d"
    seed: int = 0
    threads: int = 1
    dims: tuple = DIMENSIONS
    dataset: dict = field(default_factory=dict)
    beta: float = 1.0
    lam: float = 1.0
    gates: dict = field(default_factory=lambda: json.loads(json.dumps(_DEFAULT_GATES)))
    theta_init: tuple = (0.02, 0.002, 0.0002)
    step1_epochs: int = 30
    step1_batch: int = 16
    step1_optimizer: dict = field(default_factory=lambda: {"name": "sgd", "lr": 0.01, "momentum": 0.9})
    step2_epochs: int = 15
    step2_batch: int = 16
    step2_optimizer: dict = field(default_factory=lambda: {"name": "adam", "lr": 0.05})
    cotrain_optimizer: dict = field(default_factory=lambda: {"name": "sgd", "lr": 0.002, "momentum": 0.9})
    accuracy_tolerance: float = 2.0

    def __post_init__(self):
        self.dims = tuple(self.dims)
        self.theta_init = tuple(np.broadcast_to(np.asarray(self.theta_init, dtype=float), (3,)).tolist())
        gates = json.loads(json.dumps(_DEFAULT_GATES))
        for dim, over in (self.gates or {}).items():
            if dim not in gates:
                raise ConfigurationError(f"unknown pruning dimension {dim!r} in gates")
            gates[dim].update(over)
        self.gates = gates
        self.validate()

    def validate(self) -> None:
        if self.family not in ("vgg3d", "residual_2plus1d"):
            raise ConfigurationError(f"unknown model family {self.family!r}")
        if not self.dims or any(d not in DIMENSIONS for d in self.dims):
            raise ConfigurationError(f"dims must be a non-empty subset of {DIMENSIONS}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if not self.lam > 0:
            raise ConfigurationError(f"lam must be > 0, got {self.lam}")
        if not all(0 < t < 1 for t in self.theta_init):
            raise ConfigurationError("theta_init values must lie in (0, 1)")
        for name in ("step1_epochs", "step2_epochs", "step1_batch", "step2_batch", "threads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for cfg in self.gates.values():
            GateConfig(tau=cfg["tau"], eps=cfg["eps"], lam=self.lam)
        for opt in (self.step1_optimizer, self.step2_optimizer, self.cotrain_optimizer):
            make_optimizer(opt)
        SyntheticDatasetSpec(**self.dataset)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def gate_configs(self, train_mode: bool) -> dict:
        return {d: GateConfig(tau=g["tau"], eps=g["eps"], lam=self.lam, train_mode=train_mode)
                for d, g in self.gates.items()}

    def dataset_spec(self) -> SyntheticDatasetSpec:
        return SyntheticDatasetSpec(**self.dataset)


def make_optimizer(spec: dict):
    spec = dict(spec)
    name = spec.pop("name", "sgd")
    if name == "sgd":
        opt = ad.SGD(**spec)
    elif name == "adam":
        opt = ad.Adam(**spec)
    else:
        raise ConfigurationError(f"unknown optimizer {name!r}")
    if not opt.lr > 0:
        raise ConfigurationError("learning rate must be > 0")
    return opt


def make_model(cfg: RunConfig, **model_kw) -> Model:
    """Fresh model for ``cfg``; ``model_kw`` (e.g. clip_shape, num_classes) goes to ModelConfig."""
    mcfg = ModelConfig.for_family(cfg.family, dims=cfg.dims, **model_kw)
    return Model(mcfg, seed=cfg.seed, theta_init=cfg.theta_init)


def _batches(n, batch, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def _step1_pass(model, xb, yb, beta, trainable=("backbone", "ava")):
    tape, logits, var_f = forward_train_step1(model, xb, trainable=trainable)
    ce = ad.softmax_cross_entropy(logits, yb)
    mean_var = ad.mean(var_f)
    loss = ava_loss(ce, mean_var, beta) if beta > 0 else ce
    return tape, loss, float(ce.value), float(mean_var.value), logits.value


def train_ava(model: Model, x, y, cfg: RunConfig, beta: float | None = None) -> list:
    """Step 1 in place.  Returns per-epoch ``{epoch, ce, var_f, train_acc}``; epoch 0 is pre-training."""
    beta = cfg.beta if beta is None else beta
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = make_optimizer(cfg.step1_optimizer)
    history = []
    for epoch in range(cfg.step1_epochs + 1):
        ces, vars_, correct = [], [], 0
        for idx in _batches(len(x), cfg.step1_batch, rng):
            tape, loss, ce, var, logits = _step1_pass(model, x[idx], y[idx], beta,
                                                      trainable=("backbone", "ava") if epoch else ())
            if epoch:
                opt.step(model.params, ad.backward(tape, loss))
            ces.append(ce * len(idx))
            vars_.append(var * len(idx))
            correct += int((np.argmax(logits, axis=1) == y[idx]).sum())
        row = {"epoch": epoch, "ce": sum(ces) / len(x), "var_f": sum(vars_) / len(x),
               "train_acc": correct / len(x)}
        if not np.isfinite(row["ce"]):
            raise NumericalError(f"step-1 loss diverged at epoch {epoch}")
        history.append(row)
        log.info("train-ava epoch %d ce=%.4f var_f=%.3e acc=%.3f", epoch, row["ce"], row["var_f"], row["train_acc"])
    return history


def train_aap(model: Model, x, y, cfg: RunConfig, trainable=("controller",), epochs: int | None = None) -> list:
    """Step 2 in place.  Returns per-epoch ``{epoch, ce, theta_frame, theta_channel, theta_feature, train_acc}``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    opts = {"controller": make_optimizer(cfg.step2_optimizer)}
    if set(trainable) != {"controller"}:
        opts["rest"] = make_optimizer(cfg.cotrain_optimizer)
    ctrl_names = set(model.group("controller"))
    gates = cfg.gate_configs(train_mode=True)
    epochs = cfg.step2_epochs if epochs is None else epochs
    history = []
    for epoch in range(1, epochs + 1):
        ces, correct = [], 0
        thetas = {d: [] for d in DIMENSIONS}
        for idx in _batches(len(x), cfg.step2_batch, rng):
            tape, logits, th = forward_train_step2(model, x[idx], gates, rng=noise_rng, trainable=trainable)
            ce = ad.softmax_cross_entropy(logits, y[idx])
            grads = ad.backward(tape, aap_loss(ce, th, cfg.lam))
            opts["controller"].step(model.params, {k: g for k, g in grads.items() if k in ctrl_names})
            if "rest" in opts:
                opts["rest"].step(model.params, {k: g for k, g in grads.items() if k not in ctrl_names})
            ces.append(float(ce.value) * len(idx))
            correct += int((np.argmax(logits.value, axis=1) == y[idx]).sum())
            for d in DIMENSIONS:
                thetas[d].extend(th[d].value.tolist())
        row = {"epoch": epoch, "ce": sum(ces) / len(x), "train_acc": correct / len(x)}
        row.update({f"theta_{d}": float(np.mean(v)) for d, v in thetas.items()})
        if not np.isfinite(row["ce"]):
            raise NumericalError(f"step-2 loss diverged at epoch {epoch}")
        history.append(row)
        log.info("train-aap epoch %d ce=%.4f acc=%.3f theta=(%.4g, %.4g, %.4g)", epoch, row["ce"],
                 row["train_acc"], row["theta_frame"], row["theta_channel"], row["theta_feature"])
    return history


@dataclass
class EvalSummary:
    accuracy: float
    pruning_rate: float
    dense_flops: int
    actual_flops: int
    overhead_flops: int
    layers: list
    samples: list
    regression: RegressionResult | None = None
    decomposition: dict = field(default_factory=dict)

    @property
    def flops_cv(self) -> float:
        f = np.array([s["actual_flops"] for s in self.samples], dtype=float)
        return float(f.std() / f.mean())

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("accuracy", "pruning_rate", "dense_flops", "actual_flops",
                                            "overhead_flops", "layers", "decomposition")}
        d["schema_version"] = 1
        d["flops_cv"] = self.flops_cv
        d["regression"] = None if self.regression is None else asdict(self.regression)
        return d


def evaluate(model: Model, x, y, knobs=None, prune: bool = True, dims=None, complexity: bool = True,
             decompose: bool = False) -> EvalSummary:
    """Per-sample executor evaluation aggregated over a split.

    The pruning rate is the ratio of summed dense conv FLOPs to summed actual
    conv FLOPs plus AVA and controller overhead.  ``decompose`` adds the rate
    with each pruning dimension enabled on its own.
    """
    samples = []
    n_layers = len(model.config.layers)
    layer_sum = np.zeros((n_layers, 5))
    dense = actual = overhead = 0
    correct = 0
    for i, clip in enumerate(x):
        res = forward_eval(model, clip, prune=prune, dims=dims)
        rep = res.report
        correct += int(res.prediction == y[i])
        dense += rep.dense_flops
        actual += rep.actual_flops
        extra = rep.ava_flops + rep.controller_flops
        overhead += extra
        for j, lr in enumerate(rep.layers):
            layer_sum[j] += (lr.dense_flops, lr.actual_flops, lr.retained_frame_fraction,
                             lr.retained_channel_fraction, lr.retained_feature_fraction)
        row = {"index": i, "label": int(y[i]), "prediction": res.prediction,
               "actual_flops": rep.actual_flops + extra, "pruning_rate": rep.pruning_rate}
        if res.theta is not None:
            row.update(zip(("theta_frame", "theta_channel", "theta_feature"), res.theta.as_tuple()))
        if knobs is not None:
            row["texture_knob"], row["speed_knob"] = (float(v) for v in knobs[i])
        if complexity:
            cs = complexity_scores(clip)
            row["r_spatial"], row["r_temporal"] = cs.r_spatial, cs.r_temporal
        samples.append(row)
    n = len(x)
    layers = [{"layer": j + 1, "dense_flops": int(round(s[0] / n)), "actual_flops": float(s[1] / n),
               "retained_frame": s[2] / n, "retained_channel": s[3] / n, "retained_feature": s[4] / n}
              for j, s in enumerate(layer_sum)]
    regression = None
    if complexity and n >= 3:
        try:
            regression = fit_flops_regression((s["r_spatial"], s["r_temporal"], s["actual_flops"]) for s in samples)
        except NumericalError as exc:
            log.warning("skipping FLOPs regression: %s", exc)
    summary = EvalSummary(correct / n, dense / (actual + overhead), dense, actual, overhead, layers, samples,
                          regression)
    if decompose and prune:
        enabled = model.config.dims if dims is None else dims
        for d in enabled:
            part = evaluate(model, x, y, prune=True, dims=(d,), complexity=False)
            summary.decomposition[d] = {"pruning_rate": part.pruning_rate, "accuracy": part.accuracy,
                                        "retained": [{k: l[k] for k in ("layer", f"retained_{d}")}
                                                     for l in part.layers]}
    return summary


def ablate(cfg: RunConfig, data: Dataset, from_scratch: bool = False, keep_models: bool = False) -> dict:
    """Run the with-AVA, without-AVA and co-train arms from the same seed.

    The without-AVA arm repeats step 1 with ``beta = 0``.  The co-train arm
    unfreezes the backbone during step 2, starting from the with-AVA step-1
    weights, or from the initial weights for ``step1 + step2`` epochs when
    ``from_scratch`` is set.  ``keep_models`` adds the trained models under
    ``"models"`` (not JSON-serializable).
    """
    arms = {}
    step1 = {}
    models = {}
    for name, beta in (("with_ava", cfg.beta), ("without_ava", 0.0)):
        t0 = time.perf_counter()
        model = make_model(cfg)
        hist1 = train_ava(model, data.train_x, data.train_y, cfg, beta=beta)
        base = evaluate(model, data.test_x, data.test_y, prune=False, complexity=False)
        step1[name] = model.copy()
        hist2 = train_aap(model, data.train_x, data.train_y, cfg)
        ev = evaluate(model, data.test_x, data.test_y, complexity=False)
        arms[name] = _arm_row(beta, hist1, hist2, base, ev, time.perf_counter() - t0)
        models[name] = model
    t0 = time.perf_counter()
    if from_scratch:
        model = make_model(cfg)
        hist2 = train_aap(model, data.train_x, data.train_y, cfg, trainable=("backbone", "ava", "controller"),
                          epochs=cfg.step1_epochs + cfg.step2_epochs)
        base = None
    else:
        model = step1["with_ava"].copy()
        hist2 = train_aap(model, data.train_x, data.train_y, cfg, trainable=("backbone", "ava", "controller"))
        base = evaluate(step1["with_ava"], data.test_x, data.test_y, prune=False, complexity=False)
    ev = evaluate(model, data.test_x, data.test_y, complexity=False)
    arms["cotrain"] = _arm_row(cfg.beta, None, hist2, base, ev, time.perf_counter() - t0)
    models["cotrain"] = model
    w, wo = arms["with_ava"], arms["without_ava"]
    matched = w["accuracy"] >= wo["accuracy"] - cfg.accuracy_tolerance / 100
    res = {"schema_version": 1, "arms": arms, "cotrain_from_scratch": from_scratch,
           "ordering_holds": bool(matched and w["pruning_rate"] > wo["pruning_rate"])}
    if keep_models:
        res["models"] = models
    return res


def _arm_row(beta, hist1, hist2, base, ev, seconds):
    return {
        "beta": beta,
        "step1_history": hist1,
        "step2_history": hist2,
        "dense_accuracy": None if base is None else base.accuracy,
        "accuracy": ev.accuracy,
        "pruning_rate": ev.pruning_rate,
        "layers": ev.layers,
        "seconds": seconds,
    }
