"""Command-line entry point: ``adaprune3d <command> [--config C] [--seed S] [--threads N] [--out DIR]``.

All commands share one run directory (``--out``)::

    dataset/   gen-dataset output (manifest.json, train.bin, test.bin)
    step1/     train-ava checkpoint        step2/   train-aap checkpoint
    reports/   CSV and JSON reports

Exit status: 0 on success, 2 on invalid input or missing prerequisites, 1 on
internal errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Dataset, load_dataset, write_dataset
from .errors import AdaPruneError, ConfigurationError, NumericalError, UsageError, ValidationError
from .models import load_checkpoint, save_checkpoint
from .pipeline import RunConfig, ablate, evaluate, make_model, train_aap, train_ava
from .sparse import bench

log = logging.getLogger("adaprune3d")

COMMANDS = ("gen-dataset", "train-ava", "train-aap", "eval", "ablate", "bench", "report-flops",
            "report-complexity")


def _write_csv(path: Path, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_default, sort_keys=True))


class Run:
    """Resolved config plus run-directory paths for one CLI invocation."""

    def __init__(self, args):
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.validate()
        self.cfg = cfg
        self.args = args
        self.out = Path(args.out)
        self.reports = self.out / "reports"

    @property
    def data_dir(self) -> Path:
        return Path(self.args.data) if getattr(self.args, "data", None) else self.out / "dataset"

    def dataset(self) -> Dataset:
        if not (self.data_dir / "manifest.json").exists():
            raise UsageError(f"no dataset at {self.data_dir}; run `adaprune3d gen-dataset --out {self.out}` first")
        return load_dataset(self.data_dir)

    def checkpoint(self, preferred=("step2", "step1")):
        explicit = getattr(self.args, "checkpoint", None)
        candidates = [Path(explicit)] if explicit else [self.out / p for p in preferred]
        for path in candidates:
            if (path / "manifest.json").exists():
                return load_checkpoint(path)
        hint = {"step1": "train-ava", "step2": "train-aap"}[preferred[0]]
        raise UsageError(f"no checkpoint found in {', '.join(map(str, candidates))}; "
                         f"run `adaprune3d {hint} --out {self.out}` first")


def cmd_gen_dataset(run: Run) -> dict:
    spec_kw = dict(run.cfg.dataset)
    if run.args.seed is not None:
        spec_kw["seed"] = run.args.seed
    run.cfg.dataset = spec_kw
    manifest = write_dataset(run.cfg.dataset_spec(), run.data_dir)
    return {"manifest": str(manifest)}


def cmd_train_ava(run: Run) -> dict:
    data = run.dataset()
    model = make_model(run.cfg)
    hist = train_ava(model, data.train_x, data.train_y, run.cfg)
    save_checkpoint(model, run.out / "step1", {"step": 1, "config": run.cfg.to_dict(), "history": hist})
    _write_csv(run.reports / "train_ava_curves.csv", hist)
    return {"final": hist[-1], "epoch0": hist[0]}


def cmd_train_aap(run: Run) -> dict:
    data = run.dataset()
    model, meta = run.checkpoint(("step1",))
    if meta.get("step") != 1:
        raise UsageError("train-aap needs a step-1 checkpoint written by `train-ava`")
    trainable = ("backbone", "ava", "controller") if run.args.cotrain else ("controller",)
    hist = train_aap(model, data.train_x, data.train_y, run.cfg, trainable=trainable)
    save_checkpoint(model, run.out / "step2", {"step": 2, "config": run.cfg.to_dict(), "history": hist})
    _write_csv(run.reports / "theta_trajectory.csv", hist)
    return {"final": hist[-1]}


def cmd_eval(run: Run) -> dict:
    data = run.dataset()
    model, meta = run.checkpoint()
    ev = evaluate(model, data.test_x, data.test_y, knobs=data.test_knobs, decompose=True)
    summary = ev.to_dict()
    summary["checkpoint_step"] = meta.get("step")
    step1 = run.out / "step1"
    if meta.get("step") == 2 and (step1 / "manifest.json").exists():
        base, _ = load_checkpoint(step1)
        dense = evaluate(base, data.test_x, data.test_y, prune=False, complexity=False)
        summary["unpruned_step1_accuracy"] = dense.accuracy
        summary["accuracy_drop_points"] = 100 * (dense.accuracy - ev.accuracy)
    _write_json(run.reports / "eval.json", summary)
    _write_csv(run.reports / "eval_layers.csv", ev.layers)
    _write_csv(run.reports / "eval_samples.csv", ev.samples)
    _write_csv(run.reports / "eval_decomposition.csv", [
        {"dimension": d, "pruning_rate": v["pruning_rate"], "accuracy": v["accuracy"]}
        for d, v in ev.decomposition.items()])
    return {"accuracy": ev.accuracy, "pruning_rate": ev.pruning_rate}


def cmd_ablate(run: Run) -> dict:
    data = run.dataset()
    res = ablate(run.cfg, data, from_scratch=run.args.cotrain_from_scratch)
    _write_json(run.reports / "ablation.json", res)
    _write_csv(run.reports / "ablation.csv", [
        {"arm": name, "beta": a["beta"], "dense_accuracy": a["dense_accuracy"], "accuracy": a["accuracy"],
         "pruning_rate": a["pruning_rate"], "seconds": a["seconds"]} for name, a in res["arms"].items()])
    return {name: {"accuracy": a["accuracy"], "pruning_rate": a["pruning_rate"]} for name, a in res["arms"].items()} | {
        "ordering_holds": res["ordering_holds"]}


def cmd_bench(run: Run) -> dict:
    data = run.dataset()
    try:
        model, _ = run.checkpoint()
    except UsageError:
        log.warning("no checkpoint found; benchmarking freshly initialized weights")
        model = make_model(run.cfg)
    clips = data.test_x[: run.args.samples]
    res = bench(model, clips, repetitions=run.args.repetitions, threads=run.cfg.threads, dim=run.args.dimension)
    _write_json(run.reports / "bench.json", res)
    _write_csv(run.reports / "bench.csv", res["sweep"])
    return {"speedup": {str(r["retained_fraction"]): round(r["speedup"], 3) for r in res["sweep"]}}


def cmd_report_flops(run: Run) -> dict:
    from .models import forward_eval

    data = run.dataset()
    model, _ = run.checkpoint()
    rows = []
    for i, clip in enumerate(data.test_x):
        rep = forward_eval(model, clip).report
        for lr in rep.layers:
            rows.append({"sample": i, **{k: v for k, v in lr.to_dict().items() if k != "retained"},
                         **{f"retained_{k}": v for k, v in lr.to_dict()["retained"].items()}})
        if i == 0:
            _write_json(run.reports / "flops_sample0.json", rep.to_dict())
    _write_csv(run.reports / "flops_per_layer.csv", rows)
    return {"rows": len(rows)}


def cmd_report_complexity(run: Run) -> dict:
    data = run.dataset()
    model, _ = run.checkpoint()
    ev = evaluate(model, data.test_x, data.test_y, knobs=data.test_knobs)
    _write_csv(run.reports / "complexity_samples.csv", ev.samples)
    reg = None
    if ev.regression is not None:
        reg = {"intercept": ev.regression.intercept, "b_spatial": ev.regression.b_spatial,
               "b_temporal": ev.regression.b_temporal, "r2": ev.regression.r2, "r": ev.regression.r}
    out = {"schema_version": 1, "flops_cv": ev.flops_cv, "regression": reg}
    _write_json(run.reports / "complexity_regression.json", out)
    return out


HANDLERS = {
    "gen-dataset": cmd_gen_dataset, "train-ava": cmd_train_ava, "train-aap": cmd_train_aap,
    "eval": cmd_eval, "ablate": cmd_ablate, "bench": cmd_bench, "report-flops": cmd_report_flops,
    "report-complexity": cmd_report_complexity,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (see README for keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="BLAS thread count (default from config: 1)")
    common.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    common.add_argument("--data", help="dataset directory (default: <out>/dataset)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = argparse.ArgumentParser(prog="adaprune3d", description="Two-step adaptive activation pruning for 3D CNNs")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-dataset", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train-ava", parents=[common], help="step 1: variance-amplified training")
    p = sub.add_parser("train-aap", parents=[common], help="step 2: threshold controller training")
    p.add_argument("--cotrain", action="store_true", help="also update backbone and AVA weights")
    for name, text in (("eval", "accuracy, pruning rate and FLOP reports"),
                       ("report-flops", "per-sample per-layer FLOP table"),
                       ("report-complexity", "R^s/R^t per sample and the FLOPs regression")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/step2, then <out>/step1)")
    p = sub.add_parser("ablate", parents=[common], help="with-AVA / without-AVA / co-train arms")
    p.add_argument("--cotrain-from-scratch", action="store_true",
                   help="co-train arm trains everything jointly from initialization")
    p = sub.add_parser("bench", parents=[common], help="dense vs sparse wall-clock sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--dimension", default="frame", choices=("frame", "channel", "feature"))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        t0 = time.perf_counter()
        with threadpool_limits(limits=run.cfg.threads):
            result = HANDLERS[args.command](run)
        result = {"command": args.command, "seconds": round(time.perf_counter() - t0, 2), **result}
        print(json.dumps(result, default=_default, sort_keys=True))
        return 0
    except (ConfigurationError, ValidationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (AdaPruneError, NumericalError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to exit 1
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
