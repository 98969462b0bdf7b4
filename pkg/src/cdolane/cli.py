"""Command-line entry point: ``cdolane {gen-data,train,eval,gradcheck,rif-demo,bench}``.

Settings resolve as defaults < ``--config FILE`` < flags. Every subcommand
writes the effective settings to ``OUT/config.json``; feeding that file back
through ``--config`` reproduces the run. Machine-readable results go to
stdout, diagnostics to stderr.

Exit codes: 0 success, 1 check or validation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import benchkit
from .cdo import NORMALIZATIONS, PAIRINGS, CdoConfig
from .cdo_grad import cdo_loss_backward, grad_check, random_instance
from .laneval import evaluate_scenes
from .lanesynth import (
    DatasetFormatError,
    GenerationError,
    SceneParams,
    gen_dataset,
    gen_scene,
    read_dataset,
    scene_to_training_pair,
    write_dataset,
    write_pgm,
)
from .numerics import ParameterError, SeededRng, ShapeError
from .rifdemo import run_rif_demo
from .toytrainer.model import infer
from .toytrainer.training import (
    CDO_INPUTS,
    CheckpointError,
    LossConfig,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    train,
)

log = logging.getLogger("cdolane")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


@dataclass
class RunConfig:
    command: str = ""
    seed: int = 0
    data: str | None = None
    # synthetic scenes
    scenes: int = 200
    height: int = 64
    width: int = 64
    n_max: int = 4
    lanes_min: int = 1
    lanes_max: int = 4
    thickness: int = 4
    noise_std: float = 0.03
    occlusions_max: int = 2
    feature_res: list = field(default_factory=lambda: [16, 16])
    # training
    epochs: int = 40
    lr: float = 1.0
    lr_schedule: str = "constant"
    batch_size: int = 8
    channels: int = 8
    f_seg: float = 1.0
    f_exist: float = 0.1
    f_cdo: float = 0.1
    cdo_at: float = 0.75
    cdo_input: str = "probs"
    resume: str | None = None
    # CDO
    alpha: float = 0.5
    beta: float | None = None
    epsilon: float = 1e-12
    normalization: str = "half"
    pairing: str = "all"
    # evaluation
    checkpoint: str | None = None
    source: str = "model"
    iou: list = field(default_factory=lambda: [0.5, 0.75])
    iou_width: int | None = None
    point_threshold: float | None = None
    threshold: float = 0.5
    # gradcheck
    trials: int = 50
    grad_tol: float = 1e-4
    fd_step: float = 1e-5
    inject_fault: bool = False
    # rif demo
    iters: int = 200
    demo_lr: float = 20.0
    demo_channels: int = 4
    demo_lanes: int | None = None
    snapshots: list = field(default_factory=lambda: [0, 50])
    # bench
    shapes: list = field(default_factory=lambda: ["x".join(map(str, s)) for s in benchkit.DEFAULT_SHAPES])
    variants: list = field(default_factory=lambda: list(benchkit.VARIANTS))
    reps: int = 10
    compare: list | None = None

    def cdo_config(self) -> CdoConfig:
        beta = 1.0 - self.alpha if self.beta is None else self.beta
        return CdoConfig(self.alpha, beta, self.epsilon, self.normalization, self.pairing)

    def scene_params(self) -> SceneParams:
        return SceneParams(
            height=self.height,
            width=self.width,
            n_max=self.n_max,
            lane_count_range=(self.lanes_min, self.lanes_max),
            thickness=self.thickness,
            noise_std=self.noise_std,
            occlusion_count_range=(0, self.occlusions_max),
            slot_intensities=SceneParams().slot_intensities if self.n_max == 4 else tuple(
                np.linspace(0.45, 0.9, self.n_max).tolist()
            ),
            feature_size=tuple(self.feature_res) if self.feature_res else None,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            lr_schedule=self.lr_schedule,
            batch_size=self.batch_size,
            seed=self.seed,
            channels=self.channels,
            cdo_at=self.cdo_at,
            cdo_input=self.cdo_input,
            loss=LossConfig(self.f_seg, self.f_exist, self.f_cdo),
            cdo=self.cdo_config(),
        )


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _dims(text):
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dimensions like 16x16, got {text!r}") from None
    if any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError(f"dimensions must be positive, got {text!r}")
    return dims


def _shape3(text):
    dims = _dims(text)
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected CxHxW, got {text!r}")
    return text.lower()


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False, argument_default=S)
    common.add_argument("--config", help="JSON file of settings (overridden by flags)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    scene = argparse.ArgumentParser(add_help=False, argument_default=S)
    g = scene.add_argument_group("synthetic scenes")
    g.add_argument("--height", type=_positive_int)
    g.add_argument("--width", type=_positive_int)
    g.add_argument("--n-max", dest="n_max", type=_positive_int)
    g.add_argument("--lanes-min", dest="lanes_min", type=_nonneg_int)
    g.add_argument("--lanes-max", dest="lanes_max", type=_nonneg_int)
    g.add_argument("--thickness", type=_positive_int)
    g.add_argument("--noise-std", dest="noise_std", type=float)
    g.add_argument("--occlusions-max", dest="occlusions_max", type=_nonneg_int)
    g.add_argument("--feature-res", dest="feature_res", type=_dims, help="mask resolution, e.g. 16x16")

    cdo = argparse.ArgumentParser(add_help=False, argument_default=S)
    g = cdo.add_argument_group("CDO")
    g.add_argument("--alpha", type=float, help="horizontal weight; beta defaults to 1 - alpha")
    g.add_argument("--beta", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--normalization", choices=NORMALIZATIONS,
                   help="half: 1/(2C) prefactor (score <= 1/2); per_channel: 1/C")
    g.add_argument("--pairing", choices=PAIRINGS)

    parser = argparse.ArgumentParser(prog="cdolane", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common, scene], argument_default=S, help="generate a synthetic dataset")
    p.add_argument("--scenes", type=_nonneg_int)

    p = sub.add_parser("train", parents=[common, cdo], argument_default=S, help="train the toy segmenter")
    p.add_argument("--data")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "poly"))
    p.add_argument("--batch-size", dest="batch_size", type=_positive_int)
    p.add_argument("--channels", type=_positive_int)
    p.add_argument("--f-seg", dest="f_seg", type=float)
    p.add_argument("--f-exist", dest="f_exist", type=float)
    p.add_argument("--f-cdo", dest="f_cdo", type=float, help="0 gives the baseline")
    p.add_argument("--cdo-at", dest="cdo_at", type=float, help="fraction of epochs before CDO switches on")
    p.add_argument("--cdo-input", dest="cdo_input", choices=CDO_INPUTS)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], argument_default=S, help="evaluate a checkpoint")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--source", choices=("model", "gt", "empty"),
                   help="predictions from the model, or ground truth / nothing (self-tests)")
    p.add_argument("--iou", type=float, nargs="+")
    p.add_argument("--iou-width", dest="iou_width", type=_positive_int)
    p.add_argument("--point-threshold", dest="point_threshold", type=float)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("gradcheck", parents=[common, cdo], argument_default=S, help="check analytic CDO gradients")
    p.add_argument("--trials", type=_positive_int)
    p.add_argument("--grad-tol", dest="grad_tol", type=float)
    p.add_argument("--fd-step", dest="fd_step", type=float)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true", help=S)

    p = sub.add_parser("rif-demo", parents=[common, scene, cdo], argument_default=S,
                       help="gradient descent on a free feature map, logging RIF")
    p.add_argument("--iters", type=_positive_int)
    p.add_argument("--demo-lr", dest="demo_lr", type=float)
    p.add_argument("--demo-channels", dest="demo_channels", type=_positive_int)
    p.add_argument("--lanes", dest="demo_lanes", type=_nonneg_int, help="number of lanes in the demo scene")
    p.add_argument("--snapshots", type=_nonneg_int, nargs="+", help="iterations to dump heatmaps at")

    p = sub.add_parser("bench", parents=[common], argument_default=S, help="time covariance variants")
    p.add_argument("--shape", dest="shapes", type=_shape3, action="append", help="CxHxW; repeatable")
    p.add_argument("--variant", dest="variants", choices=benchkit.VARIANTS, action="append")
    p.add_argument("--reps", type=int)
    p.add_argument("--compare", nargs=2, metavar=("CKPT_A", "CKPT_B"),
                   help="also compare inference of two checkpoints (needs --data)")
    p.add_argument("--data")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = asdict(RunConfig())
    known = {f.name for f in fields(RunConfig)}
    ns = vars(args)
    if "config" in ns:
        try:
            loaded = json.loads(Path(ns["config"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {ns['config']}: {exc}") from exc
        unknown = set(loaded) - known
        if unknown:
            raise UsageError(f"unknown keys in {ns['config']}: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in ns.items() if k in known})
    values["command"] = args.command
    return RunConfig(**values)


def write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    params = cfg.scene_params()
    scenes = gen_dataset(params, cfg.scenes, cfg.seed)
    write_dataset(scenes, out, params, cfg.seed)
    _emit({"scenes": len(scenes), "n_max": params.n_max, "lanes": int(sum(s.existence.sum() for s in scenes))})
    return EXIT_OK


def _load_scenes(cfg: RunConfig):
    if cfg.data is None:
        raise UsageError("--data is required")
    return read_dataset(cfg.data)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    scenes = _load_scenes(cfg)
    if not scenes:
        raise ParameterError(f"dataset {cfg.data} is empty")
    state = train(cfg.train_config(), scenes, out_dir=out, resume_from=cfg.resume)
    _emit({"epochs": state.epoch, "enable_epoch": state.config.enable_epoch, "final": state.log[-1]})
    return EXIT_OK


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    scenes = _load_scenes(cfg)
    if not scenes:
        raise ParameterError(f"dataset {cfg.data} is empty")
    h, w = scenes[0].image.shape
    gts = [s.polylines() for s in scenes]
    if cfg.source == "gt":
        preds = gts
    elif cfg.source == "empty":
        preds = [[] for _ in scenes]
    else:
        if cfg.checkpoint is None:
            raise UsageError("--checkpoint is required with --source model")
        model = load_checkpoint(cfg.checkpoint).model
        preds = [infer(model, s.image, cfg.threshold) for s in scenes]
    report = evaluate_scenes(preds, gts, h, w, tuple(cfg.iou), cfg.iou_width, cfg.point_threshold)
    report = {"kind": "eval", "version": 1, "source": cfg.source, "checkpoint": cfg.checkpoint, **report}
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _emit(report)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    cdo_cfg = cfg.cdo_config()
    rng = SeededRng(cfg.seed)
    worst = {"max_rel_err": 0.0, "max_abs_err": 0.0, "trial": None, "index": None}

    def faulty(f, masks, exist, c):
        g = cdo_loss_backward(f, masks, exist, c)
        g.flat[0] += 0.1
        return g

    for t in range(cfg.trials):
        lanes = rng.integers(1, 3)
        channels = lanes if cdo_cfg.pairing == "per_lane" else rng.integers(1, 4)
        f, masks, exist = random_instance(rng, channels, rng.integers(2, 8), rng.integers(2, 8), lanes)
        rep = grad_check(f, masks, exist, cdo_cfg, h=cfg.fd_step, backward=faulty if cfg.inject_fault else None,
                         rng=rng.derive(t))
        if rep.max_rel_err >= worst["max_rel_err"]:
            worst.update(max_rel_err=rep.max_rel_err, trial=t, index=list(rep.worst_index))
        worst["max_abs_err"] = max(worst["max_abs_err"], rep.max_abs_err)
    passed = worst["max_rel_err"] < cfg.grad_tol
    report = {"kind": "gradcheck", "version": 1, "trials": cfg.trials, "tolerance": cfg.grad_tol,
              "passed": passed, **worst}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    _emit(report)
    print(f"max_rel_err={worst['max_rel_err']:.3e} ({'pass' if passed else 'FAIL'})", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAIL


def _heatmap(mat: np.ndarray) -> np.ndarray:
    lo, hi = float(mat.min()), float(mat.max())
    if hi <= lo:
        return np.zeros(mat.shape, dtype=np.uint8)
    return np.round((mat - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_rif_demo(cfg: RunConfig, out: Path) -> int:
    params = cfg.scene_params()
    if cfg.demo_lanes is not None:
        if cfg.demo_lanes > params.n_max:
            raise UsageError(f"--lanes {cfg.demo_lanes} exceeds n_max {params.n_max}")
        params = SceneParams(**{**params.to_dict(), "lane_count_range": (cfg.demo_lanes, cfg.demo_lanes)})
    scene = gen_scene(params, SeededRng(cfg.seed))
    fh, fw = cfg.feature_res
    _, masks, exist = scene_to_training_pair(scene, fh, fw)
    res = run_rif_demo(masks, exist, cfg.cdo_config(), cfg.demo_channels, cfg.iters, cfg.demo_lr, cfg.seed,
                       cfg.snapshots)
    if res.stopped_early:
        print("all lane masks are empty: CDO loss and gradient are identically zero, stopping early", file=sys.stderr)
    with open(out / "rif.csv", "w", newline="", encoding="utf-8") as fh_:
        writer = csv.writer(fh_)
        writer.writerow(["iter", "loss", "mean_rif_h", "mean_rif_v"])
        for r in res.records:
            writer.writerow([r["iter"], repr(r["loss"]), repr(r["mean_rif_h"]), repr(r["mean_rif_v"])])
    written = []
    for it, lanes in sorted(res.snapshots.items()):
        for n, (cov_h, cov_v) in sorted(lanes.items()):
            for tag, mat in (("h", cov_h), ("v", cov_v)):
                name = f"cov_{tag}_lane{n}_iter{it:05d}.pgm"
                write_pgm(out / name, _heatmap(mat))
                written.append(name)
    first, last = res.records[0], res.records[-1]
    _emit({"iters": len(res.records), "stopped_early": res.stopped_early, "first": first, "last": last,
           "heatmaps": written})
    return EXIT_OK


def cmd_bench(cfg: RunConfig, out: Path) -> int:
    shapes = [_dims(s) for s in cfg.shapes]
    if cfg.reps < 10:
        raise UsageError(f"--reps must be >= 10, got {cfg.reps}")
    for v in cfg.variants:
        if v not in benchkit.VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {benchkit.VARIANTS}")
    report = benchkit.bench_cov(shapes, cfg.variants, cfg.reps, cfg.seed)
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if cfg.compare:
        scenes = _load_scenes(cfg)[:8]
        models = {Path(p).name: load_checkpoint(p).model for p in cfg.compare}
        if len(models) != 2:
            models = {f"{i}:{Path(p).name}": load_checkpoint(p).model for i, p in enumerate(cfg.compare)}
        inference = benchkit.bench_inference_delta(models, [s.image for s in scenes], cfg.reps)
        (out / "inference.json").write_text(json.dumps(inference, indent=2) + "\n", encoding="utf-8")
        report = {**report, "inference": inference}
    _emit(report)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "rif-demo": cmd_rif_demo,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = Path(args.out)
    try:
        cfg = resolve_config(args)
    except (UsageError, TypeError) as exc:
        parser.error(str(exc))
    try:
        write_config(cfg, out)
        return COMMANDS[cfg.command](cfg, out)
    except UsageError as exc:
        parser.error(str(exc))
    except (ParameterError, ShapeError, GenerationError, DatasetFormatError, CheckpointError,
            TrainingError, benchkit.BenchmarkError, OSError) as exc:
        print(f"cdolane {cfg.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
