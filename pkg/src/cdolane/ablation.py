"""Paired baseline-vs-CDO training runs on synthetic data.

Each seed trains two models from the same initialization on the same
training set, one with ``f_cdo = 0`` and one with the configured
coefficient, then compares F1 on a held-out test set.

Run as ``python -m cdolane.ablation`` for the default five-seed table.
"""

from __future__ import annotations

import argparse
import json
import sys

from .laneval import evaluate_scenes
from .lanesynth import SceneParams, gen_dataset
from .toytrainer.model import STRIDE, infer
from .toytrainer.training import TrainConfig, TrainingSet, train, with_f_cdo

TRAIN_SEED = 1000
TEST_SEED = 2000


def evaluate_model(model, scenes, iou_thresholds=(0.5,), threshold: float = 0.5, width=None) -> dict:
    h, w = scenes[0].image.shape
    preds = [infer(model, s.image, threshold) for s in scenes]
    gts = [s.polylines() for s in scenes]
    return evaluate_scenes(preds, gts, h, w, iou_thresholds, width)


def run_ablation(seeds=(0, 1, 2, 3, 4), cfg: TrainConfig = TrainConfig(), params: SceneParams = SceneParams(),
                 n_train: int = 200, n_test: int = 50, f_cdo: float = 0.1) -> list[dict]:
    train_scenes = gen_dataset(params, n_train, TRAIN_SEED)
    test_scenes = gen_dataset(params, n_test, TEST_SEED)
    data = TrainingSet.from_scenes(train_scenes)
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for name, coef in (("baseline", 0.0), ("cdo", f_cdo)):
            run_cfg = with_f_cdo(TrainConfig.from_dict({**cfg.to_dict(), "seed": seed}), coef)
            state = train(run_cfg, data)
            row[f"f1_{name}"] = evaluate_model(state.model, test_scenes)["f1"]["0.5"]["f1"]
            # The default width is narrower than the output stride, so also
            # score at stride width where quantization alone cannot fail a match.
            row[f"f1s_{name}"] = evaluate_model(state.model, test_scenes, width=STRIDE)["f1"]["0.5"]["f1"]
            row[f"L_cdo_{name}"] = state.log[-1]["L_cdo"]
        row["delta"] = row["f1_cdo"] - row["f1_baseline"]
        row["delta_s"] = row["f1s_cdo"] - row["f1s_baseline"]
        rows.append(row)
    return rows


def format_table(rows) -> str:
    lines = [
        f"F1@0.5 at default IoU width | at width {STRIDE}",
        "seed    base     CDO    delta |   base     CDO    delta",
    ]
    for r in rows:
        lines.append(f"{r['seed']:>4}  {r['f1_baseline']:.4f}  {r['f1_cdo']:.4f}  {r['delta']:+.4f} |"
                     f" {r['f1s_baseline']:.4f}  {r['f1s_cdo']:.4f}  {r['delta_s']:+.4f}")
    n = max(len(rows), 1)
    lines.append(f"mean delta {sum(r['delta'] for r in rows) / n:+.4f} | {sum(r['delta_s'] for r in rows) / n:+.4f}")
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m cdolane.ablation", description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=TrainConfig().epochs)
    ap.add_argument("--json", action="store_true", help="print rows as JSON instead of a table")
    args = ap.parse_args(argv)
    rows = run_ablation(args.seeds, TrainConfig(epochs=args.epochs))
    print(json.dumps(rows, indent=2) if args.json else format_table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
