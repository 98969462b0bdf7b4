"""Training loop for the toy segmenter with the composite loss

    total = f_seg * L_seg + f_exist * L_exist + f_cdo * L_cdo

where L_seg and L_exist are binary cross-entropies and L_cdo is the CDO
loss. CDO reads the per-slot segmentation probabilities ``sigmoid(F)`` by
default; ``cdo_input="logits"`` feeds it ``F`` itself, whose signed values
can drive the RIF denominator toward zero. The CDO term can be switched on part
way through training (by default after 75% of the epochs), mirroring a
retrain-from-checkpoint workflow.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..cdo import CdoConfig, cdo_loss, lane_rifs
from ..cdo_grad import cdo_loss_backward
from ..lanesynth import scene_to_training_pair
from ..numerics import ParameterError, SeededRng, ShapeError
from .model import PARAM_NAMES, STRIDE, ToyModel, conv2d_backward, forward_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cdolane-checkpoint"
CHECKPOINT_VERSION = 1
CDO_INPUTS = ("probs", "logits")
LOG_FIELDS = ("epoch", "L_seg", "L_exist", "L_cdo", "total", "mean_rif_h", "mean_rif_v")


class TrainingError(RuntimeError):
    """Raised when training cannot continue (e.g. a non-finite loss)."""


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoints."""


@dataclass(frozen=True)
class LossConfig:
    f_seg: float = 1.0
    f_exist: float = 0.1
    f_cdo: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ParameterError(f"{k} must be >= 0, got {v}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 1.0
    lr_schedule: str = "constant"
    poly_power: float = 0.9
    batch_size: int = 8
    seed: int = 0
    channels: int = 8
    cdo_at: float = 0.75
    cdo_input: str = "probs"
    loss: LossConfig = field(default_factory=LossConfig)
    cdo: CdoConfig = field(default_factory=CdoConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.cdo_at <= 1.0:
            raise ParameterError(f"cdo_at must lie in [0, 1], got {self.cdo_at}")
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")
        if self.cdo_input not in CDO_INPUTS:
            raise ParameterError(f"cdo_input must be one of {CDO_INPUTS}, got {self.cdo_input!r}")
        if self.lr_schedule not in ("constant", "poly"):
            raise ParameterError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def enable_epoch(self) -> int:
        """Number of epochs completed before the CDO term switches on."""
        return int(round(self.cdo_at * self.epochs))

    def f_cdo_at(self, epoch_index: int) -> float:
        """Effective CDO coefficient while training epoch ``epoch_index`` (0-based)."""
        return self.loss.f_cdo if epoch_index >= self.enable_epoch else 0.0

    def lr_at(self, epoch_index: int) -> float:
        if self.lr_schedule == "poly":
            return self.lr * (1.0 - epoch_index / self.epochs) ** self.poly_power
        return self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        d["cdo"] = CdoConfig(**d.get("cdo", {}))
        return cls(**d)


@dataclass
class TrainState:
    model: ToyModel
    config: TrainConfig
    rng: SeededRng
    epoch: int = 0
    log: list = field(default_factory=list)


@dataclass
class TrainingSet:
    """Stacked training pairs at feature resolution."""

    images: np.ndarray  # (S, H, W)
    masks: np.ndarray  # (S, N, H/4, W/4)
    exist: np.ndarray  # (S, N)

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_scenes(cls, scenes) -> "TrainingSet":
        scenes = list(scenes)
        if not scenes:
            raise ParameterError("dataset is empty")
        h, w = scenes[0].image.shape
        if h % STRIDE or w % STRIDE:
            raise ShapeError(f"image dims must be multiples of {STRIDE}, got {h}x{w}")
        pairs = [scene_to_training_pair(s, h // STRIDE, w // STRIDE) for s in scenes]
        return cls(
            images=np.stack([p[0] for p in pairs]),
            masks=np.stack([p[1] for p in pairs]).astype(np.float64),
            exist=np.stack([p[2] for p in pairs]).astype(np.float64),
        )

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.images[idx], self.masks[idx], self.exist[idx])


def _bce_logits(z, y):
    return np.logaddexp(0.0, z) - y * z


def cdo_features(outputs: dict, cdo_input: str = "probs") -> np.ndarray:
    """The ``(B, N, h, w)`` tensor the CDO term reads."""
    return outputs["seg_probs"] if cdo_input == "probs" else outputs["feature"]


def total_loss(
    outputs: dict,
    masks,
    exist,
    loss_cfg: LossConfig,
    cdo_cfg: CdoConfig,
    f_cdo: float | None = None,
    cdo_input: str = "probs",
):
    """Weighted composite loss over a batch.

    ``outputs`` is the dict from :func:`forward_batch`. Returns
    ``(total, components)`` where components holds ``L_seg``, ``L_exist``
    and ``L_cdo`` (each a batch mean). ``f_cdo`` overrides the coefficient
    in ``loss_cfg``; when it is 0 the CDO term contributes exactly nothing.
    """
    feature = outputs["feature"]
    masks = np.asarray(masks, dtype=np.float64)
    exist = np.asarray(exist, dtype=np.float64)
    if masks.shape != feature.shape:
        raise ShapeError(f"masks {masks.shape} do not match feature map {feature.shape}")
    if exist.shape != outputs["exist_logits"].shape:
        raise ShapeError(f"existence {exist.shape} does not match head {outputs['exist_logits'].shape}")
    f_cdo = loss_cfg.f_cdo if f_cdo is None else f_cdo
    l_seg = float(np.mean(_bce_logits(feature, masks)))
    l_exist = float(np.mean(_bce_logits(outputs["exist_logits"], exist)))
    cdo_in = cdo_features(outputs, cdo_input)
    l_cdo = float(np.mean([cdo_loss(cdo_in[b], masks[b], exist[b], cdo_cfg) for b in range(feature.shape[0])]))
    total = loss_cfg.f_seg * l_seg + loss_cfg.f_exist * l_exist
    if f_cdo:
        total += f_cdo * l_cdo
    return total, {"L_seg": l_seg, "L_exist": l_exist, "L_cdo": l_cdo}


def loss_and_grads(
    model: ToyModel, images, masks, exist, loss_cfg: LossConfig, cdo_cfg: CdoConfig, f_cdo=None, cdo_input="probs"
):
    """Composite loss, its components, and gradients for every parameter."""
    out = forward_batch(model, images, keep_cache=True)
    total, comps = total_loss(out, masks, exist, loss_cfg, cdo_cfg, f_cdo, cdo_input)
    f_cdo = loss_cfg.f_cdo if f_cdo is None else f_cdo
    p = model.params
    cache = out["cache"]
    feature = out["feature"]
    b, n, fh, fw = feature.shape
    masks = np.asarray(masks, dtype=np.float64)
    exist = np.asarray(exist, dtype=np.float64)

    g_feat = loss_cfg.f_seg * (out["seg_probs"] - masks) / feature.size

    g_logit = loss_cfg.f_exist * (out["exist_probs"] - exist) / exist.size
    grads = {
        "exist_gain": (g_logit * cache["pooled"]).sum(axis=0),
        "exist_bias": g_logit.sum(axis=0),
    }
    g_feat = g_feat + (g_logit * p["exist_gain"])[:, :, None, None] / (fh * fw)

    if f_cdo:
        cdo_in = cdo_features(out, cdo_input)
        g_cdo = np.stack([cdo_loss_backward(cdo_in[i], masks[i], exist[i], cdo_cfg) for i in range(b)])
        if cdo_input == "probs":
            g_cdo = g_cdo * out["seg_probs"] * (1.0 - out["seg_probs"])
        g_feat = g_feat + f_cdo * g_cdo / b

    g_a1, grads["conv2_w"], grads["conv2_b"] = conv2d_backward(g_feat, cache["cols2"], p["conv2_w"], cache["a1"].shape)
    g_z1 = g_a1 * (cache["z1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv2d_backward(g_z1, cache["cols1"], p["conv1_w"], cache["x_shape"])
    return total, comps, grads


def backward_and_step(state: TrainState, batch: TrainingSet, lr: float | None = None, f_cdo: float | None = None):
    """One SGD step on ``batch``; updates ``state.model`` in place and returns ``state``."""
    cfg = state.config
    lr = cfg.lr_at(state.epoch) if lr is None else lr
    f_cdo = cfg.f_cdo_at(state.epoch) if f_cdo is None else f_cdo
    total, comps, grads = loss_and_grads(
        state.model, batch.images, batch.masks, batch.exist, cfg.loss, cfg.cdo, f_cdo, cfg.cdo_input
    )
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss at epoch {state.epoch}: total={total}, components={comps}")
    for k in PARAM_NAMES:
        if not np.all(np.isfinite(grads[k])):
            raise TrainingError(f"non-finite gradient for {k} at epoch {state.epoch}")
    if lr:
        for k in PARAM_NAMES:
            state.model.params[k] -= lr * grads[k]
    return state


def epoch_metrics(model: ToyModel, data: TrainingSet, cfg: TrainConfig, f_cdo: float, batch: int = 64) -> dict:
    """Loss components and mean RIF over a whole dataset at the current parameters.

    Mean RIF averages over present lanes and the channels each is scored on.
    """
    sums = {"L_seg": 0.0, "L_exist": 0.0, "L_cdo": 0.0}
    rif_h, rif_v = [], []
    for start in range(0, len(data), batch):
        part = data.subset(slice(start, start + batch))
        out = forward_batch(model, part.images)
        _, comps = total_loss(out, part.masks, part.exist, cfg.loss, cfg.cdo, f_cdo=0.0, cdo_input=cfg.cdo_input)
        cdo_in = cdo_features(out, cfg.cdo_input)
        for k in sums:
            sums[k] += comps[k] * len(part)
        for i in range(len(part)):
            live = part.exist[i] == 1
            if live.any():
                rh, rv = lane_rifs(cdo_in[i], part.masks[i], cfg.cdo)
                rif_h.append(rh[live].ravel())
                rif_v.append(rv[live].ravel())
    rec = {k: v / len(data) for k, v in sums.items()}
    rec["total"] = cfg.loss.f_seg * rec["L_seg"] + cfg.loss.f_exist * rec["L_exist"]
    if f_cdo:
        rec["total"] += f_cdo * rec["L_cdo"]
    rec["mean_rif_h"] = float(np.mean(np.concatenate(rif_h))) if rif_h else 0.0
    rec["mean_rif_v"] = float(np.mean(np.concatenate(rif_v))) if rif_v else 0.0
    return rec


def new_state(cfg: TrainConfig, n_max: int = 4) -> TrainState:
    rng = SeededRng(cfg.seed)
    model = ToyModel.init(rng.derive(0), channels=cfg.channels, n_max=n_max)
    return TrainState(model=model, config=cfg, rng=rng.derive(1))


def run_epoch(state: TrainState, data: TrainingSet) -> dict:
    cfg = state.config
    order = state.rng.permutation(len(data))
    for start in range(0, len(data), cfg.batch_size):
        backward_and_step(state, data.subset(order[start:start + cfg.batch_size]))
    f_cdo = cfg.f_cdo_at(state.epoch)
    state.epoch += 1
    rec = {"epoch": state.epoch, **epoch_metrics(state.model, data, cfg, f_cdo)}
    state.log.append(rec)
    return rec


def train(cfg: TrainConfig, data, out_dir=None, resume_from=None, epochs: int | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or stop early after ``epochs`` total).

    ``data`` is a :class:`TrainingSet` or a list of scenes. With
    ``out_dir`` a checkpoint is written after every epoch and the epoch log
    is written as ``epochs.csv``. ``resume_from`` continues from a
    checkpoint file or :class:`TrainState`.
    """
    if not isinstance(data, TrainingSet):
        data = TrainingSet.from_scenes(data)
    n_max = data.masks.shape[1]
    if resume_from is None:
        state = new_state(cfg, n_max)
    elif isinstance(resume_from, TrainState):
        state = TrainState(resume_from.model.copy(), cfg, SeededRng.from_state(resume_from.rng.get_state()),
                           resume_from.epoch, [dict(r) for r in resume_from.log])
    else:
        state = load_checkpoint(resume_from, cfg)
    if state.model.n_max != n_max:
        raise CheckpointError(f"checkpoint has {state.model.n_max} lane slots, dataset has {n_max}")
    stop = cfg.epochs if epochs is None else min(epochs, cfg.epochs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    while state.epoch < stop:
        rec = run_epoch(state, data)
        log.info("epoch %d: %s", rec["epoch"], {k: round(v, 6) for k, v in rec.items() if k != "epoch"})
        if out is not None:
            save_checkpoint(state, out / "checkpoints" / f"epoch_{state.epoch:03d}.json")
            write_epoch_log(state.log, out / "epochs.csv")
    return state


def write_epoch_log(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
        for r in records:
            writer.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])


def read_epoch_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in LOG_FIELDS} for r in rows]


def save_checkpoint(state: TrainState, path) -> None:
    """JSON checkpoint: parameters (shape + flat data), epoch, RNG state, config, log."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in state.model.params.items()},
        "rng_state": state.rng.get_state(),
        "config": state.config.to_dict(),
        "log": state.log,
    }
    Path(path).write_text(json.dumps(blob) + "\n", encoding="utf-8")


def load_checkpoint(path, cfg: TrainConfig | None = None) -> TrainState:
    """Load a checkpoint; with ``cfg`` given, check it is compatible and train under it."""
    path = Path(path)
    try:
        blob = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a cdolane checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {blob.get('version')} unsupported (expected {CHECKPOINT_VERSION})")
    try:
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob["params"].items()}
        saved_cfg = TrainConfig.from_dict(blob["config"])
        model = ToyModel(params)
        rng = SeededRng.from_state(blob["rng_state"])
        epoch = int(blob["epoch"])
        records = list(blob["log"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if cfg is None:
        cfg = saved_cfg
    elif cfg.channels != model.channels:
        raise CheckpointError(f"{path}: checkpoint has {model.channels} conv channels, config asks for {cfg.channels}")
    if epoch > cfg.epochs:
        raise CheckpointError(f"{path}: checkpoint is at epoch {epoch}, beyond configured {cfg.epochs} epochs")
    return TrainState(model=model, config=cfg, rng=rng, epoch=epoch, log=records)


def with_f_cdo(cfg: TrainConfig, f_cdo: float) -> TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, f_cdo=f_cdo))
