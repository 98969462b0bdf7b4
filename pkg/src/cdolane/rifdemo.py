"""Gradient descent on a free feature map against fixed lane masks.

No network involved: the feature map itself is the parameter. Steps are
projected back onto nonnegative values, the regime post-activation
features live in. This shows how minimizing the CDO loss sharpens the
diagonal of each lane's covariance matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cdo import CdoConfig, cdo_loss, covariances, lane_rifs
from .cdo_grad import cdo_loss_backward
from .numerics import ParameterError, SeededRng


@dataclass
class RifDemoResult:
    records: list = field(default_factory=list)  # per-iteration dicts
    snapshots: dict = field(default_factory=dict)  # iteration -> {lane: (cov_h, cov_v)}
    stopped_early: bool = False
    feature: np.ndarray | None = None


def _record(it, f, masks, exist, cfg):
    live = np.asarray(exist) == 1
    rh, rv = lane_rifs(f, masks, cfg)
    return {
        "iter": it,
        "loss": cdo_loss(f, masks, exist, cfg),
        "mean_rif_h": float(rh[live].mean()) if live.any() else 0.0,
        "mean_rif_v": float(rv[live].mean()) if live.any() else 0.0,
    }


def _snapshot(f, masks, exist, cfg):
    cov_h, cov_v = covariances(f, masks, cfg.pairing)
    return {n: (cov_h[n].mean(axis=0), cov_v[n].mean(axis=0)) for n in range(len(exist)) if exist[n] == 1}


def run_rif_demo(masks, exist, cfg: CdoConfig = CdoConfig(), channels: int = 4, iters: int = 200,
                 lr: float = 20.0, seed: int = 0, snapshot_iters=(0,)) -> RifDemoResult:
    """Minimize the CDO loss over a feature map initialized uniform on ``[0, 1)``.

    Stops after iteration 0 when every mask is empty, since the loss is then
    identically zero.
    """
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    masks = np.asarray(masks, dtype=np.float64)
    n, h, w = masks.shape
    c = n if cfg.pairing == "per_lane" else channels
    f = SeededRng(seed).uniform_array(0.0, 1.0, (c, h, w))
    snaps = set(int(i) for i in snapshot_iters) | {iters - 1}
    res = RifDemoResult()
    for it in range(iters):
        res.records.append(_record(it, f, masks, exist, cfg))
        if it in snaps:
            res.snapshots[it] = _snapshot(f, masks, exist, cfg)
        g = cdo_loss_backward(f, masks, exist, cfg)
        if not np.any(g) and not np.any(masks):
            res.stopped_early = True
            break
        if it < iters - 1:
            f = np.maximum(f - lr * g, 0.0)
    res.feature = f
    return res
