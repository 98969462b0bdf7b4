"""Analytical gradient of the CDO loss and a finite-difference checker.

Conventions at non-differentiable points, fixed so that runs replay
exactly:

* ``|x|`` at 0 has subgradient 0, so a lane with ``d == a`` contributes no
  gradient;
* on a tie ``d == a`` inside ``max(d, a)`` the ``d`` branch is taken;
* when ``epsilon`` is the active denominator it is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import optrace
from .cdo import (
    CdoConfig,
    as_masks,
    cdo_loss,
    cdo_scores,
    check_existence,
    cov_stats,
    covariances,
    normalizer,
)
from .numerics import ParameterError, SeededRng, as_tensor3

KINK_TOL = 1e-7


def rif_partials(d, a, epsilon: float = 1e-12):
    """Partial derivatives of RIF with respect to ``d`` and ``a``."""
    d = np.asarray(d, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    diff = d - a
    sgn = np.sign(diff)
    num = np.abs(diff)

    pos = np.maximum(d, a) > 0
    ad, aa = np.abs(d), np.abs(a)
    big = np.maximum(ad, aa)
    floor = ~pos & (big <= epsilon)

    denom = np.where(pos, np.where(d >= a, d, a), np.where(floor, epsilon, big))
    dden_dd = np.where(pos, (d >= a).astype(float), np.where(floor, 0.0, np.where(ad >= aa, np.sign(d), 0.0)))
    dden_da = np.where(pos, (d < a).astype(float), np.where(floor, 0.0, np.where(ad >= aa, 0.0, np.sign(a))))

    inv = 1.0 / denom
    q = num * inv * inv
    return sgn * inv - q * dden_dd, -sgn * inv - q * dden_da


def _cov_grad(dd, da, side):
    """Gradient of ``(mean_diag, mean_all)`` pulled back onto a covariance stack."""
    eye = np.eye(side)
    ones = np.ones((side, side))
    return dd[..., None, None] * eye / side + da[..., None, None] * ones / (side * side)


def cdo_loss_backward(f, masks, exist, cfg: CdoConfig = CdoConfig()) -> np.ndarray:
    """Gradient of :func:`cdo.cdo_loss` with respect to the feature map."""
    optrace.record("cdo.loss_backward")
    f = as_tensor3(f, "feature map")
    c, h, w = f.shape
    m = as_masks(masks, h, w)
    e = check_existence(m, exist)
    n = m.shape[0]

    cov_h, cov_v = covariances(f, m, cfg.pairing)
    dh, ah = cov_stats(cov_h)
    dv, av = cov_stats(cov_v)
    cp = cov_h.shape[1]
    k = normalizer(cfg, cp)
    scores = cdo_scores(f, m, cfg)

    g_score = 2.0 * (scores - e) / n
    g_rh = (g_score * k * cfg.alpha)[:, None] * np.ones((1, cp))
    g_rv = (g_score * k * cfg.beta)[:, None] * np.ones((1, cp))

    pdh, pah = rif_partials(dh, ah, cfg.epsilon)
    pdv, pav = rif_partials(dv, av, cfg.epsilon)
    g_cov_h = _cov_grad(g_rh * pdh, g_rh * pah, h)
    g_cov_v = _cov_grad(g_rv * pdv, g_rv * pav, w)

    mm = m[:, None]
    # d(S M^T)/dS contracts with M; d(S^T M)/dS contracts with M on the left.
    g_s = np.matmul(g_cov_h, mm) + np.matmul(mm, np.swapaxes(g_cov_v, -1, -2))

    if cfg.pairing == "all":
        return g_s.sum(axis=0)
    return g_s[:, 0].copy()


def finite_diff_grad(f, masks, exist, cfg: CdoConfig = CdoConfig(), h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the CDO loss, one entry at a time."""
    if not h > 0:
        raise ParameterError(f"step h must be > 0, got {h}")
    f = as_tensor3(f, "feature map").copy()
    grad = np.zeros_like(f)
    for idx in np.ndindex(f.shape):
        orig = f[idx]
        f[idx] = orig + h
        up = cdo_loss(f, masks, exist, cfg)
        f[idx] = orig - h
        down = cdo_loss(f, masks, exist, cfg)
        f[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    worst_index: tuple
    retries: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def compare_gradients(analytic, numeric) -> GradCheckReport:
    """Entrywise comparison; relative error is ``|g1 - g2| / (|g1| + |g2| + 1e-12)``."""
    g1 = np.asarray(analytic, dtype=np.float64)
    g2 = np.asarray(numeric, dtype=np.float64)
    abs_err = np.abs(g1 - g2)
    rel_err = abs_err / (np.abs(g1) + np.abs(g2) + 1e-12)
    worst = np.unravel_index(int(np.argmax(rel_err)), rel_err.shape)
    return GradCheckReport(
        max_abs_err=float(abs_err.max()),
        max_rel_err=float(rel_err.max()),
        worst_index=tuple(int(i) for i in worst),
    )


def near_kink(f, masks, cfg: CdoConfig, tol: float = KINK_TOL) -> bool:
    """True if any non-empty lane sits within ``tol`` of a RIF kink."""
    cov_h, cov_v = covariances(f, masks, cfg.pairing)
    m = as_masks(masks, f.shape[1], f.shape[2])
    live = m.reshape(m.shape[0], -1).any(axis=1)
    for cov in (cov_h, cov_v):
        d, a = cov_stats(cov)
        d, a = d[live], a[live]
        if np.any(np.abs(d - a) < tol):
            return True
        if np.any(np.abs(np.maximum(d, a)) < tol):
            return True
        neg = np.maximum(d, a) <= 0
        if np.any(neg & (np.abs(np.abs(d) - np.abs(a)) < tol)):
            return True
    return False


def grad_check(
    f,
    masks,
    exist,
    cfg: CdoConfig = CdoConfig(),
    h: float = 1e-5,
    backward=None,
    rng: SeededRng | None = None,
    max_retries: int = 10,
) -> GradCheckReport:
    """Compare the analytic CDO gradient against central differences.

    If the instance lies next to a RIF kink it is nudged with small noise
    and retried. ``backward`` replaces :func:`cdo_loss_backward`, which is
    how fault-injection tests feed in a corrupted gradient.
    """
    f = as_tensor3(f, "feature map").copy()
    backward = backward or cdo_loss_backward
    rng = rng or SeededRng(0)
    retries = 0
    while near_kink(f, masks, cfg) and retries < max_retries:
        scale = 1e-3 * (float(np.std(f)) + 1.0)
        f = f + rng.normal_array(0.0, scale, f.shape)
        retries += 1
    report = compare_gradients(backward(f, masks, exist, cfg), finite_diff_grad(f, masks, exist, cfg, h))
    report.retries = retries
    return report


def random_instance(rng: SeededRng, channels: int, height: int, width: int, lanes: int = 1, signed: bool = False):
    """Random feature map, lane masks and existence bits for gradient checks.

    Every lane gets a random non-empty mask; features are uniform on
    ``[0.1, 1)`` (or ``[-1, 1)`` when ``signed``).
    """
    lo = -1.0 if signed else 0.1
    f = rng.uniform_array(lo, 1.0, (channels, height, width))
    masks = []
    for _ in range(lanes):
        m = (rng.uniform_array(0.0, 1.0, (height, width)) < 0.3).astype(np.uint8)
        if not m.any():
            m[rng.integers(0, height - 1), rng.integers(0, width - 1)] = 1
        masks.append(m)
    exist = [1] * lanes
    return f, masks, exist
