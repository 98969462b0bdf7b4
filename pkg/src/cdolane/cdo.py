"""Forward computation of the covariance distribution optimization (CDO) loss.

For a feature channel ``S`` (H x W) and a lane mask ``M`` (H x W):

* horizontal covariance ``S @ M.T`` (H x H) relates rows of ``S`` to rows of ``M``;
* vertical covariance ``S.T @ M`` (W x W) relates columns.

The relative intensity function (RIF) measures how far the diagonal mean
of a covariance matrix stands out against its overall mean. A lane's CDO
score averages RIF over channels and both directions, and the loss is the
mean squared error between scores and lane existence bits.

The products are raw (not mean-centered), matching the usual definition of
this loss even though it is called a covariance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import optrace
from .numerics import ParameterError, ShapeError, as_matrix, as_tensor3, mean_all, mean_diag, pivot_mean

NORMALIZATIONS = ("half", "per_channel")
PAIRINGS = ("all", "per_lane")


class ValidationError(ValueError):
    """Raised when lane masks and existence bits disagree."""


@dataclass(frozen=True)
class CdoConfig:
    """Weights and conventions for the CDO score.

    ``normalization="half"`` uses the ``1/(2C)`` prefactor, which caps a
    score at 1/2 for nonnegative features; ``"per_channel"`` uses ``1/C``
    so that a score of 1 is reachable. ``pairing="all"`` scores every lane
    against all channels; ``"per_lane"`` scores lane ``n`` against channel
    ``n`` only.
    """

    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-12
    normalization: str = "half"
    pairing: str = "all"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if not math.isclose(self.alpha + self.beta, 1.0, rel_tol=0.0, abs_tol=1e-12):
            raise ParameterError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"normalization must be one of {NORMALIZATIONS}")
        if self.pairing not in PAIRINGS:
            raise ParameterError(f"pairing must be one of {PAIRINGS}")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(s, m):
    s = as_matrix(s, "feature channel")
    m = as_matrix(m, "lane mask")
    if s.shape != m.shape:
        raise ShapeError(f"feature channel {s.shape} and mask {m.shape} differ in shape")
    return s, m


def cov_horizontal(s, m) -> np.ndarray:
    """``S @ M.T``: entry ``(i, j)`` is row ``i`` of ``S`` dotted with row ``j`` of ``M``."""
    optrace.record("cdo.cov_horizontal")
    s, m = _check_pair(s, m)
    return s @ m.T


def cov_vertical(s, m) -> np.ndarray:
    """``S.T @ M``: entry ``(i, j)`` is column ``i`` of ``S`` dotted with column ``j`` of ``M``."""
    optrace.record("cdo.cov_vertical")
    s, m = _check_pair(s, m)
    return s.T @ m


def rif_from_stats(d, a, epsilon: float = 1e-12):
    """Vectorized RIF from diagonal means ``d`` and overall means ``a``.

    ``|d - a| / max(d, a)`` when ``max(d, a) > 0``, otherwise
    ``|d - a| / max(|d|, |a|, epsilon)``. Exactly 0 when ``d == a``, which
    covers the all-zero covariance of an absent lane.
    """
    d = np.asarray(d, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    diff = d - a
    denom = np.where(
        np.maximum(d, a) > 0,
        np.where(d >= a, d, a),
        np.maximum(np.maximum(np.abs(d), np.abs(a)), epsilon),
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.abs(diff) / denom
    return np.where(diff == 0, 0.0, r)


def rif(cov, epsilon: float = 1e-12) -> float:
    """Relative intensity of the diagonal of a square covariance matrix."""
    optrace.record("cdo.rif")
    cov = as_matrix(cov, "covariance")
    if cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"rif needs a square matrix, got {cov.shape}")
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be > 0, got {epsilon}")
    return float(rif_from_stats(mean_diag(cov), mean_all(cov), epsilon))


def as_masks(masks, height: int, width: int) -> np.ndarray:
    """Stack lane masks into an ``(N, H, W)`` float array, checking shapes."""
    stack = np.asarray(masks, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None]
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ShapeError(f"masks must be a non-empty list of H x W arrays, got shape {stack.shape}")
    if stack.shape[1:] != (height, width):
        raise ShapeError(f"mask shape {stack.shape[1:]} does not match feature map ({height}, {width})")
    return stack


def check_existence(masks: np.ndarray, exist) -> np.ndarray:
    """Validate existence bits against masks and return them as floats."""
    e = np.asarray(exist, dtype=np.float64).reshape(-1)
    if e.shape[0] != masks.shape[0]:
        raise ShapeError(f"{masks.shape[0]} masks but {e.shape[0]} existence bits")
    if not np.all((e == 0) | (e == 1)):
        raise ValidationError(f"existence bits must be 0 or 1, got {e.tolist()}")
    nonempty = masks.reshape(masks.shape[0], -1).any(axis=1)
    bad = np.flatnonzero(nonempty != (e == 1))
    if bad.size:
        n = int(bad[0])
        raise ValidationError(
            f"lane {n}: exist={int(e[n])} but mask is {'non-empty' if nonempty[n] else 'empty'}"
        )
    return e


def lane_channels(f: np.ndarray, n_lanes: int, pairing: str) -> np.ndarray:
    """Channels each lane is scored against, shaped ``(N or 1, Cp, H, W)``."""
    if pairing == "all":
        return f[None]
    if f.shape[0] != n_lanes:
        raise ShapeError(f"per_lane pairing needs one channel per lane, got {f.shape[0]} channels for {n_lanes} lanes")
    return f[:, None]


def covariances(f, masks, pairing: str = "all"):
    """Horizontal and vertical covariance stacks for every (lane, channel) pair.

    Returns ``(cov_h, cov_v)`` with shapes ``(N, Cp, H, H)`` and
    ``(N, Cp, W, W)``, where ``Cp`` is ``C`` for ``"all"`` pairing and 1 for
    ``"per_lane"``.
    """
    optrace.record("cdo.covariances")
    f = as_tensor3(f, "feature map")
    m = as_masks(masks, f.shape[1], f.shape[2])
    s = lane_channels(f, m.shape[0], pairing)
    mm = m[:, None]
    cov_h = np.matmul(s, np.swapaxes(mm, -1, -2))
    cov_v = np.matmul(np.swapaxes(s, -1, -2), mm)
    return cov_h, cov_v


def cov_stats(cov: np.ndarray):
    """Diagonal mean and overall mean over the last two axes (see ``pivot_mean``)."""
    p = cov[..., 0, 0]
    d = pivot_mean(np.diagonal(cov, axis1=-2, axis2=-1), p[..., None], axis=-1)
    a = pivot_mean(cov, p[..., None, None], axis=(-2, -1))
    return d, a


def normalizer(cfg: CdoConfig, channels: int) -> float:
    return 1.0 / (2 * channels) if cfg.normalization == "half" else 1.0 / channels


def lane_rifs(f, masks, cfg: CdoConfig = CdoConfig()):
    """RIF tables ``(rif_h, rif_v)``, each of shape ``(N, Cp)``."""
    cov_h, cov_v = covariances(f, masks, cfg.pairing)
    optrace.record("cdo.rif")
    rh = rif_from_stats(*cov_stats(cov_h), cfg.epsilon)
    rv = rif_from_stats(*cov_stats(cov_v), cfg.epsilon)
    return rh, rv


def cdo_scores(f, masks, cfg: CdoConfig = CdoConfig()) -> np.ndarray:
    """CDO score of every lane, shape ``(N,)``."""
    rh, rv = lane_rifs(f, masks, cfg)
    k = normalizer(cfg, rh.shape[1])
    return k * (cfg.alpha * rh.sum(axis=1) + cfg.beta * rv.sum(axis=1))


def cdo_score(f, mask, cfg: CdoConfig = CdoConfig()) -> float:
    """CDO score of a single lane against all channels of ``f``."""
    if cfg.pairing != "all":
        raise ParameterError("cdo_score scores one lane against all channels; use cdo_scores for per_lane pairing")
    return float(cdo_scores(f, [np.asarray(mask)], cfg)[0])


def cdo_loss(f, masks, exist, cfg: CdoConfig = CdoConfig()) -> float:
    """Mean squared error between lane CDO scores and existence bits.

    Every lane slot must be passed, including empty ones (their mask is
    all-zero and ``exist`` is 0), so the mean always runs over N slots.
    """
    optrace.record("cdo.loss")
    f = as_tensor3(f, "feature map")
    m = as_masks(masks, f.shape[1], f.shape[2])
    e = check_existence(m, exist)
    scores = cdo_scores(f, m, cfg)
    return float(np.mean((scores - e) ** 2))
