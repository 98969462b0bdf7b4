"""Two-layer convolutional lane segmenter with hand-written backprop.

This module is the complete inference path: ``forward`` and
``decode_lanes``. It deliberately imports nothing from the CDO modules.
"""

from __future__ import annotations

import numpy as np

from .. import optrace
from ..maskops import Polyline
from ..numerics import ParameterError, SeededRng, ShapeError

STRIDE = 4  # two stride-2 convolutions

PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "exist_gain", "exist_bias")


def param_shapes(channels: int = 8, n_max: int = 4) -> dict:
    return {
        "conv1_w": (channels, 1, 3, 3),
        "conv1_b": (channels,),
        "conv2_w": (n_max, channels, 3, 3),
        "conv2_b": (n_max,),
        "exist_gain": (n_max,),
        "exist_bias": (n_max,),
    }


class ToyModel:
    """conv3x3/s2 -> ReLU -> conv3x3/s2 gives the feature map ``F`` (one channel per lane slot).

    ``sigmoid(F)`` is the per-slot segmentation, and each slot's existence
    probability is ``sigmoid(gain * mean(F[n]) + bias)``.
    """

    def __init__(self, params: dict):
        self.params = {k: np.asarray(params[k], dtype=np.float64).copy() for k in PARAM_NAMES}
        self.channels = self.params["conv1_w"].shape[0]
        self.n_max = self.params["conv2_w"].shape[0]
        expected = param_shapes(self.channels, self.n_max)
        for k in PARAM_NAMES:
            if self.params[k].shape != expected[k]:
                raise ShapeError(f"{k}: expected shape {expected[k]}, got {self.params[k].shape}")
            if not np.all(np.isfinite(self.params[k])):
                raise ParameterError(f"{k} contains non-finite values")

    @classmethod
    def init(cls, rng: SeededRng, channels: int = 8, n_max: int = 4) -> "ToyModel":
        shapes = param_shapes(channels, n_max)
        params = {
            "conv1_w": rng.normal_array(0.0, np.sqrt(2.0 / 9.0), shapes["conv1_w"]),
            "conv1_b": np.zeros(shapes["conv1_b"]),
            "conv2_w": rng.normal_array(0.0, np.sqrt(2.0 / (9.0 * channels)), shapes["conv2_w"]),
            "conv2_b": np.zeros(shapes["conv2_b"]),
            "exist_gain": np.ones(shapes["exist_gain"]),
            "exist_bias": np.zeros(shapes["exist_bias"]),
        }
        return cls(params)

    @classmethod
    def zeros(cls, channels: int = 8, n_max: int = 4) -> "ToyModel":
        return cls({k: np.zeros(s) for k, s in param_shapes(channels, n_max).items()})

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ToyModel":
        return ToyModel(self.params)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def im2col(x: np.ndarray) -> np.ndarray:
    """3x3, stride-2, pad-1 patches: ``(B, C, H, W) -> (B, C*9, Ho*Wo)``."""
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, ho, wo))
    for kr in range(3):
        for kc in range(3):
            cols[:, :, kr, kc] = xp[:, :, kr:kr + 2 * ho:2, kc:kc + 2 * wo:2]
    return cols.reshape(b, c * 9, ho * wo)


def col2im(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping taps accumulate in fixed order."""
    b, c, h, w = shape
    ho, wo = h // 2, w // 2
    cols = cols.reshape(b, c, 3, 3, ho, wo)
    xp = np.zeros((b, c, h + 2, w + 2))
    for kr in range(3):
        for kc in range(3):
            xp[:, :, kr:kr + 2 * ho:2, kc:kc + 2 * wo:2] += cols[:, :, kr, kc]
    return xp[:, :, 1:-1, 1:-1]


def conv2d(x, weight, bias):
    """Stride-2 same-padded 3x3 convolution; returns output and cached patches."""
    optrace.record("conv2d")
    b, _, h, w = x.shape
    cols = im2col(x)
    out = np.matmul(weight.reshape(weight.shape[0], -1), cols) + bias[:, None]
    return out.reshape(b, weight.shape[0], h // 2, w // 2), cols


def conv2d_backward(grad_out, cols, weight, x_shape):
    """Gradients of :func:`conv2d` with respect to input, weight and bias."""
    b, cout, ho, wo = grad_out.shape
    g = grad_out.reshape(b, cout, ho * wo)
    w2 = weight.reshape(cout, -1)
    grad_w = np.einsum("bop,bkp->ok", g, cols).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2))
    grad_x = col2im(np.matmul(w2.T, g), x_shape)
    return grad_x, grad_w, grad_b


def check_image_dims(h: int, w: int) -> None:
    if h % STRIDE or w % STRIDE or h < STRIDE or w < STRIDE:
        raise ShapeError(f"image dims must be positive multiples of {STRIDE}, got {h}x{w}")


def forward_batch(model: ToyModel, images, keep_cache: bool = False):
    """Batched forward pass over ``(B, H, W)`` images.

    Returns a dict with ``feature`` (B, N, H/4, W/4), ``seg_probs``,
    ``exist_logits``, ``exist_probs`` and, if ``keep_cache``, the
    intermediates needed for backprop.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    check_image_dims(x.shape[1], x.shape[2])
    p = model.params
    x = x[:, None]
    z1, cols1 = conv2d(x, p["conv1_w"], p["conv1_b"])
    optrace.record("relu")
    a1 = np.maximum(z1, 0.0)
    feature, cols2 = conv2d(a1, p["conv2_w"], p["conv2_b"])
    optrace.record("sigmoid")
    seg_probs = sigmoid(feature)
    optrace.record("spatial_mean")
    pooled = feature.mean(axis=(2, 3))
    optrace.record("exist_head")
    exist_logits = p["exist_gain"] * pooled + p["exist_bias"]
    out = {
        "feature": feature,
        "seg_probs": seg_probs,
        "exist_logits": exist_logits,
        "exist_probs": sigmoid(exist_logits),
    }
    if keep_cache:
        out["cache"] = {"x_shape": x.shape, "cols1": cols1, "z1": z1, "a1": a1, "cols2": cols2, "pooled": pooled}
    return out


def forward(model: ToyModel, image):
    """Single-image forward pass: ``(feature, seg_probs, exist_probs)``."""
    out = forward_batch(model, np.asarray(image)[None])
    return out["feature"][0], out["seg_probs"][0], out["exist_probs"][0]


def decode_lanes(seg_probs, threshold: float = 0.5, stride: int = STRIDE) -> list[Polyline]:
    """Turn per-slot probability maps into lane polylines at image resolution.

    For each slot and feature row, the argmax column fires if its
    probability reaches ``threshold`` (ties go to the lower column). A slot
    yields a polyline when at least two rows fire.
    """
    optrace.record("decode_lanes")
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    probs = np.asarray(seg_probs, dtype=np.float64)
    lanes = []
    for slot in probs:
        cols = np.argmax(slot, axis=1)
        peak = slot[np.arange(slot.shape[0]), cols]
        rows = np.flatnonzero(peak >= threshold)
        if rows.size >= 2:
            lanes.append(Polyline(tuple((float(r * stride), float(cols[r] * stride)) for r in rows), 1))
    return lanes


def infer(model: ToyModel, image, threshold: float = 0.5) -> list[Polyline]:
    """Image to predicted lanes; the deployed inference path."""
    _, seg_probs, _ = forward(model, image)
    return decode_lanes(seg_probs, threshold)
