"""Timing harness for the CDO covariance computation and the inference path.

``bench_cov`` times horizontal + vertical covariances and their RIFs over
all channels, comparing explicit loops against batched matrix products.
``bench_inference_delta`` checks that models trained with and without CDO
share an identical inference graph and times both.

Report schema (``REPORT_SCHEMA``) is a JSON object::

    {"kind": "bench_cov", "version": 1, "reports": [
        {"shape": [C, H, W], "variant": str, "reps": int,
         "median_s": float, "p95_s": float, "madds": int,
         "madds_per_s": float, "max_abs_diff": float}, ...]}
"""

from __future__ import annotations

import time

import numpy as np
from numba import njit

from . import optrace
from .cdo import cov_stats, rif_from_stats
from .numerics import ParameterError, SeededRng

VARIANTS = ("naive_loops", "matmul")
# Feature maps for 288x800 and 360x640 inputs at an encoder stride of 8, plus small shapes.
DEFAULT_SHAPES = ((128, 36, 100), (128, 45, 80), (8, 16, 16), (32, 32, 32))
AGREEMENT_TOL = 1e-9

REPORT_SCHEMA = {
    "type": "object",
    "required": ["kind", "version", "reports"],
    "properties": {
        "kind": {"const": "bench_cov"},
        "version": {"const": 1},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["shape", "variant", "reps", "median_s", "p95_s", "madds", "madds_per_s", "max_abs_diff"],
                "additionalProperties": False,
                "properties": {
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
                    "variant": {"enum": list(VARIANTS)},
                    "reps": {"type": "integer", "minimum": 10},
                    "median_s": {"type": "number", "exclusiveMinimum": 0},
                    "p95_s": {"type": "number", "exclusiveMinimum": 0},
                    "madds": {"type": "integer", "minimum": 0},
                    "madds_per_s": {"type": "number", "minimum": 0},
                    "max_abs_diff": {"type": "number", "minimum": 0},
                },
            },
        },
    },
}

INFERENCE_SCHEMA = {
    "type": "object",
    "required": ["kind", "version", "parameter_counts", "traces_identical", "cdo_ops_in_trace", "timing"],
    "properties": {
        "kind": {"const": "bench_inference_delta"},
        "version": {"const": 1},
        "parameter_counts": {"type": "object"},
        "traces_identical": {"type": "boolean"},
        "cdo_ops_in_trace": {"type": "array", "maxItems": 0},
        "trace": {"type": "array", "items": {"type": "string"}},
        "timing": {"type": "object"},
    },
}


class BenchmarkError(RuntimeError):
    """Raised when variants disagree or a claimed structural property fails."""


def cov_madds(c: int, h: int, w: int) -> int:
    """Multiply-adds for both covariances over all channels: ``C*(H*H*W + W*W*H)``."""
    return c * (h * h * w + w * w * h)


@njit(cache=True)
def _naive_cov(f, m):
    c, h, w = f.shape
    cov_h = np.zeros((c, h, h))
    cov_v = np.zeros((c, w, w))
    count = 0
    for ch in range(c):
        for i in range(h):
            for j in range(h):
                acc = 0.0
                for k in range(w):
                    acc += f[ch, i, k] * m[j, k]
                    count += 1
                cov_h[ch, i, j] = acc
        for i in range(w):
            for j in range(w):
                acc = 0.0
                for k in range(h):
                    acc += f[ch, k, i] * m[k, j]
                    count += 1
                cov_v[ch, i, j] = acc
    return cov_h, cov_v, count


def naive_loops(f, m, epsilon=1e-12):
    """Explicit triple loops. Returns ``(cov_h, cov_v, rif_h, rif_v, madds)``."""
    cov_h, cov_v, count = _naive_cov(np.ascontiguousarray(f, dtype=np.float64), np.ascontiguousarray(m, dtype=np.float64))
    return cov_h, cov_v, rif_from_stats(*cov_stats(cov_h), epsilon), rif_from_stats(*cov_stats(cov_v), epsilon), int(count)


def matmul_variant(f, m, epsilon=1e-12):
    """Batched matrix products. Returns ``(cov_h, cov_v, rif_h, rif_v, madds)``."""
    cov_h = np.matmul(f, m.T)
    cov_v = np.matmul(np.swapaxes(f, -1, -2), m)
    c, h, w = f.shape
    return cov_h, cov_v, rif_from_stats(*cov_stats(cov_h), epsilon), rif_from_stats(*cov_stats(cov_v), epsilon), cov_madds(c, h, w)


_IMPLS = {"naive_loops": naive_loops, "matmul": matmul_variant}


def _max_diff(a, b) -> float:
    return float(max(np.max(np.abs(x - y)) for x, y in zip(a[:4], b[:4])))


def _time(fn, reps: int, warmup: int = 1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), float(np.percentile(times, 95))


def bench_cov(shapes=DEFAULT_SHAPES, variants=VARIANTS, reps: int = 10, seed: int = 0) -> dict:
    """Time each variant on each ``(C, H, W)`` shape after checking they agree.

    All requested variants are compared against each other before any
    timing; a disagreement above ``AGREEMENT_TOL`` raises
    :class:`BenchmarkError` and nothing is reported.
    """
    if reps < 10:
        raise ParameterError(f"reps must be >= 10, got {reps}")
    variants = list(variants)
    for v in variants:
        if v not in _IMPLS:
            raise ParameterError(f"unknown variant {v!r}; choose from {VARIANTS}")
    rng = SeededRng(seed)
    reports = []
    for shape in shapes:
        c, h, w = (int(x) for x in shape)
        f = rng.uniform_array(0.0, 1.0, (c, h, w))
        m = (rng.uniform_array(0.0, 1.0, (h, w)) < 0.2).astype(np.float64)
        outputs = {v: _IMPLS[v](f, m) for v in variants}
        ref = outputs[variants[0]]
        diffs = {v: _max_diff(outputs[v], ref) for v in variants}
        worst = max(diffs.values())
        if worst > AGREEMENT_TOL:
            raise BenchmarkError(f"variants disagree by {worst:.3g} on shape {shape}")
        naive_count = outputs.get("naive_loops", (None,) * 5)[4]
        if naive_count is not None and naive_count != cov_madds(c, h, w):
            raise BenchmarkError(f"instrumented count {naive_count} != closed form {cov_madds(c, h, w)}")
        for v in variants:
            median, p95 = _time(lambda v=v: _IMPLS[v](f, m), reps)
            madds = cov_madds(c, h, w)
            reports.append({
                "shape": [c, h, w],
                "variant": v,
                "reps": reps,
                "median_s": median,
                "p95_s": p95,
                "madds": madds,
                "madds_per_s": madds / median,
                "max_abs_diff": diffs[v],
            })
    return {"kind": "bench_cov", "version": 1, "reports": reports}


CDO_OP_PREFIX = "cdo."


def inference_trace(model, image, threshold: float = 0.5) -> list[str]:
    from .toytrainer.model import infer

    with optrace.recording() as trace:
        infer(model, image, threshold)
    return list(trace)


def bench_inference_delta(models: dict, images, reps: int = 10, threshold: float = 0.5) -> dict:
    """Compare inference across models, e.g. ``{"baseline": m0, "cdo": m1}``.

    Raises :class:`BenchmarkError` if parameter counts differ, traces differ
    between models, or any CDO op shows up in an inference trace. Timing is
    reported, not asserted.
    """
    from .toytrainer.model import infer

    if reps < 10:
        raise ParameterError(f"reps must be >= 10, got {reps}")
    images = list(images)
    counts = {name: m.parameter_count() for name, m in models.items()}
    if len(set(counts.values())) != 1:
        raise BenchmarkError(f"parameter counts differ: {counts}")
    traces = {name: inference_trace(m, images[0], threshold) for name, m in models.items()}
    cdo_ops = sorted({op for t in traces.values() for op in t if op.startswith(CDO_OP_PREFIX)})
    if cdo_ops:
        raise BenchmarkError(f"CDO ops in inference trace: {cdo_ops}")
    ref = next(iter(traces.values()))
    identical = all(t == ref for t in traces.values())
    if not identical:
        raise BenchmarkError("inference traces differ between models")
    timing = {}
    for name, m in models.items():
        median, p95 = _time(lambda m=m: [infer(m, img, threshold) for img in images], reps)
        timing[name] = {"median_s": median, "p95_s": p95, "images": len(images)}
    return {
        "kind": "bench_inference_delta",
        "version": 1,
        "parameter_counts": counts,
        "traces_identical": identical,
        "cdo_ops_in_trace": cdo_ops,
        "trace": ref,
        "timing": timing,
    }
