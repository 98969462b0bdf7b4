"""Deterministic synthetic lane scenes and their on-disk dataset format.

A scene is a grayscale image with up to ``n_max`` lane slots. Lanes are
quadratic centerlines ``col = a*row**2 + b*row + c`` drawn as bright
bands on a dark noisy background, with optional occluding rectangles.
Occupied slots are filled left to right, and each slot has its own lane
intensity so a small network can tell the slots apart.

Directory layout written by :func:`write_dataset`::

    manifest.json            format, version, params, master_seed, count, n_max
    scene_00000.pgm          binary P5, 8-bit grayscale image
    scene_00000.lanes.json   seed, existence bits, per-slot polylines
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .maskops import Polyline, rasterize_polyline, resize_nearest
from .numerics import ParameterError, SeededRng, derive_seed

FORMAT_NAME = "cdolane-synthetic-lanes"
FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    """Raised when scene constraints cannot be met within the retry budget."""


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files; the message names the file."""


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    n_max: int = 4
    lane_count_range: tuple[int, int] = (1, 4)
    slope_range: tuple[float, float] = (-0.3, 0.3)
    slope_jitter: float = 0.1
    curvature_range: tuple[float, float] = (-0.003, 0.003)
    top_row_range: tuple[int, int] = (0, 16)
    thickness: int = 4
    min_separation: float | None = None
    occlusion_count_range: tuple[int, int] = (0, 2)
    occlusion_size_range: tuple[int, int] = (4, 10)
    noise_std: float = 0.03
    background_range: tuple[float, float] = (0.05, 0.2)
    slot_intensities: tuple[float, ...] = (0.45, 0.6, 0.75, 0.9)
    point_step: int = 4
    feature_size: tuple[int, int] | None = (16, 16)
    max_retries: int = 200

    def __post_init__(self):
        for name in ("lane_count_range", "slope_range", "curvature_range", "top_row_range",
                     "occlusion_count_range", "occlusion_size_range", "background_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "slot_intensities", tuple(float(x) for x in self.slot_intensities))
        if self.feature_size is not None:
            object.__setattr__(self, "feature_size", tuple(int(x) for x in self.feature_size))
        if self.height < 2 or self.width < 2:
            raise ParameterError(f"image must be at least 2x2, got {self.height}x{self.width}")
        lo, hi = self.lane_count_range
        if not 0 <= lo <= hi <= self.n_max:
            raise ParameterError(f"lane_count_range {self.lane_count_range} must lie within [0, n_max={self.n_max}]")
        if len(self.slot_intensities) != self.n_max:
            raise ParameterError(f"need {self.n_max} slot intensities, got {len(self.slot_intensities)}")
        if self.thickness < 1:
            raise ParameterError(f"thickness must be >= 1, got {self.thickness}")
        if self.noise_std < 0:
            raise ParameterError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.top_row_range[0] <= self.top_row_range[1] < self.height - 1:
            raise ParameterError(f"top_row_range {self.top_row_range} must lie within the image")
        if self.point_step < 1:
            raise ParameterError(f"point_step must be >= 1, got {self.point_step}")
        if self.feature_size is not None:
            fh, fw = self.feature_size
            need = max(math.ceil(self.height / fh), math.ceil(self.width / fw))
            if self.thickness < need:
                raise ParameterError(
                    f"thickness {self.thickness} < {need}: lanes could vanish when masks are "
                    f"downscaled to {fh}x{fw}"
                )

    @property
    def separation(self) -> float:
        return 2.0 * self.thickness if self.min_separation is None else float(self.min_separation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        return cls(**d)


@dataclass
class SyntheticScene:
    image: np.ndarray
    lanes: list  # one entry per slot: Polyline or None
    existence: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def polylines(self) -> list[Polyline]:
        return [p for p in self.lanes if p is not None]

    def __eq__(self, other):
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (
            self.seed == other.seed
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.existence, other.existence)
            and self.lanes == other.lanes
        )


def _draw(rng: SeededRng, bounds) -> float:
    lo, hi = bounds
    return rng.uniform(lo, hi) if lo < hi else float(lo)


def _lane_columns(a, b, c, rows):
    return a * rows**2 + b * rows + c


def _draw_geometry(params: SceneParams, rng: SeededRng, count: int):
    """Sample ``count`` lane curves satisfying margin and separation constraints."""
    h, w = params.height, params.width
    margin = params.thickness
    bottom = h - 1
    anchor = (params.top_row_range[1] + bottom) / 2.0
    usable = (w - 1 - 2 * margin) / max(count, 1)
    for _ in range(params.max_retries):
        # Lanes share a road-level slope and curvature; each gets a small slope
        # jitter. Anchor columns are stratified across the width.
        slope = _draw(rng, params.slope_range)
        curv = _draw(rng, params.curvature_range)
        curves = []
        for i in range(count):
            top = rng.integers(*params.top_row_range)
            x_anchor = margin + (i + rng.uniform(0.0, 1.0)) * usable
            lane_slope = slope + _draw(rng, (-params.slope_jitter, params.slope_jitter))
            # col(row) = x_anchor + lane_slope*(row - anchor) + curv*(row - anchor)**2
            a = curv
            b = lane_slope - 2 * curv * anchor
            c = x_anchor - lane_slope * anchor + curv * anchor**2
            curves.append((top, a, b, c))
        if _feasible(curves, params):
            return sorted(curves, key=lambda cv: _lane_columns(cv[1], cv[2], cv[3], float(bottom)))
    raise GenerationError(
        f"could not place {count} lanes with separation {params.separation} in "
        f"{params.max_retries} attempts"
    )


def _feasible(curves, params: SceneParams) -> bool:
    h, w = params.height, params.width
    margin = params.thickness
    rows = np.arange(h, dtype=np.float64)
    cols = []
    for top, a, b, c in curves:
        col = _lane_columns(a, b, c, rows)
        span = rows >= top
        if np.any(col[span] < margin) or np.any(col[span] > w - 1 - margin):
            return False
        cols.append(np.where(span, col, np.nan))
    for i in range(len(cols)):
        for j in range(i + 1, len(cols)):
            shared = ~np.isnan(cols[i]) & ~np.isnan(cols[j])
            if np.any(np.abs(cols[i][shared] - cols[j][shared]) < params.separation):
                return False
    return True


def _polyline(curve, params: SceneParams) -> Polyline:
    top, a, b, c = curve
    bottom = params.height - 1
    rows = list(range(top, bottom + 1, params.point_step))
    if rows[-1] != bottom:
        rows.append(bottom)
    return Polyline(tuple((float(r), float(_lane_columns(a, b, c, float(r)))) for r in rows), params.thickness)


def gen_scene(params: SceneParams, rng: SeededRng) -> SyntheticScene:
    """Draw one scene; fully determined by ``params`` and the state of ``rng``."""
    h, w = params.height, params.width
    count = rng.integers(*params.lane_count_range)
    slots = rng.choice(params.n_max, count) if count else []
    curves = _draw_geometry(params, rng, count) if count else []

    lanes: list = [None] * params.n_max
    for slot, curve in zip(slots, curves):
        lanes[slot] = _polyline(curve, params)

    background = _draw(rng, params.background_range)
    image = np.full((h, w), background)
    for slot, line in enumerate(lanes):
        if line is not None:
            image[rasterize_polyline(line, h, w) == 1] = params.slot_intensities[slot]

    n_occ = rng.integers(*params.occlusion_count_range)
    for _ in range(n_occ):
        oh = rng.integers(*params.occlusion_size_range)
        ow = rng.integers(*params.occlusion_size_range)
        r0 = rng.integers(0, max(0, h - oh))
        c0 = rng.integers(0, max(0, w - ow))
        image[r0:r0 + oh, c0:c0 + ow] = background

    if params.noise_std > 0:
        image = image + rng.normal_array(0.0, params.noise_std, (h, w))
    # Quantize to 8 bits so the PGM on disk is lossless.
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    existence = np.array([0 if p is None else 1 for p in lanes], dtype=np.uint8)
    return SyntheticScene(image=image, lanes=lanes, existence=existence, seed=rng.seed)


def gen_dataset(params: SceneParams, count: int, master_seed: int) -> list[SyntheticScene]:
    """``count`` scenes, scene ``i`` drawn from its own stream derived from ``master_seed``."""
    if count < 0:
        raise ParameterError(f"scene count must be >= 0, got {count}")
    return [gen_scene(params, SeededRng(derive_seed(master_seed, i))) for i in range(count)]


def scene_to_training_pair(scene: SyntheticScene, feat_h: int, feat_w: int):
    """Image, per-slot masks at feature resolution, and existence bits."""
    if feat_h < 1 or feat_w < 1:
        raise ParameterError(f"feature size must be positive, got {feat_h}x{feat_w}")
    h, w = scene.image.shape
    masks = np.zeros((len(scene.lanes), feat_h, feat_w), dtype=np.uint8)
    for n, line in enumerate(scene.lanes):
        if line is not None:
            masks[n] = resize_nearest(rasterize_polyline(line, h, w), feat_h, feat_w)
    return scene.image, masks, scene.existence.copy()


# --- PGM -----------------------------------------------------------------


def write_pgm(path, image_u8: np.ndarray) -> None:
    img = np.asarray(image_u8, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) file."""
    path = Path(path)
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetFormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: bad PGM header {tokens!r}") from exc
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pixels = data[pos:]
    if len(pixels) != w * h:
        raise DatasetFormatError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


# --- dataset directories -------------------------------------------------


def _scene_record(scene: SyntheticScene) -> dict:
    return {
        "seed": scene.seed,
        "existence": [int(x) for x in scene.existence],
        "lanes": [
            None if p is None else {"thickness": p.thickness, "points": [[r, c] for r, c in p.points]}
            for p in scene.lanes
        ],
    }


def write_dataset(scenes, dir_path, params: SceneParams | None = None, master_seed: int | None = None) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    scenes = list(scenes)
    n_max = params.n_max if params is not None else (len(scenes[0].lanes) if scenes else 0)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "params": params.to_dict() if params is not None else None,
        "master_seed": master_seed,
        "count": len(scenes),
        "n_max": n_max,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    for i, scene in enumerate(scenes):
        write_pgm(d / f"scene_{i:05d}.pgm", to_u8(scene.image))
        (d / f"scene_{i:05d}.lanes.json").write_text(
            json.dumps(_scene_record(scene), indent=1) + "\n", encoding="utf-8"
        )


def _load_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"{path}: missing") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def _parse_scene(image_u8, record, path: Path, n_max: int) -> SyntheticScene:
    try:
        seed = int(record["seed"])
        existence = np.array(record["existence"], dtype=np.uint8)
        raw_lanes = record["lanes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: missing or invalid field {exc}") from exc
    if len(raw_lanes) != n_max or len(existence) != n_max:
        raise DatasetFormatError(f"{path}: expected {n_max} lane slots")
    lanes = []
    for n, raw in enumerate(raw_lanes):
        if raw is None:
            lanes.append(None)
            continue
        try:
            lanes.append(Polyline(tuple((r, c) for r, c in raw["points"]), raw["thickness"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: field lanes[{n}] invalid ({exc})") from exc
    if [0 if p is None else 1 for p in lanes] != existence.tolist():
        raise DatasetFormatError(f"{path}: field existence disagrees with lanes")
    return SyntheticScene(image=image_u8.astype(np.float64) / 255.0, lanes=lanes, existence=existence, seed=seed)


def read_manifest(dir_path) -> dict | None:
    path = Path(dir_path) / "manifest.json"
    if not path.exists():
        return None
    manifest = _load_json(path)
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format {manifest.get('format')!r} v{manifest.get('version')!r}")
    return manifest


def read_dataset(dir_path) -> list[SyntheticScene]:
    """Load every scene in a dataset directory; an empty directory gives ``[]``."""
    d = Path(dir_path)
    if not d.is_dir():
        raise DatasetFormatError(f"{d}: not a dataset directory")
    manifest = read_manifest(d)
    images = sorted(d.glob("scene_*.pgm"))
    if manifest is None and not images:
        return []
    count = manifest["count"] if manifest is not None else len(images)
    if len(images) != count:
        raise DatasetFormatError(f"{d / 'manifest.json'}: count={count} but {len(images)} scene images found")
    scenes = []
    for i in range(count):
        img_path = d / f"scene_{i:05d}.pgm"
        lanes_path = d / f"scene_{i:05d}.lanes.json"
        if not img_path.exists():
            raise DatasetFormatError(f"{img_path}: missing")
        record = _load_json(lanes_path)
        n_max = manifest["n_max"] if manifest is not None else len(record.get("lanes", []))
        scenes.append(_parse_scene(read_pgm(img_path), record, lanes_path, n_max))
    return scenes
