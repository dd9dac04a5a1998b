"""
Point tracks (gaze fixations, mouse traces), Gaussian heatmaps, the cumulative
EMD between heatmaps and the sampling-rate sweep that makes traces gaze-like.

Coordinates are normalized: ``x`` runs along columns, ``y`` along rows, both in
``[0, 1]``. A point lands on pixel ``(min(floor(y*H), H-1), min(floor(x*W), W-1))``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from gazeqa.errors import (
    EmptyInputError,
    ParameterError,
    PreconditionError,
    ShapeError,
)
from gazeqa.numeric import Matrix


logger = logging.getLogger(__name__)

SOURCES = ("gaze", "trace", "synthetic")
MIN_GRID = 8
SIGMA_FRACTION = 0.04
MASS_TOLERANCE = 1e-6

# synthetic scene fixtures (not taken from any recording)
SCENE_MARGIN = 0.15
ANCHOR_SEPARATION = 0.2
CLUSTER_JITTER = 0.02
CIRCLE_RADIUS = 0.05
OUTLIER_FRACTION = 0.1
TARGET_BIAS = 0.5
HOP_FRACTION = 0.03
TRACE_SAMPLE_SECONDS = 0.04


@dataclass(frozen=True)
class PointTrack:
    points: np.ndarray
    source: str = "trace"
    clamped: int = 0

    def __post_init__(self):
        self.points.flags.writeable = False

    @classmethod
    def from_points(cls, points: Iterable[Sequence[float]], source: str = "trace") -> "PointTrack":
        """Builds a track, clamping coordinates into the unit square and counting the clamps."""
        if source not in SOURCES:
            raise ParameterError(f"unknown track source {source!r}, expected one of {', '.join(SOURCES)}")
        arr = np.array([list(p) for p in points], dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(arr)):
            raise ParameterError("track contains non-finite values")
        if np.any(np.diff(arr[:, 2]) < 0):
            raise ParameterError("track timestamps must be non-decreasing")
        xy = arr[:, :2]
        outside = np.any((xy < 0.0) | (xy > 1.0), axis=1)
        clamped = int(outside.sum())
        if clamped:
            logger.debug("clamped %d point(s) into the unit square", clamped)
            arr[:, :2] = np.clip(xy, 0.0, 1.0)
        return cls(points=arr, source=source, clamped=clamped)

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointTrack):
            return NotImplemented
        return self.source == other.source and np.array_equal(self.points, other.points)

    __hash__ = None

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def t(self) -> np.ndarray:
        return self.points[:, 2]

    def take(self, indices) -> "PointTrack":
        return PointTrack(points=self.points[np.asarray(indices, dtype=int)].copy(), source=self.source)

    def to_json(self) -> dict:
        return {"source": self.source, "points": self.points.tolist()}


@dataclass(frozen=True, eq=False)
class Heatmap:
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"heatmap must be two-dimensional, got {self.values.ndim} dimension(s)")
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise PreconditionError("heatmap values must be finite and non-negative")

    @classmethod
    def from_values(cls, values) -> "Heatmap":
        return cls(values=np.array(values, dtype=np.float64))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def mass(self) -> float:
        return float(self.values.sum())

    def normalize(self) -> "Heatmap":
        total = self.values.sum()
        if total <= 0:
            raise PreconditionError("cannot normalize a heatmap with zero mass")
        return Heatmap(values=self.values / total)

    def is_normalized(self, tolerance: float = MASS_TOLERANCE) -> bool:
        return abs(self.mass - 1.0) <= tolerance


@dataclass(frozen=True)
class SweepResult:
    rates: list[int]
    emd_values: list[float]
    argmin_rate: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "argmin_rate": self.argmin_rate,
            "config": self.config,
            "curve": [{"rate": r, "emd": e} for r, e in zip(self.rates, self.emd_values)],
        }


def default_sigma(height: int, width: int) -> float:
    return SIGMA_FRACTION * min(height, width)


def gaussian_kernel(sigma: float, radius: int) -> Matrix:
    """Raw (unnormalized) ``1/(2 pi s^2) exp(-(x^2+y^2)/(2 s^2))`` on integer offsets."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise ParameterError(f"kernel radius must be at least 1, got {radius}")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    sq = offsets[:, None] ** 2 + offsets[None, :] ** 2
    return np.exp(-sq / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)


def kernel_radius(sigma: float) -> int:
    return max(1, math.ceil(3.0 * sigma))


def _pixel_indices(coords: np.ndarray, size: int) -> np.ndarray:
    return np.minimum(np.floor(coords * size), size - 1).astype(int)


def _axis_weights(centers: np.ndarray, size: int, sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(size)[:, None] - centers[None, :]
    weights = np.exp(-(offsets.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    weights[np.abs(offsets) > radius] = 0.0
    return weights


def points_to_heatmap(
        track: PointTrack,
        height: int,
        width: int,
        sigma: float | None = None,
        normalize: bool = True,
) -> Heatmap:
    """
    Splats every point with unit mass on its pixel and blurs with the
    truncated Gaussian kernel; mass falling outside the grid is discarded.

    The Gaussian is separable, so the sum of clipped kernels is computed as
    ``Wy @ Wx.T`` with one column per point instead of a 2D convolution.
    """
    if len(track) == 0:
        raise EmptyInputError("cannot build a heatmap from an empty track")
    if height < MIN_GRID or width < MIN_GRID:
        raise ParameterError(f"heatmap grid must be at least {MIN_GRID}×{MIN_GRID}, got {height}×{width}")
    sigma = default_sigma(height, width) if sigma is None else sigma
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = kernel_radius(sigma)
    rows = _pixel_indices(track.y, height)
    cols = _pixel_indices(track.x, width)
    wy = _axis_weights(rows, height, sigma, radius)
    wx = _axis_weights(cols, width, sigma, radius)
    values = (wy @ wx.T) / (2.0 * math.pi * sigma * sigma)
    heatmap = Heatmap(values=np.maximum(values, 0.0))
    return heatmap.normalize() if normalize else heatmap


def downsample_track(track: PointTrack, rate: int) -> PointTrack:
    if rate < 1:
        raise ParameterError(f"sampling rate must be at least 1, got {rate}")
    if rate == 1:
        return track
    return PointTrack(points=track.points[::rate].copy(), source=track.source)


def cumulative_emd(p: Heatmap, q: Heatmap) -> float:
    """
    Cumulative-histogram EMD over the row-major flattening of both maps:
    ``sum |F_i(P) - F_i(Q)| / sum F_i(P)``. Not symmetric in P and Q.
    """
    if p.values.shape != q.values.shape:
        raise ShapeError(f"heatmaps differ in shape: {p.height}×{p.width} vs {q.height}×{q.width}")
    for name, h in (("first", p), ("second", q)):
        if not h.is_normalized():
            raise PreconditionError(f"{name} heatmap is not normalized (mass {h.mass!r})")
    fp = np.cumsum(p.values.ravel())
    fq = np.cumsum(q.values.ravel())
    return float(np.abs(fp - fq).sum() / fp.sum())


def mean_heatmap(maps: Sequence[Heatmap]) -> Heatmap:
    if not maps:
        raise EmptyInputError("cannot average an empty list of heatmaps")
    shape = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape:
            raise ShapeError(f"heatmaps differ in shape: {shape} vs {m.values.shape}")
        if not m.is_normalized():
            raise PreconditionError(f"heatmap is not normalized (mass {m.mass!r})")
    stacked = np.stack([m.values for m in maps])
    return Heatmap(values=stacked.mean(axis=0)).normalize()


def _heatmaps(tracks: Sequence[PointTrack], grid: int, sigma: float | None, jobs: int) -> list[Heatmap]:
    convert = lambda t: points_to_heatmap(t, grid, grid, sigma)
    if jobs <= 1:
        return [convert(t) for t in tracks]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        return list(executor.map(convert, tracks))


def sampling_rate_sweep(
        gaze_tracks: Sequence[PointTrack],
        trace_tracks: Sequence[PointTrack],
        rates: Sequence[int],
        grid: int = 64,
        sigma: float | None = None,
        jobs: int = 1,
) -> SweepResult:
    """
    EMD between the mean gaze heatmap and the mean downsampled-trace heatmap
    for every rate. Ties for the minimum go to the smaller rate.
    """
    if not gaze_tracks or not trace_tracks:
        raise EmptyInputError("sweep needs at least one gaze and one trace track")
    if not rates:
        raise EmptyInputError("sweep needs at least one sampling rate")
    for r in rates:
        if r < 1:
            raise ParameterError(f"sampling rate must be at least 1, got {r}")

    gaze_mean = mean_heatmap(_heatmaps(gaze_tracks, grid, sigma, jobs))
    emd_values = []
    for rate in rates:
        downsampled = [downsample_track(t, rate) for t in trace_tracks]
        trace_mean = mean_heatmap(_heatmaps(downsampled, grid, sigma, jobs))
        emd_values.append(cumulative_emd(gaze_mean, trace_mean))
        logger.debug("rate %d: emd %.6f", rate, emd_values[-1])

    _, argmin_rate = min(zip(emd_values, rates))
    return SweepResult(rates=list(rates), emd_values=emd_values, argmin_rate=int(argmin_rate))


##################################################
#  Synthetic populations
##################################################


def scene_anchors(seed: int, n_objects: int) -> np.ndarray:
    """Object centres of the scene identified by ``seed``, shared by both generators."""
    if n_objects < 1:
        raise ParameterError(f"need at least one object, got {n_objects}")
    rng = np.random.default_rng([seed, 0])
    anchors: list[np.ndarray] = []
    for _ in range(1000 * n_objects):
        if len(anchors) == n_objects:
            break
        candidate = rng.uniform(SCENE_MARGIN, 1.0 - SCENE_MARGIN, size=2)
        if all(np.hypot(*(candidate - a)) >= ANCHOR_SEPARATION for a in anchors):
            anchors.append(candidate)
    while len(anchors) < n_objects:
        anchors.append(rng.uniform(SCENE_MARGIN, 1.0 - SCENE_MARGIN, size=2))
    return np.array(anchors)


def _circle_point(anchor, radius, phase, turns, direction, s):
    angle = phase + direction * 2.0 * math.pi * turns * s
    return anchor + radius * np.array([math.cos(angle), math.sin(angle)])


def synth_trace(seed: int, n_points: int = 80, n_objects: int = 3, variant: int = 0) -> PointTrack:
    """
    Dense mouse-like trace over the scene: starts on the first object, circles
    each object in turn and hops quickly to the next one.
    """
    if n_points < 1:
        raise ParameterError(f"need at least one trace point, got {n_points}")
    anchors = scene_anchors(seed, n_objects)
    rng = np.random.default_rng([seed, variant, 1])

    hop = HOP_FRACTION if n_objects > 1 else 0.0
    dwell = rng.uniform(0.6, 1.4, size=n_objects)
    dwell *= (1.0 - hop * (n_objects - 1)) / dwell.sum()
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_objects)
    turns = rng.uniform(1.5, 3.0, size=n_objects)
    directions = rng.choice([-1.0, 1.0], size=n_objects)
    radii = CIRCLE_RADIUS * rng.uniform(0.85, 1.15, size=n_objects)

    segments = []  # (start, end, kind, object index)
    cursor = 0.0
    for j in range(n_objects):
        segments.append((cursor, cursor + dwell[j], "circle", j))
        cursor += dwell[j]
        if j < n_objects - 1:
            segments.append((cursor, cursor + hop, "hop", j))
            cursor += hop

    def circle_at(j, s):
        radius = radii[j] * (min(1.0, s / 0.15) if j == 0 else 1.0)
        return _circle_point(anchors[j], radius, phases[j], turns[j], directions[j], s)

    points = []
    for i in range(n_points):
        u = i / n_points
        start, end, kind, j = next(
            (seg for seg in segments if seg[0] <= u < seg[1]), segments[-1]
        )
        s = min(1.0, (u - start) / (end - start)) if end > start else 0.0
        if kind == "circle":
            xy = circle_at(j, s)
            if i > 0:
                xy = xy + rng.normal(0.0, 0.004, size=2)
        else:
            xy = (1.0 - s) * circle_at(j, 1.0) + s * circle_at(j + 1, 0.0)
        xy = np.clip(xy, 0.0, 1.0)
        points.append((xy[0], xy[1], i * TRACE_SAMPLE_SECONDS))
    return PointTrack.from_points(points, source="trace")


def synth_gaze(seed: int, n_fixations: int = 8, n_objects: int = 3, variant: int = 0) -> PointTrack:
    """
    Sparse fixations jittered around the scene objects, biased toward the first
    (queried) object, ending with a few outliers off the target.
    """
    if n_fixations < 1:
        raise ParameterError(f"need at least one fixation, got {n_fixations}")
    anchors = scene_anchors(seed, n_objects)
    rng = np.random.default_rng([seed, variant, 2])

    n_outliers = int(math.floor(OUTLIER_FRACTION * n_fixations + 0.5)) if n_fixations > 1 else 0
    points = []
    t = 0.0
    for i in range(n_fixations - n_outliers):
        if i == 0 or n_objects == 1 or rng.random() < TARGET_BIAS:
            target = 0
        else:
            target = int(rng.integers(1, n_objects))
        xy = np.clip(anchors[target] + rng.normal(0.0, CLUSTER_JITTER, size=2), 0.0, 1.0)
        points.append((xy[0], xy[1], t))
        t += rng.uniform(0.2, 0.4)
    for _ in range(n_outliers):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        distance = rng.uniform(0.15, 0.3)
        xy = np.clip(anchors[0] + distance * np.array([math.cos(angle), math.sin(angle)]), 0.0, 1.0)
        points.append((xy[0], xy[1], t))
        t += rng.uniform(0.05, 0.15)
    return PointTrack.from_points(points, source="gaze")


def synth_population(
        seed: int,
        n_tracks: int = 100,
        n_points: int = 80,
        n_fixations: int = 8,
        n_objects: int = 3,
) -> tuple[list[PointTrack], list[PointTrack]]:
    """``n_tracks`` gaze and trace recordings of the scene ``seed``."""
    if n_tracks < 1:
        raise ParameterError(f"need at least one track, got {n_tracks}")
    gaze = [synth_gaze(seed, n_fixations, n_objects, variant=i) for i in range(n_tracks)]
    traces = [synth_trace(seed, n_points, n_objects, variant=i) for i in range(n_tracks)]
    return gaze, traces


def heatmap_to_patches(heatmap: Heatmap, patch_rows: int, patch_cols: int) -> Matrix:
    """
    One row per patch, patches in row-major order over the patch grid, pixels
    row-major inside each patch.
    """
    h, w = heatmap.values.shape
    if patch_rows < 1 or patch_cols < 1 or h % patch_rows or w % patch_cols:
        raise ShapeError(f"{h}×{w} heatmap cannot be split into a {patch_rows}×{patch_cols} patch grid")
    ph, pw = h // patch_rows, w // patch_cols
    blocks = heatmap.values.reshape(patch_rows, ph, patch_cols, pw).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(blocks.reshape(patch_rows * patch_cols, ph * pw))
