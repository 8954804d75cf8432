"""Synthetic polar-scan world generator.

Stands in for the real radar datasets at desk scale: circular landmarks
scattered over a planar world, scans rendered by casting one ray per
azimuth bin and depositing a Gaussian range blob per landmark hit, with
additive noise and speckle on top. Training uses a geographic region
disjoint from the map/query region.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .data import DataError, PolarScan, Pose, Traversal

TWO_PI = 2.0 * math.pi


class EmptySceneError(RuntimeError):
    """A pose from which no landmark is visible within sensor range."""


@dataclass
class SyntheticWorldSpec:
    extent: float = 500.0            # world is [0, extent] x [0, extent] meters
    landmark_count: int = 300
    landmark_radius: tuple = (0.5, 3.0)
    max_range: float = 164.0         # sensor range, meters
    noise_sigma: float = 0.08        # additive Gaussian, image units
    speckle_prob: float = 0.08       # per-pixel impulse probability
    angular_bins: int = 384
    radial_bins: int = 128
    train_points: int = 100          # distinct training places
    train_passes: int = 6            # revisits of the training route
    eval_points: int = 200           # shared map/query places
    train_spacing: float = 30.0      # meters between training places
    eval_spacing: float = 13.0       # meters between evaluation places
    train_jitter: float = 2.0        # per-visit pose jitter radius, meters
    eval_jitter: float = 2.0
    occlusion: float = 0.35          # amplitude factor per earlier hit on the ray
    blob_sigma: float = 0.8          # radial blob width, bins
    seed: int = 0

    def validate(self):
        if self.extent <= 0:
            raise DataError("extent must be positive")
        if self.landmark_count < 1:
            raise DataError("landmark_count must be >= 1")
        lo, hi = self.landmark_radius
        if not (0 < lo <= hi):
            raise DataError("landmark_radius must satisfy 0 < lo <= hi")
        if self.max_range <= 0:
            raise DataError("max_range must be positive")
        if self.angular_bins < 1 or self.radial_bins < 1:
            raise DataError("bins must be positive")
        if self.train_points < 1 or self.eval_points < 1 or self.train_passes < 1:
            raise DataError("point and pass counts must be >= 1")
        if self.train_spacing <= 0 or self.eval_spacing <= 0:
            raise DataError("spacings must be positive")
        if self.train_jitter < 0 or self.eval_jitter < 0:
            raise DataError("jitters must be >= 0")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if not (0.0 <= self.speckle_prob <= 1.0):
            raise DataError("speckle_prob must lie in [0, 1]")

    def to_dict(self):
        d = asdict(self)
        d["landmark_radius"] = list(self.landmark_radius)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "landmark_radius" in d:
            d["landmark_radius"] = tuple(d["landmark_radius"])
        return cls(**d)


def _stream(seed: int, key: int) -> np.random.Generator:
    """Named deterministic substream of the master seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


_LANDMARKS, _TRAIN_ROUTE, _EVAL_ROUTE = 0, 1, 2
_TRAIN_POSES, _MAP_POSES, _QUERY_POSES = 3, 4, 5
_TRAIN_NOISE, _MAP_NOISE, _QUERY_NOISE = 6, 7, 8


def build_world(spec: SyntheticWorldSpec) -> np.ndarray:
    """(L, 3) array of landmark x, y, radius."""
    spec.validate()
    rng = _stream(spec.seed, _LANDMARKS)
    xy = rng.uniform(0.0, spec.extent, size=(spec.landmark_count, 2))
    lo, hi = spec.landmark_radius
    r = rng.uniform(lo, hi, size=spec.landmark_count)
    return np.column_stack([xy, r])


def _angle_tables(a_bins: int):
    theta = np.arange(a_bins) * (TWO_PI / a_bins)
    return np.cos(theta), np.sin(theta)


def render_scan(landmarks: np.ndarray, x: float, y: float, yaw: float,
                spec: SyntheticWorldSpec) -> np.ndarray:
    """Noiseless (A, R) scan from pose (x, y, yaw).

    Ray a points along yaw + 2*pi*a/A with yaw quantized to the nearest
    angular bin, which makes a heading change of exactly 2*pi*k/A an exact
    cyclic row shift of the output. The nearest hit on a ray is brightest;
    each later hit is attenuated by the occlusion factor.
    """
    a_bins, r_bins = spec.angular_bins, spec.radial_bins
    cos_t, sin_t = _angle_tables(a_bins)
    shift = int(round(yaw / (TWO_PI / a_bins))) % a_bins
    rows = (shift + np.arange(a_bins)) % a_bins
    dirs = np.column_stack([cos_t[rows], sin_t[rows]])  # (A, 2)

    rel = landmarks[:, :2] - np.array([x, y])           # (L, 2)
    rad = landmarks[:, 2]
    dist2 = (rel ** 2).sum(axis=1)

    proj = dirs @ rel.T                                 # (A, L)
    perp2 = dist2[None, :] - proj ** 2
    t = proj - np.sqrt(np.maximum(rad[None, :] ** 2 - perp2, 0.0))
    hit = (perp2 <= rad[None, :] ** 2) & (t > 0.05) & (t <= spec.max_range)

    a_idx, l_idx = np.nonzero(hit)
    if a_idx.size == 0:
        raise EmptySceneError(f"no landmarks within range of pose ({x:.1f}, {y:.1f})")

    # occlusion rank: position of each hit among its ray's hits ordered by range
    order = np.lexsort((t[a_idx, l_idx], a_idx))
    a_s = a_idx[order]
    t_s = t[a_idx, l_idx][order]
    r_s = rad[l_idx[order]]
    new_ray = np.empty(a_s.size, dtype=bool)
    new_ray[0] = True
    new_ray[1:] = a_s[1:] != a_s[:-1]
    group_start = np.maximum.accumulate(np.where(new_ray, np.arange(a_s.size), 0))
    rank = np.arange(a_s.size) - group_start

    amp = spec.occlusion ** rank * (0.6 + 0.4 * np.clip(r_s / 3.0, 0.0, 1.0))
    mu = t_s * (r_bins / spec.max_range) - 0.5
    width = max(1, int(math.ceil(3.0 * spec.blob_sigma)))
    offsets = np.arange(-width, width + 1)
    bins = np.round(mu).astype(np.int64)[:, None] + offsets[None, :]
    w = amp[:, None] * np.exp(-((bins - mu[:, None]) ** 2) / (2.0 * spec.blob_sigma ** 2))
    valid = (bins >= 0) & (bins < r_bins)

    img = np.zeros((a_bins, r_bins), dtype=np.float64)
    row_of = np.repeat(a_s, offsets.size).reshape(bins.shape)
    np.add.at(img, (row_of[valid], bins[valid]), w[valid])
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _apply_noise(img: np.ndarray, rng: np.random.Generator,
                 spec: SyntheticWorldSpec) -> np.ndarray:
    out = img.astype(np.float64)
    # fixed draw count per scan regardless of mask, for stream stability
    mask = rng.random(out.shape) < spec.speckle_prob
    impulses = rng.uniform(0.3, 1.0, out.shape)
    out = np.where(mask, np.maximum(out, impulses), out)
    out = out + rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _grid_points(x0, x1, y0, y1, spacing, count, rng, what):
    xs = np.arange(x0 + spacing / 2.0, x1 - spacing / 2.0 + 1e-9, spacing)
    ys = np.arange(y0 + spacing / 2.0, y1 - spacing / 2.0 + 1e-9, spacing)
    if xs.size * ys.size < count:
        raise DataError(
            f"{what}: region fits {xs.size * ys.size} places at spacing {spacing}, "
            f"need {count}")
    cells = np.array([(cx, cy) for cx in xs for cy in ys])
    picked = cells[rng.permutation(len(cells))[:count]]
    return picked + rng.uniform(-0.5, 0.5, size=picked.shape)


def _bin_yaw(rng, a_bins: int) -> float:
    return float(rng.integers(0, a_bins)) * (TWO_PI / a_bins)


def _jitter(rng, radius: float):
    ang = rng.uniform(0.0, TWO_PI)
    r = radius * math.sqrt(rng.uniform(0.0, 1.0))
    return r * math.cos(ang), r * math.sin(ang)


def _render_traversal(name, role, landmarks, base_points, visits, jitter,
                      pose_rng, noise_rng, spec) -> Traversal:
    items = []
    ts = 0.0
    for v in range(visits):
        for i in range(len(base_points)):
            ts += 1.0
            dx, dy = _jitter(pose_rng, jitter)
            x = float(base_points[i, 0] + dx)
            y = float(base_points[i, 1] + dy)
            yaw = _bin_yaw(pose_rng, spec.angular_bins)
            img = _apply_noise(render_scan(landmarks, x, y, yaw, spec), noise_rng, spec)
            scan = PolarScan(id=f"{name}-{len(items):06d}", timestamp=ts, image=img)
            items.append((scan, Pose(ts, x, y, yaw)))
    return Traversal(name=name, role=role, items=items)


def generate_synthetic(spec: SyntheticWorldSpec):
    """Build (train, map, query) traversals of one synthetic world.

    Map and query revisit the same evaluation places with independent pose
    jitter, headings, and noise; the training route lives in a disjoint
    region on the other side of the world.
    """
    spec.validate()
    landmarks = build_world(spec)
    margin = 10.0
    gap = 20.0
    mid = spec.extent / 2.0

    eval_base = _grid_points(margin, mid - gap, margin, spec.extent - margin,
                             spec.eval_spacing, spec.eval_points,
                             _stream(spec.seed, _EVAL_ROUTE), "eval route")
    train_base = _grid_points(mid + gap, spec.extent - margin, margin,
                              spec.extent - margin, spec.train_spacing,
                              spec.train_points, _stream(spec.seed, _TRAIN_ROUTE),
                              "train route")

    train = _render_traversal("train", "train", landmarks, train_base,
                              spec.train_passes, spec.train_jitter,
                              _stream(spec.seed, _TRAIN_POSES),
                              _stream(spec.seed, _TRAIN_NOISE), spec)
    map_t = _render_traversal("map", "map", landmarks, eval_base, 1,
                              spec.eval_jitter,
                              _stream(spec.seed, _MAP_POSES),
                              _stream(spec.seed, _MAP_NOISE), spec)
    query = _render_traversal("query", "query", landmarks, eval_base, 1,
                              spec.eval_jitter,
                              _stream(spec.seed, _QUERY_POSES),
                              _stream(spec.seed, _QUERY_NOISE), spec)
    return train, map_t, query
