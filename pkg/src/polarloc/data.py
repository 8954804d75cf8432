"""Dataset plumbing: polar scan and pose ingestion, filtering, labeling.

Scans live one per file, either in the PLSC binary format (header line
``PLSC A R timestamp`` followed by A*R little-endian float32 values) or as
8-bit binary PGM images with azimuth as rows. Poses come from a CSV with
header ``timestamp,x,y,yaw``.
"""

from __future__ import annotations

import bisect
import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIMILAR = 1
DISSIMILAR = -1
EXCLUDED = 0

POSITIVE_RADIUS = 5.0
NEGATIVE_RADIUS = 20.0

MAX_TIME_GAP = 1.0
MIN_DISPLACEMENT = 0.1

ANGULAR_BINS = 384
RADIAL_BINS = 128

DATA_DIR_ENV = "PLOC_DATA_DIR"


class DataError(ValueError):
    """Unreadable or malformed dataset input."""


@dataclass(frozen=True)
class Pose:
    timestamp: float
    x: float
    y: float
    yaw: float

    def planar_distance(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass
class PolarScan:
    """One radar sweep as an (A, R) intensity image in [0, 1]."""

    id: str
    timestamp: float
    image: np.ndarray

    def validate(self):
        img = self.image
        if img.ndim != 2:
            raise DataError(f"scan {self.id}: image must be 2-d, got {img.ndim}-d")
        if not np.all(np.isfinite(img)):
            raise DataError(f"scan {self.id}: non-finite values")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise DataError(f"scan {self.id}: values outside [0, 1]")


@dataclass
class Traversal:
    """One filtered pass along a route: (scan, pose) pairs in time order."""

    name: str
    role: str  # map | query | train
    items: list = field(default_factory=list)

    def __post_init__(self):
        if self.role not in ("map", "query", "train"):
            raise DataError(f"unknown traversal role {self.role!r}")

    def __len__(self):
        return len(self.items)

    @property
    def scans(self):
        return [s for s, _ in self.items]

    @property
    def poses(self):
        return [p for _, p in self.items]

    def positions(self) -> np.ndarray:
        """(N, 2) array of planar positions."""
        return np.array([[p.x, p.y] for _, p in self.items], dtype=np.float64)

    def images(self) -> np.ndarray:
        """(N, A, R) float32 stack of scan images."""
        return np.stack([s.image for s, _ in self.items]).astype(np.float32)


# ---------------------------------------------------------------------------
# scan file IO

def write_scan(path, scan: PolarScan):
    a, r = scan.image.shape
    header = f"PLSC {a} {r} {scan.timestamp!r}\n".encode("ascii")
    data = np.ascontiguousarray(scan.image, dtype="<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes())


def _read_plsc(path: Path) -> PolarScan:
    with open(path, "rb") as f:
        header = f.readline()
        payload = f.read()
    parts = header.split()
    if len(parts) != 4 or parts[0] != b"PLSC":
        raise DataError(f"{path}: bad PLSC header")
    try:
        a, r, ts = int(parts[1]), int(parts[2]), float(parts[3])
    except ValueError as e:
        raise DataError(f"{path}: bad PLSC header fields: {e}") from e
    if a < 1 or r < 1:
        raise DataError(f"{path}: bad extents {a}x{r}")
    if len(payload) != a * r * 4:
        raise DataError(f"{path}: expected {a * r * 4} payload bytes, got {len(payload)}")
    img = np.frombuffer(payload, dtype="<f4").reshape(a, r).astype(np.float32)
    return PolarScan(id=path.stem, timestamp=ts, image=img)


def _read_pgm(path: Path) -> PolarScan:
    # P5 binary graymap, azimuth as rows; timestamp taken from the file stem.
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise DataError(f"{path}: truncated PGM header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
                j += 1
            tokens.append(raw[i:j])
            i = j
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: bad PGM header: {e}") from e
    if not (0 < maxval < 256):
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    i += 1  # single whitespace byte after maxval
    pixels = raw[i : i + width * height]
    if len(pixels) != width * height:
        raise DataError(f"{path}: truncated PGM payload")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    img = img.astype(np.float32) / float(maxval)
    try:
        ts = float(path.stem)
    except ValueError as e:
        raise DataError(f"{path}: PGM filename must carry the timestamp") from e
    return PolarScan(id=path.stem, timestamp=ts, image=img)


def read_scan(path) -> PolarScan:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            magic = f.read(4)
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if magic.startswith(b"PLSC"):
        return _read_plsc(path)
    if magic.startswith(b"P5"):
        return _read_pgm(path)
    raise DataError(f"{path}: unrecognized scan format")


# ---------------------------------------------------------------------------
# pose file IO

def read_poses(path) -> list:
    poses = []
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["timestamp", "x", "y", "yaw"]:
                raise DataError(f"{path}: expected header 'timestamp,x,y,yaw'")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    t, x, y, yaw = (float(v) for v in row)
                except ValueError as e:
                    raise DataError(f"{path}:{lineno}: bad pose row: {e}") from e
                poses.append(Pose(t, x, y, yaw))
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    for a, b in zip(poses, poses[1:]):
        if not b.timestamp > a.timestamp:
            raise DataError(f"{path}: pose timestamps must be strictly increasing")
    return poses


def write_poses(path, poses):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "x", "y", "yaw"])
        for p in poses:
            w.writerow([repr(p.timestamp), repr(p.x), repr(p.y), repr(p.yaw)])


# ---------------------------------------------------------------------------
# resampling and normalization

def resample_polar(img: np.ndarray, a_out: int, r_out: int) -> np.ndarray:
    """Bilinear resample of an (A, R) polar image.

    The angular axis is periodic, so interpolation wraps across the 0/2pi
    seam; the radial axis clamps at its edges. Resampling to the source
    resolution is the identity.
    """
    a_in, r_in = img.shape
    if a_out < 1 or r_out < 1:
        raise DataError("output extents must be positive")
    src = np.asarray(img, dtype=np.float64)

    ai = np.arange(a_out) * (a_in / a_out)
    a0 = np.floor(ai).astype(np.int64) % a_in
    af = ai - np.floor(ai)
    a1 = (a0 + 1) % a_in

    ri = (np.arange(r_out) + 0.5) * (r_in / r_out) - 0.5
    ri = np.clip(ri, 0.0, r_in - 1.0)
    r0 = np.floor(ri).astype(np.int64)
    rf = ri - r0
    r1 = np.minimum(r0 + 1, r_in - 1)

    v00 = src[np.ix_(a0, r0)]
    v01 = src[np.ix_(a0, r1)]
    v10 = src[np.ix_(a1, r0)]
    v11 = src[np.ix_(a1, r1)]
    top = v00 * (1.0 - rf) + v01 * rf
    bot = v10 * (1.0 - rf) + v11 * rf
    out = top * (1.0 - af)[:, None] + bot * af[:, None]
    return out.astype(np.float32)


def minmax_normalize(img: np.ndarray) -> np.ndarray:
    """Per-scan min-max rescale to [0, 1]; constant images map to zeros."""
    img = np.asarray(img, dtype=np.float32)
    lo = float(img.min())
    hi = float(img.max())
    if hi > lo:
        return (img - lo) / (hi - lo)
    return np.zeros_like(img)


# ---------------------------------------------------------------------------
# ingestion

def _nearest_pose(poses, times, t: float):
    i = bisect.bisect_left(times, t)
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(poses):
            if best is None or abs(poses[j].timestamp - t) < abs(poses[best].timestamp - t):
                best = j
    return best


def list_scan_files(scan_dir) -> list:
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise DataError(f"{scan_dir}: not a directory")
    files = sorted(p for p in scan_dir.iterdir() if p.suffix in (".plsc", ".pgm"))
    if not files:
        raise DataError(f"{scan_dir}: no .plsc or .pgm scan files")
    return files


def ingest(scan_dir, pose_file, *, angular_bins: int = ANGULAR_BINS,
           radial_bins: int = RADIAL_BINS, name: str = "traversal",
           role: str = "map", max_time_gap: float = MAX_TIME_GAP,
           min_displacement: float = MIN_DISPLACEMENT) -> Traversal:
    """Read, match, filter, and normalize one traversal.

    Scans are matched to the nearest pose by timestamp and dropped when the
    gap exceeds ``max_time_gap`` seconds. A scan whose matched pose moved
    less than ``min_displacement`` meters from the last retained pose is
    dropped (the first of a stationary run wins). Surviving images are
    bilinearly resampled to angular_bins x radial_bins and min-max
    normalized per scan.
    """
    poses = read_poses(pose_file)
    if not poses:
        raise DataError(f"{pose_file}: no poses")
    times = [p.timestamp for p in poses]

    scans = [read_scan(p) for p in list_scan_files(scan_dir)]
    scans.sort(key=lambda s: s.timestamp)

    items = []
    last_kept = None
    for scan in scans:
        j = _nearest_pose(poses, times, scan.timestamp)
        pose = poses[j]
        if abs(pose.timestamp - scan.timestamp) > max_time_gap:
            continue
        if last_kept is not None and pose.planar_distance(last_kept) < min_displacement:
            continue
        img = minmax_normalize(resample_polar(scan.image, angular_bins, radial_bins))
        out = PolarScan(id=scan.id, timestamp=scan.timestamp, image=img)
        out.validate()
        items.append((out, pose))
        last_kept = pose

    if not items:
        raise DataError(f"{scan_dir}: no scans survived filtering")
    return Traversal(name=name, role=role, items=items)


# ---------------------------------------------------------------------------
# traversal directories and labeling

def write_traversal(root, traversal: Traversal):
    """Write a traversal as scans/NNNNNN.plsc plus poses.csv under root."""
    root = Path(root)
    scans_dir = root / "scans"
    scans_dir.mkdir(parents=True, exist_ok=True)
    for i, (scan, _) in enumerate(traversal.items):
        write_scan(scans_dir / f"{i:06d}.plsc", scan)
    write_poses(root / "poses.csv", traversal.poses)


def read_traversal(root, role: str, *, angular_bins: int = ANGULAR_BINS,
                   radial_bins: int = RADIAL_BINS) -> Traversal:
    root = Path(root)
    return ingest(root / "scans", root / "poses.csv", angular_bins=angular_bins,
                  radial_bins=radial_bins, name=root.name, role=role)


def resolve_data_dir(arg) -> Path:
    """CLI --data argument, falling back to the PLOC_DATA_DIR environment."""
    if arg:
        return Path(arg)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise DataError(f"no dataset path given and {DATA_DIR_ENV} is unset")


def label_pairs(t1, t2, *, positive_radius: float = POSITIVE_RADIUS,
                negative_radius: float = NEGATIVE_RADIUS) -> np.ndarray:
    """Pairwise similarity codes between two pose sets.

    Accepts Traversals or (N, 2) position arrays. Returns an int8 matrix:
    +1 similar (<= positive_radius), -1 dissimilar (>= negative_radius),
    0 excluded (the band in between).
    """
    p1 = t1.positions() if isinstance(t1, Traversal) else np.asarray(t1, dtype=np.float64)
    p2 = t2.positions() if isinstance(t2, Traversal) else np.asarray(t2, dtype=np.float64)
    d = np.sqrt(((p1[:, None, :] - p2[None, :, :]) ** 2).sum(axis=2))
    codes = np.zeros(d.shape, dtype=np.int8)
    codes[d <= positive_radius] = SIMILAR
    codes[d >= negative_radius] = DISSIMILAR
    return codes
