"""Geotagged descriptor index, exact kNN, and Recall@N evaluation.

The index is brute-force and exact: desk-scale maps make approximate
structures pointless and tests want bit-stable rankings. Ties are broken
by insertion order everywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Pose

DEFAULT_N_MAX = 10
DEFAULT_THRESHOLDS = (5.0, 10.0)

PDSC_MAGIC = "PDSC"


@dataclass(frozen=True)
class IndexEntry:
    descriptor: np.ndarray
    pose: Pose
    scan_id: str


class DescriptorIndex:
    """Immutable list of (descriptor, pose, id) with a packed matrix view."""

    def __init__(self, descriptors, poses, ids, method: str):
        matrix = np.asarray(descriptors, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            raise ValueError("index needs a non-empty (N, D) descriptor array")
        if not (len(poses) == len(ids) == matrix.shape[0]):
            raise ValueError("descriptors, poses, and ids must align")
        matrix = matrix.copy()
        matrix.setflags(write=False)
        self._matrix = matrix
        self._entries = tuple(
            IndexEntry(matrix[i], poses[i], str(ids[i])) for i in range(matrix.shape[0])
        )
        self.method = str(method)
        self.dimension = matrix.shape[1]

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self):
        return self._entries

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def positions(self) -> np.ndarray:
        return np.array([[e.pose.x, e.pose.y] for e in self._entries], dtype=np.float64)


def build_index(descriptors, poses, ids, method: str = "radarloc") -> DescriptorIndex:
    return DescriptorIndex(descriptors, poses, ids, method)


def _check_query_dim(index: DescriptorIndex, query: np.ndarray):
    if query.ndim != 1 or query.shape[0] != index.dimension:
        raise ValueError(
            f"query dimension {query.shape} does not match index ({index.dimension},)")


def knn(index: DescriptorIndex, query: np.ndarray, k: int):
    """Exact k nearest entries by Euclidean distance, ascending.

    Ties break by insertion order; returns min(k, len(index)) pairs of
    (entry, distance).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query)
    _check_query_dim(index, query)
    diff = index.matrix.astype(np.float64) - query.astype(np.float64)
    dist = np.sqrt((diff ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[: min(k, len(index))]
    return [(index.entries[i], float(dist[i])) for i in order]


@dataclass
class EvalReport:
    """Recall@N(d) grid plus the per-query first-hit ranks behind it."""

    recall: dict            # (N, threshold) -> fraction in [0, 1]
    ranks: dict             # threshold -> (Nq,) int array; n_max + 1 means miss
    query_count: int
    n_max: int
    thresholds: tuple

    def check_monotonic(self):
        thrs = sorted(self.thresholds)
        for t in thrs:
            vals = [self.recall[(n, t)] for n in range(1, self.n_max + 1)]
            for a, b in zip(vals, vals[1:]):
                if b < a:
                    raise RuntimeError(f"recall not monotone in N at threshold {t}")
        for n in range(1, self.n_max + 1):
            vals = [self.recall[(n, t)] for t in thrs]
            for a, b in zip(vals, vals[1:]):
                if b < a:
                    raise RuntimeError(f"recall not monotone in threshold at N={n}")

    def to_csv_text(self) -> str:
        lines = ["N,threshold_m,recall"]
        for n in range(1, self.n_max + 1):
            for t in self.thresholds:
                lines.append(f"{n},{t:g},{self.recall[(n, t)]:.6f}")
        return "\n".join(lines) + "\n"


def report_from_rankings(neighbor_positions: np.ndarray, query_positions: np.ndarray,
                         n_max: int = DEFAULT_N_MAX,
                         thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Build a report from already-ranked neighbors.

    neighbor_positions: (Nq, K, 2) planar positions of each query's top
    retrievals, best first, K >= n_max unless the map is smaller.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(t <= 0 for t in thresholds):
        raise ValueError("thresholds must be positive")
    query_positions = np.asarray(query_positions, dtype=np.float64)
    nq = query_positions.shape[0]
    if nq == 0:
        raise ValueError("no queries")
    k = min(n_max, neighbor_positions.shape[1])
    geod = np.sqrt(
        ((neighbor_positions[:, :k, :] - query_positions[:, None, :]) ** 2).sum(axis=2))

    ranks = {}
    recall = {}
    miss = n_max + 1
    for t in thresholds:
        hit = geod <= t                      # (Nq, k)
        any_hit = hit.any(axis=1)
        first = np.where(any_hit, hit.argmax(axis=1) + 1, miss).astype(np.int64)
        ranks[t] = first
        for n in range(1, n_max + 1):
            recall[(n, t)] = float((first <= n).mean())
    report = EvalReport(recall=recall, ranks=ranks, query_count=nq,
                        n_max=n_max, thresholds=thresholds)
    report.check_monotonic()
    return report


def evaluate(index: DescriptorIndex, queries, n_max: int = DEFAULT_N_MAX,
             thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Recall@N(d) of a query list [(descriptor, pose), ...] against the index.

    For each query the rank of the first retrieved entry within d meters is
    recorded; Recall@N(d) is the fraction of queries with rank <= N.
    """
    if not queries:
        raise ValueError("no queries")
    qmat = np.asarray([np.asarray(d) for d, _ in queries], dtype=np.float64)
    if qmat.shape[1] != index.dimension:
        raise ValueError(
            f"query dimension {qmat.shape[1]} does not match index ({index.dimension},)")
    entry_pos = index.positions()
    diff = qmat[:, None, :] - index.matrix.astype(np.float64)[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))                    # (Nq, Nm)
    order = np.argsort(dist, axis=1, kind="stable")[:, : min(n_max, len(index))]
    neighbor_pos = entry_pos[order]                            # (Nq, K, 2)
    query_pos = np.array([[p.x, p.y] for _, p in queries], dtype=np.float64)
    return report_from_rankings(neighbor_pos, query_pos, n_max=n_max,
                                thresholds=thresholds)


def write_recall_csv(report: EvalReport, path):
    with open(path, "w", newline="") as f:
        f.write(report.to_csv_text())


# ---------------------------------------------------------------------------
# descriptor file format

def save_descriptors(path, ids, poses, descriptors: np.ndarray, method: str):
    """PDSC export: header 'PDSC dim count method', then per entry the id,
    pose (x, y, yaw as float64), and float32 descriptor values."""
    mat = np.ascontiguousarray(descriptors, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError("descriptors must be (N, D)")
    if not (len(ids) == len(poses) == mat.shape[0]):
        raise ValueError("ids, poses, descriptors must align")
    method = str(method)
    if not method or any(c.isspace() for c in method):
        raise ValueError(f"bad method id {method!r}")
    with open(path, "wb") as f:
        f.write(f"{PDSC_MAGIC} {mat.shape[1]} {mat.shape[0]} {method}\n".encode("ascii"))
        for i in range(mat.shape[0]):
            sid = str(ids[i]).encode("utf-8")
            p = poses[i]
            f.write(struct.pack("<I", len(sid)))
            f.write(sid)
            f.write(struct.pack("<ddd", p.x, p.y, p.yaw))
            f.write(mat[i].tobytes())


def load_descriptors(path):
    """Inverse of save_descriptors: (ids, poses, (N, D) float32, method)."""
    with open(path, "rb") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != PDSC_MAGIC.encode("ascii"):
            raise ValueError(f"{path}: bad PDSC header")
        dim, count = int(header[1]), int(header[2])
        method = header[3].decode("ascii")
        ids, poses, rows = [], [], []
        for _ in range(count):
            (id_len,) = struct.unpack("<I", f.read(4))
            ids.append(f.read(id_len).decode("utf-8"))
            x, y, yaw = struct.unpack("<ddd", f.read(24))
            poses.append(Pose(0.0, x, y, yaw))
            rows.append(np.frombuffer(f.read(dim * 4), dtype="<f4").copy())
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} entries")
    return ids, poses, np.stack(rows) if rows else np.zeros((0, dim), np.float32), method
