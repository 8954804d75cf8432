"""Hand-crafted comparison descriptors: Ring key and ScanContext.

Both operate on a sector x ring block-mean downsampling of the polar scan
image. Ring key collapses the angular axis entirely and is compared by
Euclidean distance; ScanContext keeps the matrix and is compared by the
best cyclic sector alignment under per-sector cosine distance.
"""

from __future__ import annotations

import numpy as np

DEFAULT_SECTORS = 64
DEFAULT_RINGS = 16


def _image_of(scan) -> np.ndarray:
    img = getattr(scan, "image", scan)
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d polar image, got shape {img.shape}")
    return img


def scancontext(scan, sectors: int = DEFAULT_SECTORS, rings: int = DEFAULT_RINGS) -> np.ndarray:
    """(sectors, rings) block-mean matrix of the scan image."""
    img = _image_of(scan)
    a, r = img.shape
    if sectors < 1 or rings < 1:
        raise ValueError("sectors and rings must be positive")
    if a % sectors != 0:
        raise ValueError(f"sectors {sectors} must divide angular bins {a}")
    if r % rings != 0:
        raise ValueError(f"rings {rings} must divide radial bins {r}")
    blocks = img.astype(np.float64).reshape(sectors, a // sectors, rings, r // rings)
    return blocks.mean(axis=(1, 3)).astype(np.float32)


def ring_key(scan, rings: int = DEFAULT_RINGS) -> np.ndarray:
    """(rings,) vector: block-average radially, then average over all angles."""
    img = _image_of(scan)
    a, r = img.shape
    if rings < 1:
        raise ValueError("rings must be positive")
    if r % rings != 0:
        raise ValueError(f"rings {rings} must divide radial bins {r}")
    blocks = img.astype(np.float64).reshape(a, rings, r // rings)
    return blocks.mean(axis=(0, 2)).astype(np.float32)


def ringkey_distance(k1: np.ndarray, k2: np.ndarray) -> float:
    k1 = np.asarray(k1, dtype=np.float64)
    k2 = np.asarray(k2, dtype=np.float64)
    if k1.shape != k2.shape:
        raise ValueError(f"ring key shapes differ: {k1.shape} vs {k2.shape}")
    return float(np.sqrt(((k1 - k2) ** 2).sum()))


def _normalize_rows(mat: np.ndarray):
    """Unit-normalize each row; all-zero rows stay zero and are flagged."""
    m = np.asarray(mat, dtype=np.float64)
    norms = np.sqrt((m ** 2).sum(axis=1))
    zero = norms == 0.0
    safe = np.where(zero, 1.0, norms)
    return m / safe[:, None], zero


def _roll_index(n: int) -> np.ndarray:
    # idx[s, a] = (a + s) mod n
    return (np.arange(n)[:, None] + np.arange(n)[None, :]) % n


def scancontext_distance(d1: np.ndarray, d2: np.ndarray) -> float:
    """Min over cyclic sector shifts of the mean per-sector cosine distance.

    A zero sector against a nonzero one counts as distance 1; two zero
    sectors count as 0. The result is clipped at 0 to absorb rounding.
    """
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if d1.shape != d2.shape or d1.ndim != 2:
        raise ValueError(f"descriptor shapes differ: {d1.shape} vs {d2.shape}")
    sectors = d1.shape[0]
    n1, z1 = _normalize_rows(d1)
    n2, z2 = _normalize_rows(d2)
    dots = n1 @ n2.T                                 # dots[a, b] = cos(row1_a, row2_b)
    both = np.outer(z1, z2).astype(np.float64)
    idx = _roll_index(sectors).T                     # idx[a, s] = (a + s) mod n
    rows = np.arange(sectors)[:, None]
    sims = dots[rows, idx].sum(axis=0) + both[rows, idx].sum(axis=0)
    dist = 1.0 - sims / sectors
    return float(max(dist.min(), 0.0))


def scancontext_distance_matrix(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """(Nq, Nm) matrix of scancontext_distance values, computed in bulk."""
    queries = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if queries.ndim != 3 or refs.ndim != 3 or queries.shape[1:] != refs.shape[1:]:
        raise ValueError("expected (N, sectors, rings) stacks of equal grid shape")
    nq, sectors, rings = queries.shape
    nm = refs.shape[0]

    nr = np.empty_like(refs)
    zr = np.empty((nm, sectors))
    for m in range(nm):
        nr[m], zr[m] = _normalize_rows(refs[m])
    refs_flat = nr.reshape(nm, sectors * rings)

    idx = _roll_index(sectors)
    out = np.empty((nq, nm), dtype=np.float64)
    for q in range(nq):
        nq_mat, zq = _normalize_rows(queries[q])
        rolled = nq_mat[idx].reshape(sectors, sectors * rings)   # all shifts of q
        sims = rolled @ refs_flat.T                              # (shifts, Nm)
        bz = zq[idx].astype(np.float64) @ zr.T                   # both-zero counts
        dist = 1.0 - (sims + bz) / sectors
        out[q] = dist.min(axis=0)
    return np.maximum(out, 0.0)
