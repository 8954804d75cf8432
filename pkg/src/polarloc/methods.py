"""Descriptor method dispatch shared by the CLI and the evaluation harness."""

from __future__ import annotations

import numpy as np

from . import baselines, retrieval
from .autodiff import Tensor, no_grad

METHODS = ("radarloc", "ringkey", "scancontext")

DESCRIPTOR_BATCH = 16


def radarloc_descriptors(model, images: np.ndarray,
                         batch_size: int = DESCRIPTOR_BATCH) -> np.ndarray:
    """Eval-mode descriptors for an (N, A, R) image stack."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, images.shape[0], batch_size):
            chunk = np.asarray(images[i:i + batch_size], dtype=np.float32)
            out.append(model.forward(Tensor(chunk[:, None, :, :])).data)
    return np.concatenate(out, axis=0)


def compute_descriptors(method: str, images: np.ndarray, *, model=None,
                        sectors: int = baselines.DEFAULT_SECTORS,
                        rings: int = baselines.DEFAULT_RINGS) -> np.ndarray:
    """(N, D) descriptor matrix; scancontext matrices come back flattened."""
    if method == "radarloc":
        if model is None:
            raise ValueError("radarloc descriptors need a trained model checkpoint")
        return radarloc_descriptors(model, images)
    if method == "ringkey":
        return np.stack([baselines.ring_key(img, rings) for img in images])
    if method == "scancontext":
        return np.stack(
            [baselines.scancontext(img, sectors, rings).reshape(-1) for img in images])
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_method(method: str, map_images, map_poses, map_ids, query_images,
                    query_poses, *, model=None, n_max=retrieval.DEFAULT_N_MAX,
                    thresholds=retrieval.DEFAULT_THRESHOLDS,
                    sectors: int = baselines.DEFAULT_SECTORS,
                    rings: int = baselines.DEFAULT_RINGS):
    """Full retrieval evaluation; returns (report, map_desc, query_desc).

    ScanContext ranks by its min-over-shifts cosine distance instead of the
    Euclidean index, matching the baseline's alignment search.
    """
    map_desc = compute_descriptors(method, map_images, model=model,
                                   sectors=sectors, rings=rings)
    query_desc = compute_descriptors(method, query_images, model=model,
                                     sectors=sectors, rings=rings)
    map_pos = np.array([[p.x, p.y] for p in map_poses], dtype=np.float64)
    query_pos = np.array([[p.x, p.y] for p in query_poses], dtype=np.float64)

    if method == "scancontext":
        dmat = baselines.scancontext_distance_matrix(
            query_desc.reshape(-1, sectors, rings).astype(np.float64),
            map_desc.reshape(-1, sectors, rings).astype(np.float64))
        order = np.argsort(dmat, axis=1, kind="stable")[:, : min(n_max, dmat.shape[1])]
        report = retrieval.report_from_rankings(map_pos[order], query_pos,
                                                n_max=n_max, thresholds=thresholds)
    else:
        index = retrieval.build_index(map_desc, map_poses, map_ids, method)
        queries = list(zip(query_desc, query_poses))
        report = retrieval.evaluate(index, queries, n_max=n_max, thresholds=thresholds)
    return report, map_desc, query_desc
