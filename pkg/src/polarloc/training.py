"""Triplet-margin metric learning: batches, mining, loss, epoch loop.

Batches pair two scans of each sampled place so every anchor has an
in-batch positive; the hardest in-batch negative is mined from the current
forward pass. Pose pairs in the 5-20 m band are excluded from both roles.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tape, Tensor, add_const, backward, clamp_min, index_rows,
                       mean_all, mul, relu, rowsum, sqrt, sub, sum_all)
from .data import (DISSIMILAR, NEGATIVE_RADIUS, POSITIVE_RADIUS, SIMILAR,
                   label_pairs)
from .optim import AdamState, adam_step

_D2_FLOOR = 1e-12  # keeps sqrt differentiable when two descriptors coincide


class TrainingDiverged(RuntimeError):
    """Loss or descriptors went non-finite; the epoch is aborted."""


@dataclass
class TripletLossSpec:
    margin: float = 0.2

    def validate(self):
        if not (self.margin > 0 and math.isfinite(self.margin)):
            raise ValueError("margin must be positive and finite")


@dataclass
class AugmentationSpec:
    erase_probability: float = 0.5
    erase_area_fraction: tuple = (0.02, 0.20)
    cyclic_shift: bool = True

    def validate(self):
        if not (0.0 <= self.erase_probability <= 1.0):
            raise ValueError("erase_probability must lie in [0, 1]")
        lo, hi = self.erase_area_fraction
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("erase_area_fraction must satisfy 0 < lo <= hi <= 1")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    margin: float = 0.2
    lr: float = 1e-3
    seed: int = 0
    place_radius: float = 5.0          # leader-clustering radius for place ids
    min_place_separation: float = 25.0  # between places sharing a batch
    positive_radius: float = POSITIVE_RADIUS
    negative_radius: float = NEGATIVE_RADIUS

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 4 or self.batch_size % 2 != 0:
            raise ValueError("batch_size must be an even number >= 4")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        TripletLossSpec(self.margin).validate()
        if self.min_place_separation < self.negative_radius:
            raise ValueError("min_place_separation must be >= negative_radius")


# ---------------------------------------------------------------------------
# loss

def _euclidean(a: Tensor, b: Tensor) -> Tensor:
    d = sub(a, b)
    s = rowsum(mul(d, d)) if a.data.ndim == 2 else sum_all(mul(d, d))
    return sqrt(clamp_min(s, _D2_FLOOR))


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor,
                 spec: TripletLossSpec = TripletLossSpec()) -> Tensor:
    """max{d(a,p) - d(a,n) + margin, 0} for single descriptor vectors."""
    spec.validate()
    if not (anchor.data.shape == positive.data.shape == negative.data.shape):
        raise ValueError("descriptor shapes must match")
    return relu(add_const(sub(_euclidean(anchor, positive),
                              _euclidean(anchor, negative)), spec.margin))


def triplet_loss_batch(descriptors: Tensor, triples, spec: TripletLossSpec):
    """Mean hinge loss over mined (anchor, positive, negative) index triples.

    Returns (scalar loss Tensor, count of triples with nonzero loss).
    """
    spec.validate()
    if not triples:
        raise ValueError("no triples")
    ai = [t[0] for t in triples]
    pi = [t[1] for t in triples]
    ni = [t[2] for t in triples]
    a = index_rows(descriptors, ai)
    p = index_rows(descriptors, pi)
    n = index_rows(descriptors, ni)
    hinge = relu(add_const(sub(_euclidean(a, p), _euclidean(a, n)), spec.margin))
    active = int((hinge.data > 0).sum())
    return mean_all(hinge), active


# ---------------------------------------------------------------------------
# mining

def batch_hard_mine(descriptors: np.ndarray, labels: np.ndarray):
    """Hardest-negative triples from one batch's descriptors.

    labels is the int8 pair matrix from label_pairs over the batch poses.
    Each anchor takes its lowest-index in-batch positive and the dissimilar
    element with the smallest descriptor distance (ties to the lowest
    index). Anchors lacking either role are skipped and counted.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    n = x.shape[0]
    if labels.shape != (n, n):
        raise ValueError(f"labels must be ({n}, {n}), got {labels.shape}")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))

    triples = []
    skipped = 0
    for i in range(n):
        pos = [j for j in range(n) if j != i and labels[i, j] == SIMILAR]
        neg = np.nonzero(labels[i] == DISSIMILAR)[0]
        if not pos or neg.size == 0:
            skipped += 1
            continue
        hardest = neg[int(np.argmin(dist[i, neg]))]  # argmin takes the first tie
        triples.append((i, pos[0], int(hardest)))
    return triples, skipped


# ---------------------------------------------------------------------------
# augmentation

def augment(image: np.ndarray, spec: AugmentationSpec,
            rng: np.random.Generator) -> np.ndarray:
    """Random erasing, then a random cyclic roll along the angular axis.

    Draw order is fixed: erase trigger, area fraction, aspect, position,
    then the shift offset, so equal generator states give equal outputs.
    """
    spec.validate()
    out = np.array(image, dtype=np.float32, copy=True)
    a, r = out.shape
    if spec.erase_probability > 0 and rng.random() < spec.erase_probability:
        lo, hi = spec.erase_area_fraction
        frac = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(0.3), math.log(1.0 / 0.3)))
        area = frac * a * r
        eh = min(max(int(round(math.sqrt(area * aspect))), 1), a)
        ew = min(max(int(round(math.sqrt(area / aspect))), 1), r)
        top = int(rng.integers(0, a - eh + 1))
        left = int(rng.integers(0, r - ew + 1))
        out[top:top + eh, left:left + ew] = 0.0
    if spec.cyclic_shift:
        offset = int(rng.integers(0, a))
        out = np.roll(out, offset, axis=0)
    return out


# ---------------------------------------------------------------------------
# batch planning

def cluster_places(positions: np.ndarray, radius: float = 5.0) -> np.ndarray:
    """Leader clustering of planar positions; returns a place id per row."""
    pts = np.asarray(positions, dtype=np.float64)
    centers = []
    labels = np.empty(len(pts), dtype=np.int64)
    for i, p in enumerate(pts):
        for k, c in enumerate(centers):
            if math.hypot(p[0] - c[0], p[1] - c[1]) <= radius:
                labels[i] = k
                break
        else:
            centers.append(p)
            labels[i] = len(centers) - 1
    return labels


def plan_epoch_batches(place_ids: np.ndarray, positions: np.ndarray,
                       rng: np.random.Generator, batch_size: int,
                       min_separation: float):
    """One epoch's batches: batch_size/2 places x 2 scans each.

    Only places with at least two scans participate; places sharing a batch
    are mutually at least min_separation apart (center distance). Leftover
    places that cannot fill a batch are dropped for the epoch.
    """
    if batch_size < 4 or batch_size % 2 != 0:
        raise ValueError("batch_size must be an even number >= 4")
    per_batch = batch_size // 2
    members = {}
    for idx, pid in enumerate(place_ids):
        members.setdefault(int(pid), []).append(idx)
    centers = {p: positions[m[0]] for p, m in members.items()}
    eligible = sorted(p for p, m in members.items() if len(m) >= 2)
    order = [eligible[i] for i in rng.permutation(len(eligible))]

    batches = []
    remaining = order
    while len(remaining) >= per_batch:
        chosen, rest = [], []
        for p in remaining:
            ok = len(chosen) < per_batch and all(
                math.hypot(*(centers[p] - centers[q])) >= min_separation for q in chosen)
            (chosen if ok else rest).append(p)
        if len(chosen) < per_batch:
            break
        remaining = rest
        batch = []
        for p in chosen:
            picks = rng.choice(len(members[p]), size=2, replace=False)
            batch.extend(members[p][int(j)] for j in picks)
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# epoch loop

def train_epoch(model, images: np.ndarray, positions: np.ndarray, batches,
                store, state: AdamState, aug_rng: np.random.Generator,
                config: TrainConfig,
                aug_spec: AugmentationSpec = AugmentationSpec()):
    """Run one epoch over the given batches; returns aggregate stats."""
    loss_spec = TripletLossSpec(config.margin)
    total_loss = 0.0
    total_triples = 0
    total_active = 0
    skipped = 0
    steps = 0
    model.train()
    for batch in batches:
        imgs = np.stack([augment(images[i], aug_spec, aug_rng) for i in batch])
        labels = label_pairs(positions[batch], positions[batch],
                             positive_radius=config.positive_radius,
                             negative_radius=config.negative_radius)
        with Tape() as tape:
            desc = model.forward(Tensor(imgs[:, None, :, :]))
            triples, skip = batch_hard_mine(desc.data, labels)
            skipped += skip
            if not triples:
                continue
            loss, active = triplet_loss_batch(desc, triples, loss_spec)
            value = float(loss.data.item())
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value!r}")
            grads = backward(tape, loss)
        adam_step(store, grads, state)
        model.clamp_constraints()
        total_loss += value * len(triples)
        total_triples += len(triples)
        total_active += active
        steps += 1
    return {
        "mean_loss": total_loss / total_triples if total_triples else 0.0,
        "active_fraction": total_active / total_triples if total_triples else 0.0,
        "skipped_anchors": skipped,
        "triples": total_triples,
        "batches": steps,
    }


def fit(model, traversal, config: TrainConfig, log=None,
        aug_spec: AugmentationSpec = AugmentationSpec()):
    """Full training loop over a traversal; returns per-epoch stats history."""
    config.validate()
    aug_spec.validate()
    images = traversal.images()
    positions = traversal.positions()
    place_ids = cluster_places(positions, config.place_radius)

    aug_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(101,)))
    plan_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(102,)))

    store = model.parameter_store()
    state = AdamState(store, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        batches = plan_epoch_batches(place_ids, positions, plan_rng,
                                     config.batch_size, config.min_place_separation)
        try:
            stats = train_epoch(model, images, positions, batches, store, state,
                                aug_rng, config, aug_spec)
        except TrainingDiverged as e:
            raise TrainingDiverged(f"epoch {epoch + 1}: {e}") from e
        stats["epoch"] = epoch + 1
        stats["wall_seconds"] = time.monotonic() - t0
        history.append(stats)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} "
                f"loss {stats['mean_loss']:.6f} "
                f"active {stats['active_fraction']:.3f} "
                f"skipped {stats['skipped_anchors']} "
                f"triples {stats['triples']} "
                f"time {stats['wall_seconds']:.1f}s")
    model.eval()
    return history
