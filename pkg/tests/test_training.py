"""Triplet loss, batch-hard mining, augmentation, and the epoch loop."""

import numpy as np
import pytest

from polarloc.autodiff import Tensor, gradcheck
from polarloc.data import EXCLUDED, SIMILAR, DISSIMILAR, Pose, PolarScan, Traversal, label_pairs
from polarloc.network import NetworkConfig, build
from polarloc.optim import AdamState
from polarloc.training import (AugmentationSpec, TrainConfig, TrainingDiverged,
                               TripletLossSpec, augment, batch_hard_mine,
                               cluster_places, fit, plan_epoch_batches,
                               train_epoch, triplet_loss, triplet_loss_batch)

from oracles import mine_bruteforce


def vec(*vals):
    return Tensor(np.asarray(vals, dtype=np.float64))


class TestTripletLoss:
    def test_satisfied_triple_is_zero(self):
        # d(a,p)=1, d(a,n)=2, margin 0.5 -> hinge inactive
        loss = triplet_loss(vec(0.0, 0.0), vec(1.0, 0.0), vec(2.0, 0.0),
                            TripletLossSpec(0.5))
        assert loss.data.item() == 0.0

    def test_violated_triple_value(self):
        # d(a,p)=2, d(a,n)=1, margin 0.2 -> 1.2
        loss = triplet_loss(vec(0.0, 0.0), vec(2.0, 0.0), vec(1.0, 0.0),
                            TripletLossSpec(0.2))
        assert loss.data.item() == pytest.approx(1.2, abs=1e-7)

    def test_anchor_equals_positive(self):
        a = vec(0.3, -0.7)
        loss = triplet_loss(a, vec(0.3, -0.7), vec(5.0, 0.0), TripletLossSpec(0.2))
        assert loss.data.item() == pytest.approx(0.0, abs=1e-5)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            triplet_loss(vec(0.0), vec(0.0, 0.0), vec(0.0, 0.0))

    def test_margin_must_be_positive(self):
        with pytest.raises(ValueError):
            triplet_loss(vec(0.0), vec(1.0), vec(2.0), TripletLossSpec(0.0))

    def test_gradcheck_away_from_kinks(self, rng):
        a = Tensor(rng.uniform(-1, 1, size=4))
        p = Tensor(a.data + 2.0)   # d(a,p)=4, d(a,n)~=1 -> active hinge
        n = Tensor(a.data + rng.uniform(0.4, 0.6, size=4))
        spec = TripletLossSpec(0.2)
        assert gradcheck(lambda t: triplet_loss(t, p, n, spec), a) < 1e-6
        assert gradcheck(lambda t: triplet_loss(a, t, n, spec), p) < 1e-6
        assert gradcheck(lambda t: triplet_loss(a, p, t, spec), n) < 1e-6

    def test_gradient_pulls_positive_closer(self):
        # d loss / d positive points away from the anchor for an active hinge
        from polarloc.autodiff import Tape, backward
        a, p, n = vec(0.0, 0.0), vec(2.0, 0.0), vec(1.0, 0.0)
        p.requires_grad = True
        with Tape() as tape:
            loss = triplet_loss(a, p, n, TripletLossSpec(0.2))
            grads = backward(tape, loss)
        g = grads[p.tid]
        assert g[0] > 0  # positive sits at +x; gradient descent moves it toward a


class TestBatchLoss:
    def test_matches_scalar_losses(self, rng):
        desc = Tensor(rng.normal(size=(6, 4)))
        triples = [(0, 1, 2), (3, 4, 5), (1, 0, 5)]
        spec = TripletLossSpec(0.3)
        batch, active = triplet_loss_batch(desc, triples, spec)
        singles = [triplet_loss(Tensor(desc.data[a]), Tensor(desc.data[p]),
                                Tensor(desc.data[n]), spec).data.item()
                   for a, p, n in triples]
        assert batch.data.item() == pytest.approx(np.mean(singles), rel=1e-9)
        assert active == sum(1 for s in singles if s > 0)

    def test_empty_triples_rejected(self, rng):
        with pytest.raises(ValueError):
            triplet_loss_batch(Tensor(rng.normal(size=(3, 2))), [], TripletLossSpec())


class TestMining:
    def test_matches_bruteforce_many_batches(self):
        rng = np.random.default_rng(77)
        for _ in range(50):
            n = int(rng.integers(4, 17))
            desc = rng.normal(size=(n, 8))
            pos = rng.uniform(0, 60, size=(n, 2))
            labels = label_pairs_from(pos)
            got = batch_hard_mine(desc, labels)
            want = mine_bruteforce(desc, labels)
            assert got == want

    def test_hardest_negative_tie_takes_lowest_index(self):
        desc = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        pos = np.array([[0.0, 0.0], [1.0, 0.0], [50.0, 0.0], [90.0, 0.0]])
        labels = label_pairs_from(pos)
        triples, skipped = batch_hard_mine(desc, labels)
        # anchors 0/1: negatives 2 and 3 both at descriptor distance 1 resp.
        assert triples[0] == (0, 1, 2)

    def test_exclusion_band_never_mined(self):
        pos = np.array([[0.0, 0.0], [3.0, 0.0], [10.0, 0.0], [25.0, 0.0]])
        desc = np.array([[0.0], [1.0], [0.01], [5.0]])  # index 2 would be hardest
        labels = label_pairs_from(pos)
        triples, _ = batch_hard_mine(desc, labels)
        mined_negatives = {t[2] for t in triples}
        assert 2 not in mined_negatives  # 10 m sits inside the 5-20 m band

    def test_anchor_without_roles_skipped(self):
        pos = np.array([[0.0, 0.0], [1.0, 0.0], [100.0, 0.0]])
        desc = np.random.default_rng(0).normal(size=(3, 2))
        triples, skipped = batch_hard_mine(desc, label_pairs_from(pos))
        # index 2 has no positive partner
        assert skipped == 1
        assert all(t[0] != 2 for t in triples)

    def test_label_shape_checked(self):
        with pytest.raises(ValueError):
            batch_hard_mine(np.zeros((3, 2)), np.zeros((2, 2), dtype=np.int8))


def label_pairs_from(pos):
    return label_pairs(pos, pos)


class TestLabels:
    def test_band_semantics(self):
        pos = np.array([[0.0, 0.0], [3.0, 0.0], [10.0, 0.0], [25.0, 0.0]])
        lab = label_pairs_from(pos)
        assert lab[0, 1] == SIMILAR
        assert lab[0, 2] == EXCLUDED
        assert lab[0, 3] == DISSIMILAR
        assert np.array_equal(lab, lab.T)
        assert np.all(np.diag(lab) == SIMILAR)


class TestAugment:
    SPEC_OFF = AugmentationSpec(erase_probability=0.0, cyclic_shift=False)

    def test_disabled_is_identity(self, rng):
        img = rng.uniform(size=(12, 8)).astype(np.float32)
        out = augment(img, self.SPEC_OFF, np.random.default_rng(0))
        assert np.array_equal(out, img)
        assert out is not img

    def test_input_never_mutated(self, rng):
        img = rng.uniform(size=(12, 8)).astype(np.float32)
        keep = img.copy()
        augment(img, AugmentationSpec(erase_probability=1.0), np.random.default_rng(3))
        assert np.array_equal(img, keep)

    def test_deterministic_under_equal_rng_state(self, rng):
        img = rng.uniform(size=(16, 10)).astype(np.float32)
        spec = AugmentationSpec()
        a = augment(img, spec, np.random.default_rng(42))
        b = augment(img, spec, np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_shift_only_is_a_cyclic_roll(self, rng):
        img = rng.uniform(size=(12, 8)).astype(np.float32)
        spec = AugmentationSpec(erase_probability=0.0, cyclic_shift=True)
        gen = np.random.default_rng(5)
        offset = int(np.random.default_rng(5).integers(0, 12))
        out = augment(img, spec, gen)
        assert np.array_equal(out, np.roll(img, offset, axis=0))

    def test_erase_zeroes_a_rectangle(self, rng):
        img = rng.uniform(0.5, 1.0, size=(20, 16)).astype(np.float32)
        spec = AugmentationSpec(erase_probability=1.0, cyclic_shift=False)
        out = augment(img, spec, np.random.default_rng(9))
        zeros = np.argwhere(out == 0.0)
        assert zeros.size > 0
        r0, c0 = zeros.min(axis=0)
        r1, c1 = zeros.max(axis=0)
        box = out[r0:r1 + 1, c0:c1 + 1]
        assert np.all(box == 0.0)  # contiguous block
        area = box.size / img.size
        assert 0.01 <= area <= 0.35
        mask = np.ones_like(img, dtype=bool)
        mask[r0:r1 + 1, c0:c1 + 1] = False
        assert np.array_equal(out[mask], img[mask])

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            AugmentationSpec(erase_probability=1.5).validate()
        with pytest.raises(ValueError):
            AugmentationSpec(erase_area_fraction=(0.0, 0.2)).validate()


class TestPlaces:
    def test_leader_clustering(self):
        pos = np.array([[0.0, 0.0], [1.0, 1.0], [10.0, 0.0], [0.5, -0.5], [11.0, 0.0]])
        ids = cluster_places(pos, radius=2.5)
        assert ids[0] == ids[1] == ids[3]
        assert ids[2] == ids[4]
        assert ids[0] != ids[2]
        assert set(ids) == {0, 1}

    def test_batch_plan_invariants(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            n_places = int(rng.integers(6, 14))
            centers = rng.uniform(0, 400, size=(n_places, 2))
            positions, pids = [], []
            for p, c in enumerate(centers):
                for _ in range(int(rng.integers(1, 4))):
                    positions.append(c + rng.uniform(-1, 1, size=2))
                    pids.append(p)
            positions = np.asarray(positions)
            pids = np.asarray(pids)
            batches = plan_epoch_batches(pids, positions, rng, batch_size=6,
                                         min_separation=30.0)
            used_places = []
            for batch in batches:
                assert len(batch) == 6
                assert len(set(batch)) == 6
                bp = [int(pids[i]) for i in batch]
                assert bp[0::2] == bp[1::2]      # consecutive pairs share a place
                mem = {p: np.count_nonzero(pids == p) for p in bp}
                assert all(m >= 2 for m in mem.values())
                cs = centers[sorted(set(bp))]
                for i in range(len(cs)):
                    for j in range(i + 1, len(cs)):
                        d = np.hypot(*(cs[i] - cs[j]))
                        assert d >= 30.0 - 2.0  # leader center vs true center slack
                used_places.extend(set(bp))
            assert len(used_places) == len(set(used_places))

    def test_batch_size_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            plan_epoch_batches(np.zeros(4, dtype=int), np.zeros((4, 2)), rng, 5, 10.0)


def tiny_traversal(rng, places=((0, 0), (40, 0), (0, 40), (40, 40)), per=2):
    items = []
    idx = 0
    for cx, cy in places:
        for k in range(per):
            img = rng.uniform(size=(32, 16)).astype(np.float32)
            items.append((PolarScan(f"{idx:06d}", float(idx), img),
                          Pose(float(idx), cx + 0.3 * k, cy, 0.0)))
            idx += 1
    return Traversal("tiny", "train", items)


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class TestFit:
    def test_two_runs_are_identical(self, rng):
        trav = tiny_traversal(np.random.default_rng(8))
        cfg = tiny_config()
        runs = []
        for _ in range(2):
            model = build(NetworkConfig(input_shape=(1, 32, 16)), seed=0)
            hist = fit(model, trav, cfg)
            runs.append((hist, {n: t.data.copy() for n, t in model.named_parameters()}))
        h1, p1 = runs[0]
        h2, p2 = runs[1]
        for a, b in zip(h1, h2):
            for key in ("mean_loss", "active_fraction", "skipped_anchors",
                        "triples", "batches"):
                assert a[key] == b[key]
        for name in p1:
            assert np.array_equal(p1[name], p2[name]), name

    def test_history_and_modes(self, rng):
        trav = tiny_traversal(np.random.default_rng(9))
        model = build(NetworkConfig(input_shape=(1, 32, 16)), seed=1)
        hist = fit(model, trav, tiny_config(epochs=3))
        assert [h["epoch"] for h in hist] == [1, 2, 3]
        assert all(np.isfinite(h["mean_loss"]) for h in hist)
        assert all(h["triples"] > 0 for h in hist)
        assert model.training is False  # left in eval mode

    def test_training_changes_parameters(self, rng):
        trav = tiny_traversal(np.random.default_rng(10))
        model = build(NetworkConfig(input_shape=(1, 32, 16)), seed=2)
        before = {n: t.data.copy() for n, t in model.named_parameters()}
        fit(model, trav, tiny_config(epochs=1))
        changed = any(not np.array_equal(before[n], t.data)
                      for n, t in model.named_parameters())
        assert changed

    def test_single_place_batch_yields_no_step(self, rng):
        # all scans share one place: no negatives anywhere, no update possible
        model = build(NetworkConfig(input_shape=(1, 32, 16)), seed=4)
        gen = np.random.default_rng(0)
        images = gen.uniform(size=(4, 32, 16)).astype(np.float32)
        positions = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.5, 0.0]])
        store = model.parameter_store()
        state = AdamState(store, lr=1e-3)
        before = {n: t.data.copy() for n, t in store.items()}
        stats = train_epoch(model, images, positions, [[0, 1, 2, 3]], store, state,
                            gen, tiny_config())
        assert stats["triples"] == 0
        assert stats["batches"] == 0
        assert stats["skipped_anchors"] == 4
        for name, t in store.items():
            assert np.array_equal(before[name], t.data)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self, rng):
        class ExplodingModel:
            def __init__(self):
                self.inner = build(NetworkConfig(input_shape=(1, 32, 16)), seed=0)

            def train(self):
                return self

            def forward(self, batch):
                out = self.inner.feature_map(batch)
                out.data[...] = np.inf
                from polarloc.autodiff import mean_spatial
                return mean_spatial(out)

            def parameter_store(self):
                return self.inner.parameter_store()

            def clamp_constraints(self):
                pass

        model = ExplodingModel()
        gen = np.random.default_rng(0)
        images = gen.uniform(size=(4, 32, 16)).astype(np.float32)
        positions = np.array([[0.0, 0.0], [0.5, 0.0], [40.0, 0.0], [40.5, 0.0]])
        store = model.parameter_store()
        state = AdamState(store)
        with pytest.raises(TrainingDiverged):
            train_epoch(model, images, positions, [[0, 1, 2, 3]], store, state,
                        gen, tiny_config())


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [
        dict(batch_size=5),
        dict(batch_size=2),
        dict(epochs=-1),
        dict(lr=0.0),
        dict(margin=-0.1),
        dict(min_place_separation=10.0),  # below negative_radius
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_defaults_valid(self):
        TrainConfig().validate()
