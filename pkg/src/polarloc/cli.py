"""Command-line pipeline: gen, train, index, eval, selftest.

Exit codes: 0 success, 1 usage error, 2 runtime failure. The --threads
flag is honored before numpy loads so BLAS thread pools obey it; --threads
1 is the deterministic mode the acceptance benchmark uses.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


def _apply_threads_early(argv):
    """Set BLAS thread env vars from --threads before numpy is imported."""
    value = None
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif tok.startswith("--threads="):
            value = tok.split("=", 1)[1]
    if value is not None and value.isdigit() and int(value) >= 1:
        for var in _THREAD_VARS:
            os.environ[var] = value


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _build_parser():
    parser = _Parser(prog="polarloc",
                     description="Rotation-invariant place recognition on polar radar scans.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def common(p, data=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS/OMP thread count (1 = deterministic mode)")
        if data:
            p.add_argument("--data", default=None,
                           help="dataset root (default: $PLOC_DATA_DIR)")

    g = sub.add_parser("gen", help="generate a synthetic dataset", parents=[])
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--extent", type=float, default=None)
    g.add_argument("--landmarks", type=int, default=None)
    g.add_argument("--max-range", type=float, default=None)
    g.add_argument("--noise-sigma", type=float, default=None)
    g.add_argument("--speckle-prob", type=float, default=None)
    g.add_argument("--train-points", type=int, default=None)
    g.add_argument("--train-passes", type=int, default=None)
    g.add_argument("--eval-points", type=int, default=None)
    g.add_argument("--train-spacing", type=float, default=None)
    g.add_argument("--eval-spacing", type=float, default=None)
    g.add_argument("--angular-bins", type=int, default=None)
    g.add_argument("--radial-bins", type=int, default=None)

    t = sub.add_parser("train", help="train the descriptor network")
    common(t, data=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--margin", type=float, default=0.2)
    t.add_argument("--lr", type=float, default=1e-3)

    x = sub.add_parser("index", help="build map descriptors")
    common(x, data=True)
    x.add_argument("--method", choices=("radarloc", "ringkey", "scancontext"),
                   default="radarloc")
    x.add_argument("--checkpoint", default=None)
    x.add_argument("--out", default=None, help="output .pdsc path")

    e = sub.add_parser("eval", help="evaluate Recall@N on the query traversal")
    common(e, data=True)
    e.add_argument("--method", choices=("radarloc", "ringkey", "scancontext"),
                   default="radarloc")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--out", default=None, help="output recall CSV path")
    e.add_argument("--recall-max-n", type=int, default=10)
    e.add_argument("--thresholds", default="5,10",
                   help="comma-separated distance thresholds in meters")

    s = sub.add_parser("selftest", help="run built-in correctness checks")
    common(s)
    s.add_argument("--inject-fault", default=None, metavar="CHECK",
                   help="force the named check to fail (harness test)")
    return parser


# ---------------------------------------------------------------------------
# commands

def _cmd_gen(args):
    from .data import write_traversal
    from .synthetic import SyntheticWorldSpec, generate_synthetic

    overrides = {
        "extent": args.extent, "landmark_count": args.landmarks,
        "max_range": args.max_range, "noise_sigma": args.noise_sigma,
        "speckle_prob": args.speckle_prob, "train_points": args.train_points,
        "train_passes": args.train_passes, "eval_points": args.eval_points,
        "train_spacing": args.train_spacing, "eval_spacing": args.eval_spacing,
        "angular_bins": args.angular_bins, "radial_bins": args.radial_bins,
    }
    fields = {k: v for k, v in overrides.items() if v is not None}
    spec = SyntheticWorldSpec(seed=args.seed, **fields)
    train, map_t, query = generate_synthetic(spec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for traversal in (train, map_t, query):
        write_traversal(out / traversal.name, traversal)
    _write_json(out / "manifest.json", {
        "spec": spec.to_dict(),
        "counts": {"train": len(train), "map": len(map_t), "query": len(query)},
    })
    print(f"wrote {len(train)} train / {len(map_t)} map / {len(query)} query scans to {out}")
    return EXIT_OK


def _cmd_train(args):
    from . import network
    from .data import read_traversal, resolve_data_dir
    from .training import TrainConfig, fit

    data = resolve_data_dir(args.data)
    traversal = read_traversal(data / "train", "train")
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         margin=args.margin, lr=args.lr, seed=args.seed)
    config.validate()
    model = network.build(seed=args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.txt"
    ckpt_path = out / "checkpoint.ploc"
    _write_json(out / "train_config.json", {
        "command": "train", "data": str(args.data or os.environ.get("PLOC_DATA_DIR")),
        "epochs": config.epochs, "batch_size": config.batch_size,
        "margin": config.margin, "lr": config.lr, "seed": config.seed,
        "network": model.config.to_dict(),
    })
    with open(log_path, "w") as log_file:
        def log(line):
            log_file.write(line + "\n")
            log_file.flush()
            print(line)
        try:
            fit(model, traversal, config, log=log)
        finally:
            model.save(ckpt_path)  # partial state is still a valid checkpoint
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _load_model(args):
    from . import network
    if args.method == "radarloc":
        if not args.checkpoint:
            raise ValueError("--method radarloc requires --checkpoint")
        return network.load(args.checkpoint)
    if args.checkpoint:
        raise ValueError(f"--checkpoint is only meaningful with radarloc, not {args.method}")
    return None


def _cmd_index(args):
    from .data import read_traversal, resolve_data_dir
    from .methods import compute_descriptors
    from .retrieval import save_descriptors

    data = resolve_data_dir(args.data)
    model = _load_model(args)
    traversal = read_traversal(data / "map", "map")
    desc = compute_descriptors(args.method, traversal.images(), model=model)
    out = Path(args.out) if args.out else data / f"map_{args.method}.pdsc"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_descriptors(out, [s.id for s in traversal.scans], traversal.poses,
                     desc, args.method)
    _write_json(str(out) + ".json", {
        "command": "index", "method": args.method, "entries": len(traversal),
        "dimension": int(desc.shape[1]), "seed": args.seed,
        "checkpoint": args.checkpoint,
    })
    print(f"indexed {len(traversal)} map scans ({args.method}, dim {desc.shape[1]}) -> {out}")
    return EXIT_OK


def _parse_thresholds(text):
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ValueError(f"bad --thresholds {text!r}: {e}") from e
    if not values or any(v <= 0 for v in values):
        raise ValueError(f"--thresholds must be positive numbers, got {text!r}")
    return values


def _cmd_eval(args):
    from .data import read_traversal, resolve_data_dir
    from .methods import evaluate_method
    from .retrieval import write_recall_csv

    data = resolve_data_dir(args.data)
    model = _load_model(args)
    thresholds = _parse_thresholds(args.thresholds)
    if args.recall_max_n < 1:
        raise ValueError("--recall-max-n must be >= 1")
    map_t = read_traversal(data / "map", "map")
    query = read_traversal(data / "query", "query")
    report, _, _ = evaluate_method(
        args.method, map_t.images(), map_t.poses, [s.id for s in map_t.scans],
        query.images(), query.poses, model=model, n_max=args.recall_max_n,
        thresholds=thresholds)
    out = Path(args.out) if args.out else data / f"recall_{args.method}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_recall_csv(report, out)
    _write_json(str(out) + ".json", {
        "command": "eval", "method": args.method, "seed": args.seed,
        "recall_max_n": args.recall_max_n, "thresholds": list(thresholds),
        "checkpoint": args.checkpoint, "queries": report.query_count,
    })
    for t in thresholds:
        print(f"recall@1 {t:g}m = {report.recall[(1, t)]:.4f}")
    print(f"report: {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest

def _selftest_checks(seed):
    """(name, callable) pairs; each callable raises AssertionError on failure."""
    import numpy as np

    from . import network
    from .autodiff import Tensor, gradcheck, mean_all
    from .layers import (BatchNorm2d, CircularConv2d, Eca, GeM, TransposedConv2d,
                         conv2d_circular)

    rng = np.random.default_rng(seed)

    def f64(layer_like):
        for _, p in layer_like.parameters():
            p.data = p.data.astype(np.float64)
        if hasattr(layer_like, "buffers"):
            for name, buf in layer_like.buffers():
                setattr(layer_like, name, buf.astype(np.float64))
        return layer_like

    def check_grad(fn, x, bound=1e-4):
        err = gradcheck(lambda t: mean_all(fn(t)), x)
        assert err < bound, f"max relative error {err:.3g} >= {bound}"

    def conv3x3():
        conv = f64(CircularConv2d(2, 3, 3, rng=np.random.default_rng(0), dtype=np.float64))
        check_grad(conv, Tensor(rng.standard_normal((2, 2, 8, 6))))

    def conv_stride2():
        conv = f64(CircularConv2d(2, 3, 2, stride=2, rng=np.random.default_rng(0),
                                  dtype=np.float64))
        check_grad(conv, Tensor(rng.standard_normal((2, 2, 8, 6))))

    def tconv():
        t = f64(TransposedConv2d(3, 2, rng=np.random.default_rng(0), dtype=np.float64))
        check_grad(t, Tensor(rng.standard_normal((2, 3, 4, 3))))

    def bn_train():
        bn = f64(BatchNorm2d(3, dtype=np.float64))
        check_grad(lambda x: bn(x, training=True, update_running=False),
                   Tensor(rng.standard_normal((2, 3, 4, 5))))

    def bn_eval():
        bn = f64(BatchNorm2d(3, dtype=np.float64))
        bn.running_var[:] = np.array([0.5, 1.5, 2.0])
        check_grad(lambda x: bn(x, training=False),
                   Tensor(rng.standard_normal((2, 3, 4, 5))))

    def eca():
        m = f64(Eca(3, rng=np.random.default_rng(0), dtype=np.float64))
        check_grad(m, Tensor(rng.standard_normal((2, 4, 5, 3))))

    def gem():
        m = f64(GeM(dtype=np.float64))
        check_grad(m, Tensor(rng.uniform(0.2, 2.0, (2, 3, 4, 5))))

    def full_network():
        model = network.build(network.NetworkConfig(input_shape=(1, 32, 16)),
                              seed=3, dtype=np.float64)
        model.train()
        x = Tensor(np.random.default_rng(2).uniform(0.05, 1.0, (1, 1, 32, 16)))
        check_grad(lambda t: model.forward(t), x)

    def feature_shift():
        model = network.build(network.NetworkConfig(input_shape=(1, 64, 32)), seed=1)
        img = rng.random((1, 1, 64, 32), dtype=np.float32)
        base = model.feature_map(Tensor(img)).data
        rolled = model.feature_map(Tensor(np.roll(img, 16, axis=2))).data
        diff = np.abs(np.roll(base, 16 // 8, axis=2) - rolled).max()
        assert diff < 1e-5, f"feature map not shift-equivariant: {diff:.3g}"

    def descriptor_shift():
        model = network.build(network.NetworkConfig(input_shape=(1, 64, 32)), seed=1)
        img = rng.random((1, 1, 64, 32), dtype=np.float32)
        base = model.forward(Tensor(img)).data
        for k in (1, 2, 3):
            shifted = model.forward(Tensor(np.roll(img, 16 * k, axis=2))).data
            diff = np.abs(base - shifted).max()
            assert diff < 1e-5, f"shift {16 * k}: descriptor moved {diff:.3g}"

    def knn_oracle():
        from .data import Pose
        from .retrieval import build_index, knn
        mat = rng.standard_normal((100, 8)).astype(np.float32)
        poses = [Pose(float(i), 0.0, 0.0, 0.0) for i in range(100)]
        index = build_index(mat, poses, [str(i) for i in range(100)], "radarloc")
        for q in rng.standard_normal((10, 8)).astype(np.float32):
            got = [e.scan_id for e, _ in knn(index, q, 5)]
            d = [float(np.sqrt(((mat[i].astype(np.float64) - q.astype(np.float64)) ** 2).sum()))
                 for i in range(100)]
            want = [str(i) for i in sorted(range(100), key=lambda i: (d[i], i))[:5]]
            assert got == want, f"knn mismatch: {got} vs {want}"

    def mining_oracle():
        from .training import batch_hard_mine
        for _ in range(10):
            n = 12
            desc = rng.standard_normal((n, 6))
            labels = rng.choice([-1, 0, 1], size=(n, n)).astype(np.int8)
            got, got_skip = batch_hard_mine(desc, labels)
            want, want_skip = [], 0
            for i in range(n):
                pos = [j for j in range(n) if j != i and labels[i, j] == 1]
                neg = [j for j in range(n) if labels[i, j] == -1]
                if not pos or not neg:
                    want_skip += 1
                    continue
                best, best_d = None, None
                for j in neg:
                    dij = float(np.sqrt(((desc[i] - desc[j]) ** 2).sum()))
                    if best_d is None or dij < best_d:
                        best, best_d = j, dij
                want.append((i, pos[0], best))
            assert got == want and got_skip == want_skip, "mining mismatch"

    def recall_monotone():
        from .retrieval import report_from_rankings
        for _ in range(10):
            nq = 20
            qpos = rng.uniform(0, 100, (nq, 2))
            npos = rng.uniform(0, 100, (nq, 10, 2))
            report = report_from_rankings(npos, qpos, n_max=10, thresholds=(5.0, 10.0, 20.0))
            report.check_monotonic()

    def conv_direct():
        x = Tensor(rng.standard_normal((1, 2, 6, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)))
        b = Tensor(rng.standard_normal(3))
        got = conv2d_circular(x, w, b).data
        want = np.zeros_like(got)
        for co in range(3):
            for i in range(6):
                for j in range(5):
                    acc = b.data[co]
                    for ci in range(2):
                        for u in range(3):
                            for v in range(3):
                                jj = j + v - 1
                                if 0 <= jj < 5:
                                    acc += w.data[co, ci, u, v] * x.data[0, ci, (i + u - 1) % 6, jj]
                    want[0, co, i, j] = acc
        assert np.abs(got - want).max() < 1e-5, "conv2d mismatch vs direct loop"

    def scancontext_shift():
        from .baselines import scancontext_distance
        for _ in range(5):
            d1 = rng.random((8, 4))
            d2 = rng.random((8, 4))
            got = scancontext_distance(d1, d2)
            best = None
            for s in range(8):
                tot = 0.0
                for a in range(8):
                    u, v = d1[a], d2[(a + s) % 8]
                    nu, nv = np.sqrt((u * u).sum()), np.sqrt((v * v).sum())
                    if nu == 0 and nv == 0:
                        continue
                    if nu == 0 or nv == 0:
                        tot += 1.0
                    else:
                        tot += 1.0 - float(u @ v) / (nu * nv)
                best = tot / 8 if best is None else min(best, tot / 8)
            assert abs(got - max(best, 0.0)) < 1e-6, "scancontext distance mismatch"

    def ringkey_rotation():
        from .baselines import ring_key
        img = rng.random((64, 32)).astype(np.float32)
        base = ring_key(img, 8)
        for k in (1, 7, 16, 33):
            assert np.allclose(ring_key(np.roll(img, k, axis=0), 8), base,
                               rtol=1e-6, atol=1e-7), "ring key not rotation-invariant"

    def checkpoint_roundtrip():
        import tempfile
        from .checkpoint import load_arrays, save_arrays
        arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32),
                  "b/c": rng.standard_normal(5).astype(np.float32)}
        with tempfile.TemporaryDirectory() as td:
            path = os.path.join(td, "t.ploc")
            save_arrays(path, arrays)
            back = load_arrays(path)
        assert list(back) == list(arrays)
        for k in arrays:
            assert np.array_equal(back[k], arrays[k]), "checkpoint roundtrip not bit-exact"

    def augment_deterministic():
        from .training import AugmentationSpec, augment
        img = rng.random((32, 16)).astype(np.float32)
        a = augment(img, AugmentationSpec(), np.random.default_rng(11))
        b = augment(img, AugmentationSpec(), np.random.default_rng(11))
        assert np.array_equal(a, b), "augmentation not deterministic"

    return [
        ("gradcheck-conv3x3", conv3x3),
        ("gradcheck-conv-stride2", conv_stride2),
        ("gradcheck-transposed-conv", tconv),
        ("gradcheck-batchnorm-train", bn_train),
        ("gradcheck-batchnorm-eval", bn_eval),
        ("gradcheck-eca", eca),
        ("gradcheck-gem", gem),
        ("gradcheck-network", full_network),
        ("shift-equivariance-features", feature_shift),
        ("shift-invariance-descriptor", descriptor_shift),
        ("knn-oracle", knn_oracle),
        ("mining-oracle", mining_oracle),
        ("recall-monotonicity", recall_monotone),
        ("conv-direct-oracle", conv_direct),
        ("scancontext-shift-oracle", scancontext_shift),
        ("ringkey-rotation-invariance", ringkey_rotation),
        ("checkpoint-roundtrip", checkpoint_roundtrip),
        ("augment-determinism", augment_deterministic),
    ]


def _cmd_selftest(args):
    checks = _selftest_checks(args.seed)
    names = [n for n, _ in checks]
    if args.inject_fault is not None and args.inject_fault not in names:
        raise ValueError(f"unknown check {args.inject_fault!r}; have: {', '.join(names)}")
    failures = 0
    for name, fn in checks:
        try:
            fn()
            if name == args.inject_fault:
                raise AssertionError("injected fault")
        except AssertionError as e:
            failures += 1
            print(f"FAIL {name}: {e}")
        else:
            print(f"ok   {name}")
    print(f"selftest: {len(checks) - failures} passed, {failures} failed")
    return EXIT_OK if failures == 0 else EXIT_RUNTIME


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads_early(argv)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {"gen": _cmd_gen, "train": _cmd_train, "index": _cmd_index,
                "eval": _cmd_eval, "selftest": _cmd_selftest}
    try:
        return handlers[args.command](args)
    except BrokenPipeError:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - single CLI error boundary
        print(f"polarloc {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
