"""Time every kernel on both backends, plus one full training epoch.

    python3 benchmarks/bench_kernels.py [--repeat N] [--csv PATH]

Compilation happens in a warm-up call and is not timed.
"""
import argparse
import csv
import sys
import time
import warnings

import numpy as np
import scipy.sparse as sp

from convernet import kernels as K


def cases(rng):
    """name -> argument tuple, at sizes typical of a training batch or a test split."""
    B, T, W, H, V = 32, 20, 40, 64, 20000
    z = rng.normal(size=(B * T * 2, 4 * H))  # two directions, four gates
    alpha, beta = np.ones((1, z.shape[1])), np.zeros((1, z.shape[1]))
    ln = K.ln_forward_np(z, alpha, beta, 1e-8)
    hs = rng.normal(size=(B, T, 2 * H))
    w = rng.normal(size=(T, T))
    lengths = rng.integers(1, T + 1, B)
    attn = K.attention_forward_np(hs, w, lengths, True)[1]
    table = rng.normal(size=(V, 64))
    counts = rng.integers(0, W + 1, (B, T))
    ids = rng.integers(1, V, (B, T, W)) * (np.arange(W)[None, None] < counts[..., None])
    n = 10000
    scores, labels = rng.random(n), rng.integers(0, 2, n)
    a, b = rng.random(1000), rng.random(1000)
    lab = rng.integers(0, 2, 1000)
    swaps = rng.random((200, 1000)) < 0.5
    words = [f"1:word{i}".encode() for i in range(50000)]
    buf = np.frombuffer(b"".join(words), dtype=np.uint8)
    offsets = np.concatenate([[0], np.cumsum([len(x) for x in words])]).astype(np.int64)
    X = sp.random(5000, 2 ** 16, density=2e-3, random_state=0, format="csr")
    y = np.where(rng.random(5000) < 0.5, 1.0, -1.0)
    order = rng.permutation(5000).astype(np.int64)
    hinge = (X.indptr.astype(np.int64), X.indices.astype(np.int64), X.data, y, order)
    return {
        "ln_forward": (z, alpha, beta, 1e-8),
        "ln_backward": (rng.normal(size=z.shape), ln[1], ln[2], ln[3], alpha),
        "attention_forward": (hs, w, lengths, True),
        "attention_backward": (rng.normal(size=(B, 2 * H)), hs, attn, lengths, T, True),
        "pool_forward": (table, ids, counts),
        "pool_backward": (rng.normal(size=(B, T, 64)), ids, counts, V),
        "auc": (scores, labels),
        "ap": (scores, labels),
        "permutation_deltas": (a, b, lab, swaps, 0, 0.5),
        "fnv1a": (buf, offsets),
        "hinge_epoch": hinge,
    }


def fresh(name, args):
    # the hinge kernel updates its weight vector in place
    if name == "hinge_epoch":
        return args + (np.zeros(2 ** 16), 1.0, 0.0, 0, 1e-4)
    return args


def best_of(fn, name, args, repeat):
    fn(*fresh(name, args))
    times = []
    for _ in range(repeat):
        call_args = fresh(name, args)
        t0 = time.perf_counter()
        fn(*call_args)
        times.append(time.perf_counter() - t0)
    return min(times)


def epoch_time(use_numba, repeat):
    from convernet import train as T
    from convernet.config import ModelConfig
    from convernet.features import CONTEXT_DIM
    from convernet.layers import ConverNet
    from convernet.synthetic import planted_instances

    K.select(use_numba)
    insts = planted_instances(256, seed=0, max_len=12)
    cfg = ModelConfig(vocab_size=50, d_context=CONTEXT_DIM, max_len=12)
    out = []
    for _ in range(repeat + 1):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = ConverNet(cfg)
        opt = T.make_optimizer(model, cfg)
        t0 = time.perf_counter()
        T.train_epoch(model, opt, insts, cfg, np.random.default_rng(0))
        out.append(time.perf_counter() - t0)
    return min(out[1:])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", metavar="PATH")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, call_args in cases(np.random.default_rng(0)).items():
        t_nb = best_of(getattr(K, name + "_nb"), name, call_args, args.repeat)
        t_np = best_of(getattr(K, name + "_np"), name, call_args, args.repeat)
        rows.append((name, t_nb, t_np))
    initial = K.USE_NUMBA
    try:
        rows.append(("train_epoch (256 instances)", epoch_time(True, args.repeat), epoch_time(False, args.repeat)))
    finally:
        K.select(initial)
    print(f"{'kernel':<30} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, t_nb, t_np in rows:
        print(f"{name:<30} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:8.2f}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "numba_seconds", "numpy_seconds"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
