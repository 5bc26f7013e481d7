"""The compiled and numpy kernel paths must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from convernet import kernels as K

pytestmark = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not importable")


def both(name, *args):
    return getattr(K, name + "_nb")(*args), getattr(K, name + "_np")(*args)


def assert_same(a, b, tol=1e-12):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            assert_same(x, y, tol)
    else:
        np.testing.assert_allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), rtol=tol,
                                   atol=tol)


def test_layer_norm_kernels(rng):
    z = rng.normal(size=(12, 5))
    z[3] = 2.0  # constant row hits the sigma floor
    alpha, beta = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    fwd_nb, fwd_np = both("ln_forward", z, alpha, beta, 1e-8)
    assert_same(fwd_nb, fwd_np)
    assert fwd_np[3][3] and not fwd_np[3][0]
    g = rng.normal(size=(12, 5))
    assert_same(K.ln_backward_nb(g, *fwd_np[1:4], alpha), K.ln_backward_np(g, *fwd_np[1:4], alpha))


@pytest.mark.parametrize("per_length", [True, False])
def test_attention_kernels(rng, per_length):
    hs = rng.normal(size=(4, 6, 3))
    w = rng.normal(size=(6, 6))
    lengths = np.array([6, 1, 3, 4])
    fwd_nb, fwd_np = both("attention_forward", hs, w, lengths, per_length)
    assert_same(fwd_nb, fwd_np)
    g = rng.normal(size=(4, 3))
    assert_same(K.attention_backward_nb(g, hs, fwd_np[1], lengths, 6, per_length),
                K.attention_backward_np(g, hs, fwd_np[1], lengths, 6, per_length))


def test_pool_kernels(rng):
    table = rng.normal(size=(9, 4))
    table[0] = 0
    counts = np.array([[3, 0], [1, 2]])
    ids = rng.integers(1, 9, (2, 2, 3)) * (np.arange(3)[None, None] < counts[:, :, None])
    assert_same(*both("pool_forward", table, ids, counts))
    g = rng.normal(size=(2, 2, 4))
    out_nb, out_np = both("pool_backward", g, ids, counts, 9)
    assert_same(out_nb, out_np)
    assert np.all(out_np[0] == 0)


def test_metric_kernels(rng):
    for _ in range(20):
        n = int(rng.integers(2, 60))
        scores = rng.integers(0, 5, n).astype(np.float64)  # many ties
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        assert_same(*both("auc", scores, labels))
        assert_same(*both("ap", scores, labels))


@pytest.mark.parametrize("code", [0, 1, 2])
def test_permutation_kernels(rng, code):
    a, b = rng.random(40), rng.random(40)
    a[:10] = b[:10] = np.round(a[:10], 1)  # ties within and across systems
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    swaps = rng.random((25, 40)) < 0.5
    assert_same(*both("permutation_deltas", a, b, labels, swaps, code, 0.5))


def test_fnv1a_reference_values():
    words = [b"", b"a", b"foobar"]
    buf = np.frombuffer(b"".join(words), dtype=np.uint8)
    offsets = np.array([0, 0, 1, 7], dtype=np.int64)
    expected = np.array([0xCBF29CE484222325, 0xAF63DC4C8601EC8C, 0x85944171F73967E8], dtype=np.uint64)
    for fn in (K.fnv1a_nb, K.fnv1a_np):
        assert np.array_equal(fn(buf, offsets), expected)


def test_hinge_kernels(rng):
    import scipy.sparse as sp

    X = sp.random(30, 50, density=0.2, random_state=1, format="csr")
    y = np.where(rng.random(30) < 0.5, 1.0, -1.0)
    order = rng.permutation(30).astype(np.int64)
    args = (X.indptr.astype(np.int64), X.indices.astype(np.int64), X.data)
    v1, v2 = np.zeros(50), np.zeros(50)
    r1 = K.hinge_epoch_nb(*args, y, order, v1, 1.0, 0.0, 0, 0.01)
    r2 = K.hinge_epoch_np(*args, y, order, v2, 1.0, 0.0, 0, 0.01)
    assert_same(tuple(map(float, r1)), tuple(map(float, r2)))
    assert_same(v1, v2)


def test_select_rebinds_names():
    try:
        K.select(False)
        assert K.auc is K.auc_np and not K.USE_NUMBA
        K.select(True)
        assert K.auc is K.auc_nb and K.USE_NUMBA
    finally:
        K.select(not K._flag_disabled())


def test_env_flag_forces_numpy():
    code = "from convernet import kernels as K; print(K.USE_NUMBA, K.auc is K.auc_np)"
    env = dict(os.environ, CONVERNET_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


def test_model_forward_matches_across_backends():
    import gradient_suite as gs
    from convernet import autodiff as ad

    rng = np.random.default_rng(0)
    batch = gs.tiny_batch(rng, [3, 1, 2])
    results = []
    try:
        for flag in (True, False):
            K.select(flag)
            model = gs.tiny_model(seed=2)
            for p in model.parameters():
                p.grad = None
            with ad.Tape():
                loss = ad.bce_loss(model(batch, training=True), np.array([1, 0, 1]))
            ad.backward(loss)
            results.append((loss.item(), [p.grad.copy() for p in model.parameters()]))
    finally:
        K.select(not K._flag_disabled())
    assert results[0][0] == pytest.approx(results[1][0], rel=1e-12)
    for g1, g2 in zip(results[0][1], results[1][1]):
        np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-13)
