import numpy as np
import pytest
import scipy.sparse as sp

from convernet import baseline as BL
from convernet.baseline import FeatureSpec, featurize_instance, hashed_slots, train_linear
from convernet.data import Instance, Vocabulary
from convernet.errors import ConfigError, CorruptionError, ShapeError, VersionError
from convernet.features import CONTEXT_DIM, SLOTS
from convernet.metrics import auc

VOCAB = Vocabulary(["hello", "world", "bye"])  # ids 2, 3, 4


def small_spec(families, **kw):
    d = dict(hash_dim=64, bg_dim=8, max_len=4)
    d.update(kw)
    return FeatureSpec(families, **d)


def instance(tokens, context=None, background=None):
    s = len(tokens)
    ctx = np.zeros((s, CONTEXT_DIM)) if context is None else np.asarray(context, dtype=float)
    return Instance("T", "p", 1, tokens, ctx, background or [0] * s)


def test_spec_validation_and_layout():
    with pytest.raises(ConfigError):
        FeatureSpec(())
    with pytest.raises(ConfigError):
        FeatureSpec(("lengths", "colour"))
    spec = small_spec(("author", "ngrams"))
    assert spec.families == ("ngrams", "author")
    assert spec.block_dim == 64 + 2 + 3 + 4 + 2 + 1 + 8 and spec.dim == 4 * spec.block_dim
    assert spec.without("text").families == ("author",)
    with pytest.raises(ConfigError):
        spec.without("author", "ngrams")


def test_lengths_only_schema():
    ctx = np.random.default_rng(0).uniform(0.1, 1, (2, CONTEXT_DIM))
    idx, vals = featurize_instance(instance([[2], [3]], ctx), small_spec(("lengths",)), VOCAB)
    assert len(idx) <= 2 * 2
    assert set(idx % small_spec(("lengths",)).block_dim) <= {64, 65}


def test_repeated_unigram_counts_twice():
    spec = small_spec(("ngrams",), ngram_orders=(1,))
    idx, vals = featurize_instance(instance([[2, 2]]), spec, VOCAB)
    (slot,), (sign,) = hashed_slots(["1:hello"], 64)
    last = 3 * spec.block_dim
    assert idx.tolist() == [last + slot] and vals.tolist() == [2.0 * sign]


def test_hashing_is_fixed():
    slots, signs = hashed_slots(["1:hello", "1:hello", "2:hello world"], 2 ** 18)
    assert slots[0] == slots[1] and signs[0] == signs[1]
    h = BL.fnv1a_hashes(["1:hello"])[0]
    assert slots[0] == (int(h) >> 1) % 2 ** 18 and signs[0] == (1.0 if int(h) % 2 == 0 else -1.0)
    assert int(BL.fnv1a_hashes(["a"])[0]) == 0xAF63DC4C8601EC8C


def test_full_spec_fixture_vector():
    spec = small_spec(BL.ALL_FAMILIES, ngram_orders=(1, 2), emb_dim=2)
    emb = {"hello": np.array([1.0, 3.0]), "world": np.array([3.0, -1.0])}
    ctx = np.zeros((2, CONTEXT_DIM))
    ctx[0, SLOTS["lengths"]] = [0.5, 0.25]
    ctx[1, SLOTS["sentiment"]] = [0.0, 1.0, 0.0]
    ctx[1, SLOTS["post_time"]] = [0.0, 1.0, 0.0, 0.0]
    ctx[1, SLOTS["author"]] = [2.0]
    inst = instance([[2, 3], [4]], ctx, background=[9, 9])
    idx, vals = featurize_instance(inst, spec, VOCAB, emb)
    B = spec.block_dim
    off = {k: v[0] for k, v in spec.offsets.items()}
    expected = {}

    def add(i, v):
        expected[i] = expected.get(i, 0.0) + v

    b0, b1 = 2 * B, 3 * B  # two posts, right-aligned in four blocks
    for gram in ("1:hello", "1:world", "2:hello world"):
        (s,), (g,) = hashed_slots([gram], 64)
        add(b0 + s, g)
    (s,), (g,) = hashed_slots(["1:bye"], 64)
    add(b1 + s, g)
    add(b0 + off["embeddings"], 2.0)
    add(b0 + off["embeddings"] + 1, 1.0)
    add(b0 + off["lengths"], 0.5)
    add(b0 + off["lengths"] + 1, 0.25)
    add(b1 + off["sentiment"] + 1, 1.0)
    add(b1 + off["post_time"] + 1, 1.0)
    add(b1 + off["author"], 2.0)
    add(b0 + off["background"] + 1, 1.0)  # 9 % 8
    add(b1 + off["background"] + 1, 1.0)
    expected = {k: v for k, v in expected.items() if v != 0}
    assert dict(zip(idx.tolist(), vals.tolist())) == expected


def test_embeddings_need_a_file(tmp_path):
    with pytest.raises(ConfigError):
        featurize_instance(instance([[2]]), small_spec(("embeddings",), emb_dim=2), VOCAB)
    p = tmp_path / "vec.txt"
    p.write_text("2 3\nhello 1 2 3\nworld 0 0 1\n", encoding="utf-8")
    vecs, dim = BL.load_embeddings(p)
    assert dim == 3 and vecs["world"].tolist() == [0, 0, 1]
    p.write_text("hello 1 2 3\nworld 0 1\n", encoding="utf-8")
    with pytest.raises(ShapeError):
        BL.load_embeddings(p)


def test_long_instances_keep_the_last_posts():
    spec = small_spec(("lengths",), max_len=2)
    ctx = np.zeros((3, CONTEXT_DIM))
    ctx[:, 0] = [1.0, 2.0, 3.0]
    idx, vals = featurize_instance(instance([[2]] * 3, ctx), spec, VOCAB)
    assert vals.tolist() == [2.0, 3.0] and idx.tolist() == [64, spec.block_dim + 64]


def test_ablation_zeroes_only_its_slots():
    rng = np.random.default_rng(1)
    ctx = rng.uniform(0.1, 1, (3, CONTEXT_DIM))
    inst = instance([[2, 3], [4], [3, 3]], ctx, background=[3, 3, 3])
    full = small_spec(BL.ALL_FAMILIES[:1] + BL.ALL_FAMILIES[2:])
    dense = lambda spec: sp.csr_matrix(BL.featurize_all([inst], spec, VOCAB)).toarray()[0]
    X = dense(full)
    for fam in full.families:
        Y = dense(full.without(fam))
        start, width = full.offsets[fam]
        mask = np.zeros(full.block_dim, dtype=bool)
        mask[start:start + width] = True
        mask = np.tile(mask, full.max_len)
        assert np.all(Y[mask] == 0) and np.array_equal(Y[~mask], X[~mask])
        assert np.any(X[mask] != 0)


def toy(n=40, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    X += np.where(y[:, None] == 1, 0.3, -0.3)  # widen the margin
    return sp.csr_matrix(X), y


def test_separable_toy_is_fit():
    X, y = toy()
    spec = small_spec(("lengths",))
    m = train_linear(X, y, spec, lam=1e-4, epochs=30)
    assert np.mean((m.margins(X) > 0) == (y == 1)) == 1.0


def test_weights_shrink_with_lambda():
    X, y = toy(80, seed=2)
    norms = [np.linalg.norm(train_linear(X, y, None, lam=lam, epochs=20).w) for lam in (1e-3, 1e-2, 1e-1, 1, 10)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert BL.lam_from_c(10.0, 50) == pytest.approx(1 / 500)


def test_training_determinism_and_errors():
    X, y = toy()
    a, b = train_linear(X, y, None, 0.01, seed=5), train_linear(X, y, None, 0.01, seed=5)
    assert np.array_equal(a.w, b.w) and a.b == b.b
    with pytest.raises(ConfigError):
        train_linear(X, np.ones(40, dtype=int), None, 0.01)


def test_training_lowers_the_objective():
    X, y = toy(100, seed=3)
    m = train_linear(X, y, None, lam=0.01, epochs=10)
    assert BL.hinge_objective(m.w, m.b, X, y, 0.01) < BL.hinge_objective(np.zeros(2), 0.0, X, y, 0.01)


def test_score_linear():
    X, y = toy()
    m = train_linear(X, y, None, 0.01)
    zero = BL.LinearModel(np.zeros(2), 0.0, None, 0.01)
    assert np.all(BL.score_linear(zero, X) == 0)
    neg = BL.LinearModel(-m.w, -m.b, None, 0.01)
    assert np.array_equal(BL.score_linear(neg, X), -BL.score_linear(m, X))
    margins = BL.score_linear(m, X)
    assert auc(margins, y) == auc(BL.squash(margins), y)
    dense = X.toarray()
    assert BL.score_linear(m, (np.array([0, 1]), dense[0])) == pytest.approx(margins[0])
    with pytest.raises(ShapeError):
        BL.score_linear(m, np.zeros(3))
    with pytest.raises(ShapeError):
        m.margins(sp.csr_matrix(np.zeros((1, 3))))


def test_hinge_subgradient_matches_numeric():
    rng = np.random.default_rng(4)
    X = sp.csr_matrix(rng.normal(size=(12, 5)))
    y = rng.integers(0, 2, 12)
    w, b, lam = rng.normal(size=5), 0.3, 0.1
    gw, gb = BL.hinge_subgradient(w, b, X, y, lam)
    h = 1e-6
    num = np.array([(BL.hinge_objective(w + h * e, b, X, y, lam) - BL.hinge_objective(w - h * e, b, X, y, lam))
                    / (2 * h) for e in np.eye(5)])
    num_b = (BL.hinge_objective(w, b + h, X, y, lam) - BL.hinge_objective(w, b - h, X, y, lam)) / (2 * h)
    a, n = np.append(gw, gb), np.append(num, num_b)
    assert np.linalg.norm(a - n) / np.linalg.norm(a) < 1e-6


def test_save_load(tmp_path):
    X, y = toy()
    spec = small_spec(("lengths", "author"))
    m = train_linear(X, y, spec, 0.01)
    m = BL.LinearModel(np.concatenate([m.w, np.zeros(spec.dim - 2)]), m.b, spec, 0.01)
    path = tmp_path / "linear.model"
    BL.save_linear(m, path)
    back = BL.load_linear(path)
    assert back.spec == spec and back.lam == 0.01
    np.testing.assert_allclose(back.w, m.w, rtol=1e-6, atol=1e-7)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(CorruptionError):
        BL.load_linear(path)
    path.write_bytes(raw.replace(b'"format_version": 1', b'"format_version": 7'))
    with pytest.raises(VersionError):
        BL.load_linear(path)
