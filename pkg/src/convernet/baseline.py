"""Linear max-margin baseline over hashed n-grams, post embeddings and context features.

Each instance becomes ``max_len`` per-post blocks, right-aligned so the
target post always occupies the last block.  A block is laid out as::

    [hashed n-grams (hash_dim) | mean embedding (emb_dim) | lengths 2 |
     sentiment 3 | post_time 4 | reply_structure 2 | author 1 | background bg_dim]

The layout never changes with the enabled families; a disabled family just
leaves its slots empty.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import ConfigError, ShapeError, VersionError
from .features import SLOTS

MODEL_FORMAT_VERSION = 1
ALL_FAMILIES = ("ngrams", "embeddings", "lengths", "sentiment", "background", "post_time", "reply_structure",
                "author")
CONTEXT_FAMILIES = ("lengths", "sentiment", "post_time", "reply_structure", "author")
TEXT_FAMILIES = ("ngrams", "embeddings")


@dataclass
class FeatureSpec:
    families: tuple = ("ngrams", "lengths", "sentiment", "background", "post_time", "reply_structure", "author")
    ngram_orders: tuple = (1, 2, 3)
    hash_dim: int = 2 ** 18
    bg_dim: int = 2 ** 10
    emb_dim: int = 0
    max_len: int = 20

    def __post_init__(self):
        unknown = set(self.families) - set(ALL_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown feature families {sorted(unknown)}")
        self.families = tuple(f for f in ALL_FAMILIES if f in set(self.families))
        if not self.families:
            raise ConfigError("at least one feature family must be enabled")
        self.ngram_orders = tuple(sorted(set(int(n) for n in self.ngram_orders)))

    def without(self, *families):
        drop = set(families)
        if "text" in drop:
            drop |= set(TEXT_FAMILIES)
        d = asdict(self)
        d["families"] = tuple(f for f in self.families if f not in drop)
        return FeatureSpec(**d)

    @property
    def offsets(self):
        off, out = 0, {}
        for name, width in (("ngrams", self.hash_dim), ("embeddings", self.emb_dim), ("lengths", 2),
                            ("sentiment", 3), ("post_time", 4), ("reply_structure", 2), ("author", 1),
                            ("background", self.bg_dim)):
            out[name] = (off, width)
            off += width
        out["_block"] = (0, off)
        return out

    @property
    def block_dim(self):
        return self.offsets["_block"][1]

    @property
    def dim(self):
        return self.max_len * self.block_dim

    def to_dict(self):
        d = asdict(self)
        d["families"] = list(self.families)
        d["ngram_orders"] = list(self.ngram_orders)
        return d


# ---------------------------------------------------------------------------
# hashing


def fnv1a_hashes(strings):
    """64-bit FNV-1a of each string's UTF-8 bytes."""
    encoded = [s.encode("utf-8") for s in strings]
    offsets = np.zeros(len(encoded) + 1, dtype=np.int64)
    np.cumsum([len(e) for e in encoded], out=offsets[1:])
    buf = np.frombuffer(b"".join(encoded), dtype=np.uint8)
    return kernels.fnv1a(buf, offsets)


def hashed_slots(strings, dim):
    """(slot, sign) per string: slot from the high 63 bits, sign from the low bit."""
    h = fnv1a_hashes(strings)
    slots = ((h >> np.uint64(1)) % np.uint64(dim)).astype(np.int64)
    signs = np.where((h & np.uint64(1)) == 0, 1.0, -1.0)
    return slots, signs


def ngrams(tokens, orders):
    out = []
    for n in orders:
        for i in range(len(tokens) - n + 1):
            out.append(f"{n}:" + " ".join(tokens[i:i + n]))
    return out


def load_embeddings(path):
    """Text vectors, one ``token v1 ... vd`` per line; returns (dict, dim)."""
    vectors, dim = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if lineno == 0 and len(parts) == 2 and all(x.isdigit() for x in parts):
                continue  # word2vec "<count> <dim>" header
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError:
                continue
            if dim is None:
                dim = vec.shape[0]
            if vec.shape[0] != dim:
                raise ShapeError(f"{path}: vector for {parts[0]!r} has {vec.shape[0]} dims, expected {dim}")
            vectors[parts[0]] = vec
    if dim is None:
        raise ConfigError(f"{path}: no vectors found")
    return vectors, dim


# ---------------------------------------------------------------------------
# featurisation


def featurize_instance(instance, spec, vocab, embeddings=None):
    """Sparse (indices, values) of one instance under ``spec``."""
    fams = set(spec.families)
    if "embeddings" in fams and (embeddings is None or spec.emb_dim <= 0):
        raise ConfigError("embeddings family enabled but no pretrained embedding file supplied")
    offs = spec.offsets
    block = spec.block_dim
    s = min(instance.s, spec.max_len)
    first = instance.s - s
    acc = {}

    def put(idx, val):
        acc[idx] = acc.get(idx, 0.0) + val

    for j in range(s):
        p = first + j
        base = (spec.max_len - s + j) * block
        words = vocab.decode(instance.tokens[p]) if ("ngrams" in fams or "embeddings" in fams) else []
        if "ngrams" in fams and words:
            grams = ngrams(words, spec.ngram_orders)
            if grams:
                slots, signs = hashed_slots(grams, spec.hash_dim)
                for k, sg in zip(slots, signs):
                    put(base + offs["ngrams"][0] + int(k), sg)
        if "embeddings" in fams:
            found = [embeddings[w] for w in words if w in embeddings]
            if found:
                mean = np.mean(found, axis=0)
                for k in np.flatnonzero(mean):
                    put(base + offs["embeddings"][0] + int(k), float(mean[k]))
        ctx = instance.context[p] if len(instance.context) else None
        for fam in CONTEXT_FAMILIES:
            if fam in fams and ctx is not None:
                vals = ctx[SLOTS[fam]]
                for k in np.flatnonzero(vals):
                    put(base + offs[fam][0] + int(k), float(vals[k]))
        if "background" in fams:
            bg = int(instance.background[p]) if len(instance.background) else 0
            if bg > 0:
                put(base + offs["background"][0] + bg % spec.bg_dim, 1.0)
    idx = np.array(sorted(k for k, v in acc.items() if v != 0.0), dtype=np.int64)
    vals = np.array([acc[k] for k in idx], dtype=np.float64)
    return idx, vals


def featurize_all(instances, spec, vocab, embeddings=None):
    indptr, indices, data = [0], [], []
    for inst in instances:
        idx, vals = featurize_instance(inst, spec, vocab, embeddings)
        indices.append(idx)
        data.append(vals)
        indptr.append(indptr[-1] + len(idx))
    return sp.csr_matrix((np.concatenate(data) if data else np.zeros(0),
                          np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
                          np.array(indptr, dtype=np.int64)), shape=(len(instances), spec.dim))


# ---------------------------------------------------------------------------
# model


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    spec: FeatureSpec
    lam: float
    history: list = field(default_factory=list)

    def margins(self, X):
        if X.shape[1] != self.w.shape[0]:
            raise ShapeError(f"feature dim {X.shape[1]} != model dim {self.w.shape[0]}")
        return np.asarray(X @ self.w).ravel() + self.b


def score_linear(model, x):
    """Raw margin w.x + b of a dense vector, (indices, values) pair, or CSR matrix."""
    if isinstance(x, tuple):
        idx, vals = x
        return float(np.dot(model.w[idx], vals) + model.b)
    if sp.issparse(x):
        return model.margins(x)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.w.shape[0]:
        raise ShapeError(f"feature dim {x.shape[-1]} != model dim {model.w.shape[0]}")
    return x @ model.w + model.b


def squash(margins):
    """Monotone map of margins into (0, 1); 0.5 at the decision boundary."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(margins, dtype=np.float64)))


def lam_from_c(C, n):
    return 1.0 / (C * n)


def hinge_objective(w, b, X, y01, lam):
    y = np.where(np.asarray(y01) == 1, 1.0, -1.0)
    m = np.asarray(X @ w).ravel() + b
    return 0.5 * lam * float(w @ w) + float(np.maximum(0.0, 1.0 - y * m).mean())


def hinge_subgradient(w, b, X, y01, lam):
    """(d/dw, d/db) of the regularised mean hinge loss; exact away from margin == 1."""
    y = np.where(np.asarray(y01) == 1, 1.0, -1.0)
    m = np.asarray(X @ w).ravel() + b
    viol = (y * m < 1.0).astype(np.float64)
    coef = -(viol * y) / X.shape[0]
    return lam * w + np.asarray(X.T @ coef).ravel(), float(coef.sum())


def train_linear(X, y01, spec, lam, epochs=10, seed=0):
    """L2-regularised hinge loss by seeded SGD (step 1 / (1 + lam t)).

    The returned weights average the iterates at the end of the last
    ``ceil(epochs / 2)`` epochs.
    """
    y01 = np.asarray(y01)
    if len(np.unique(y01)) < 2:
        raise ConfigError("linear training needs both classes")
    if not lam > 0:
        raise ConfigError("regularisation strength must be positive")
    X = sp.csr_matrix(X, dtype=np.float64)
    X.sum_duplicates()
    y = np.where(y01 == 1, 1.0, -1.0)
    n, d = X.shape
    rng = np.random.default_rng(seed)
    v = np.zeros(d)
    scale, bias, t = 1.0, 0.0, 0
    keep_from = epochs - (epochs + 1) // 2
    w_sum, b_sum, kept = np.zeros(d), 0.0, 0
    history = []
    indptr = X.indptr.astype(np.int64)
    indices = X.indices.astype(np.int64)
    for epoch in range(epochs):
        order = rng.permutation(n).astype(np.int64)
        scale, bias, t = kernels.hinge_epoch(indptr, indices, X.data, y, order, v, scale, bias, t, lam)
        w = scale * v
        history.append(hinge_objective(w, bias, X, y01, lam))
        if epoch >= keep_from:
            w_sum += w
            b_sum += bias
            kept += 1
    return LinearModel(w_sum / kept, b_sum / kept, spec, lam, history)


def save_linear(model, path):
    header = {"format_version": MODEL_FORMAT_VERSION, "spec": model.spec.to_dict(), "lam": model.lam,
              "D_total": int(model.w.shape[0])}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.concatenate([model.w, [model.b]]).astype("<f4").tobytes())


def load_linear(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        blob = fh.read()
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionError(f"linear model version {header.get('format_version')} != {MODEL_FORMAT_VERSION}")
    from .errors import CorruptionError

    D = header["D_total"]
    if len(blob) != 4 * (D + 1):
        raise CorruptionError(f"{path}: expected {4 * (D + 1)} weight bytes, found {len(blob)}")
    arr = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    spec = FeatureSpec(**header["spec"])
    return LinearModel(arr[:-1].copy(), float(arr[-1]), spec, header["lam"])
