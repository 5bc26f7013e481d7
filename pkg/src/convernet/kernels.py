"""Hot numeric kernels.

Every kernel has two implementations: a loop version compiled with
``numba.njit`` and a vectorised numpy version.  The numba path is used when
numba imports cleanly and ``CONVERNET_DISABLE_NUMBA`` is unset (or ``0``).
Both paths are always importable as ``<name>_nb`` / ``<name>_np`` so tests
and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
import os

import numpy as np
from scipy.stats import rankdata

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _flag_disabled():
    return os.environ.get("CONVERNET_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)

METRIC_CODES = {"auc": 0, "accuracy": 1, "map": 2}


# ---------------------------------------------------------------------------
# layer normalisation over the last axis, gains/shifts shared per group row
# z: [R, H], alpha/beta: [G, H], row r uses alpha[r % G]


def ln_forward_np(z, alpha, beta, eps):
    R, H = z.shape
    G = alpha.shape[0]
    zz = z.reshape(R // G, G, H)
    mu = zz.mean(axis=-1, keepdims=True)
    d = zz - mu
    std = np.sqrt((d * d).mean(axis=-1, keepdims=True))
    floored = std < eps
    sigma = np.where(floored, eps, std)
    xhat = d / sigma
    out = xhat * alpha + beta
    return out.reshape(R, H), xhat.reshape(R, H), sigma.reshape(R), floored.reshape(R)


def ln_backward_np(g, xhat, sigma, floored, alpha):
    R, H = g.shape
    G = alpha.shape[0]
    g3 = g.reshape(R // G, G, H)
    x3 = xhat.reshape(R // G, G, H)
    dalpha = (g3 * x3).sum(axis=0)
    dbeta = g3.sum(axis=0)
    gx = g3 * alpha
    proj = (gx * x3).mean(axis=-1, keepdims=True)
    proj = np.where(floored.reshape(R // G, G, 1), 0.0, proj)
    dz = (gx - gx.mean(axis=-1, keepdims=True) - x3 * proj) / sigma.reshape(R // G, G, 1)
    return dz.reshape(R, H), dalpha, dbeta


@njit(cache=True)
def ln_forward_nb(z, alpha, beta, eps):
    R, H = z.shape
    G = alpha.shape[0]
    out = np.empty_like(z)
    xhat = np.empty_like(z)
    sigma = np.empty(R)
    floored = np.zeros(R, dtype=np.bool_)
    for r in range(R):
        gi = r % G
        mu = 0.0
        for j in range(H):
            mu += z[r, j]
        mu /= H
        var = 0.0
        for j in range(H):
            d = z[r, j] - mu
            var += d * d
        std = np.sqrt(var / H)
        if std < eps:
            std = eps
            floored[r] = True
        sigma[r] = std
        for j in range(H):
            xh = (z[r, j] - mu) / std
            xhat[r, j] = xh
            out[r, j] = xh * alpha[gi, j] + beta[gi, j]
    return out, xhat, sigma, floored


@njit(cache=True)
def ln_backward_nb(g, xhat, sigma, floored, alpha):
    R, H = g.shape
    G = alpha.shape[0]
    dz = np.empty_like(g)
    dalpha = np.zeros_like(alpha)
    dbeta = np.zeros_like(alpha)
    gx = np.empty(H)
    for r in range(R):
        gi = r % G
        m1 = 0.0
        m2 = 0.0
        for j in range(H):
            dalpha[gi, j] += g[r, j] * xhat[r, j]
            dbeta[gi, j] += g[r, j]
            gx[j] = g[r, j] * alpha[gi, j]
            m1 += gx[j]
            m2 += gx[j] * xhat[r, j]
        m1 /= H
        m2 /= H
        if floored[r]:
            m2 = 0.0
        for j in range(H):
            dz[r, j] = (gx[j] - m1 - xhat[r, j] * m2) / sigma[r]
    return dz, dalpha, dbeta


# ---------------------------------------------------------------------------
# length-conditioned attention: logits for an instance of length s are
# W[0:s, s-1] (or W[0:s, 0] when shared across lengths)


def attention_forward_np(hs, w, lengths, per_length):
    B, T, D = hs.shape
    cols = lengths - 1 if per_length else np.zeros(B, dtype=np.int64)
    pos = np.arange(T)
    valid = pos[None, :] < lengths[:, None]
    rows = np.minimum(pos, w.shape[0] - 1)
    logits = w[rows[None, :], cols[:, None]]
    logits = np.where(valid, logits, -np.inf)
    m = logits.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(logits - m), 0.0)
    attn = e / e.sum(axis=1, keepdims=True)
    out = np.einsum("bt,btd->bd", attn, hs)
    return out, attn


def attention_backward_np(g, hs, attn, lengths, L, per_length):
    B, T, D = hs.shape
    dh = attn[:, :, None] * g[:, None, :]
    da = np.einsum("bd,btd->bt", g, hs)
    dl = attn * (da - (attn * da).sum(axis=1, keepdims=True))
    dw = np.zeros((L, L))
    cols = lengths - 1 if per_length else np.zeros(B, dtype=np.int64)
    pos = np.arange(T)
    valid = pos[None, :] < lengths[:, None]
    bi, ti = np.nonzero(valid)
    np.add.at(dw, (ti, cols[bi]), dl[bi, ti])
    return dh, dw


@njit(cache=True)
def attention_forward_nb(hs, w, lengths, per_length):
    B, T, D = hs.shape
    out = np.zeros((B, D))
    attn = np.zeros((B, T))
    for b in range(B):
        s = lengths[b]
        col = s - 1 if per_length else 0
        m = -np.inf
        for k in range(s):
            if w[k, col] > m:
                m = w[k, col]
        z = 0.0
        for k in range(s):
            e = np.exp(w[k, col] - m)
            attn[b, k] = e
            z += e
        for k in range(s):
            attn[b, k] /= z
            a = attn[b, k]
            for j in range(D):
                out[b, j] += a * hs[b, k, j]
    return out, attn


@njit(cache=True)
def attention_backward_nb(g, hs, attn, lengths, L, per_length):
    B, T, D = hs.shape
    dh = np.zeros_like(hs)
    dw = np.zeros((L, L))
    da = np.zeros(T)
    for b in range(B):
        s = lengths[b]
        col = s - 1 if per_length else 0
        tot = 0.0
        for k in range(s):
            acc = 0.0
            a = attn[b, k]
            for j in range(D):
                dh[b, k, j] = a * g[b, j]
                acc += g[b, j] * hs[b, k, j]
            da[k] = acc
            tot += a * acc
        for k in range(s):
            dw[k, col] += attn[b, k] * (da[k] - tot)
    return dh, dw


# ---------------------------------------------------------------------------
# embedding lookup + mean pooling over the first counts[b, t] ids of a post


def pool_forward_np(table, ids, counts):
    W = ids.shape[2]
    mask = np.arange(W)[None, None, :] < counts[:, :, None]
    summed = (table[ids] * mask[..., None]).sum(axis=2)
    denom = np.maximum(counts, 1)[..., None].astype(np.float64)
    return summed / denom


def pool_backward_np(g, ids, counts, V):
    W = ids.shape[2]
    mask = np.arange(W)[None, None, :] < counts[:, :, None]
    scaled = g / np.maximum(counts, 1)[..., None]
    bi, ti, wi = np.nonzero(mask)
    dtable = np.zeros((V, g.shape[2]))
    np.add.at(dtable, ids[bi, ti, wi], scaled[bi, ti])
    dtable[0] = 0.0
    return dtable


@njit(cache=True)
def pool_forward_nb(table, ids, counts):
    B, T, W = ids.shape
    d = table.shape[1]
    out = np.zeros((B, T, d))
    for b in range(B):
        for t in range(T):
            n = counts[b, t]
            if n == 0:
                continue
            for w in range(n):
                row = ids[b, t, w]
                for j in range(d):
                    out[b, t, j] += table[row, j]
            for j in range(d):
                out[b, t, j] /= n
    return out


@njit(cache=True)
def pool_backward_nb(g, ids, counts, V):
    B, T, W = ids.shape
    d = g.shape[2]
    dtable = np.zeros((V, d))
    for b in range(B):
        for t in range(T):
            n = counts[b, t]
            if n == 0:
                continue
            for w in range(n):
                row = ids[b, t, w]
                for j in range(d):
                    dtable[row, j] += g[b, t, j] / n
    for j in range(d):
        dtable[0, j] = 0.0
    return dtable


# ---------------------------------------------------------------------------
# ranking metrics


def auc_np(scores, labels):
    ranks = rankdata(scores)
    pos = labels == 1
    n_pos = pos.sum()
    n_neg = labels.shape[0] - n_pos
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@njit(cache=True)
def auc_nb(scores, labels):
    n = scores.shape[0]
    order = np.argsort(scores)  # tie groups are averaged, so stability is not needed
    rank_sum = 0.0
    n_pos = 0
    i = 0
    while i < n:
        j = i
        while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        avg = (i + j + 2) / 2.0
        for k in range(i, j + 1):
            if labels[order[k]] == 1:
                rank_sum += avg
                n_pos += 1
        i = j + 1
    n_neg = n - n_pos
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def ap_np(scores, labels):
    """AP of arrays already arranged in tie-break (instance id) order."""
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    cum = np.cumsum(hits)
    k = np.arange(1, scores.shape[0] + 1)
    return (cum[hits] / k[hits]).mean()


@njit(cache=True)
def ap_nb(scores, labels):
    order = np.argsort(-scores, kind="mergesort")
    hits = 0
    total = 0.0
    for k in range(order.shape[0]):
        if labels[order[k]] == 1:
            hits += 1
            total += hits / (k + 1.0)
    return total / hits


def _metric_rows_np(m, labels, code, threshold):
    if code == 1:
        return ((m >= threshold) == (labels == 1)[None, :]).mean(axis=1)
    if code == 0:
        ranks = rankdata(m, axis=1)
        pos = labels == 1
        n_pos = pos.sum()
        n_neg = labels.shape[0] - n_pos
        return (ranks[:, pos].sum(axis=1) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    order = np.argsort(-m, axis=1, kind="stable")
    hits = labels[order] == 1
    cum = np.cumsum(hits, axis=1)
    k = np.arange(1, m.shape[1] + 1)[None, :]
    return np.where(hits, cum / k, 0.0).sum(axis=1) / hits[0].sum()


def permutation_deltas_np(a, b, labels, swaps, code, threshold):
    pa = np.where(swaps, b[None, :], a[None, :])
    pb = np.where(swaps, a[None, :], b[None, :])
    return _metric_rows_np(pa, labels, code, threshold) - _metric_rows_np(pb, labels, code, threshold)


@njit(cache=True)
def _metric_nb(s, labels, code, threshold):
    if code == 0:
        return auc_nb(s, labels)
    if code == 1:
        hit = 0
        for i in range(s.shape[0]):
            if (s[i] >= threshold) == (labels[i] == 1):
                hit += 1
        return hit / s.shape[0]
    return ap_nb(s, labels)


@njit(cache=True)
def _permutation_auc_nb(a, b, labels, swaps):
    """AUC deltas from one sort of the pooled 2n scores.

    Each round keeps, per instance, one of its two values for system a and
    the other for system b; a single pass over tie groups of the pooled
    order then counts positive/negative pairs for both systems.
    """
    R, n = swaps.shape
    pooled = np.concatenate((a, b))
    order = np.argsort(pooled)
    n_pos = 0
    for i in range(n):
        if labels[i] == 1:
            n_pos += 1
    pairs = n_pos * (n - n_pos)
    out = np.empty(R)
    for r in range(R):
        wins_a = 0.0
        wins_b = 0.0
        neg_a = 0
        neg_b = 0
        k = 0
        while k < 2 * n:
            j = k
            while j + 1 < 2 * n and pooled[order[j + 1]] == pooled[order[k]]:
                j += 1
            gp_a = gn_a = gp_b = gn_b = 0
            for m in range(k, j + 1):
                idx = order[m]
                inst = idx % n
                # an a-value belongs to system a unless the instance is swapped
                to_a = (idx < n) != swaps[r, inst]
                if labels[inst] == 1:
                    if to_a:
                        gp_a += 1
                    else:
                        gp_b += 1
                else:
                    if to_a:
                        gn_a += 1
                    else:
                        gn_b += 1
            wins_a += gp_a * (neg_a + 0.5 * gn_a)
            wins_b += gp_b * (neg_b + 0.5 * gn_b)
            neg_a += gn_a
            neg_b += gn_b
            k = j + 1
        out[r] = (wins_a - wins_b) / pairs
    return out


@njit(cache=True)
def permutation_deltas_nb(a, b, labels, swaps, code, threshold):
    if code == 0:
        return _permutation_auc_nb(a, b, labels, swaps)
    R, n = swaps.shape
    out = np.empty(R)
    pa = np.empty(n)
    pb = np.empty(n)
    for r in range(R):
        for i in range(n):
            if swaps[r, i]:
                pa[i] = b[i]
                pb[i] = a[i]
            else:
                pa[i] = a[i]
                pb[i] = b[i]
        out[r] = _metric_nb(pa, labels, code, threshold) - _metric_nb(pb, labels, code, threshold)
    return out


# ---------------------------------------------------------------------------
# 64-bit FNV-1a over a packed byte buffer; token i is buf[offsets[i]:offsets[i+1]]


def fnv1a_np(buf, offsets):
    n = offsets.shape[0] - 1
    lengths = np.diff(offsets)
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    if n == 0:
        return h
    padded = np.append(buf, np.uint8(0))
    for j in range(int(lengths.max(initial=0))):
        live = lengths > j
        idx = np.where(live, offsets[:-1] + j, buf.shape[0])
        mixed = (h ^ padded[idx].astype(np.uint64)) * FNV_PRIME
        h = np.where(live, mixed, h)
    return h


@njit(cache=True)
def fnv1a_nb(buf, offsets):
    n = offsets.shape[0] - 1
    out = np.empty(n, dtype=np.uint64)
    prime = np.uint64(0x100000001B3)
    for i in range(n):
        h = np.uint64(0xCBF29CE484222325)
        for j in range(offsets[i], offsets[i + 1]):
            h = (h ^ np.uint64(buf[j])) * prime
        out[i] = h
    return out


# ---------------------------------------------------------------------------
# one epoch of Pegasos-style hinge SGD on CSR rows, w = scale * v


def hinge_epoch_np(indptr, indices, data, y, order, v, scale, bias, t, lam):
    for i in order:
        lo, hi = indptr[i], indptr[i + 1]
        cols = indices[lo:hi]
        vals = data[lo:hi]
        t += 1
        eta = 1.0 / (1.0 + lam * t)
        margin = scale * np.dot(v[cols], vals) + bias
        scale *= 1.0 - eta * lam
        if y[i] * margin < 1.0:
            np.add.at(v, cols, eta * y[i] * vals / scale)
            bias += eta * y[i]
        if scale < 1e-9:
            v *= scale
            scale = 1.0
    return scale, bias, t


@njit(cache=True)
def hinge_epoch_nb(indptr, indices, data, y, order, v, scale, bias, t, lam):
    for i in order:
        lo = indptr[i]
        hi = indptr[i + 1]
        t += 1
        eta = 1.0 / (1.0 + lam * t)
        dot = 0.0
        for k in range(lo, hi):
            dot += v[indices[k]] * data[k]
        margin = scale * dot + bias
        scale *= 1.0 - eta * lam
        if y[i] * margin < 1.0:
            step = eta * y[i] / scale
            for k in range(lo, hi):
                v[indices[k]] += step * data[k]
            bias += eta * y[i]
        if scale < 1e-9:
            for k in range(v.shape[0]):
                v[k] *= scale
            scale = 1.0
    return scale, bias, t


# ---------------------------------------------------------------------------

_NAMES = [
    "ln_forward", "ln_backward", "attention_forward", "attention_backward",
    "pool_forward", "pool_backward", "auc", "ap", "permutation_deltas",
    "fnv1a", "hinge_epoch",
]


def select(use_numba):
    """Rebind the public kernel names to one backend (used by tests/benchmarks)."""
    global USE_NUMBA
    USE_NUMBA = bool(use_numba) and HAVE_NUMBA
    suffix = "_nb" if USE_NUMBA else "_np"
    g = globals()
    for name in _NAMES:
        g[name] = g[name + suffix]


select(USE_NUMBA)
