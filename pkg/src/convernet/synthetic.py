"""Seeded synthetic corpora for tests and small-scale experiments.

``forum_posts`` grows reply trees in which a post's chance of being left
unanswered depends on its author, its wording, its depth and how late it
arrives, so both content and context carry signal.  ``planted_instances``
and ``position_instances`` build ready-to-train instances directly.
"""
import numpy as np

from .data import Instance, Post
from .features import CONTEXT_DIM

CLOSING_WORDS = ("thanks", "bye", "agreed", "ok", "cheers", "great")
OPEN_WORDS = ("why", "how", "what", "anyone", "disagree")
_SYLLABLES = ("ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi", "pe", "sa", "do", "fu")


def filler_words(n, rng):
    words = set()
    while len(words) < n:
        k = int(rng.integers(2, 4))
        words.add("".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), k)))
    return sorted(words)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forum_posts(n_threads, seed=0, n_authors=400, max_posts=30, start=1_500_000_000):
    """Reddit-like posts (flat list, every thread has at least two posts)."""
    rng = np.random.default_rng(seed)
    words = filler_words(300, rng)
    word_p = 1.0 / np.arange(1, len(words) + 1)
    word_p /= word_p.sum()
    author_bias = rng.normal(0.0, 1.5, n_authors)
    author_p = 1.0 / np.arange(1, n_authors + 1) ** 0.8
    author_p /= author_p.sum()
    posts = []
    t0 = start
    for n in range(n_threads):
        tid = f"s{n:06d}"
        t0 += int(rng.integers(60, 3600))
        queue = [(None, 0, t0)]
        count = 0
        while queue and count < max_posts:
            parent, depth, t_parent = queue.pop(0)
            author = f"u{int(rng.choice(n_authors, p=author_p)):03d}"
            closing = rng.random() < 0.3
            opening = not closing and rng.random() < 0.3
            z = author_bias[int(author[1:])] + 1.5 * closing - 1.5 * opening + 0.25 * depth + rng.normal(0, 0.5)
            gap = 0 if parent is None else int(rng.exponential(1800.0 * np.exp(0.8 * z))) + 1
            created = t_parent + gap
            body = list(rng.choice(words, size=2 + rng.poisson(6), p=word_p))
            if closing:
                body.insert(int(rng.integers(0, len(body) + 1)), str(rng.choice(CLOSING_WORDS)))
            if opening:
                body.insert(0, str(rng.choice(OPEN_WORDS)))
                body.append("?")
            pid = f"{tid}p{count:02d}"
            posts.append(Post(pid, parent, author, created, " ".join(body), tid))
            count += 1
            if parent is None:
                n_children = 1 + rng.poisson(1.5)
            elif rng.random() < _sigmoid(z - 0.5):
                n_children = 0
            else:
                n_children = 1 + rng.poisson(0.4)
            queue.extend((pid, depth + 1, created) for _ in range(n_children))
    return posts


def _random_post(rng, lo, hi, low_id, high_id):
    return [int(x) for x in rng.integers(low_id, high_id, int(rng.integers(lo, hi + 1)))]


def planted_instances(n=64, seed=0, vocab_size=50, min_len=2, max_len=6, plant=2):
    """Label 1 iff token ``plant`` occurs in the target (last) post."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = int(rng.integers(min_len, max_len + 1))
        label = i % 2
        posts = [_random_post(rng, 3, 8, plant + 1, vocab_size) for _ in range(s)]
        if label:
            posts[-1][int(rng.integers(0, len(posts[-1])))] = plant
        out.append(Instance(f"planted{i:03d}", f"p{s - 1}", label, posts, np.zeros((s, CONTEXT_DIM)), [0] * s))
    return out


def position_instances(n, seed=0, vocab_size=40, min_len=2, max_len=12, marker_a=2, marker_b=3):
    """Every post carries marker a or b at random; the label is the marker of post s-1."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        s = int(rng.integers(min_len, max_len + 1))
        posts = [_random_post(rng, 2, 5, max(marker_a, marker_b) + 1, vocab_size) for _ in range(s)]
        marks = rng.random(s) < 0.5
        for p, m in zip(posts, marks):
            p[int(rng.integers(0, len(p)))] = marker_a if m else marker_b
        label = int(marks[s - 2])
        out.append(Instance(f"pos{seed}-{i:05d}", f"p{s - 1}", label, posts, np.zeros((s, CONTEXT_DIM)), [0] * s))
    return out
