"""Per-post context features.

The context vector has a fixed layout for every corpus::

    0      log1p(post length in words)
    1      log1p(posts so far in the thread, this one included)
    2..4   sentiment (neg, neu, pos)
    5..8   reply-latency bucket one-hot (hour, day, week, month)
    9      log1p(reply depth)
    10     parent authored by the target's author (0/1)
    11     log1p(thread endings by this author in training threads)
    12..17 availability bits, one per family in FAMILIES order

The conversation background is categorical and travels separately as an id
that the network embeds.  Disabled families keep their slots, zeroed, with
the availability bit off.
"""
import math
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .data import label_post, tokenize, word_count
from .errors import DataError

FAMILIES = ("lengths", "sentiment", "post_time", "reply_structure", "author", "background")
SLOTS = {
    "lengths": slice(0, 2),
    "sentiment": slice(2, 5),
    "post_time": slice(5, 9),
    "reply_structure": slice(9, 11),
    "author": slice(11, 12),
}
MASK_OFFSET = 12
CONTEXT_DIM = MASK_OFFSET + len(FAMILIES)

CORPUS_FAMILIES = {
    "reddit": ("lengths", "sentiment", "post_time", "reply_structure", "author"),
    "movie": ("lengths", "sentiment", "background", "author"),
}

TIME_BUCKETS = ("hour", "day", "week", "month")
_BUCKET_LIMITS = (3600, 86400, 604800)

BG_NONE, BG_UNKNOWN = 0, 1


class SentimentLexicon:
    """Token -> valence table read from ``token<TAB>score`` lines."""

    def __init__(self, scores=None):
        self.scores = {k.lower(): float(v) for k, v in (scores or {}).items()}

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls._parse(fh)

    @classmethod
    def default(cls):
        with resources.files("convernet").joinpath("resources/lexicon.tsv").open(encoding="utf-8") as fh:
            return cls._parse(fh)

    @classmethod
    def _parse(cls, lines):
        scores = {}
        for line in lines:
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                continue
            try:
                scores[parts[0].strip()] = float(parts[1])
            except ValueError:
                continue
        return cls(scores)

    def score(self, token):
        return self.scores.get(token.lower(), 0.0)

    def __len__(self):
        return len(self.scores)


def sentiment_scores(tokens, lexicon):
    """(neg, neu, pos) shares of lexicon mass; neutral tokens count one each.

    A lexicon aggregation in the spirit of VADER's polarity triple, without
    its booster/negation/punctuation rules.
    """
    pos = neg = neu = 0.0
    for tok in tokens:
        s = lexicon.score(tok)
        if s > 0:
            pos += s
        elif s < 0:
            neg -= s
        else:
            neu += 1.0
    total = pos + neg + neu
    if total == 0:
        return 0.0, 1.0, 0.0
    return neg / total, neu / total, pos / total


def time_bucket(delta_seconds):
    if delta_seconds < 0:
        raise DataError(f"negative reply latency {delta_seconds}")
    for name, limit in zip(TIME_BUCKETS, _BUCKET_LIMITS):
        if delta_seconds <= limit:
            return name
    return "month"


def reply_features(thread, post_id, target_author):
    """(depth from root, whether the parent was written by the target's author)."""
    post = thread.post(post_id)
    depth = thread.depth(post_id)
    flag = post.parent_id is not None and thread.post(post.parent_id).author == target_author
    return depth, bool(flag)


def author_end_counts(training_threads):
    """Thread-ending posts per author, plus per-thread contributions."""
    totals = Counter()
    per_thread = {}
    for t in training_threads:
        local = Counter(t.post(pid).author for pid in (p.id for p in t.posts) if label_post(t, pid))
        totals.update(local)
        per_thread[t.thread_id] = local
    return totals, per_thread


def author_end_count(author, totals, per_thread=None, thread_id=None):
    """Endings by ``author`` in training threads other than ``thread_id``."""
    n = totals.get(author, 0)
    if per_thread is not None and thread_id in per_thread:
        n -= per_thread[thread_id].get(author, 0)
    return n


@dataclass
class FeatureTables:
    lexicon: SentimentLexicon
    author_totals: Counter = field(default_factory=Counter)
    author_per_thread: dict = field(default_factory=dict)
    backgrounds: dict = field(default_factory=dict)  # name -> id (>= 2)

    @classmethod
    def build(cls, training_threads, lexicon=None):
        totals, per_thread = author_end_counts(training_threads)
        names = sorted({t.background for t in training_threads if t.background is not None})
        return cls(lexicon or SentimentLexicon.default(), totals, per_thread,
                   {n: i + 2 for i, n in enumerate(names)})

    @property
    def n_backgrounds(self):
        return len(self.backgrounds) + 2 if self.backgrounds else 0

    def background_id(self, name):
        if name is None:
            return BG_NONE
        return self.backgrounds.get(name, BG_UNKNOWN)

    def to_dict(self):
        return {
            "author_totals": dict(sorted(self.author_totals.items())),
            "author_per_thread": {k: dict(sorted(v.items())) for k, v in sorted(self.author_per_thread.items())},
            "backgrounds": dict(sorted(self.backgrounds.items())),
        }

    @classmethod
    def from_dict(cls, d, lexicon=None):
        return cls(lexicon or SentimentLexicon.default(), Counter(d["author_totals"]),
                   {k: Counter(v) for k, v in d["author_per_thread"].items()}, dict(d["backgrounds"]))


def assemble_context(thread, post_id, target_id, tables, families, tokens=None):
    """Context vector of one post, seen from a sample whose target is ``target_id``.

    Only posts at or before the target in time order are read.
    """
    families = set(families)
    vec = np.zeros(CONTEXT_DIM)
    post = thread.post(post_id)
    idx = thread.position(post_id)
    if idx > thread.position(target_id):
        raise DataError("context requested for a post after the target")
    if tokens is None:
        tokens = tokenize(post.body)
    if "lengths" in families:
        vec[0] = math.log1p(word_count(tokens))
        vec[1] = math.log1p(idx + 1)
    if "sentiment" in families:
        vec[2:5] = sentiment_scores(tokens, tables.lexicon)
    if "post_time" in families:
        delta = 0 if idx == 0 else post.created_utc - thread.posts[idx - 1].created_utc
        vec[5 + TIME_BUCKETS.index(time_bucket(delta))] = 1.0
    if "reply_structure" in families:
        depth, flag = reply_features(thread, post_id, thread.post(target_id).author)
        vec[9] = math.log1p(depth)
        vec[10] = float(flag)
    if "author" in families:
        n = author_end_count(post.author, tables.author_totals, tables.author_per_thread, thread.thread_id)
        vec[11] = math.log1p(n)
    for k, fam in enumerate(FAMILIES):
        if fam in families:
            vec[MASK_OFFSET + k] = 1.0
    return vec


def context_matrix(thread, sample, tables, families, token_cache=None):
    rows = []
    for pid in sample.post_ids:
        toks = token_cache.get(pid) if token_cache is not None else None
        rows.append(assemble_context(thread, pid, sample.target_id, tables, families, toks))
    return np.vstack(rows)


def ablate(context, families):
    """Zero the slots and availability bits of ``families`` in a [..., CONTEXT_DIM] array."""
    out = np.array(context, dtype=np.float64, copy=True)
    for fam in families:
        if fam not in FAMILIES:
            raise ValueError(f"unknown feature family {fam!r}")
        if fam in SLOTS:
            out[..., SLOTS[fam]] = 0.0
        out[..., MASK_OFFSET + FAMILIES.index(fam)] = 0.0
    return out


def build_instance(thread, sample, vocab, tables, families, token_cache=None):
    from .data import Instance

    families = tuple(families)
    toks = [token_cache[pid] if token_cache is not None else tokenize(thread.post(pid).body)
            for pid in sample.post_ids]
    cache = dict(zip(sample.post_ids, toks))
    ctx = context_matrix(thread, sample, tables, families, cache)
    bg = tables.background_id(thread.background) if "background" in families else BG_NONE
    return Instance(thread.thread_id, sample.target_id, sample.label, [vocab.encode(t) for t in toks], ctx,
                    [bg] * sample.s)

