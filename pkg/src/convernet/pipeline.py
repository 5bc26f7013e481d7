"""Corpus -> threads -> splits -> sampled instances, written to a prepared-data directory.

Layout of a prepared directory::

    train.jsonl val.jsonl test.jsonl   instance caches
    vocab.txt                          one token per line (PAD/UNK implicit)
    tables.json                        author counts and background ids
    splits.json                        thread ids per split
    stats.csv                          corpus statistics
    config.json                        resolved preparation settings
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .errors import ConfigError, DataError
from .features import CORPUS_FAMILIES, CONTEXT_DIM, FeatureTables, SentimentLexicon, build_instance
from .synthetic import forum_posts

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
CORPORA = ("reddit", "movie", "synthetic")
PRESET_SIZES = {"reddit": D.REDDIT_PRESET_SPLIT, "movie": D.MOVIE_PRESET_SPLIT}


@dataclass
class PrepareOptions:
    corpus: str
    inputs: list = field(default_factory=list)
    seed: int = 0
    min_freq: int = 5
    max_len: int = 20
    split_sizes: list | None = None
    proportions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    n_threads: int = 2000  # synthetic corpus only
    lexicon: str | None = None

    def validate(self):
        if self.corpus not in CORPORA:
            raise ConfigError(f"corpus must be one of {CORPORA}")
        need = {"reddit": 1, "movie": 2, "synthetic": 0}[self.corpus]
        if len(self.inputs) != need:
            raise ConfigError(f"{self.corpus} corpus expects {need} input path(s), got {len(self.inputs)}")
        if self.max_len < 1 or self.min_freq < 1:
            raise ConfigError("max_len and min_freq must be >= 1")
        if len(self.proportions) != 3 or any(p < 0 for p in self.proportions):
            raise ConfigError("proportions need three non-negative values")
        return self


def load_threads(opts):
    for path in opts.inputs:
        if not os.path.isfile(path):
            raise DataError(f"cannot read input {path}")
    if opts.corpus == "reddit":
        return D.build_threads(D.parse_posts_jsonl(opts.inputs[0]))
    if opts.corpus == "movie":
        return D.parse_movie_corpus(*opts.inputs)
    return D.build_threads(forum_posts(opts.n_threads, opts.seed))


def split_threads(threads, opts):
    sizes = opts.split_sizes
    if sizes == "preset":
        sizes = PRESET_SIZES.get(opts.corpus)
    if opts.corpus == "movie":
        return D.split_random(threads, opts.seed, sizes, opts.proportions)
    return D.split_reddit(threads, sizes, opts.proportions)


def corpus_stats(threads, vocab, token_cache, splits=None):
    lengths = [len(token_cache[p.id]) for t in threads for p in t.posts]
    words = [D.word_count(token_cache[p.id]) for t in threads for p in t.posts]
    rows = [
        ("threads", len(threads)),
        ("posts", len(lengths)),
        ("vocab_size", len(vocab)),
        ("max_post_words", max(words) if words else 0),
        ("avg_post_words", round(float(np.mean(words)), 4) if words else 0.0),
        ("avg_thread_posts", round(len(lengths) / len(threads), 4) if threads else 0.0),
    ]
    for name, insts in (splits or {}).items():
        rows.append((f"{name}_instances", len(insts)))
        rows.append((f"{name}_positive", sum(i.label for i in insts)))
    return rows


def prepare(opts, out_dir):
    """Run the whole preparation; returns the stats rows."""
    opts.validate()
    threads = load_threads(opts)
    if len(threads) < 3:
        raise DataError(f"only {len(threads)} usable threads; need at least 3")
    train_t, val_t, test_t = split_threads(threads, opts)
    if not train_t or not val_t or not test_t:
        raise DataError("a split came out empty; add threads or change the split settings")
    token_cache = {p.id: D.tokenize(p.body) for t in threads for p in t.posts}
    vocab = D.Vocabulary.build((token_cache[p.id] for t in train_t for p in t.posts), opts.min_freq)
    lexicon = SentimentLexicon.load(opts.lexicon) if opts.lexicon else SentimentLexicon.default()
    tables = FeatureTables.build(train_t, lexicon)
    families = CORPUS_FAMILIES["reddit" if opts.corpus == "synthetic" else opts.corpus]
    splits = {}
    for name, group in zip(SPLITS, (train_t, val_t, test_t)):
        insts = []
        for t in group:
            sample = D.sample_target(t, opts.seed, opts.max_len)
            insts.append(build_instance(t, sample, vocab, tables, families, token_cache))
        splits[name] = insts

    os.makedirs(out_dir, exist_ok=True)
    meta = {"corpus": opts.corpus, "seed": opts.seed, "families": list(families), "d_context": CONTEXT_DIM}
    for name, insts in splits.items():
        D.write_instances(os.path.join(out_dir, f"{name}.jsonl"), insts, dict(meta, split=name))
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    _dump(os.path.join(out_dir, "tables.json"), tables.to_dict())
    _dump(os.path.join(out_dir, "splits.json"),
          {name: [t.thread_id for t in g] for name, g in zip(SPLITS, (train_t, val_t, test_t))})
    _dump(os.path.join(out_dir, "config.json"), dict(asdict(opts), families=list(families)))
    rows = corpus_stats(threads, vocab, token_cache, splits)
    with open(os.path.join(out_dir, "stats.csv"), "w", encoding="utf-8") as fh:
        fh.write("statistic,value\n")
        for k, v in rows:
            fh.write(f"{k},{v}\n")
    return rows


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


@dataclass
class Prepared:
    splits: dict
    vocab: D.Vocabulary
    tables: dict
    meta: dict

    @property
    def n_backgrounds(self):
        bgs = self.tables.get("backgrounds", {})
        return len(bgs) + 2 if bgs else 0


def load_prepared(path, splits=SPLITS):
    if not os.path.isdir(path):
        raise DataError(f"prepared data directory {path} not found")
    loaded, meta = {}, {}
    for name in splits:
        f = os.path.join(path, f"{name}.jsonl")
        if not os.path.isfile(f):
            raise DataError(f"missing instance cache {f}")
        loaded[name], meta = D.read_instances(f)
    vocab = D.Vocabulary.load(os.path.join(path, "vocab.txt"))
    with open(os.path.join(path, "tables.json"), encoding="utf-8") as fh:
        tables = json.load(fh)
    return Prepared(loaded, vocab, tables, meta)
