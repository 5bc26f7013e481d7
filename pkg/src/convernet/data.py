"""Corpus ingestion, thread reconstruction, labelling, target sampling and splits."""
import ast
import json
import logging
import re
import warnings
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PAD, UNK = "<pad>", "<unk>"
CACHE_FORMAT = "convernet-instances"
CACHE_VERSION = 1
MOVIE_SEP = " +++$+++ "
REQUIRED_FIELDS = ("id", "parent_id", "author", "created_utc", "body", "thread_id")

REDDIT_PRESET_SPLIT = (63097, 10000, 10000)
MOVIE_PRESET_SPLIT = (80000, 10000, 10000)


@dataclass
class Post:
    id: str
    parent_id: str | None
    author: str
    created_utc: int
    body: str
    thread_id: str


@dataclass
class Thread:
    thread_id: str
    posts: list
    children: dict
    background: str | None = None
    kind: str = "tree"  # "tree" (forum) or "chain" (dialog)
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.posts.sort(key=lambda p: (p.created_utc, p.id))
        self._index = {p.id: i for i, p in enumerate(self.posts)}

    def __len__(self):
        return len(self.posts)

    def post(self, post_id):
        try:
            return self.posts[self._index[post_id]]
        except KeyError:
            raise KeyError(f"post {post_id!r} not in thread {self.thread_id!r}") from None

    def position(self, post_id):
        """Index of the post in time order."""
        self.post(post_id)
        return self._index[post_id]

    @property
    def root(self):
        return next(p for p in self.posts if p.parent_id is None)

    @property
    def start_time(self):
        return self.posts[0].created_utc

    def depth(self, post_id):
        d = 0
        post = self.post(post_id)
        while post.parent_id is not None:
            post = self.post(post.parent_id)
            d += 1
        return d

    def is_leaf(self, post_id):
        self.post(post_id)
        return not self.children.get(post_id)

    def leaves(self):
        return [p.id for p in self.posts if not self.children.get(p.id)]


@dataclass
class Sample:
    """A sampled target with its visible, time-sorted history (target last)."""

    thread_id: str
    target_id: str
    label: int
    post_ids: list

    @property
    def s(self):
        return len(self.post_ids)


@dataclass
class Instance:
    thread_id: str
    target_post_id: str
    label: int
    tokens: list  # list of token-id lists, one per post, target last
    context: np.ndarray  # [s, d_context]
    background: list  # background id per post

    @property
    def s(self):
        return len(self.tokens)

    @property
    def instance_id(self):
        return f"{self.thread_id}/{self.target_post_id}"


# ---------------------------------------------------------------------------
# tokenisation and vocabulary

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def tokenize(body):
    """Lowercase, split punctuation into standalone tokens, split on whitespace."""
    return _TOKEN_RE.findall(body.lower()) if body else []


def word_count(tokens):
    return sum(1 for t in tokens if any(ch.isalnum() for ch in t))


class Vocabulary:
    """Token <-> id map with 0 = PAD and 1 = UNK."""

    def __init__(self, tokens=()):
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, token_lists, min_freq=5):
        counts = Counter()
        for toks in token_lists:
            counts.update(toks)
        kept = [t for t, c in counts.items() if c >= min_freq]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens):
        return [self.stoi.get(t, 1) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[2:]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


# ---------------------------------------------------------------------------
# parsing


class PostList(list):
    """List of parsed posts that also carries the number of skipped records."""

    skipped = 0


def _strip_kind(ref):
    if isinstance(ref, str) and len(ref) > 3 and ref[:3] in ("t1_", "t3_"):
        return ref[3:]
    return ref


def parse_posts_jsonl(path):
    """Read newline-delimited post records; malformed records are skipped and counted."""
    posts = PostList()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                missing = [k for k in REQUIRED_FIELDS if k not in rec]
                if missing:
                    raise DataError(f"missing {missing}")
                if rec["body"] is None or not isinstance(rec["body"], str):
                    raise DataError("body must be a string")
                parent = _strip_kind(rec["parent_id"])
                posts.append(Post(
                    id=str(_strip_kind(rec["id"])),
                    parent_id=None if parent in (None, "") else str(parent),
                    author=str(rec["author"]),
                    created_utc=int(rec["created_utc"]),
                    body=rec["body"],
                    thread_id=str(_strip_kind(rec["thread_id"])),
                ))
            except (ValueError, TypeError, DataError) as exc:
                posts.skipped += 1
                log.warning("%s:%d skipped: %s", path, lineno, exc)
    if posts.skipped:
        log.info("%s: parsed %d posts, skipped %d malformed records", path, len(posts), posts.skipped)
    return posts


def write_posts_jsonl(posts, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in posts:
            fh.write(json.dumps({
                "id": p.id, "parent_id": p.parent_id, "author": p.author,
                "created_utc": p.created_utc, "body": p.body, "thread_id": p.thread_id,
            }, ensure_ascii=False) + "\n")


def _read_lines(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        return raw.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        return raw.decode("latin-1").splitlines()


def parse_movie_corpus(lines_path, conversations_path):
    """Cornell movie-dialog files -> one chain thread per conversation."""
    lines = {}
    for row in _read_lines(lines_path):
        if not row.strip():
            continue
        parts = row.split(MOVIE_SEP, 4)
        if len(parts) < 5:
            log.warning("movie line skipped (expected 5 fields): %r", row[:60])
            continue
        line_id, char_id, movie_id, _name, text = (p.strip() for p in parts)
        lines[line_id] = (char_id, movie_id, text)

    threads = []
    for n, row in enumerate(_read_lines(conversations_path)):
        if not row.strip():
            continue
        parts = row.split(MOVIE_SEP)
        if len(parts) < 4:
            log.warning("conversation %d skipped: malformed", n)
            continue
        movie_id = parts[2].strip()
        try:
            ids = ast.literal_eval(parts[3].strip())
        except (ValueError, SyntaxError):
            log.warning("conversation %d skipped: bad line list", n)
            continue
        dangling = [i for i in ids if i not in lines]
        if dangling:
            log.warning("conversation %d dropped: dangling line ids %s", n, dangling)
            continue
        if len(ids) < 2:
            continue
        thread_id = f"{movie_id}-c{n}"
        posts = []
        for k, line_id in enumerate(ids):
            char_id, _movie, text = lines[line_id]
            posts.append(Post(line_id, ids[k - 1] if k else None, char_id, k, text, thread_id))
        children = {p.id: [] for p in posts}
        for p in posts[1:]:
            children[p.parent_id].append(p.id)
        threads.append(Thread(thread_id, posts, children, background=movie_id, kind="chain"))
    return threads


# ---------------------------------------------------------------------------
# threads


def _build_one(thread_id, posts, background=None):
    by_id = {}
    for p in posts:
        if p.id in by_id:
            log.warning("thread %s: duplicate post id %s ignored", thread_id, p.id)
            continue
        by_id[p.id] = p
    roots = [p for p in by_id.values() if p.parent_id is None]
    if len(roots) != 1:
        log.warning("thread %s rejected: %d roots", thread_id, len(roots))
        return None
    # cycle detection: follow parent pointers
    for p in by_id.values():
        seen = set()
        cur = p
        while cur is not None and cur.parent_id is not None:
            if cur.id in seen:
                log.warning("thread %s rejected: parent cycle through %s", thread_id, cur.id)
                return None
            seen.add(cur.id)
            cur = by_id.get(cur.parent_id)
    children = defaultdict(list)
    for p in by_id.values():
        if p.parent_id is not None and p.parent_id in by_id:
            children[p.parent_id].append(p)
    kept = []
    stack = [roots[0]]
    while stack:
        p = stack.pop()
        kept.append(p)
        for c in children[p.id]:
            if c.created_utc < p.created_utc:
                log.warning("thread %s: post %s predates its parent, dropped with replies", thread_id, c.id)
                continue
            stack.append(c)
    dropped = len(by_id) - len(kept)
    if dropped:
        log.info("thread %s: %d orphan/invalid posts discarded", thread_id, dropped)
    if len(kept) < 2:
        return None
    kept_ids = {p.id for p in kept}
    child_map = {p.id: [] for p in kept}
    for p in kept:
        if p.parent_id is not None:
            child_map[p.parent_id].append(p.id)
    for ids in child_map.values():
        ids.sort()
    assert all(p.parent_id is None or p.parent_id in kept_ids for p in kept)
    return Thread(thread_id, kept, child_map, background=background, kind="tree")


def build_threads(posts):
    """Group posts by thread and rebuild reply trees; keeps threads with >= 2 posts."""
    groups = defaultdict(list)
    for p in posts:
        groups[p.thread_id].append(p)
    threads = []
    for tid in sorted(groups):
        t = _build_one(tid, groups[tid])
        if t is not None:
            threads.append(t)
    threads.sort(key=lambda t: (t.start_time, t.thread_id))
    return threads


def label_post(thread, post_id):
    """1 if the post ends its thread (no replies / last dialog turn), else 0."""
    if thread.kind == "chain":
        return int(thread.position(post_id) == len(thread) - 1)
    return int(thread.is_leaf(post_id))


def thread_rng(seed, thread_id):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(thread_id.encode("utf-8"))])


def sample_target(thread, seed, max_len=20):
    """Pick one post uniformly; keep it and the posts before it, at most ``max_len``."""
    rng = thread_rng(seed, thread.thread_id)
    k = int(rng.integers(len(thread)))
    target = thread.posts[k]
    prefix = [p.id for p in thread.posts[:k + 1]]
    if len(prefix) > max_len:
        prefix = prefix[-max_len:]
    return Sample(thread.thread_id, target.id, label_post(thread, target.id), prefix)


# ---------------------------------------------------------------------------
# splits


def _split_sizes(n, sizes, proportions):
    if sizes is not None:
        if sum(sizes) <= n:
            return tuple(int(s) for s in sizes)
        warnings.warn(f"requested split sizes {tuple(sizes)} exceed {n} threads; "
                      f"falling back to proportions {tuple(proportions)}", stacklevel=3)
    n_train = int(round(n * proportions[0]))
    n_val = int(round(n * proportions[1]))
    n_test = n - n_train - n_val
    return n_train, n_val, n_test


def _cut(items, sizes):
    a, b, c = sizes
    return items[:a], items[a:a + b], items[a + b:a + b + c]


def split_reddit(threads, sizes=None, proportions=(0.8, 0.1, 0.1)):
    """Chronological split by first-post time."""
    ordered = sorted(threads, key=lambda t: (t.start_time, t.thread_id))
    return _cut(ordered, _split_sizes(len(ordered), sizes, proportions))


def split_random(threads, seed, sizes=None, proportions=(0.8, 0.1, 0.1)):
    ordered = sorted(threads, key=lambda t: t.thread_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    return _cut(shuffled, _split_sizes(len(shuffled), sizes, proportions))


# ---------------------------------------------------------------------------
# instance cache: header line + one JSON record per instance


def write_instances(path, instances, meta=None):
    header = {"format": CACHE_FORMAT, "version": CACHE_VERSION}
    header.update(meta or {})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inst in instances:
            fh.write(json.dumps({
                "thread_id": inst.thread_id,
                "target_post_id": inst.target_post_id,
                "label": int(inst.label),
                "tokens": inst.tokens,
                "context": np.asarray(inst.context).tolist(),
                "background": [int(b) for b in inst.background],
            }) + "\n")


def read_instances(path):
    """Returns (instances, header)."""
    from .errors import VersionError

    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CACHE_FORMAT:
            raise DataError(f"{path} is not an instance cache")
        if header.get("version") != CACHE_VERSION:
            raise VersionError(f"{path}: cache version {header.get('version')} != {CACHE_VERSION}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(Instance(rec["thread_id"], rec["target_post_id"], int(rec["label"]), rec["tokens"],
                                np.asarray(rec["context"], dtype=np.float64), rec["background"]))
    return out, header
