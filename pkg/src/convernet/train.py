"""Batching, optimisation, early stopping and checkpoint persistence."""
import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import bce_loss
from .config import ModelConfig
from .errors import ConfigError, CorruptionError, MetricError, NumericError, VersionError
from .layers import ConverNet
from .metrics import accuracy, auc, average_precision

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "train_loss", "val_accuracy", "val_auc", "val_map")

__all__ = [
    "Batch", "collate", "bce_loss", "rmsprop_step", "RMSProp", "train", "train_epoch", "predict",
    "save_checkpoint", "load_checkpoint", "write_history",
]


@dataclass
class Batch:
    ids: np.ndarray  # int [B, T, W]
    counts: np.ndarray  # int [B, T]
    context: np.ndarray  # [B, T, d_c]
    background: np.ndarray  # int [B, T]
    lengths: np.ndarray  # int [B]
    labels: np.ndarray  # [B]


def collate(instances, max_words=100, d_context=None):
    """Left-aligned padding of variable-length instances into one batch."""
    B = len(instances)
    T = max(inst.s for inst in instances)
    W = max(1, min(max_words, max((len(t) for inst in instances for t in inst.tokens), default=1)))
    if d_context is None:
        d_context = instances[0].context.shape[1] if instances[0].context.ndim == 2 else 0
    ids = np.zeros((B, T, W), dtype=np.int64)
    counts = np.zeros((B, T), dtype=np.int64)
    context = np.zeros((B, T, d_context))
    background = np.zeros((B, T), dtype=np.int64)
    for b, inst in enumerate(instances):
        for t, toks in enumerate(inst.tokens):
            toks = toks[:W]
            ids[b, t, :len(toks)] = toks
            counts[b, t] = len(toks)
        if d_context:
            context[b, :inst.s] = inst.context
        background[b, :inst.s] = inst.background
    lengths = np.array([inst.s for inst in instances], dtype=np.int64)
    labels = np.array([inst.label for inst in instances], dtype=np.float64)
    return Batch(ids, counts, context, background, lengths, labels)


def rmsprop_step(params, grads, state, lr, rho=0.9, eps=1e-8):
    """In-place update: v <- rho v + (1 - rho) g^2;  theta <- theta - lr g / sqrt(v + eps)."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        v = state.setdefault(i, np.zeros_like(p))
        v *= rho
        v += (1.0 - rho) * g * g
        p -= lr * g / np.sqrt(v + eps)
    return params, state


class RMSProp:
    def __init__(self, named_params, lr, rho=0.9, eps=1e-8, frozen_rows=None):
        self.named = list(named_params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.state = {}
        # parameter name -> row indices that never change (embedding padding rows)
        self.frozen_rows = frozen_rows or {}

    def step(self):
        grads = []
        for name, p in self.named:
            g = p.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")
            if g is not None and name in self.frozen_rows:
                g = g.copy()
                g[self.frozen_rows[name]] = 0.0
            grads.append(g)
        rmsprop_step([p.data for _, p in self.named], grads, self.state, self.lr, self.rho, self.eps)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None


def make_optimizer(model, config):
    frozen = {name: [0] for name, _ in model.named_parameters() if name.endswith(".table")}
    return RMSProp(model.named_parameters(), config.lr, config.rho, config.rms_eps, frozen)


def _batches(n, batch_size, rng):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm needs at least two rows; fold a singleton tail into its neighbour
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train_epoch(model, optimizer, instances, config, rng):
    """One pass over shuffled mini-batches; returns the mean batch loss."""
    losses = []
    for idx in _batches(len(instances), config.batch_size, rng):
        batch = collate([instances[i] for i in idx], config.max_words, config.d_context)
        optimizer.zero_grad()
        with ad.Tape() as tape:
            pred = model(batch, training=True)
            loss = bce_loss(pred, batch.labels, config.pos_weight)
        tape.backward(loss)
        try:
            optimizer.step()
        except NumericError as exc:
            log.warning("batch skipped: %s", exc)
            continue
        losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def predict(model, instances, config, batch_size=256):
    """Eval-mode probabilities, in input order."""
    out = []
    for lo in range(0, len(instances), batch_size):
        batch = collate(instances[lo:lo + batch_size], config.max_words, config.d_context)
        out.append(model(batch, training=False).data)
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model, instances, config):
    scores = predict(model, instances, config)
    labels = np.array([inst.label for inst in instances])
    ids = [inst.instance_id for inst in instances]
    report = {"accuracy": accuracy(scores, labels)}
    try:
        report["auc"] = auc(scores, labels)
        report["map"] = average_precision(scores, labels, ids)
    except MetricError:
        report["auc"] = report["map"] = float("nan")
    return report, scores


def snapshot(model):
    return ({n: p.data.copy() for n, p in model.named_parameters()},
            {n: b.copy() for n, b in model.named_buffers()})


def restore(model, state):
    params, buffers = state
    for n, p in model.named_parameters():
        p.data[...] = params[n]
    for n, b in model.named_buffers():
        b[...] = buffers[n]


def train(model, train_set, val_set, config, on_epoch=None):
    """Train with early stopping on validation AUC.

    Stops once AUC has failed to improve by ``min_delta`` for ``patience``
    consecutive epochs (patience 0 behaves like 1), or after ``max_epochs``.
    The model is left holding the best-AUC state, which is also returned
    with the history.
    """
    if not train_set or not val_set:
        raise ConfigError("train and validation splits must be non-empty")
    if len({inst.label for inst in val_set}) < 2:
        raise ConfigError("validation split needs both classes for AUC")
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(model, config)
    history = []
    best_auc, best_state = -np.inf, snapshot(model)
    reference, stale = -np.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        loss = train_epoch(model, opt, train_set, config, rng)
        report, _ = evaluate(model, val_set, config)
        row = {"epoch": epoch, "train_loss": loss, "val_accuracy": report["accuracy"],
               "val_auc": report["auc"], "val_map": report["map"]}
        history.append(row)
        log.info("epoch %d loss %.4f val auc %.4f", epoch, loss, report["auc"])
        if on_epoch is not None:
            on_epoch(row)
        if report["auc"] > best_auc:
            best_auc, best_state = report["auc"], snapshot(model)
        if report["auc"] >= reference + config.min_delta:
            reference, stale = report["auc"], 0
        else:
            stale += 1
            if stale >= max(config.patience, 1):
                break
    restore(model, best_state)
    return best_state, history


# ---------------------------------------------------------------------------
# persistence: <prefix>.manifest (JSON) + <prefix>.bin (little-endian f32)


def _table(model):
    rows, offset = [], 0
    for kind, items in (("parameter", model.named_parameters()), ("buffer", model.named_buffers())):
        for name, arr in items:
            data = arr.data if kind == "parameter" else arr
            rows.append({"name": name, "kind": kind, "shape": list(data.shape), "offset": offset})
            offset += int(np.prod(data.shape)) * 4
    return rows, offset


def save_checkpoint(model, prefix, history=None):
    rows, size = _table(model)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameters": rows,
        "blob_bytes": size,
        "history": history or [],
    }
    arrays = [p.data for _, p in model.named_parameters()] + [b for _, b in model.named_buffers()]
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    with open(prefix + ".bin", "wb") as fh:
        fh.write(blob)
    with open(prefix + ".manifest", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(prefix):
    with open(prefix + ".manifest", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {manifest.get('format_version')} != {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(manifest["config"])
    model = ConverNet(config)
    model.children["decoder"].seen_training_batch = True
    with open(prefix + ".bin", "rb") as fh:
        blob = fh.read()
    expected, size = _table(model)
    if len(blob) != size or manifest.get("blob_bytes") != size:
        raise CorruptionError(f"blob has {len(blob)} bytes, manifest expects {manifest.get('blob_bytes')}")
    stored = {(r["name"], r["kind"]): r for r in manifest["parameters"]}
    targets = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for row in expected:
        rec = stored.get((row["name"], row["kind"]))
        if rec is None or rec["shape"] != row["shape"] or rec["offset"] != row["offset"]:
            raise CorruptionError(f"manifest entry for {row['name']} does not match the model")
        n = int(np.prod(row["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=row["offset"]).astype(np.float64)
        dest = targets[row["name"]].data if row["kind"] == "parameter" else buffers[row["name"]]
        dest[...] = arr.reshape(row["shape"])
    return model, manifest.get("history", [])


def write_history(history, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def checkpoint_paths(prefix):
    return prefix + ".manifest", prefix + ".bin"


def exists(prefix):
    return all(os.path.exists(p) for p in checkpoint_paths(prefix))
