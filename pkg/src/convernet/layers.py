"""Network building blocks and the full ConverNet model.

Arrays are row-major: inputs multiply weights from the left (``x @ W``).
Batched sequences are [B, T, d], left-aligned; position t of instance b is
valid iff ``t < lengths[b]``.
"""
import warnings

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import ShapeError

PAD_ID = 0
UNK_ID = 1


class Module:
    """Holds named parameters, non-trainable buffers and child modules."""

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.children = {}

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix=""):
        for name, b in self.buffers.items():
            yield prefix + name, b
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Init:
    """Deterministic stream of Gaussian initialisations from one seed."""

    def __init__(self, seed, std):
        self.rng = np.random.default_rng(seed)
        self.std = std

    def normal(self, shape, name=None):
        return ad.gaussian_init(shape, self.std, int(self.rng.integers(2**63 - 1)), name=name)

    @staticmethod
    def const(shape, value, name=None):
        return ad.parameter(np.full(shape, float(value)), name=name)


class Embedding(Module):
    """Word-vector table; row 0 is padding and stays zero."""

    def __init__(self, vocab_size, dim, init):
        super().__init__()
        table = init.normal((vocab_size, dim), "table")
        table.data[PAD_ID] = 0.0
        self.params["table"] = table

    @property
    def table(self):
        return self.params["table"]

    def pool(self, ids, counts):
        return ad.embed_pool(self.table, ids, counts)


def embed_and_pool(embedding, tokens, context):
    """Single post: mean word vector of ``tokens`` concatenated with ``context``."""
    tokens = [t for t in tokens if t != PAD_ID]
    ids = np.array(tokens or [PAD_ID], dtype=np.int64).reshape(1, 1, -1)
    counts = np.array([[len(tokens)]], dtype=np.int64)
    pooled = embedding.pool(ids, counts).reshape(embedding.table.shape[1])
    return ad.concat([pooled, Value(np.atleast_1d(np.asarray(context, dtype=np.float64)))])


class LSTMCell(Module):
    """Plain LSTM kernel without biases or output squashing.

    Gate blocks of the stacked weights are ordered (i, f, o, c), i.e.
    ``W_x = [W_ix | W_fx | W_ox | W_cx]`` and likewise for ``W_m``.
    """

    def __init__(self, input_dim, hidden, init):
        super().__init__()
        self.hidden = hidden
        self.params["W_x"] = init.normal((input_dim, 4 * hidden), "W_x")
        self.params["W_m"] = init.normal((hidden, 4 * hidden), "W_m")

    def input_proj(self, x):
        return x @ self.params["W_x"]

    def step(self, xp, m_prev, c_prev):
        H = self.hidden
        a = xp + m_prev @ self.params["W_m"]
        i = ad.sigmoid(a[:, :H])
        f = ad.sigmoid(a[:, H:2 * H])
        o = ad.sigmoid(a[:, 2 * H:3 * H])
        c = f * c_prev + i * ad.tanh(a[:, 3 * H:])
        return o * c, c


def lstm_step(cell, x_t, m_prev, c_prev):
    """One step on [B, d] (or unbatched [d]) inputs; returns (m_t, c_t)."""
    squeeze = ad.as_value(x_t).ndim == 1
    if squeeze:
        x_t, m_prev, c_prev = (ad.as_value(v).reshape(1, -1) for v in (x_t, m_prev, c_prev))
    m, c = cell.step(cell.input_proj(x_t), m_prev, c_prev)
    if squeeze:
        m, c = m.reshape(-1), c.reshape(-1)
    return m, c


class LNLSTMCell(Module):
    """Layer-normalised LSTM with peepholes.

    Gate blocks are ordered (i, f, c, o).  Input-side and recurrent-side
    projections are normalised per gate block with their own gain/shift, and
    the cell state is normalised before the output squashing.
    """

    def __init__(self, input_dim, hidden, init):
        super().__init__()
        H = self.hidden = hidden
        p = self.params
        p["W_x"] = init.normal((input_dim, 4 * H), "W_x")
        p["W_h"] = init.normal((H, 4 * H), "W_h")
        p["w_ci"] = init.normal((H,), "w_ci")
        p["w_cf"] = init.normal((H,), "w_cf")
        p["w_co"] = init.normal((H,), "w_co")
        p["b"] = init.const((4 * H,), 0.0, "b")
        p["ln_x_alpha"] = init.const((4 * H,), 1.0)
        p["ln_x_beta"] = init.const((4 * H,), 0.0)
        p["ln_h_alpha"] = init.const((4 * H,), 1.0)
        p["ln_h_beta"] = init.const((4 * H,), 0.0)
        p["ln_c_alpha"] = init.const((H,), 1.0)
        p["ln_c_beta"] = init.const((H,), 0.0)

    def input_proj(self, x):
        p = self.params
        return ad.layer_norm(x @ p["W_x"], p["ln_x_alpha"], p["ln_x_beta"], groups=4)

    def step(self, xp, h_prev, c_prev):
        p = self.params
        H = self.hidden
        rec = ad.layer_norm(h_prev @ p["W_h"], p["ln_h_alpha"], p["ln_h_beta"], groups=4)
        a = xp + rec + p["b"]
        i = ad.sigmoid(a[:, :H] + p["w_ci"] * c_prev)
        f = ad.sigmoid(a[:, H:2 * H] + p["w_cf"] * c_prev)
        c = f * c_prev + i * ad.tanh(a[:, 2 * H:3 * H])
        o = ad.sigmoid(a[:, 3 * H:] + p["w_co"] * c)
        h = o * ad.tanh(ad.layer_norm(c, p["ln_c_alpha"], p["ln_c_beta"]))
        return h, c


def ln_lstm_step(cell, x_t, h_prev, c_prev):
    return lstm_step(cell, x_t, h_prev, c_prev)


def _run_direction(cell, xp, lengths, reverse):
    B, T = xp.shape[0], xp.shape[1]
    zeros = Value(np.zeros((B, cell.hidden)))
    h, c = zeros, zeros
    outs = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        valid = t < lengths
        h_new, c_new = cell.step(xp[:, t], h, c)
        if valid.all():
            h, c = h_new, c_new
            outs[t] = h
        else:
            h = ad.select(valid, h_new, h)
            c = ad.select(valid, c_new, c)
            outs[t] = ad.select(valid, h_new, zeros)
    return ad.stack_time(outs)


class BiLSTM(Module):
    """Two independent kernels; the second reads each sequence from its last valid step."""

    def __init__(self, input_dim, hidden, init, cell="ln"):
        super().__init__()
        cls = LNLSTMCell if cell == "ln" else LSTMCell
        self.hidden = hidden
        self.children["fwd"] = cls(input_dim, hidden, init)
        self.children["bwd"] = cls(input_dim, hidden, init)

    def __call__(self, seq, lengths):
        seq = ad.as_value(seq)
        single = seq.ndim == 2
        if single:
            seq = seq.reshape(1, seq.shape[0], seq.shape[1])
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        if np.any(lengths < 1):
            raise ShapeError("BiLSTM needs sequences of length >= 1")
        if np.any(lengths > seq.shape[1]) or lengths.shape[0] != seq.shape[0]:
            raise ShapeError(f"lengths {lengths} do not fit input of shape {seq.shape}")
        fwd, bwd = self.children["fwd"], self.children["bwd"]
        out_f = _run_direction(fwd, fwd.input_proj(seq), lengths, reverse=False)
        out_b = _run_direction(bwd, bwd.input_proj(seq), lengths, reverse=True)
        out = ad.concat([out_f, out_b])
        if single:
            out = out.reshape(out.shape[1], out.shape[2])
        return out


def bilstm_forward(bilstm, seq, length):
    return bilstm(seq, length)


class LengthAttention(Module):
    """Attention whose logits are indexed by (position, sequence length).

    ``W[k, s-1]`` is the logit of position k for any sequence of length s, so
    sequences of equal length share weights.  With ``per_length=False`` only
    column 0 is used: one positional weight vector for every length.
    """

    def __init__(self, max_len, init, per_length=True):
        super().__init__()
        self.max_len = max_len
        self.per_length = per_length
        self.params["W"] = init.normal((max_len, max_len), "W")

    def __call__(self, h, lengths):
        h = ad.as_value(h)
        single = h.ndim == 2
        if single:
            h = h.reshape(1, h.shape[0], h.shape[1])
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        out, self.last_weights = ad.length_attention(self.params["W"], h, lengths, self.per_length)
        if single:
            out = out.reshape(out.shape[1])
        return out


def dwdl_attention(attention, h, s):
    return attention(h, s)


class Merge(Module):
    """tanh of a linear map of the concatenated attention summary and last output."""

    def __init__(self, in_dim, out_dim, init):
        super().__init__()
        self.params["W"] = init.normal((in_dim, out_dim), "W")

    def __call__(self, parts):
        return ad.tanh(ad.concat(parts) @ self.params["W"])


class MLPDecoder(Module):
    """ReLU layers each followed by batch norm, then one sigmoid unit."""

    def __init__(self, in_dim, width, depth, init, momentum=0.9, eps=1e-8):
        super().__init__()
        self.depth = depth
        self.momentum = momentum
        self.eps = eps
        self.seen_training_batch = False
        dim = in_dim
        for k in range(depth):
            self.params[f"W{k}"] = init.normal((dim, width), f"W{k}")
            self.params[f"b{k}"] = init.const((width,), 0.0)
            self.params[f"gamma{k}"] = init.const((width,), 1.0)
            self.params[f"beta{k}"] = init.const((width,), 0.0)
            self.buffers[f"running_mean{k}"] = np.zeros(width)
            self.buffers[f"running_var{k}"] = np.ones(width)
            dim = width
        self.params["W_out"] = init.normal((dim, 1), "W_out")
        self.params["b_out"] = init.const((1,), 0.0)

    def __call__(self, z, training):
        if training:
            self.seen_training_batch = True
        elif not self.seen_training_batch:
            warnings.warn("decoder evaluated before any training batch; using initial batch-norm statistics",
                          stacklevel=2)
            self.seen_training_batch = True
        p, buf = self.params, self.buffers
        for k in range(self.depth):
            z = ad.relu(z @ p[f"W{k}"] + p[f"b{k}"])
            z = ad.batch_norm(z, p[f"gamma{k}"], p[f"beta{k}"], buf[f"running_mean{k}"],
                              buf[f"running_var{k}"], training, self.momentum, self.eps)
        logit = z @ p["W_out"] + p["b_out"]
        return ad.sigmoid(logit.reshape(logit.shape[0]))


def mlp_decode(decoder, z0, mode="eval"):
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    z0 = ad.as_value(z0)
    single = z0.ndim == 1
    if single:
        z0 = z0.reshape(1, z0.shape[0])
    y = decoder(z0, mode == "train")
    return y.reshape(()) if single else y


class ConverNet(Module):
    """Pooled word embeddings + context -> stacked LN-BiLSTM -> attention/merge -> MLP."""

    def __init__(self, config):
        super().__init__()
        config.validate()
        if config.vocab_size < 2:
            raise ShapeError("config.vocab_size must include PAD and UNK")
        self.config = config
        init = Init(config.seed, config.init_std)
        self.children["embedding"] = Embedding(config.vocab_size, config.d_w, init)
        in_dim = config.d_w
        self.use_background = config.use_context and config.n_backgrounds > 0
        if config.use_context:
            in_dim += config.d_context
            if self.use_background:
                self.children["background"] = Embedding(config.n_backgrounds, config.d_b, init)
                in_dim += config.d_b
        H = config.hidden
        self.layers = []
        for k in range(config.stack_depth):
            layer = BiLSTM(in_dim, H, init, cell=config.cell)
            self.children[f"encoder{k}"] = layer
            self.layers.append(layer)
            in_dim = 2 * H
        merge_in = 2 * H
        if config.attention != "none":
            self.children["attention"] = LengthAttention(config.max_len, init, per_length=config.attention == "dwdl")
            merge_in += 2 * H
        self.children["merge"] = Merge(merge_in, config.merge_width, init)
        self.children["decoder"] = MLPDecoder(config.merge_width, config.mlp_width, config.mlp_depth, init,
                                              config.bn_momentum, config.bn_eps)

    def encode_inputs(self, batch):
        parts = [self.children["embedding"].pool(batch.ids, batch.counts)]
        if self.config.use_context:
            parts.append(Value(batch.context))
            if self.use_background:
                bg = batch.background[:, :, None]
                parts.append(self.children["background"].pool(bg, (bg[:, :, 0] > 0).astype(np.int64)))
        return ad.concat(parts)

    def __call__(self, batch, training=False):
        lengths = batch.lengths
        x = self.encode_inputs(batch)
        for layer in self.layers:
            x = layer(x, lengths)
        last = ad.take_rows(x, lengths - 1)
        parts = [last]
        if "attention" in self.children:
            parts = [self.children["attention"](x, lengths), last]
        z0 = self.children["merge"](parts)
        return self.children["decoder"](z0, training)


def convernet_forward(model, batch, training=False):
    return model(batch, training)
