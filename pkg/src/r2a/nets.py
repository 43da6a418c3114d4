"""Network blocks: BiLSTM encoder, attention head, MLP predictor, CNN classifier."""

from __future__ import annotations

import numpy as np

from .numerics import (
    DTYPE,
    Tensor,
    _sigmoid,
    concat,
    dropout,
    gather_positions,
    parameter,
    softmax,
)


class Module:
    """Minimal parameter container.

    Parameters are leaf tensors stored as attributes; sub-modules may be
    attributes or values of dict attributes.  Names are dotted paths.
    """

    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, dict):
                for k in sorted(val):
                    if isinstance(val[k], Module):
                        yield from val[k].named_parameters(f"{prefix}{key}.{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, dict):
                for v in val.values():
                    if isinstance(v, Module):
                        yield from v.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict and set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            if name not in params:
                continue
            if params[name].shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} != {params[name].shape}")
            params[name].data[...] = arr


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, zero=False):
        if zero:
            self.W = parameter(np.zeros((n_in, n_out)))
            self.b = parameter(np.zeros(n_out))
        else:
            bound = 1.0 / np.sqrt(n_in)
            self.W = parameter(_uniform(rng, (n_in, n_out), bound))
            self.b = parameter(_uniform(rng, (n_out,), bound))

    def __call__(self, x):
        return x @ self.W + self.b


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def lstm_recurrence(pre, Wh):
    """Run an LSTM over precomputed input projections.

    ``pre`` is [B, L, 4H] (x_t W_x + b, gate order i, f, g, o) and ``Wh`` is
    [H, 4H].  The state starts at zero.  Returns hidden states [B, L, H].
    Backward is hand-written BPTT.
    """
    P, W = pre.data, Wh.data
    B, L, H4 = P.shape
    H = H4 // 4
    hs = np.zeros((B, L + 1, H), dtype=DTYPE)
    cs = np.zeros((B, L + 1, H), dtype=DTYPE)
    gates = np.empty((B, L, H4), dtype=DTYPE)
    tcs = np.empty((B, L, H), dtype=DTYPE)
    for t in range(L):
        z = P[:, t] + hs[:, t] @ W
        gt = gates[:, t]
        gt[:] = _sigmoid(z)
        gt[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
        i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
        cs[:, t + 1] = f * cs[:, t] + i * g
        tcs[:, t] = np.tanh(cs[:, t + 1])
        hs[:, t + 1] = o * tcs[:, t]

    def backward(gH):
        dpre = np.empty_like(P)
        dW = np.zeros_like(W)
        dh_next = np.zeros((B, H), dtype=DTYPE)
        dc_next = np.zeros((B, H), dtype=DTYPE)
        for t in range(L - 1, -1, -1):
            gt = gates[:, t]
            i, f, g, o = gt[:, :H], gt[:, H:2 * H], gt[:, 2 * H:3 * H], gt[:, 3 * H:]
            tc = tcs[:, t]
            dh = gH[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dpre[:, t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dW += hs[:, t].T @ dz
            dh_next = dz @ W.T
        return dpre, dW

    return Tensor._make(hs[:, 1:].copy(), (pre, Wh), backward, "lstm")


def reverse_index(lengths, max_len):
    """Index that reverses each row within its length and fixes padding."""
    idx = np.tile(np.arange(max_len), (len(lengths), 1))
    for b, n in enumerate(lengths):
        idx[b, :n] = np.arange(n - 1, -1, -1)
    return idx


class LSTM(Module):
    """Single-direction LSTM; weights uniform in +-1/sqrt(H)."""

    def __init__(self, n_in, hidden, rng):
        bound = 1.0 / np.sqrt(hidden)
        self.hidden = hidden
        self.Wx = parameter(_uniform(rng, (n_in, 4 * hidden), bound))
        self.Wh = parameter(_uniform(rng, (hidden, 4 * hidden), bound))
        self.b = parameter(_uniform(rng, (4 * hidden,), bound))

    def __call__(self, x):
        return lstm_recurrence(x @ self.Wx + self.b, self.Wh)


class BiOutput:
    """BiLSTM states; ``bwd_rev`` keeps the backward states in reversed order."""

    def __init__(self, h, fwd, bwd_rev, rev_idx):
        self.h, self.fwd, self.bwd_rev, self.rev_idx = h, fwd, bwd_rev, rev_idx


class BiLSTM(Module):
    def __init__(self, n_in, hidden, rng):
        self.n_in, self.hidden = n_in, hidden
        self.fwd = LSTM(n_in, hidden, rng)
        self.bwd = LSTM(n_in, hidden, rng)

    @property
    def out_dim(self):
        return 2 * self.hidden

    def __call__(self, x, lengths):
        return bilstm_forward(x, self, lengths)


def bilstm_forward(x, params, lengths=None):
    """h_i = [fwd_i ; bwd_i] for a right-padded batch ``x`` of shape [B, L, D]."""
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, L, D = x.shape
    if D != params.n_in:
        raise ValueError(f"input width {D} != encoder width {params.n_in}")
    if L < 1:
        raise ValueError("empty sequence")
    lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
    rev = reverse_index(lengths, L)
    fwd = params.fwd(x)
    bwd_rev = params.bwd(gather_positions(x, rev))
    bwd = gather_positions(bwd_rev, rev)
    return BiOutput(concat([fwd, bwd], axis=-1), fwd, bwd_rev, rev)


# ---------------------------------------------------------------------------
# Attention and prediction
# ---------------------------------------------------------------------------

class AttentionHead(Module):
    def __init__(self, n_in, width, rng):
        bound = 1.0 / np.sqrt(n_in)
        self.W = parameter(_uniform(rng, (n_in, width), bound))
        self.b = parameter(np.zeros(width))
        self.q = parameter(_uniform(rng, (width,), 1.0 / np.sqrt(width)))

    def scores(self, h):
        return (h @ self.W + self.b).tanh() @ self.q

    def __call__(self, h, mask=None):
        return attention_forward(h, self, mask)


def attention_forward(h, head, mask=None):
    """alpha = softmax(<tanh(W h_i + b), q>) over unmasked positions."""
    return softmax(head.scores(h), mask)


def attend(h, alpha):
    """Context vector sum_i alpha_i h_i for [B, L, D] states."""
    B, L, D = h.shape
    return (alpha.reshape(B, 1, L) @ h).reshape(B, D)


class Predictor(Module):
    """One ReLU hidden layer then a task-sized output layer (starts at zero)."""

    def __init__(self, n_in, n_out, rng, hidden=50, drop=0.1, drop_rng=None):
        self.n_in = n_in
        self.hidden = Linear(n_in, hidden, rng)
        self.out = Linear(hidden, n_out, rng, zero=True)
        self.drop = drop
        self.rng = drop_rng if drop_rng is not None else rng

    def __call__(self, ctx):
        return predict(ctx, self)


def predict(ctx, params):
    if ctx.shape[-1] != params.n_in:
        raise ValueError(f"context width {ctx.shape[-1]} != predictor width {params.n_in}")
    hid = params.hidden(ctx).relu()
    hid = dropout(hid, params.drop, params.rng, params.training)
    return params.out(hid)


# ---------------------------------------------------------------------------
# CNN classifier
# ---------------------------------------------------------------------------

class ConvClassifier(Module):
    """Kim-style CNN: windows 3/5/7, 50 maps each, max-over-time, MLP head."""

    def __init__(self, n_in, n_out, rng, windows=(3, 5, 7), maps=50, hidden=50, drop=0.1,
                 drop_rng=None):
        self.windows = tuple(windows)
        self.filters = {}
        for k in self.windows:
            self.filters[f"w{k}"] = Linear(k * n_in, maps, rng)
        self.head = Predictor(maps * len(self.windows), n_out, rng, hidden=hidden, drop=drop,
                              drop_rng=drop_rng)

    @property
    def feature_dim(self):
        return self.head.n_in

    def __call__(self, emb, lengths, z=None):
        return conv_classify(emb, z, self, lengths)


def conv_features(emb, params, lengths):
    B, L, D = emb.shape
    kmax = max(params.windows)
    if L < kmax:
        emb = concat([emb, Tensor(np.zeros((B, kmax - L, D)))], axis=1)
        L = kmax
    lengths = np.maximum(np.asarray(lengths), kmax)
    pooled = []
    for k in params.windows:
        n_win = L - k + 1
        cols = concat([emb[:, j:j + n_win] for j in range(k)], axis=-1)
        feat = params.filters[f"w{k}"](cols).relu()
        valid = np.arange(n_win)[None, :] <= (np.minimum(lengths, L) - k)[:, None]
        feat = feat + np.where(valid, 0.0, -1e9)[:, :, None]
        pooled.append(feat.max(axis=1))
    return concat(pooled, axis=-1)


def conv_classify(emb, z, params, lengths=None):
    """Classify ``z_i * emb_i`` with the CNN; ``z=None`` means keep every token."""
    if emb.ndim == 2:
        emb = emb.reshape(1, *emb.shape)
    B, L, _ = emb.shape
    lengths = np.full(B, L) if lengths is None else lengths
    x = emb if z is None else emb * z.reshape(B, L, 1)
    return params.head(conv_features(x, params, lengths))
