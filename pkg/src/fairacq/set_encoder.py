"""Order-invariant encoder for arbitrary subsets of observed features.

Each observed feature ``j`` with value ``x_j`` becomes a token ``[x_j, e_j]``
(``e_j`` one-hot over coordinates). A shared reading network maps tokens to
memory vectors; a processing loop then alternates softmax attention over the
memories with an LSTM update of the query. The final attention read is the
set embedding.

Processing schedule, for ``steps`` attention rounds::

    r_0 = mean(m)                      (zero vector for an empty set)
    h, c = LSTM([0, r_0], 0, 0);  q = h
    for k in 1..steps:
        a_k = softmax(m . q);  r_k = sum(a_k * m)
        if k < steps: h, c = LSTM([q, r_k], h, c);  q = h
    embedding = r_steps
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn import MLP, uniform_fan_in

MEMORY_WIDTH = 32
READ_HIDDEN = 64
LSTM_HIDDEN = 32
PROCESSING_STEPS = 5


@dataclass(frozen=True)
class FeatureToken:
    value: float
    coordinate: int  # 0-based encoded column index


@dataclass
class TokenBatch:
    """Left-aligned padded tokens for ``B`` sets; ``mask`` marks real tokens."""

    coords: np.ndarray  # (B, L) int64
    values: np.ndarray  # (B, L) float64
    mask: np.ndarray  # (B, L) bool

    @property
    def size(self):
        return self.coords.shape[0]

    @classmethod
    def from_dense(cls, values, colmask):
        """Build from a dense ``(B, d)`` value matrix and observed-column mask."""
        colmask = np.asarray(colmask, dtype=bool)
        if colmask.ndim == 1:
            colmask = colmask[None, :]
            values = np.asarray(values)[None, :]
        coords, vals, mask = kernels.pack_tokens(np.asarray(values, dtype=np.float64), colmask)
        return cls(coords, vals, mask)

    @classmethod
    def from_tokens(cls, tokens):
        """A single-set batch from a sequence of :class:`FeatureToken`, order kept."""
        coords = [int(t.coordinate) for t in tokens]
        if len(set(coords)) != len(coords):
            raise ValueError(f"duplicate coordinates in token list: {coords}")
        L = max(1, len(tokens))
        c = np.zeros((1, L), dtype=np.int64)
        v = np.zeros((1, L))
        m = np.zeros((1, L), dtype=bool)
        for k, t in enumerate(tokens):
            c[0, k] = t.coordinate
            v[0, k] = t.value
            m[0, k] = True
        return cls(c, v, m)


class SetEncoder:
    """Reading block + attention/LSTM processing block.

    Parameters live in ``params``: ``R*`` for the reading network (``R_W0``
    has one row for the value and one per coordinate), ``L_W``/``L_U``/``L_b``
    for the LSTM (gate order i, f, g, o).
    """

    def __init__(self, n_features, rng, memory_width=MEMORY_WIDTH, read_hidden=READ_HIDDEN,
                 lstm_hidden=LSTM_HIDDEN, steps=PROCESSING_STEPS):
        if lstm_hidden != memory_width:
            raise ValueError("query width must equal memory width for dot-product attention")
        self.n_features = int(n_features)
        self.memory_width = memory_width
        self.steps = int(steps)
        self.H = lstm_hidden
        fan_in = 1 + self.n_features
        self.params = {"R_W0": uniform_fan_in(rng, fan_in, (fan_in, read_hidden)),
                       "R_b0": uniform_fan_in(rng, fan_in, (read_hidden,))}
        tail = MLP((read_hidden, read_hidden, memory_width), rng)
        for k, v in tail.params.items():
            self.params[f"R_{k[0]}{int(k[1:]) + 1}"] = v
        in_w = memory_width + lstm_hidden
        self.params["L_W"] = uniform_fan_in(rng, lstm_hidden, (in_w, 4 * lstm_hidden))
        self.params["L_U"] = uniform_fan_in(rng, lstm_hidden, (lstm_hidden, 4 * lstm_hidden))
        self.params["L_b"] = uniform_fan_in(rng, lstm_hidden, (4 * lstm_hidden,))

    # -- reading block -------------------------------------------------
    def _read(self, batch):
        p = self.params
        B, L = batch.coords.shape
        flat_c = batch.coords.reshape(-1)
        flat_v = batch.values.reshape(-1, 1)
        z0 = flat_v * p["R_W0"][0] + p["R_W0"][1 + flat_c] + p["R_b0"]
        h0 = np.maximum(z0, 0.0)
        z1 = h0 @ p["R_W1"] + p["R_b1"]
        h1 = np.maximum(z1, 0.0)
        m = h1 @ p["R_W2"] + p["R_b2"]
        M = m.reshape(B, L, -1) * batch.mask[:, :, None]
        return M, (flat_c, flat_v, h0, h1)

    def _read_backward(self, dM, batch, cache):
        p = self.params
        flat_c, flat_v, h0, h1 = cache
        dm = (dM * batch.mask[:, :, None]).reshape(-1, dM.shape[2])
        g = {}
        g["R_W2"] = h1.T @ dm
        g["R_b2"] = dm.sum(axis=0)
        dh1 = (dm @ p["R_W2"].T) * (h1 > 0)
        g["R_W1"] = h0.T @ dh1
        g["R_b1"] = dh1.sum(axis=0)
        dz0 = (dh1 @ p["R_W1"].T) * (h0 > 0)
        dW0 = kernels.scatter_add_rows(self.n_features + 1, flat_c + 1, dz0)
        dW0[0] = (flat_v * dz0).sum(axis=0)
        g["R_W0"] = dW0
        g["R_b0"] = dz0.sum(axis=0)
        return g

    # -- processing block ----------------------------------------------
    def _lstm(self, x, h, c):
        p = self.params
        z = x @ p["L_W"] + h @ p["L_U"] + p["L_b"]
        gates, c_new, tc, h_new = kernels.lstm_forward(z, c)
        return h_new, c_new, (x, h, c, gates, tc)

    def forward(self, batch):
        """Embed every set in ``batch``. Returns ``(embedding (B, 32), cache)``."""
        M, read_cache = self._read(batch)
        B = batch.size
        counts = batch.mask.sum(axis=1)
        r0 = M.sum(axis=1) / np.maximum(counts, 1)[:, None]
        h = np.zeros((B, self.H))
        c = np.zeros((B, self.H))
        x = np.concatenate([np.zeros((B, self.H)), r0], axis=1)
        h, c, lc = self._lstm(x, h, c)
        lstm_caches = [lc]
        q = h
        attn = []
        r = r0
        for k in range(1, self.steps + 1):
            a, r = kernels.attend_forward(M, batch.mask, q)
            attn.append((q, a))
            if k < self.steps:
                x = np.concatenate([q, r], axis=1)
                h, c, lc = self._lstm(x, h, c)
                lstm_caches.append(lc)
                q = h
        cache = {"batch": batch, "M": M, "read": read_cache, "counts": counts,
                 "lstm": lstm_caches, "attn": attn}
        return r, cache

    def backward(self, demb, cache):
        """Parameter gradients given ``d loss / d embedding``."""
        p = self.params
        batch = cache["batch"]
        M = cache["M"]
        B = batch.size
        H = self.H
        dM = np.zeros_like(M)
        g = {k: np.zeros_like(v) for k, v in p.items() if k.startswith("L_")}
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        dr = demb
        for k in range(self.steps, 0, -1):
            q, a = cache["attn"][k - 1]
            dM_k, dq = kernels.attend_backward(M, a, q, dr)
            dM += dM_k
            # q_{k-1} is the LSTM output that fed round k
            dh = dq + dh_next
            x, h_prev, c_prev, gates, tc = cache["lstm"][k - 1]
            dz, dc_next = kernels.lstm_backward(dh, dc_next, gates, c_prev, tc)
            g["L_W"] += x.T @ dz
            g["L_U"] += h_prev.T @ dz
            g["L_b"] += dz.sum(axis=0)
            dx = dz @ p["L_W"].T
            dh_next = dz @ p["L_U"].T
            if k > 1:
                # x = [q_{k-2}, r_{k-1}]: route into the previous round
                dh_next = dh_next + dx[:, :H]
                dr = dx[:, H:]
            else:
                # x = [0, r_0], r_0 = mean of memories
                dr0 = dx[:, H:]
                dM += (dr0 / np.maximum(cache["counts"], 1)[:, None])[:, None, :] * batch.mask[:, :, None]
        g.update(self._read_backward(dM, batch, cache["read"]))
        return g

    def attention_trace(self, cache):
        """Attention weight matrices of every processing round, in order."""
        return [a for _, a in cache["attn"]]


# -- single-set convenience API ------------------------------------------

def read_block(tokens, encoder):
    """Memory vectors for a token list, one row per token in input order."""
    if not tokens:
        return np.zeros((0, encoder.memory_width))
    batch = TokenBatch.from_tokens(tokens)
    for t in tokens:
        if not 0 <= t.coordinate < encoder.n_features:
            raise ValueError(f"coordinate {t.coordinate} out of range")
    M, _ = encoder._read(batch)
    return M[0]


def attention_weights(memories, query):
    memories = np.asarray(memories, dtype=np.float64)
    if memories.shape[0] == 0:
        raise ValueError("attention over an empty memory bank")
    mask = np.ones((1, memories.shape[0]), dtype=bool)
    a, _ = kernels.attend_forward(memories[None], mask, np.asarray(query, dtype=np.float64)[None])
    return a[0]


def process_block(memories, encoder, return_trace=False):
    """Run the processing loop on an explicit memory bank ``(N, 32)``."""
    memories = np.asarray(memories, dtype=np.float64)
    N = memories.shape[0]
    H = encoder.H
    M = np.zeros((1, max(N, 1), memories.shape[1] if N else encoder.memory_width))
    mask = np.zeros((1, max(N, 1)), dtype=bool)
    if N:
        M[0, :N] = memories
        mask[0, :N] = True
    r = M[0].sum(axis=0, keepdims=True) / max(N, 1)
    h = np.zeros((1, H))
    c = np.zeros((1, H))
    h, c, _ = encoder._lstm(np.concatenate([np.zeros((1, H)), r], axis=1), h, c)
    q = h
    trace = []
    for k in range(1, encoder.steps + 1):
        a, r = kernels.attend_forward(M, mask, q)
        trace.append(a[0, :N].copy())
        if k < encoder.steps:
            h, c, _ = encoder._lstm(np.concatenate([q, r], axis=1), h, c)
            q = h
    if return_trace:
        return r[0], trace
    return r[0]


def encode(tokens, encoder):
    """Embedding of one observed set given as a list of :class:`FeatureToken`."""
    if not tokens:
        batch = TokenBatch(np.zeros((1, 1), dtype=np.int64), np.zeros((1, 1)), np.zeros((1, 1), dtype=bool))
    else:
        batch = TokenBatch.from_tokens(tokens)
    emb, _ = encoder.forward(batch)
    return emb[0]
