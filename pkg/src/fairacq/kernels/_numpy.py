"""Pure-numpy reference implementations of the hot kernels.

Every function here has a twin with the identical signature in ``_numba``.
"""
import numpy as np


def pack_tokens(values, colmask):
    """Compact the observed entries of each row into a left-aligned token batch.

    Returns ``(coords, vals, mask)`` of shape ``(B, L)`` with
    ``L = max(1, max_row_count)``. Tokens keep ascending coordinate order.
    """
    B, d = colmask.shape
    counts = colmask.sum(axis=1)
    L = max(1, int(counts.max()) if B else 1)
    # stable sort puts observed columns first, in coordinate order
    order = np.argsort(~colmask, axis=1, kind="stable")[:, :L]
    if L > d:
        order = np.concatenate([order, np.zeros((B, L - d), dtype=order.dtype)], axis=1)
    mask = np.arange(L)[None, :] < counts[:, None]
    coords = np.where(mask, order, 0).astype(np.int64)
    vals = np.where(mask, np.take_along_axis(values, coords, axis=1), 0.0)
    return coords, vals.astype(np.float64), mask


def attend_forward(M, mask, q):
    scores = np.einsum("blh,bh->bl", M, q)
    scores = np.where(mask, scores, -np.inf)
    top = scores.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(scores - top), 0.0)
    z = e.sum(axis=1, keepdims=True)
    a = e / np.where(z > 0, z, 1.0)
    r = np.einsum("bl,blh->bh", a, M)
    return a, r


def attend_backward(M, a, q, dr):
    da = np.einsum("blh,bh->bl", M, dr)
    ds = a * (da - (a * da).sum(axis=1, keepdims=True))
    dM = a[:, :, None] * dr[:, None, :] + ds[:, :, None] * q[:, None, :]
    dq = np.einsum("bl,blh->bh", ds, M)
    return dM, dq


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(z, c_prev):
    """Gate nonlinearities for pre-activations ``z`` laid out as [i | f | g | o]."""
    H = c_prev.shape[1]
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    g = np.tanh(z[:, 2 * H:3 * H])
    o = _sigmoid(z[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    gates = np.concatenate([i, f, g, o], axis=1)
    return gates, c, tc, h


def lstm_backward(dh, dc, gates, c_prev, tc):
    H = c_prev.shape[1]
    i, f, g, o = gates[:, :H], gates[:, H:2 * H], gates[:, 2 * H:3 * H], gates[:, 3 * H:]
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    di = dc_total * g
    dg = dc_total * i
    df = dc_total * c_prev
    dc_prev = dc_total * f
    dz = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
    )
    return dz, dc_prev


def scatter_add_rows(n_rows, idx, rows):
    out = np.zeros((n_rows, rows.shape[1]))
    np.add.at(out, idx, rows)
    return out


def masked_argmax(q, legal):
    """Row-wise argmax over legal entries; lowest index wins ties."""
    masked = np.where(legal, q, -np.inf)
    return np.argmax(masked, axis=1).astype(np.int64)
