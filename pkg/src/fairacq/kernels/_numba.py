"""Numba-compiled kernels; loop-level twins of ``_numpy``."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def _pack(values, colmask, L):
    B, d = colmask.shape
    coords = np.zeros((B, L), dtype=np.int64)
    vals = np.zeros((B, L), dtype=np.float64)
    mask = np.zeros((B, L), dtype=np.bool_)
    for b in range(B):
        k = 0
        for j in range(d):
            if colmask[b, j]:
                coords[b, k] = j
                vals[b, k] = values[b, j]
                mask[b, k] = True
                k += 1
    return coords, vals, mask


def pack_tokens(values, colmask):
    counts = colmask.sum(axis=1)
    L = max(1, int(counts.max()) if colmask.shape[0] else 1)
    return _pack(np.ascontiguousarray(values, dtype=np.float64),
                 np.ascontiguousarray(colmask), L)


@njit(cache=True)
def attend_forward(M, mask, q):
    B, L, H = M.shape
    a = np.zeros((B, L))
    r = np.zeros((B, H))
    for b in range(B):
        top = -np.inf
        for i in range(L):
            if mask[b, i]:
                s = 0.0
                for h in range(H):
                    s += M[b, i, h] * q[b, h]
                a[b, i] = s
                if s > top:
                    top = s
        if top == -np.inf:
            continue
        z = 0.0
        for i in range(L):
            if mask[b, i]:
                e = math.exp(a[b, i] - top)
                a[b, i] = e
                z += e
            else:
                a[b, i] = 0.0
        for i in range(L):
            w = a[b, i] / z
            a[b, i] = w
            if w != 0.0:
                for h in range(H):
                    r[b, h] += w * M[b, i, h]
    return a, r


@njit(cache=True)
def attend_backward(M, a, q, dr):
    B, L, H = M.shape
    dM = np.zeros((B, L, H))
    dq = np.zeros((B, H))
    da = np.zeros(L)
    for b in range(B):
        acc = 0.0
        for i in range(L):
            s = 0.0
            for h in range(H):
                s += M[b, i, h] * dr[b, h]
            da[i] = s
            acc += a[b, i] * s
        for i in range(L):
            ai = a[b, i]
            if ai == 0.0:
                continue
            ds = ai * (da[i] - acc)
            for h in range(H):
                dM[b, i, h] = ai * dr[b, h] + ds * q[b, h]
                dq[b, h] += ds * M[b, i, h]
    return dM, dq


@njit(cache=True)
def _sig(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@njit(cache=True)
def lstm_forward(z, c_prev):
    B, H = c_prev.shape
    gates = np.empty((B, 4 * H))
    c = np.empty((B, H))
    tc = np.empty((B, H))
    h = np.empty((B, H))
    for b in range(B):
        for k in range(H):
            i = _sig(z[b, k])
            f = _sig(z[b, H + k])
            g = math.tanh(z[b, 2 * H + k])
            o = _sig(z[b, 3 * H + k])
            gates[b, k] = i
            gates[b, H + k] = f
            gates[b, 2 * H + k] = g
            gates[b, 3 * H + k] = o
            ck = f * c_prev[b, k] + i * g
            c[b, k] = ck
            t = math.tanh(ck)
            tc[b, k] = t
            h[b, k] = o * t
    return gates, c, tc, h


@njit(cache=True)
def lstm_backward(dh, dc, gates, c_prev, tc):
    B, H = c_prev.shape
    dz = np.empty((B, 4 * H))
    dc_prev = np.empty((B, H))
    for b in range(B):
        for k in range(H):
            i = gates[b, k]
            f = gates[b, H + k]
            g = gates[b, 2 * H + k]
            o = gates[b, 3 * H + k]
            t = tc[b, k]
            dct = dc[b, k] + dh[b, k] * o * (1.0 - t * t)
            dz[b, k] = dct * g * i * (1.0 - i)
            dz[b, H + k] = dct * c_prev[b, k] * f * (1.0 - f)
            dz[b, 2 * H + k] = dct * i * (1.0 - g * g)
            dz[b, 3 * H + k] = dh[b, k] * t * o * (1.0 - o)
            dc_prev[b, k] = dct * f
    return dz, dc_prev


@njit(cache=True)
def scatter_add_rows(n_rows, idx, rows):
    N, K = rows.shape
    out = np.zeros((n_rows, K))
    for n in range(N):
        j = idx[n]
        for k in range(K):
            out[j, k] += rows[n, k]
    return out


@njit(cache=True)
def masked_argmax(q, legal):
    B, A = q.shape
    out = np.zeros(B, dtype=np.int64)
    for b in range(B):
        best = -np.inf
        arg = 0
        for k in range(A):
            if legal[b, k] and q[b, k] > best:
                best = q[b, k]
                arg = k
        out[b] = arg
    return out
