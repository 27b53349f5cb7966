"""Compiled inner loops of the layer recursion."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def merge_targets(src_idx, offsets, out):
    """Sorted union of ``src_idx + o`` over the distinct offsets ``o``.

    Each shifted list is already sorted, so a k-way merge replaces a sort.
    """
    n = src_idx.shape[0]
    K = offsets.shape[0]
    ptr = np.zeros(K, dtype=np.int64)
    nt = 0
    last = -1
    big = np.iinfo(np.int64).max
    while True:
        best = big
        for k in range(K):
            if ptr[k] < n:
                v = src_idx[ptr[k]] + offsets[k]
                if v < best:
                    best = v
        if best == big:
            break
        for k in range(K):
            if ptr[k] < n and src_idx[ptr[k]] + offsets[k] == best:
                ptr[k] += 1
        if best != last:
            out[nt] = best
            nt += 1
            last = best
    return out[:nt]


@njit(cache=True)
def push_layer(src_idx, src_val, pot, tr_m, tr_m2, tr_off, tr_c, M, targets, smax, ssum):
    """One log-space transition of a sparse layer onto the sorted ``targets``.

    ``smax``/``ssum`` (length ``size*M``, initialised to -inf / 0) are scratch
    buffers left reset on return.  Contributions are accumulated in source
    order, then transition order, so results depend only on the inputs.
    """
    n = src_idx.shape[0]
    T = tr_m.shape[0]
    for i in range(n):
        base = src_idx[i]
        for t in range(T):
            m = tr_m[t]
            v = src_val[i, m]
            if v == -np.inf:
                continue
            w = v + pot[i, m] + tr_c[t]
            j = (base + tr_off[t]) * M + tr_m2[t]
            if w > smax[j]:
                smax[j] = w
    for i in range(n):
        base = src_idx[i]
        for t in range(T):
            m = tr_m[t]
            v = src_val[i, m]
            if v == -np.inf:
                continue
            w = v + pot[i, m] + tr_c[t]
            j = (base + tr_off[t]) * M + tr_m2[t]
            ssum[j] += np.exp(w - smax[j])
    nt = targets.shape[0]
    out_val = np.empty((nt, M))
    for r in range(nt):
        for m in range(M):
            j = targets[r] * M + m
            mx = smax[j]
            if mx == -np.inf:
                out_val[r, m] = -np.inf
            else:
                out_val[r, m] = mx + np.log(ssum[j])
            smax[j] = -np.inf
            ssum[j] = 0.0
    return out_val


@njit(cache=True)
def push_layer_linear(src_idx, src_w, pot_w, tr_m, tr_m2, tr_off, tr_w, M, targets, ssum):
    """Linear-space variant of :func:`push_layer`.

    Inputs are already exponentiated relative to their maxima; the caller
    guarantees the combined dynamic range stays far from underflow, so the
    sums are as accurate as the log-space version and need no ``exp`` per
    contribution.
    """
    n = src_idx.shape[0]
    T = tr_m.shape[0]
    for i in range(n):
        base = src_idx[i]
        for t in range(T):
            m = tr_m[t]
            v = src_w[i, m]
            if v == 0.0:
                continue
            ssum[(base + tr_off[t]) * M + tr_m2[t]] += v * pot_w[i, m] * tr_w[t]
    nt = targets.shape[0]
    out_val = np.empty((nt, M))
    for r in range(nt):
        for m in range(M):
            j = targets[r] * M + m
            out_val[r, m] = ssum[j]
            ssum[j] = 0.0
    return out_val


@njit(cache=True)
def _mix64(h):
    h = h + np.uint64(0x9E3779B97F4A7C15)
    h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return h ^ (h >> np.uint64(31))


@njit(cache=True)
def hash_rows(start, x, keys):
    """Fold each row of ``x`` into the pre-mixed seed ``start``."""
    n, d = x.shape
    out = np.empty(n, dtype=np.uint64)
    K = keys.shape[0]
    for i in range(n):
        h = start
        for j in range(d):
            h = _mix64(h ^ (np.uint64(x[i, j]) * keys[j % K]))
        out[i] = h
    return out


@njit(cache=True)
def unravel(idx, shape, origin):
    """Lattice coordinates of C-order flat box indices, shifted by ``origin``."""
    n = idx.shape[0]
    d = shape.shape[0]
    out = np.empty((n, d), dtype=np.int64)
    for i in range(n):
        r = idx[i]
        for j in range(d - 1, -1, -1):
            out[i, j] = r % shape[j] + origin[j]
            r //= shape[j]
    return out
