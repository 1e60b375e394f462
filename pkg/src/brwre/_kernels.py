"""Compiled inner loops.

Each kernel takes a ``numpy.random.Generator`` and consumes it in a fixed
order, so results depend only on the generator handed in.  Kernels release the
GIL so that chunks can run on worker threads.
"""
from __future__ import annotations

import numpy as np
from numba import njit

GAUSS = 0
DISCRETE = 1


@njit(nogil=True, cache=True)
def _pick(cdf, u):
    j = np.searchsorted(cdf, u, side="right")
    if j >= cdf.size:
        j = cdf.size - 1
    return j


@njit(nogil=True, cache=True)
def tube_chunk(rng, nrep, n, comp_cdf, comp_kind, g_mean, g_sd, g_mark_max, mark_cdf, mark_val,
               d_start, d_len, d_cdf, d_val, d_mark, lower, upper, cap, x0, exit_lo, exit_hi):
    """Count walks staying in ``[lower[i], upper[i]]`` for ``i = 1..n``.

    Steps come from a finite mixture of components: Gaussian (``g_mean``,
    ``g_sd``, mark pmf row ``mark_cdf[c]`` over ``mark_val[c]``) or discrete
    (rows ``d_start[c] .. d_start[c] + d_len[c]`` of the atom tables).  A step
    whose mark exceeds ``cap`` ends the walk.  Returns ``(hits, exit_hits)``,
    the second counting hits whose final value lies in ``[exit_lo, exit_hi]``.
    """
    hits = 0
    exit_hits = 0
    ncomp = comp_cdf.size
    for _ in range(nrep):
        x = x0
        alive = True
        for i in range(1, n + 1):
            c = 0
            if ncomp > 1:
                c = _pick(comp_cdf, rng.random())
            if comp_kind[c] == GAUSS:
                x += g_mean[c] + g_sd[c] * rng.standard_normal()
                if cap < g_mark_max[c]:
                    k = _pick(mark_cdf[c], rng.random())
                    if mark_val[c, k] > cap:
                        alive = False
                        break
            else:
                s = d_start[c]
                j = s + _pick(d_cdf[s:s + d_len[c]], rng.random())
                x += d_val[j]
                if d_mark[j] > cap:
                    alive = False
                    break
            if x < lower[i] or x > upper[i]:
                alive = False
                break
        if alive:
            hits += 1
            if exit_lo <= x <= exit_hi:
                exit_hits += 1
    return hits, exit_hits


@njit(nogil=True, cache=True)
def brw_replica(rng, n, kind, cnt_start, cnt_len, cnt_cdf, cnt_val, mu, sigma,
                at_start, at_len, at_cdf, at_cnt, at_off, flat, barrier, cap):
    """Grow one killed branching system for ``n`` generations.

    Generation ``i`` (1-based) uses law ``i - 1`` of the tables: Gaussian laws
    draw a count from their pmf rows and i.i.d. normal displacements; discrete
    laws pick an atom and copy its displacement list.  Children above
    ``barrier[i]`` are removed; when more than ``cap`` survive a uniform
    subset of size ``cap`` is kept.  Returns ``(positions, m_n, truncated,
    sizes)`` where ``sizes[i]`` is the population after generation ``i``.
    """
    pos = np.zeros(1)
    size = 1
    m_n = np.inf
    truncated = False
    sizes = np.zeros(n + 1, dtype=np.int64)
    sizes[0] = 1
    for i in range(1, n + 1):
        law = i - 1
        # first pass: draw broods into a scratch buffer
        buf_cap = max(16, 2 * size)
        buf = np.empty(buf_cap)
        nb = 0
        m_n = np.inf
        b = barrier[i]
        if kind[law] == GAUSS:
            mu_l = mu[law]
            sd_l = sigma[law]
            s = cnt_start[law]
            ln = cnt_len[law]
            for p in range(size):
                x = pos[p] + mu_l
                if ln == 1:
                    k = cnt_val[s]
                else:
                    u = rng.random()
                    j = s
                    while j < s + ln - 1 and cnt_cdf[j] <= u:
                        j += 1
                    k = cnt_val[j]
                if nb + k > buf_cap:
                    buf_cap = 2 * buf_cap + k
                    nbuf = np.empty(buf_cap)
                    nbuf[:nb] = buf[:nb]
                    buf = nbuf
                for _ in range(k):
                    y = x + sd_l * rng.standard_normal()
                    if y < m_n:
                        m_n = y
                    buf[nb] = y
                    nb += y <= b
        else:
            s = at_start[law]
            ln = at_len[law]
            for p in range(size):
                x = pos[p]
                a = s + _pick(at_cdf[s:s + ln], rng.random())
                o = at_off[a]
                k = at_cnt[a]
                if nb + k > buf_cap:
                    buf_cap = 2 * buf_cap + k
                    nbuf = np.empty(buf_cap)
                    nbuf[:nb] = buf[:nb]
                    buf = nbuf
                for q in range(k):
                    y = x + flat[o + q]
                    if y < m_n:
                        m_n = y
                    buf[nb] = y
                    nb += y <= b
        if nb > cap:
            # partial Fisher-Yates: the first ``cap`` entries become a uniform subset
            for q in range(cap):
                # floor(u * m) is uniform on 0..m-1 up to a 2^-53 relative bias
                j = q + int(rng.random() * (nb - q))
                if j >= nb:
                    j = nb - 1
                t = buf[q]
                buf[q] = buf[j]
                buf[j] = t
            nb = cap
            truncated = True
        pos = buf[:nb].copy()
        size = nb
        sizes[i] = nb
        if size == 0:
            break
    return pos, m_n, truncated, sizes
