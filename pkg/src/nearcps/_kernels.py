"""Compiled inner loops of the chromaticity solver.

Candidates are visited in a fixed coarse-to-fine order on a single thread,
so the floating point evaluation order (and therefore every output bit) is
fixed.  The coarse candidates come first because they tighten the pruning
thresholds early; ties are still resolved toward the lowest index.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# bounds are compared against exact values computed along another path
LB_REL, LB_ABS = 1e-9, 1e-12
UB_REL, UB_ABS = 1e-9, 1e-7


@njit(cache=True)
def _median(x):
    m = x.shape[0]
    k = m // 2
    p = np.partition(x, k)
    if m % 2 == 1:
        return p[k]
    lo = p[0]
    for t in range(1, k):
        if p[t] > lo:
            lo = p[t]
    return (lo + p[k]) / 2.0


@njit(cache=True)
def _norms(Hn, r, out):
    for i in range(Hn.shape[0]):
        a = Hn[i, 0] * r[0] + Hn[i, 1] * r[1] + Hn[i, 2] * r[2]
        b = Hn[i, 3] * r[0] + Hn[i, 4] * r[1] + Hn[i, 5] * r[2]
        c = Hn[i, 6] * r[0] + Hn[i, 7] * r[1] + Hn[i, 8] * r[2]
        out[i] = np.sqrt(a * a + b * b + c * c)


@njit(cache=True)
def _histogram(Hn, r, sample, cap, delta_b, nrm, bins):
    """Bin every pixel and build capped member lists over the sample.

    Returns (grp, cnt, ncap, start, MT, S1, S2, A, self_in).  ``MT`` holds the
    capped members' profiles column-wise, bin after bin; ``A`` is
    the mean distance of a bin's capped members to their centroid.  ``grp[i]`` is
    the row of pixel i's bin in the per-bin tables, or -1 when no sample pixel
    shares it.  ``self_in[i]`` is True when pixel i is one of its own bin's
    capped members.
    """
    N = Hn.shape[0]
    m = sample.shape[0]
    _norms(Hn, r, nrm)
    ns = np.empty(m)
    for t in range(m):
        ns[t] = nrm[sample[t]]
    width = delta_b * _median(ns)
    for i in range(N):
        bins[i] = np.int64(np.floor(nrm[i] / width))
    lo = bins[sample[0]]
    hi = lo
    for t in range(m):
        b = bins[sample[t]]
        if b < lo:
            lo = b
        if b > hi:
            hi = b
    grp = np.empty(N, np.int64)
    if hi - lo < 16 * m + 4096:
        nb = hi - lo + 1
        for i in range(N):
            b = bins[i] - lo
            grp[i] = b if 0 <= b < nb else -1
    else:
        # sparse occupancy: compact the occupied bins
        sb = np.empty(m, np.int64)
        for t in range(m):
            sb[t] = bins[sample[t]]
        u = np.unique(sb)
        nb = u.shape[0]
        pos = np.searchsorted(u, bins)
        for i in range(N):
            p = pos[i]
            grp[i] = p if p < nb and u[p] == bins[i] else -1
    cnt = np.zeros(nb, np.int64)
    for t in range(m):
        cnt[grp[sample[t]]] += 1
    ncap = np.minimum(cnt, cap)
    start = np.zeros(nb + 1, np.int64)
    for b in range(nb):
        start[b + 1] = start[b] + ncap[b]
    members = np.empty(start[nb], np.int64)
    MT = np.empty((9, start[nb]))
    fill = np.zeros(nb, np.int64)
    S1 = np.zeros((nb, 9))
    S2 = np.zeros(nb)
    self_in = np.zeros(N, np.bool_)
    for t in range(m):
        i = sample[t]
        b = grp[i]
        if fill[b] < ncap[b]:
            members[start[b] + fill[b]] = i
            for k in range(9):
                MT[k, start[b] + fill[b]] = Hn[i, k]
            fill[b] += 1
            self_in[i] = True
            s = 0.0
            for k in range(9):
                S1[b, k] += Hn[i, k]
                s += Hn[i, k] * Hn[i, k]
            S2[b] += s
    # mean member distance to the bin centroid
    A = np.zeros(nb)
    for b in range(nb):
        n = ncap[b]
        if n == 0:
            continue
        acc = 0.0
        for t in range(start[b], start[b + 1]):
            i = members[t]
            d2 = 0.0
            for k in range(9):
                d = Hn[i, k] - S1[b, k] / n
                d2 += d * d
            acc += np.sqrt(d2)
        A[b] = acc / n
    return grp, cnt, ncap, start, MT, S1, S2, A, self_in


@njit(cache=True)
def _bounds(Hn, sq, i, b, ncap, S1, S2, A, n_prime):
    """Lower and upper bounds on the mean member distance of pixel i.

    With D the distance to the centroid and A the members' mean distance to
    it, the triangle inequality gives n max(D, A - D) <= sum <= n (D + A);
    Cauchy-Schwarz adds sum <= sqrt(n * sum of squares).
    """
    n = ncap[b]
    d2 = 0.0
    dot = 0.0
    for k in range(9):
        d = n * Hn[i, k] - S1[b, k]
        d2 += d * d
        dot += Hn[i, k] * S1[b, k]
    D = np.sqrt(d2) / n
    var = n * (n * sq[i] - 2.0 * dot + S2[b])
    if var < 0.0:
        var = 0.0
    lb = n * max(D, A[b] - D) / n_prime
    ub = min(np.sqrt(var), n * (D + A[b])) / n_prime
    return lb * (1.0 - LB_REL) - LB_ABS, ub * (1.0 + UB_REL) + UB_ABS


@njit(cache=True, fastmath={"reassoc"})
def _exact(Hn, i, b, start, MT, n_prime):
    x0, x1, x2 = Hn[i, 0], Hn[i, 1], Hn[i, 2]
    x3, x4, x5 = Hn[i, 3], Hn[i, 4], Hn[i, 5]
    x6, x7, x8 = Hn[i, 6], Hn[i, 7], Hn[i, 8]
    s = 0.0
    for t in range(start[b], start[b + 1]):
        d2 = ((x0 - MT[0, t]) ** 2 + (x1 - MT[1, t]) ** 2 + (x2 - MT[2, t]) ** 2
              + (x3 - MT[3, t]) ** 2 + (x4 - MT[4, t]) ** 2 + (x5 - MT[5, t]) ** 2
              + (x6 - MT[6, t]) ** 2 + (x7 - MT[7, t]) ** 2 + (x8 - MT[8, t]) ** 2)
        s += np.sqrt(d2)
    return s / n_prime


@njit(cache=True)
def consensus_pass(Hn, R, order, sample, cap, delta_b, want_similarity, exclude_self,
                   best_cnt, jc, min_es):
    """First sweep: consensus argmin and each pixel's exact minimum E_s.

    Returns the number of exact similarity evaluations.
    """
    N = Hn.shape[0]
    J = R.shape[0]
    nrm = np.empty(N)
    bins = np.empty(N, np.int64)
    sq = np.empty(N)
    for i in range(N):
        s = 0.0
        for k in range(9):
            s += Hn[i, k] * Hn[i, k]
        sq[i] = s
    min_ub = np.full(N, np.inf)
    n_exact = 0
    for oj in range(J):
        j = order[oj]
        grp, cnt, ncap, start, MT, S1, S2, A, self_in = _histogram(Hn, R[j], sample, cap, delta_b, nrm, bins)
        for i in range(N):
            b = grp[i]
            inside = b >= 0
            c = cnt[b] if inside else 0
            if c > best_cnt[i] or (c == best_cnt[i] and j < jc[i]):
                best_cnt[i] = c
                jc[i] = j
            if not want_similarity:
                continue
            n_prime = (ncap[b] if inside else 0) + (0 if self_in[i] else 1) - exclude_self
            if n_prime == 0:
                lb, ub, es_known = np.inf, np.inf, True
            elif not inside or ncap[b] == 0:
                lb, ub, es_known = 0.0, 0.0, True
            else:
                lb, ub = _bounds(Hn, sq, i, b, ncap, S1, S2, A, n_prime)
                es_known = False
            if ub < min_ub[i]:
                min_ub[i] = ub
            thr = min(min_ub[i], min_es[i])
            if lb <= thr:
                es = lb if es_known else _exact(Hn, i, b, start, MT, n_prime)
                n_exact += 1
                if es < min_es[i]:
                    min_es[i] = es
    return n_exact


@njit(cache=True)
def energy_pass(Hn, R, cand, order, sample, cap, delta_b, exclude_self, ls, lp, rho_p,
                index, best_e, best_es, win_cnt):
    """Second sweep: exact argmin of the combined energy, lowest index on ties.

    ``index`` must enter holding the consensus argmin (any valid index works).
    """
    N = Hn.shape[0]
    J = R.shape[0]
    m = sample.shape[0]
    nrm = np.empty(N)
    bins = np.empty(N, np.int64)
    sq = np.empty(N)
    for i in range(N):
        s = 0.0
        for k in range(9):
            s += Hn[i, k] * Hn[i, k]
        sq[i] = s
    min_tub = np.full(N, np.inf)
    n_exact = 0
    for oj in range(J):
        j = order[oj]
        grp, cnt, ncap, start, MT, S1, S2, A, self_in = _histogram(Hn, R[j], sample, cap, delta_b, nrm, bins)
        for i in range(N):
            b = grp[i]
            inside = b >= 0
            c = cnt[b] if inside else 0
            ep = 1.0 - (rho_p[i, 0] * cand[j, 0] + rho_p[i, 1] * cand[j, 1] + rho_p[i, 2] * cand[j, 2])
            base = (m - c) / m + lp[i] * ep
            n_prime = (ncap[b] if inside else 0) + (0 if self_in[i] else 1) - exclude_self
            if n_prime == 0:
                lb, ub, es_known = np.inf, np.inf, True
            elif not inside or ncap[b] == 0:
                lb, ub, es_known = 0.0, 0.0, True
            else:
                lb, ub = _bounds(Hn, sq, i, b, ncap, S1, S2, A, n_prime)
                if lb < 0.0:
                    lb = 0.0
                es_known = False
            if ls[i] == 0.0:
                # similarity switched off here; evaluate it only for reporting
                if base < best_e[i] or (base == best_e[i] and j < index[i]):
                    best_e[i] = base
                    best_es[i] = lb if es_known else _exact(Hn, i, b, start, MT, n_prime)
                    index[i] = j
                    win_cnt[i] = c
                continue
            t_lb = base + ls[i] * lb
            t_ub = base + ls[i] * ub
            if t_ub < min_tub[i]:
                min_tub[i] = t_ub
            thr = min(min_tub[i], best_e[i])
            if t_lb <= thr:
                es = lb if es_known else _exact(Hn, i, b, start, MT, n_prime)
                n_exact += 1
                e = base + ls[i] * es
                if e < best_e[i] or (e == best_e[i] and j < index[i]):
                    best_e[i] = e
                    best_es[i] = es
                    index[i] = j
                    win_cnt[i] = c
    return n_exact
