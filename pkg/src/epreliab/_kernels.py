"""Compiled pair loops over (downstream event, upstream candidate).

All kernels work on one downstream module at a time. Upstream modules are
packed into one flat array ``up_times`` with offsets ``up_ptr``; ``first``
holds, per upstream module and sub-window k, the offset of the first event
whose window index is >= k (shape ``(U, K + 1)``). Candidates of a downstream
event in window k are the upstream events of window k strictly earlier
than it.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def pair_counts(t_down, down_win, up_times, up_ptr, first):
    """Per-event candidate count, summed over upstream modules."""
    n = t_down.size
    U = up_ptr.size - 1
    counts = np.zeros(n, dtype=np.int64)
    ends = up_ptr[:-1].copy()
    for i in range(n):
        ti = t_down[i]
        k = down_win[i]
        for u in range(U):
            e = ends[u]
            stop = up_ptr[u + 1]
            while e < stop and up_times[e] < ti:
                e += 1
            ends[u] = e
            j0 = up_ptr[u] + first[u, k]
            if e > j0:
                counts[i] += e - j0
    return counts


@njit(cache=True)
def estep_stats(t_down, down_win, up_times, up_ptr, first, lam0, alpha, beta):
    """Fused E-step: sufficient statistics without storing the posterior.

    Returns (sum_log_intensity, sum_p0, sum_p[U], sum_p_lag[U],
    max_normalization_error, pair_count).
    """
    n = t_down.size
    U = up_ptr.size - 1
    sum_log = 0.0
    sum_p0 = 0.0
    sum_p = np.zeros(U)
    sum_pl = np.zeros(U)
    max_err = 0.0
    npairs = 0
    ends = up_ptr[:-1].copy()
    ab = alpha * beta
    # scratch buffers hold kernel values for the current event
    buf = np.empty(up_times.size)
    for i in range(n):
        ti = t_down[i]
        k = down_win[i]
        lam = lam0
        for u in range(U):
            e = ends[u]
            stop = up_ptr[u + 1]
            while e < stop and up_times[e] < ti:
                e += 1
            ends[u] = e
            j0 = up_ptr[u] + first[u, k]
            for j in range(j0, e):
                v = ab[u] * np.exp(-beta[u] * (ti - up_times[j]))
                buf[j] = v
                lam += v
            if e > j0:
                npairs += e - j0
        inv = 1.0 / lam
        sum_log += np.log(lam)
        p0 = lam0 * inv
        sum_p0 += p0
        total = p0
        for u in range(U):
            j0 = up_ptr[u] + first[u, k]
            su = 0.0
            sl = 0.0
            for j in range(j0, ends[u]):
                p = buf[j] * inv
                su += p
                sl += p * (ti - up_times[j])
            sum_p[u] += su
            sum_pl[u] += sl
            total += su
        err = abs(total - 1.0)
        if err > max_err:
            max_err = err
    return sum_log, sum_p0, sum_p, sum_pl, max_err, npairs


@njit(cache=True)
def estep_full(t_down, down_win, up_times, up_ptr, first, lam0, alpha, beta, indptr):
    """E-step that materialises every candidate probability.

    ``indptr`` (n + 1) comes from cumulative ``pair_counts``; candidates of
    event i occupy ``indptr[i]:indptr[i + 1]``, grouped by upstream module.
    Returns (p0[n], prob[nnz], upstream_module[nnz], upstream_index[nnz],
    intensity[n]).
    """
    n = t_down.size
    U = up_ptr.size - 1
    nnz = indptr[n]
    p0 = np.empty(n)
    lam_out = np.empty(n)
    prob = np.empty(nnz)
    umod = np.empty(nnz, dtype=np.int64)
    uidx = np.empty(nnz, dtype=np.int64)
    ends = up_ptr[:-1].copy()
    ab = alpha * beta
    for i in range(n):
        ti = t_down[i]
        k = down_win[i]
        lam = lam0
        pos = indptr[i]
        for u in range(U):
            e = ends[u]
            stop = up_ptr[u + 1]
            while e < stop and up_times[e] < ti:
                e += 1
            ends[u] = e
            j0 = up_ptr[u] + first[u, k]
            for j in range(j0, e):
                v = ab[u] * np.exp(-beta[u] * (ti - up_times[j]))
                prob[pos] = v
                umod[pos] = u
                uidx[pos] = j - up_ptr[u]
                lam += v
                pos += 1
        inv = 1.0 / lam
        p0[i] = lam0 * inv
        lam_out[i] = lam
        for q in range(indptr[i], indptr[i + 1]):
            prob[q] *= inv
    return p0, prob, umod, uidx, lam_out
