"""Compiled hot loops for the swap-based samplers.

Each kernel runs a whole batch of independent draws. Per-draw randomness
comes from a splitmix64 stream keyed by a 64-bit seed supplied by the
caller, so results are reproducible and independent of batching or thread
count. The running objective is maintained through the treated whitened
row-sum ``sc`` (including any fixed offset), giving O(p) work per candidate
evaluation; the final value is re-derived from scratch before acceptance so
incremental drift can never leak an assignment with M > a.

Trace buffers (used by tests) record the trajectory of applied states for
the first draw of a batch: trace_m holds M values, trace_kind 0 for the
initial state, 1 for an improving local swap, 2 for a forced shake swap.
"""

import numpy as np
from numba import int64, njit, uint64

TRACE_INIT = 0
TRACE_LOCAL = 1
TRACE_SHAKE = 2


@njit(cache=True, inline="always")
def _next_u64(st):
    st[0] = st[0] + uint64(0x9E3779B97F4A7C15)
    z = st[0]
    z = (z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)
    return z ^ (z >> uint64(31))


@njit(cache=True, inline="always")
def _rand_f64(st):
    return (_next_u64(st) >> uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True, inline="always")
def _rand_below(st, m):
    return int64(_rand_f64(st) * m)


@njit(cache=True)
def _shuffle_prefix(arr, lo, hi, k, st):
    # partial Fisher-Yates on arr[lo:hi]; arr[lo:lo+k] become k distinct picks
    span = hi - lo
    for i in range(k):
        j = i + _rand_below(st, span - i)
        tmp = arr[lo + i]
        arr[lo + i] = arr[lo + j]
        arr[lo + j] = tmp


@njit(cache=True)
def vnsrr_kernel(zt, offset, scale, n_treat, a, big_l, big_s, max_iter, seeds,
                 trace_m, trace_kind, use_trace):
    """Local-search/shake descent on rows of zt; batch of len(seeds) draws."""
    nrows, p = zt.shape
    n_ctrl = nrows - n_treat
    batch = seeds.shape[0]
    out_w = np.zeros((batch, nrows), dtype=np.uint8)
    out_m = np.zeros(batch, dtype=np.float64)
    out_evals = np.zeros(batch, dtype=np.int64)
    out_trace_len = np.zeros(batch, dtype=np.int64)
    st = np.zeros(1, dtype=np.uint64)
    perm = np.empty(nrows, dtype=np.int64)
    osel = np.empty(n_treat, dtype=np.int64)
    zsel = np.empty(n_ctrl, dtype=np.int64)
    sc = np.empty(p, dtype=np.float64)
    cap = trace_m.shape[0]
    for b in range(batch):
        st[0] = seeds[b]
        tracing = use_trace and b == 0
        tlen = 0
        for i in range(nrows):
            perm[i] = i
        _shuffle_prefix(perm, 0, nrows, nrows, st)
        tpos = perm[:n_treat].copy()
        cpos = perm[n_treat:].copy()
        for q in range(p):
            sc[q] = offset[q]
        for i in range(n_treat):
            row = tpos[i]
            for q in range(p):
                sc[q] += zt[row, q]
        m = 0.0
        for q in range(p):
            m += sc[q] * sc[q]
        m *= scale
        if tracing and tlen < cap:
            trace_m[tlen] = m
            trace_kind[tlen] = TRACE_INIT
            tlen += 1
        evals = 0
        failed = False
        while True:
            while m > a:
                if evals >= max_iter:
                    failed = True
                    break
                for i in range(n_treat):
                    osel[i] = i
                for i in range(n_ctrl):
                    zsel[i] = i
                _shuffle_prefix(osel, 0, n_treat, big_l, st)
                _shuffle_prefix(zsel, 0, n_ctrl, big_l, st)
                stilde = big_s
                for l in range(big_l):
                    i = tpos[osel[l]]
                    j = cpos[zsel[l]]
                    acc1 = 0.0
                    acc2 = 0.0
                    for q in range(p):
                        d = zt[j, q] - zt[i, q]
                        acc1 += sc[q] * d
                        acc2 += d * d
                    evals += 1
                    mstar = m + scale * (2.0 * acc1 + acc2)
                    if mstar < m:
                        stilde = 0
                        mnew = 0.0
                        for q in range(p):
                            sc[q] += zt[j, q] - zt[i, q]
                            mnew += sc[q] * sc[q]
                        m = mnew * scale
                        tpos[osel[l]] = j
                        cpos[zsel[l]] = i
                        if tracing and tlen < cap:
                            trace_m[tlen] = m
                            trace_kind[tlen] = TRACE_LOCAL
                            tlen += 1
                        if m < a:
                            break
                if stilde > 0:
                    for i in range(n_treat):
                        osel[i] = i
                    for i in range(n_ctrl):
                        zsel[i] = i
                    _shuffle_prefix(osel, 0, n_treat, stilde, st)
                    _shuffle_prefix(zsel, 0, n_ctrl, stilde, st)
                    for s in range(stilde):
                        i = tpos[osel[s]]
                        j = cpos[zsel[s]]
                        mnew = 0.0
                        for q in range(p):
                            sc[q] += zt[j, q] - zt[i, q]
                            mnew += sc[q] * sc[q]
                        m = mnew * scale
                        tpos[osel[s]] = j
                        cpos[zsel[s]] = i
                        evals += 1
                        if tracing and tlen < cap:
                            trace_m[tlen] = m
                            trace_kind[tlen] = TRACE_SHAKE
                            tlen += 1
            if failed:
                break
            # drift guard: re-derive from scratch before accepting
            for q in range(p):
                sc[q] = offset[q]
            for i in range(n_treat):
                row = tpos[i]
                for q in range(p):
                    sc[q] += zt[row, q]
            m = 0.0
            for q in range(p):
                m += sc[q] * sc[q]
            m *= scale
            if m <= a:
                break
        if failed:
            out_evals[b] = -1
        else:
            for i in range(n_treat):
                out_w[b, tpos[i]] = 1
            out_m[b] = m
            out_evals[b] = evals
        out_trace_len[b] = tlen
    return out_w, out_m, out_evals, out_trace_len


@njit(cache=True)
def psrr_kernel(zt, offset, scale, n_treat, a, gamma, max_iter, seeds,
                trace_m, trace_kind, use_trace):
    """Single-pair Metropolis-style descent; accepts uphill with prob (M/M*)^gamma."""
    nrows, p = zt.shape
    n_ctrl = nrows - n_treat
    batch = seeds.shape[0]
    out_w = np.zeros((batch, nrows), dtype=np.uint8)
    out_m = np.zeros(batch, dtype=np.float64)
    out_evals = np.zeros(batch, dtype=np.int64)
    out_trace_len = np.zeros(batch, dtype=np.int64)
    st = np.zeros(1, dtype=np.uint64)
    perm = np.empty(nrows, dtype=np.int64)
    sc = np.empty(p, dtype=np.float64)
    cap = trace_m.shape[0]
    for b in range(batch):
        st[0] = seeds[b]
        tracing = use_trace and b == 0
        tlen = 0
        for i in range(nrows):
            perm[i] = i
        _shuffle_prefix(perm, 0, nrows, nrows, st)
        tpos = perm[:n_treat].copy()
        cpos = perm[n_treat:].copy()
        for q in range(p):
            sc[q] = offset[q]
        for i in range(n_treat):
            row = tpos[i]
            for q in range(p):
                sc[q] += zt[row, q]
        m = 0.0
        for q in range(p):
            m += sc[q] * sc[q]
        m *= scale
        if tracing and tlen < cap:
            trace_m[tlen] = m
            trace_kind[tlen] = TRACE_INIT
            tlen += 1
        evals = 0
        failed = False
        while True:
            while m > a:
                if evals >= max_iter:
                    failed = True
                    break
                oi = _rand_below(st, n_treat)
                zi = _rand_below(st, n_ctrl)
                i = tpos[oi]
                j = cpos[zi]
                acc1 = 0.0
                acc2 = 0.0
                for q in range(p):
                    d = zt[j, q] - zt[i, q]
                    acc1 += sc[q] * d
                    acc2 += d * d
                evals += 1
                mstar = m + scale * (2.0 * acc1 + acc2)
                accept = mstar < m
                if not accept:
                    accept = _rand_f64(st) < (m / mstar) ** gamma
                if accept:
                    mnew = 0.0
                    for q in range(p):
                        sc[q] += zt[j, q] - zt[i, q]
                        mnew += sc[q] * sc[q]
                    m = mnew * scale
                    tpos[oi] = j
                    cpos[zi] = i
                    if tracing and tlen < cap:
                        trace_m[tlen] = m
                        trace_kind[tlen] = TRACE_LOCAL
                        tlen += 1
            if failed:
                break
            for q in range(p):
                sc[q] = offset[q]
            for i in range(n_treat):
                row = tpos[i]
                for q in range(p):
                    sc[q] += zt[row, q]
            m = 0.0
            for q in range(p):
                m += sc[q] * sc[q]
            m *= scale
            if m <= a:
                break
        if failed:
            out_evals[b] = -1
        else:
            for i in range(n_treat):
                out_w[b, tpos[i]] = 1
            out_m[b] = m
            out_evals[b] = evals
        out_trace_len[b] = tlen
    return out_w, out_m, out_evals, out_trace_len


@njit(cache=True)
def strat_vnsrr_kernel(zt, offset, scale, a, unit_of, tslot_start, cslot_start,
                       l_arr, s_arr, max_iter, seeds, trace_m, trace_kind, use_trace):
    """Stratified descent: per-stratum disjoint pair lists, aggregated and
    jointly permuted; shake forces swaps within every stratum.

    unit_of: (n,) unit index grouped stratum-major; stratum k's units occupy
    unit_of[tslot_start[k] + cslot offsets ...] -- concretely the stratum's
    block is unit_of[tslot_start[k] + cslot_start[k] : tslot_start[k+1] +
    cslot_start[k+1]] split so treated slots precede control slots.
    """
    n = unit_of.shape[0]
    p = zt.shape[1]
    n_strata = l_arr.shape[0]
    nt_total = tslot_start[n_strata]
    nc_total = cslot_start[n_strata]
    l_total = 0
    s_total = 0
    for k in range(n_strata):
        l_total += l_arr[k]
        s_total += s_arr[k]
    batch = seeds.shape[0]
    out_w = np.zeros((batch, n), dtype=np.uint8)
    out_m = np.zeros(batch, dtype=np.float64)
    out_evals = np.zeros(batch, dtype=np.int64)
    out_trace_len = np.zeros(batch, dtype=np.int64)
    st = np.zeros(1, dtype=np.uint64)
    tpos = np.empty(nt_total, dtype=np.int64)
    cpos = np.empty(nc_total, dtype=np.int64)
    scratch = np.empty(n, dtype=np.int64)
    pair_t = np.empty(max(l_total, s_total), dtype=np.int64)
    pair_c = np.empty(max(l_total, s_total), dtype=np.int64)
    sc = np.empty(p, dtype=np.float64)
    cap = trace_m.shape[0]
    for b in range(batch):
        st[0] = seeds[b]
        tracing = use_trace and b == 0
        tlen = 0
        # uniform init within each stratum
        for k in range(n_strata):
            ntk = tslot_start[k + 1] - tslot_start[k]
            nck = cslot_start[k + 1] - cslot_start[k]
            base = tslot_start[k] + cslot_start[k]
            for i in range(ntk + nck):
                scratch[i] = unit_of[base + i]
            _shuffle_prefix(scratch, 0, ntk + nck, ntk + nck, st)
            for i in range(ntk):
                tpos[tslot_start[k] + i] = scratch[i]
            for i in range(nck):
                cpos[cslot_start[k] + i] = scratch[ntk + i]
        for q in range(p):
            sc[q] = offset[q]
        for i in range(nt_total):
            row = tpos[i]
            for q in range(p):
                sc[q] += zt[row, q]
        m = 0.0
        for q in range(p):
            m += sc[q] * sc[q]
        m *= scale
        if tracing and tlen < cap:
            trace_m[tlen] = m
            trace_kind[tlen] = TRACE_INIT
            tlen += 1
        evals = 0
        failed = False
        while True:
            while m > a:
                if evals >= max_iter:
                    failed = True
                    break
                # per-stratum disjoint slot picks, aggregated
                idx = 0
                for k in range(n_strata):
                    lk = l_arr[k]
                    if lk == 0:
                        continue
                    ntk = tslot_start[k + 1] - tslot_start[k]
                    nck = cslot_start[k + 1] - cslot_start[k]
                    for i in range(ntk):
                        scratch[i] = tslot_start[k] + i
                    _shuffle_prefix(scratch, 0, ntk, lk, st)
                    for i in range(lk):
                        pair_t[idx + i] = scratch[i]
                    for i in range(nck):
                        scratch[i] = cslot_start[k] + i
                    _shuffle_prefix(scratch, 0, nck, lk, st)
                    for i in range(lk):
                        pair_c[idx + i] = scratch[i]
                    idx += lk
                # random joint order of the aggregated pair list
                for i in range(l_total):
                    j = i + _rand_below(st, l_total - i)
                    tt = pair_t[i]
                    pair_t[i] = pair_t[j]
                    pair_t[j] = tt
                    cc = pair_c[i]
                    pair_c[i] = pair_c[j]
                    pair_c[j] = cc
                stilde_on = True
                for l in range(l_total):
                    ts = pair_t[l]
                    cs = pair_c[l]
                    i = tpos[ts]
                    j = cpos[cs]
                    acc1 = 0.0
                    acc2 = 0.0
                    for q in range(p):
                        d = zt[j, q] - zt[i, q]
                        acc1 += sc[q] * d
                        acc2 += d * d
                    evals += 1
                    mstar = m + scale * (2.0 * acc1 + acc2)
                    if mstar < m:
                        stilde_on = False
                        mnew = 0.0
                        for q in range(p):
                            sc[q] += zt[j, q] - zt[i, q]
                            mnew += sc[q] * sc[q]
                        m = mnew * scale
                        tpos[ts] = j
                        cpos[cs] = i
                        if tracing and tlen < cap:
                            trace_m[tlen] = m
                            trace_kind[tlen] = TRACE_LOCAL
                            tlen += 1
                        if m < a:
                            break
                if stilde_on and s_total > 0:
                    idx = 0
                    for k in range(n_strata):
                        sk = s_arr[k]
                        if sk == 0:
                            continue
                        ntk = tslot_start[k + 1] - tslot_start[k]
                        nck = cslot_start[k + 1] - cslot_start[k]
                        for i in range(ntk):
                            scratch[i] = tslot_start[k] + i
                        _shuffle_prefix(scratch, 0, ntk, sk, st)
                        for i in range(sk):
                            pair_t[idx + i] = scratch[i]
                        for i in range(nck):
                            scratch[i] = cslot_start[k] + i
                        _shuffle_prefix(scratch, 0, nck, sk, st)
                        for i in range(sk):
                            pair_c[idx + i] = scratch[i]
                        idx += sk
                    for s in range(s_total):
                        ts = pair_t[s]
                        cs = pair_c[s]
                        i = tpos[ts]
                        j = cpos[cs]
                        mnew = 0.0
                        for q in range(p):
                            sc[q] += zt[j, q] - zt[i, q]
                            mnew += sc[q] * sc[q]
                        m = mnew * scale
                        tpos[ts] = j
                        cpos[cs] = i
                        evals += 1
                        if tracing and tlen < cap:
                            trace_m[tlen] = m
                            trace_kind[tlen] = TRACE_SHAKE
                            tlen += 1
            if failed:
                break
            for q in range(p):
                sc[q] = offset[q]
            for i in range(nt_total):
                row = tpos[i]
                for q in range(p):
                    sc[q] += zt[row, q]
            m = 0.0
            for q in range(p):
                m += sc[q] * sc[q]
            m *= scale
            if m <= a:
                break
        if failed:
            out_evals[b] = -1
        else:
            for i in range(nt_total):
                out_w[b, tpos[i]] = 1
            out_m[b] = m
            out_evals[b] = evals
        out_trace_len[b] = tlen
    return out_w, out_m, out_evals, out_trace_len


@njit(cache=True)
def clust_vnsrr_kernel(csums, csizes, total, n_units, k_treat, a, big_l, big_s,
                       max_iter, seeds, trace_m, trace_kind, use_trace):
    """Cluster-level descent; the n/(n_t n_c) factor and centering follow the
    realized treated unit count, so unequal cluster sizes are handled."""
    n_clusters, p = csums.shape
    k_ctrl = n_clusters - k_treat
    batch = seeds.shape[0]
    out_u = np.zeros((batch, n_clusters), dtype=np.uint8)
    out_m = np.zeros(batch, dtype=np.float64)
    out_evals = np.zeros(batch, dtype=np.int64)
    out_trace_len = np.zeros(batch, dtype=np.int64)
    st = np.zeros(1, dtype=np.uint64)
    perm = np.empty(n_clusters, dtype=np.int64)
    osel = np.empty(k_treat, dtype=np.int64)
    zsel = np.empty(k_ctrl, dtype=np.int64)
    s_vec = np.empty(p, dtype=np.float64)
    cap = trace_m.shape[0]
    for b in range(batch):
        st[0] = seeds[b]
        tracing = use_trace and b == 0
        tlen = 0
        for i in range(n_clusters):
            perm[i] = i
        _shuffle_prefix(perm, 0, n_clusters, n_clusters, st)
        tpos = perm[:k_treat].copy()
        cpos = perm[k_treat:].copy()
        nt = 0
        for q in range(p):
            s_vec[q] = 0.0
        for i in range(k_treat):
            c = tpos[i]
            nt += csizes[c]
            for q in range(p):
                s_vec[q] += csums[c, q]
        m = 0.0
        frac = nt / n_units
        for q in range(p):
            d = s_vec[q] - frac * total[q]
            m += d * d
        m *= n_units / (nt * (n_units - nt))
        if tracing and tlen < cap:
            trace_m[tlen] = m
            trace_kind[tlen] = TRACE_INIT
            tlen += 1
        evals = 0
        failed = False
        while True:
            while m > a:
                if evals >= max_iter:
                    failed = True
                    break
                for i in range(k_treat):
                    osel[i] = i
                for i in range(k_ctrl):
                    zsel[i] = i
                _shuffle_prefix(osel, 0, k_treat, big_l, st)
                _shuffle_prefix(zsel, 0, k_ctrl, big_l, st)
                stilde = big_s
                for l in range(big_l):
                    i = tpos[osel[l]]
                    j = cpos[zsel[l]]
                    nt_new = nt - csizes[i] + csizes[j]
                    frac = nt_new / n_units
                    mstar = 0.0
                    for q in range(p):
                        d = s_vec[q] - csums[i, q] + csums[j, q] - frac * total[q]
                        mstar += d * d
                    mstar *= n_units / (nt_new * (n_units - nt_new))
                    evals += 1
                    if mstar < m:
                        stilde = 0
                        for q in range(p):
                            s_vec[q] += csums[j, q] - csums[i, q]
                        nt = nt_new
                        m = mstar
                        tpos[osel[l]] = j
                        cpos[zsel[l]] = i
                        if tracing and tlen < cap:
                            trace_m[tlen] = m
                            trace_kind[tlen] = TRACE_LOCAL
                            tlen += 1
                        if m < a:
                            break
                if stilde > 0:
                    for i in range(k_treat):
                        osel[i] = i
                    for i in range(k_ctrl):
                        zsel[i] = i
                    _shuffle_prefix(osel, 0, k_treat, stilde, st)
                    _shuffle_prefix(zsel, 0, k_ctrl, stilde, st)
                    for s in range(stilde):
                        i = tpos[osel[s]]
                        j = cpos[zsel[s]]
                        nt = nt - csizes[i] + csizes[j]
                        for q in range(p):
                            s_vec[q] += csums[j, q] - csums[i, q]
                        frac = nt / n_units
                        m = 0.0
                        for q in range(p):
                            d = s_vec[q] - frac * total[q]
                            m += d * d
                        m *= n_units / (nt * (n_units - nt))
                        tpos[osel[s]] = j
                        cpos[zsel[s]] = i
                        evals += 1
                        if tracing and tlen < cap:
                            trace_m[tlen] = m
                            trace_kind[tlen] = TRACE_SHAKE
                            tlen += 1
            if failed:
                break
            nt = 0
            for q in range(p):
                s_vec[q] = 0.0
            for i in range(k_treat):
                c = tpos[i]
                nt += csizes[c]
                for q in range(p):
                    s_vec[q] += csums[c, q]
            m = 0.0
            frac = nt / n_units
            for q in range(p):
                d = s_vec[q] - frac * total[q]
                m += d * d
            m *= n_units / (nt * (n_units - nt))
            if m <= a:
                break
        if failed:
            out_evals[b] = -1
        else:
            for i in range(k_treat):
                out_u[b, tpos[i]] = 1
            out_m[b] = m
            out_evals[b] = evals
        out_trace_len[b] = tlen
    return out_u, out_m, out_evals, out_trace_len
