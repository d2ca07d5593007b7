"""Compiled single-replication slot loop for the built-in schedulers."""

import numpy as np
from numba import njit

RULE_TABLE = 0
RULE_PERSISTENT = 1
RULE_ROUND_ROBIN = 2
RULE_FULL_DUPLEX = 3

# integer state slots
I_HS, I_HC, I_TRACE, I_CUR_L, I_CYC_L, I_N_CYC, I_PREV = range(7)
# float state slots
F_TOTAL, F_CUR_S, F_CYC_S = range(3)


@njit(cache=True)
def _decide(rule, first, slot, taus, phis, hs, hc, table, bound, bs, bc):
    if rule == RULE_PERSISTENT:
        return 1 if taus[0] == phis[0] else 2
    if rule == RULE_ROUND_ROBIN:
        if slot % 2 == 0:
            return first
        return 3 - first
    if rule == RULE_FULL_DUPLEX:
        return 3
    v = taus.shape[0]
    L1 = bound + 1
    idx = 0
    t0 = min(taus[0], bound)
    f0 = min(phis[0], bound)
    if v == 1 and f0 == t0 + 1:
        t0 = f0
    for i in range(v):
        idx = idx * L1 + (t0 if i == 0 else min(taus[i], bound))
    for i in range(v):
        idx = idx * L1 + (f0 if i == 0 else min(phis[i], bound))
    return table[(idx * bs + hs) * bc + hc]


@njit(cache=True)
def run_chunk(k0, z, u, fs, ist, counts, x, xh, buf, taus, phis,
              A, B, gains, chol, Q, omega, xi, cum_s, cum_c,
              rule, first, table, bound, bs, bc, cycles,
              trace_at, trace, window, checkpoints, kept_a, kept_c):
    n = x.shape[0]
    m = B.shape[1]
    v = taus.shape[0]
    xn = np.empty(n)
    xhn = np.empty(n)
    drive = np.empty(n)
    for c in range(z.shape[0]):
        k = k0 + c
        hs = ist[I_HS]
        hc = ist[I_HC]
        act = _decide(rule, first, k, taus, phis, hs, hc, table, bound, bs, bc)
        if act == 0:
            return k  # lookup outside the table
        cost = 0.0
        for i in range(n):
            row = 0.0
            for j in range(n):
                row += Q[i, j] * x[j]
            cost += x[i] * row
        fs[F_TOTAL] += cost
        counts[act] += 1
        if kept_a.shape[0] > 0:
            kept_a[k] = act
            kept_c[k] = cost
        if cycles:
            if ist[I_PREV] == 2 and act == 1:
                fs[F_CYC_S] += fs[F_CUR_S]
                ist[I_CYC_L] += ist[I_CUR_L]
                ist[I_N_CYC] += 1
                fs[F_CUR_S] = 0.0
                ist[I_CUR_L] = 0
            fs[F_CUR_S] += cost
            ist[I_CUR_L] += 1
            ist[I_PREV] = act

        sense_ok = act != 2 and u[c, 0] >= omega[hs]
        control_ok = act != 1 and u[c, 1] >= xi[hc]
        if control_ok:
            for e in range(v):
                for i in range(m):
                    acc = 0.0
                    for j in range(n):
                        acc += gains[e, i, j] * xh[j]
                    buf[e, i] = acc
        else:
            for e in range(v - 1):
                for i in range(m):
                    buf[e, i] = buf[e + 1, i]
            for i in range(m):
                buf[v - 1, i] = 0.0
        for i in range(n):
            acc = 0.0
            for j in range(m):
                acc += B[i, j] * buf[0, j]
            drive[i] = acc
        for i in range(n):
            ax = 0.0
            axh = 0.0
            w = 0.0
            for j in range(n):
                ax += A[i, j] * x[j]
                axh += A[i, j] * xh[j]
                w += chol[i, j] * z[c, j]
            xhn[i] = (ax if sense_ok else axh) + drive[i]
            xn[i] = ax + drive[i] + w
        for i in range(n):
            x[i] = xn[i]
            xh[i] = xhn[i]

        t0 = taus[0]
        if control_ok:
            for i in range(v - 1, 0, -1):
                taus[i] = taus[i - 1]
                phis[i] = phis[i - 1]
            phis[0] = t0 + 1
        else:
            phis[0] += 1
        taus[0] = 1 if sense_ok else t0 + 1

        row_s = cum_s[hs]
        nxt = 0
        while nxt < row_s.shape[0] - 1 and u[c, 2] >= row_s[nxt]:
            nxt += 1
        ist[I_HS] = nxt
        row_c = cum_c[hc]
        nxt = 0
        while nxt < row_c.shape[0] - 1 and u[c, 3] >= row_c[nxt]:
            nxt += 1
        ist[I_HC] = nxt

        done = k + 1
        ti = ist[I_TRACE]
        if ti < trace_at.shape[0] and done == trace_at[ti]:
            trace[ti] = fs[F_TOTAL] / done
            ist[I_TRACE] = ti + 1
        if done % window == 0:
            checkpoints[done // window - 1] = fs[F_TOTAL] / done
    return -1
