"""Optional compiled kernels for long discrete-time runs.

The numpy step loops in direct.py / indirect.py are the reference
implementation; these kernels replay the same recursions with explicit
loops under numba for multi-thousand-step scenarios. Import is lazy so
short runs and CLI startup never pay the JIT toolchain cost; without
numba everything silently stays on the numpy path. Equivalence between
the two paths is pinned by tests.
"""

from __future__ import annotations

import numpy as np

# runs shorter than this keep the plain numpy loop
MIN_HORIZON = 8000

_KERNELS = None
_TRIED = False

OK = 0
DIVERGED = 1
SINGULAR = 2


def get_kernels():
    """(direct_loop, indirect_loop) or None when numba is unavailable."""
    global _KERNELS, _TRIED
    if _TRIED:
        return _KERNELS
    _TRIED = True
    try:
        from numba import njit
    except Exception:
        _KERNELS = None
        return None

    @njit(cache=True)
    def direct_loop(A, B, Am, Bm, P, rho, Gbd, gam, x, xm, r_all, enforce,
                    n, M, C, rec_x, rec_xm, rec_e, rec_u, rec_eps, rec_m,
                    rec_th, rec_rho, info):
        T1 = r_all.shape[0]
        MC = M * C
        S = np.zeros((n, MC))
        Snew = np.empty((n, MC))
        q = np.zeros((n, M))
        qnew = np.empty((n, M))
        om = np.empty(C)
        u = np.empty(M)
        Xi = np.empty((n, M))
        eps = np.empty(n)
        afull = np.empty(MC)
        xnew = np.empty(n)
        xmnew = np.empty(n)
        info[0] = OK
        info[1] = -1
        for t in range(T1):
            for k in range(n):
                om[k] = x[k]
            for j in range(M):
                om[n + j] = r_all[t, j]
            for j in range(M):
                s = 0.0
                for c in range(C):
                    s += P[j, c] * om[c]
                u[j] = s
            m2 = 1.0
            for k in range(n):
                for j in range(M):
                    base = j * C
                    s = 0.0
                    for c in range(C):
                        s += S[k, base + c] * P[j, c]
                    Xi[k, j] = s - q[k, j]
            for k in range(n):
                for c in range(MC):
                    m2 += S[k, c] * S[k, c]
            for k in range(n):
                ek = x[k] - xm[k]
                rec_e[t, k] = ek
                acc = ek
                for j in range(M):
                    m2 += Xi[k, j] * Xi[k, j]
                    acc += rho[j] * Xi[k, j]
                eps[k] = acc
            probe = m2
            for k in range(n):
                probe += x[k] * x[k]
            for j in range(M):
                probe += u[j] * u[j]
            if not np.isfinite(probe):
                info[0] = DIVERGED
                info[1] = t
                return
            for k in range(n):
                rec_x[t, k] = x[k]
                rec_xm[t, k] = xm[k]
                rec_eps[t, k] = eps[k]
            for j in range(M):
                rec_u[t, j] = u[j]
                rec_rho[t, j] = rho[j]
            rec_m[t] = np.sqrt(m2)
            for c in range(C):
                for j in range(M):
                    rec_th[t, c, j] = P[j, c]
            if t == T1 - 1:
                return
            for c in range(MC):
                s = 0.0
                for k in range(n):
                    s += S[k, c] * eps[k]
                afull[c] = s
            inv_m2 = 1.0 / m2
            for j in range(M):
                base = j * C
                for c in range(C):
                    s = 0.0
                    for d in range(C):
                        s += Gbd[base + c, base + d] * afull[base + d]
                    P[j, c] -= s * inv_m2
            for j in range(M):
                s = 0.0
                for k in range(n):
                    s += eps[k] * Xi[k, j]
                rho[j] -= gam[j] * s * inv_m2
            if enforce:
                for j in range(M):
                    for i in range(M):
                        if i != j:
                            P[j, n + i] = 0.0
            for k in range(n):
                for c in range(MC):
                    s = 0.0
                    for kk in range(n):
                        s += Am[k, kk] * S[kk, c]
                    Snew[k, c] = s
                for j in range(M):
                    s = 0.0
                    for kk in range(n):
                        s += Am[k, kk] * q[kk, j]
                    qnew[k, j] = s + Bm[k, j] * u[j]
            for j in range(M):
                base = j * C
                for k in range(n):
                    b = Bm[k, j]
                    for c in range(C):
                        Snew[k, base + c] += b * om[c]
            tmp = S; S = Snew; Snew = tmp
            tmp2 = q; q = qnew; qnew = tmp2
            for k in range(n):
                s = 0.0
                sm = 0.0
                for kk in range(n):
                    s += A[k, kk] * x[kk]
                    sm += Am[k, kk] * xm[kk]
                for j in range(M):
                    s += B[k, j] * u[j]
                    sm += Bm[k, j] * r_all[t, j]
                xnew[k] = s
                xmnew[k] = sm
            tmp = x; x = xnew; xnew = tmp
            tmp = xm; xm = xmnew; xmnew = tmp

    @njit(cache=True)
    def indirect_loop(A, B, Am, Bm, P, Gbd, x, xm, xh, r_all, proj_on, signs,
                      t2a, floor, include_xi, n, M, C, rec_x, rec_xm, rec_e,
                      rec_u, rec_eps, rec_m, rec_th, rec_xh, rec_g2, rec_f2,
                      rec_fired, info):
        T1 = r_all.shape[0]
        MC = M * C
        S = np.zeros((n, MC))
        Snew = np.empty((n, MC))
        q = np.zeros((n, M))
        qnew = np.empty((n, M))
        om = np.empty(C)
        u = np.empty(M)
        v = np.empty(M)
        Xi = np.empty((n, M))
        eps = np.empty(n)
        afull = np.empty(MC)
        g = np.empty((M, C))
        xnew = np.empty(n)
        xmnew = np.empty(n)
        xhnew = np.empty(n)
        info[0] = OK
        info[1] = -1
        for t in range(T1):
            m2 = 1.0
            for k in range(n):
                for j in range(M):
                    base = j * C
                    s = 0.0
                    for c in range(C):
                        s += S[k, base + c] * P[j, c]
                    Xi[k, j] = s - q[k, j]
            for k in range(n):
                for c in range(MC):
                    m2 += S[k, c] * S[k, c]
            if include_xi:
                for k in range(n):
                    for j in range(M):
                        m2 += Xi[k, j] * Xi[k, j]
            for k in range(n):
                acc = xh[k] - x[k]
                for j in range(M):
                    acc += Xi[k, j]
                eps[k] = acc
                rec_e[t, k] = x[k] - xm[k]
            for j in range(M):
                th2 = P[j, n + j]
                if np.abs(th2) < floor[j] - 1e-15:
                    info[0] = SINGULAR
                    info[1] = t
                    return
                s = r_all[t, j]
                for k in range(n):
                    s += P[j, k] * x[k]
                u[j] = s / th2
            probe = m2
            for k in range(n):
                probe += x[k] * x[k]
            for j in range(M):
                probe += u[j] * u[j]
            if not np.isfinite(probe):
                info[0] = DIVERGED
                info[1] = t
                return
            for k in range(n):
                rec_x[t, k] = x[k]
                rec_xm[t, k] = xm[k]
                rec_eps[t, k] = eps[k]
                rec_xh[t, k] = xh[k]
            for j in range(M):
                rec_u[t, j] = u[j]
            rec_m[t] = np.sqrt(m2)
            for c in range(C):
                for j in range(M):
                    rec_th[t, c, j] = P[j, c]
            if t == T1 - 1:
                return
            for k in range(n):
                om[k] = -x[k]
            for j in range(M):
                om[n + j] = u[j]
            for j in range(M):
                s = 0.0
                for c in range(C):
                    s += P[j, c] * om[c]
                v[j] = s
            for c in range(MC):
                s = 0.0
                for k in range(n):
                    s += S[k, c] * eps[k]
                afull[c] = s
            inv_m2 = 1.0 / m2
            for j in range(M):
                base = j * C
                for c in range(C):
                    s = 0.0
                    for d in range(C):
                        s += Gbd[base + c, base + d] * afull[base + d]
                    g[j, c] = -s * inv_m2
            if M > 1:
                for j in range(M):
                    for i in range(M):
                        if i != j:
                            g[j, n + i] = 0.0
            fired = False
            for j in range(M):
                g2 = g[j, n + j]
                if proj_on:
                    th2 = P[j, n + j]
                    cand = th2 + g2
                    f2 = 0.0
                    if signs[j] * cand < t2a[j]:
                        f2 = signs[j] * t2a[j] - cand
                        fired = True
                    rec_g2[t, j] = g2
                    rec_f2[t, j] = f2
                    g[j, n + j] = g2 + f2
            rec_fired[t] = fired
            for j in range(M):
                for c in range(C):
                    P[j, c] += g[j, c]
            for k in range(n):
                for c in range(MC):
                    s = 0.0
                    for kk in range(n):
                        s += Am[k, kk] * S[kk, c]
                    Snew[k, c] = s
                for j in range(M):
                    s = 0.0
                    for kk in range(n):
                        s += Am[k, kk] * q[kk, j]
                    qnew[k, j] = s + Bm[k, j] * v[j]
            for j in range(M):
                base = j * C
                for k in range(n):
                    b = Bm[k, j]
                    for c in range(C):
                        Snew[k, base + c] += b * om[c]
            tmp = S; S = Snew; Snew = tmp
            tmp2 = q; q = qnew; qnew = tmp2
            for k in range(n):
                s = 0.0
                sm = 0.0
                sh = 0.0
                for kk in range(n):
                    s += A[k, kk] * x[kk]
                    sm += Am[k, kk] * xm[kk]
                    sh += Am[k, kk] * xh[kk]
                for j in range(M):
                    s += B[k, j] * u[j]
                    sm += Bm[k, j] * r_all[t, j]
                    sh += Bm[k, j] * v[j]
                xnew[k] = s
                xmnew[k] = sm
                xhnew[k] = sh
            tmp = x; x = xnew; xnew = tmp
            tmp = xm; xm = xmnew; xmnew = tmp
            tmp = xh; xh = xhnew; xhnew = tmp

    _KERNELS = (direct_loop, indirect_loop)
    return _KERNELS
