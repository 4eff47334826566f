"""Numba-compiled Q-network kernels.

Same contract as ``numpy_impl`` (see that module for the array layout).
Scalar loops beat vectorized numpy here because batches are small (32) and
the per-sample vehicle count varies; numba compiles them to tight machine
code. No fastmath: results must be reproducible bit-for-bit across runs.
"""

from __future__ import annotations

import numba
import numpy as np

BACKEND = "numba"

_JIT = {"cache": True, "nogil": True}


@numba.njit(**_JIT)
def forward_batch(c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b, vw, vb, aw, ab, obs, n_veh):
    f1 = c1w.shape[0]
    pv = c1w.shape[1]
    f2 = c2w.shape[0]
    h1n = f1w.shape[0]
    ego = f1w.shape[1] - f2
    h2n = f2w.shape[0]
    n_act = aw.shape[0]
    b_sz = obs.shape[0]

    q = np.empty((b_sz, n_act))
    h1v = np.empty(f1)
    pooled = np.empty(f2)
    x1 = np.empty(h1n)
    x2 = np.empty(h2n)
    adv = np.empty(n_act)

    for b in range(b_sz):
        nv = n_veh[b]
        for g in range(f2):
            pooled[g] = 0.0
        for v in range(nv):
            base = ego + v * pv
            for f in range(f1):
                s = c1b[f]
                for j in range(pv):
                    s += c1w[f, j] * obs[b, base + j]
                h1v[f] = s if s > 0.0 else 0.0
            for g in range(f2):
                s = c2b[g]
                for f in range(f1):
                    s += c2w[g, f] * h1v[f]
                act = s if s > 0.0 else 0.0
                if v == 0 or act > pooled[g]:
                    pooled[g] = act

        for i in range(h1n):
            s = f1b[i]
            for j in range(ego):
                s += f1w[i, j] * obs[b, j]
            for j in range(f2):
                s += f1w[i, ego + j] * pooled[j]
            x1[i] = s if s > 0.0 else 0.0
        for i in range(h2n):
            s = f2b[i]
            for j in range(h1n):
                s += f2w[i, j] * x1[j]
            x2[i] = s if s > 0.0 else 0.0

        val = vb[0]
        for j in range(h2n):
            val += vw[0, j] * x2[j]
        mean_adv = 0.0
        for k in range(n_act):
            s = ab[k]
            for j in range(h2n):
                s += aw[k, j] * x2[j]
            adv[k] = s
            mean_adv += s
        mean_adv /= n_act
        for k in range(n_act):
            q[b, k] = val + adv[k] - mean_adv
    return q


@numba.njit(**_JIT)
def backward_batch(c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b, vw, vb, aw, ab,
                   obs, n_veh, actions, upstream,
                   g_c1w, g_c1b, g_c2w, g_c2b, g_f1w, g_f1b, g_f2w, g_f2b,
                   g_vw, g_vb, g_aw, g_ab):
    f1 = c1w.shape[0]
    pv = c1w.shape[1]
    f2 = c2w.shape[0]
    h1n = f1w.shape[0]
    ego = f1w.shape[1] - f2
    h2n = f2w.shape[0]
    n_act = aw.shape[0]
    b_sz = obs.shape[0]
    nmax = (obs.shape[1] - ego) // pv

    g_c1w[:] = 0.0
    g_c1b[:] = 0.0
    g_c2w[:] = 0.0
    g_c2b[:] = 0.0
    g_f1w[:] = 0.0
    g_f1b[:] = 0.0
    g_f2w[:] = 0.0
    g_f2b[:] = 0.0
    g_vw[:] = 0.0
    g_vb[:] = 0.0
    g_aw[:] = 0.0
    g_ab[:] = 0.0

    cap = nmax if nmax > 0 else 1
    pre1 = np.empty((cap, f1))
    pre2 = np.empty((cap, f2))
    pool_idx = np.empty(f2, dtype=np.int64)
    pooled = np.empty(f2)
    x = np.empty(ego + f2)
    pre_a1 = np.empty(h1n)
    a1 = np.empty(h1n)
    pre_a2 = np.empty(h2n)
    a2 = np.empty(h2n)
    adv = np.empty(n_act)
    dadv = np.empty(n_act)
    da2 = np.empty(h2n)
    dp_a2 = np.empty(h2n)
    da1 = np.empty(h1n)
    dp_a1 = np.empty(h1n)
    dpooled = np.empty(f2)
    dh1 = np.empty(f1)

    for b in range(b_sz):
        nv = n_veh[b]
        a_idx = actions[b]
        u = upstream[b]

        # forward with intermediates
        for g in range(f2):
            pooled[g] = 0.0
            pool_idx[g] = -1
        for v in range(nv):
            base = ego + v * pv
            for f in range(f1):
                s = c1b[f]
                for j in range(pv):
                    s += c1w[f, j] * obs[b, base + j]
                pre1[v, f] = s
            for g in range(f2):
                s = c2b[g]
                for f in range(f1):
                    hf = pre1[v, f]
                    if hf > 0.0:
                        s += c2w[g, f] * hf
                pre2[v, g] = s
                act = s if s > 0.0 else 0.0
                if v == 0 or act > pooled[g]:
                    pooled[g] = act
                    pool_idx[g] = v

        for j in range(ego):
            x[j] = obs[b, j]
        for j in range(f2):
            x[ego + j] = pooled[j]
        for i in range(h1n):
            s = f1b[i]
            for j in range(ego + f2):
                s += f1w[i, j] * x[j]
            pre_a1[i] = s
            a1[i] = s if s > 0.0 else 0.0
        for i in range(h2n):
            s = f2b[i]
            for j in range(h1n):
                s += f2w[i, j] * a1[j]
            pre_a2[i] = s
            a2[i] = s if s > 0.0 else 0.0
        # value/advantage pre-activations are linear; only adv needed for grads
        for k in range(n_act):
            s = ab[k]
            for j in range(h2n):
                s += aw[k, j] * a2[j]
            adv[k] = s

        # backward
        dval = u
        inv_a = 1.0 / n_act
        for k in range(n_act):
            dadv[k] = u * ((1.0 if k == a_idx else 0.0) - inv_a)

        g_vb[0] += dval
        for j in range(h2n):
            g_vw[0, j] += dval * a2[j]
        for k in range(n_act):
            g_ab[k] += dadv[k]
            for j in range(h2n):
                g_aw[k, j] += dadv[k] * a2[j]

        for j in range(h2n):
            s = dval * vw[0, j]
            for k in range(n_act):
                s += dadv[k] * aw[k, j]
            da2[j] = s
        for i in range(h2n):
            dp_a2[i] = da2[i] if pre_a2[i] > 0.0 else 0.0
            g_f2b[i] += dp_a2[i]
            for j in range(h1n):
                g_f2w[i, j] += dp_a2[i] * a1[j]
        for j in range(h1n):
            s = 0.0
            for i in range(h2n):
                s += dp_a2[i] * f2w[i, j]
            da1[j] = s
        for i in range(h1n):
            dp_a1[i] = da1[i] if pre_a1[i] > 0.0 else 0.0
            g_f1b[i] += dp_a1[i]
            for j in range(ego + f2):
                g_f1w[i, j] += dp_a1[i] * x[j]

        if nv == 0:
            continue

        for g in range(f2):
            s = 0.0
            for i in range(h1n):
                s += dp_a1[i] * f1w[i, ego + g]
            dpooled[g] = s

        # pool gradient: only the argmax frame of each channel receives it
        for g in range(f2):
            v = pool_idx[g]
            if v < 0 or pre2[v, g] <= 0.0:
                continue
            g_c2b[g] += dpooled[g]
            for f in range(f1):
                hf = pre1[v, f]
                if hf > 0.0:
                    g_c2w[g, f] += dpooled[g] * hf

        # conv1 gradient: gather per-frame contributions from all channels
        for v in range(nv):
            for f in range(f1):
                dh1[f] = 0.0
            touched = False
            for g in range(f2):
                if pool_idx[g] != v or pre2[v, g] <= 0.0:
                    continue
                touched = True
                for f in range(f1):
                    dh1[f] += dpooled[g] * c2w[g, f]
            if not touched:
                continue
            base = ego + v * pv
            for f in range(f1):
                if pre1[v, f] > 0.0 and dh1[f] != 0.0:
                    g_c1b[f] += dh1[f]
                    for j in range(pv):
                        g_c1w[f, j] += dh1[f] * obs[b, base + j]
