"""Vectorized numpy implementation of the Q-network kernels.

Reference backend: easy to read, used as the cross-check oracle for the
compiled backend and as the fallback when numba is unavailable.

Array layout shared by both backends:

* ``obs``      float64 [B, E + PV*nmax], vehicle blocks after the ego part,
  padded past ``n_veh[b]`` blocks with anything (padding is never read).
* ``n_veh``    int64 [B], number of valid vehicle blocks per row.
* weights follow the declaration order of ``nets.PARAM_LAYOUT``.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def forward_batch(c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b, vw, vb, aw, ab, obs, n_veh):
    """Q-values for a batch of observations, shape [B, n_actions]."""
    ego_dim = f1w.shape[1] - c2w.shape[0]
    pv = c1w.shape[1]
    b_sz = obs.shape[0]
    nmax = (obs.shape[1] - ego_dim) // pv

    if nmax > 0:
        veh = obs[:, ego_dim:ego_dim + nmax * pv].reshape(b_sz, nmax, pv)
        h1 = np.maximum(veh @ c1w.T + c1b, 0.0)
        h2 = np.maximum(h1 @ c2w.T + c2b, 0.0)
        valid = np.arange(nmax)[None, :] < n_veh[:, None]
        masked = np.where(valid[:, :, None], h2, -np.inf)
        pooled = np.where(n_veh[:, None] > 0, masked.max(axis=1), 0.0)
    else:
        pooled = np.zeros((b_sz, c2w.shape[0]))

    x = np.concatenate([obs[:, :ego_dim], pooled], axis=1)
    a1 = np.maximum(x @ f1w.T + f1b, 0.0)
    a2 = np.maximum(a1 @ f2w.T + f2b, 0.0)
    val = a2 @ vw.T + vb
    adv = a2 @ aw.T + ab
    return val + adv - adv.mean(axis=1, keepdims=True)


def backward_batch(c1w, c1b, c2w, c2b, f1w, f1b, f2w, f2b, vw, vb, aw, ab,
                   obs, n_veh, actions, upstream,
                   g_c1w, g_c1b, g_c2w, g_c2b, g_f1w, g_f1b, g_f2w, g_f2b,
                   g_vw, g_vb, g_aw, g_ab):
    """Accumulate d(sum_b upstream[b] * Q[b, actions[b]])/dtheta into g_*.

    Gradient buffers are zeroed first. Max-pool routes gradient to the first
    frame attaining the channel maximum; ReLU derivative at 0 is 0.
    """
    ego_dim = f1w.shape[1] - c2w.shape[0]
    pv = c1w.shape[1]
    f2 = c2w.shape[0]
    n_act = aw.shape[0]
    b_sz = obs.shape[0]
    nmax = (obs.shape[1] - ego_dim) // pv

    # forward, keeping intermediates
    if nmax > 0:
        veh = obs[:, ego_dim:ego_dim + nmax * pv].reshape(b_sz, nmax, pv)
        pre1 = veh @ c1w.T + c1b
        h1 = np.maximum(pre1, 0.0)
        pre2 = h1 @ c2w.T + c2b
        h2 = np.maximum(pre2, 0.0)
        valid = np.arange(nmax)[None, :] < n_veh[:, None]
        masked = np.where(valid[:, :, None], h2, -np.inf)
        pool_idx = masked.argmax(axis=1)
        pooled = np.where(n_veh[:, None] > 0, masked.max(axis=1), 0.0)
    else:
        pooled = np.zeros((b_sz, f2))

    x = np.concatenate([obs[:, :ego_dim], pooled], axis=1)
    pre_a1 = x @ f1w.T + f1b
    a1 = np.maximum(pre_a1, 0.0)
    pre_a2 = a1 @ f2w.T + f2b
    a2 = np.maximum(pre_a2, 0.0)

    rows = np.arange(b_sz)
    one_hot = np.zeros((b_sz, n_act))
    one_hot[rows, actions] = 1.0

    # heads: dQ/dV = 1, dQ/dA_k = 1[k==a] - 1/n_act
    dval = upstream
    dadv = upstream[:, None] * (one_hot - 1.0 / n_act)

    g_vw[:] = (dval[:, None] * a2).sum(axis=0, keepdims=True)
    g_vb[:] = dval.sum()
    g_aw[:] = dadv.T @ a2
    g_ab[:] = dadv.sum(axis=0)

    da2 = dval[:, None] * vw[0] + dadv @ aw
    dp_a2 = np.where(pre_a2 > 0, da2, 0.0)
    g_f2w[:] = dp_a2.T @ a1
    g_f2b[:] = dp_a2.sum(axis=0)

    da1 = dp_a2 @ f2w
    dp_a1 = np.where(pre_a1 > 0, da1, 0.0)
    g_f1w[:] = dp_a1.T @ x
    g_f1b[:] = dp_a1.sum(axis=0)

    if nmax == 0:
        g_c1w[:] = 0.0
        g_c1b[:] = 0.0
        g_c2w[:] = 0.0
        g_c2b[:] = 0.0
        return

    dpooled = (dp_a1 @ f1w)[:, ego_dim:]
    dpooled = np.where(n_veh[:, None] > 0, dpooled, 0.0)

    dh2 = np.zeros_like(h2)
    np.put_along_axis(dh2, pool_idx[:, None, :], dpooled[:, None, :], axis=1)
    dp2 = np.where((pre2 > 0) & valid[:, :, None], dh2, 0.0)
    g_c2w[:] = np.einsum("bvg,bvf->gf", dp2, h1)
    g_c2b[:] = dp2.sum(axis=(0, 1))

    dh1 = dp2 @ c2w
    dp1 = np.where((pre1 > 0) & valid[:, :, None], dh1, 0.0)
    g_c1w[:] = np.einsum("bvf,bvj->fj", dp1, veh)
    g_c1b[:] = dp1.sum(axis=(0, 1))
