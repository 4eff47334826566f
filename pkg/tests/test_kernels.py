"""Cross-checks between the compiled and vectorized kernel backends, and the
finite-difference oracle for the hand-written backward pass."""

import numpy as np
import pytest

from highway_rpf import nets
from highway_rpf.kernels import numba_impl, numpy_impl

from conftest import random_observation


def _random_batch(rng, arch, batch, nmax):
    obs = rng.uniform(-1, 1, size=(batch, arch.ego_inputs + arch.per_vehicle_inputs * nmax))
    n_veh = rng.integers(0, nmax + 1, size=batch).astype(np.int64)
    return obs, n_veh


@pytest.mark.parametrize("nmax", [0, 1, 6])
def test_backends_agree_on_forward(arch, rng, nmax):
    params = nets.init_network(arch, rng)
    obs, n_veh = _random_batch(rng, arch, 16, nmax)
    q_np = numpy_impl.forward_batch(*params.as_kernel_args(), obs, n_veh)
    q_nb = numba_impl.forward_batch(*params.as_kernel_args(), obs, n_veh)
    np.testing.assert_allclose(q_np, q_nb, rtol=1e-12, atol=1e-12)


def test_backends_agree_on_backward(arch, rng):
    params = nets.init_network(arch, rng)
    obs, n_veh = _random_batch(rng, arch, 16, 5)
    actions = rng.integers(0, arch.n_actions, size=16).astype(np.int64)
    upstream = rng.normal(size=16)
    g_np = nets.zero_gradients(arch)
    g_nb = nets.zero_gradients(arch)
    numpy_impl.backward_batch(*params.as_kernel_args(), obs, n_veh, actions, upstream,
                              *g_np.as_kernel_args())
    numba_impl.backward_batch(*params.as_kernel_args(), obs, n_veh, actions, upstream,
                              *g_nb.as_kernel_args())
    np.testing.assert_allclose(g_np.flat, g_nb.flat, rtol=1e-10, atol=1e-12)


def test_gradients_match_finite_differences(small_arch, rng):
    # central differences, h=1e-5; sampled coordinates across every array
    h = 1e-5
    worst = 0.0
    for _ in range(20):
        params = nets.init_network(small_arch, rng)
        obs = random_observation(rng, int(rng.integers(1, 5)), small_arch)
        action = int(rng.integers(small_arch.n_actions))
        grads = nets.backward(params, obs, action, 1.0)
        idx = rng.choice(params.flat.size, size=120, replace=False)
        for i in idx:
            orig = params.flat[i]
            params.flat[i] = orig + h
            up = nets.forward(params, obs)[action]
            params.flat[i] = orig - h
            down = nets.forward(params, obs)[action]
            params.flat[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(fd - grads.flat[i]) / max(abs(fd), abs(grads.flat[i]), 1e-6)
            worst = max(worst, err)
    assert worst < 1e-4, f"worst relative gradient error {worst}"


def test_permutation_invariance(arch, rng):
    params = nets.init_network(arch, rng)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        obs = random_observation(rng, n, arch)
        q = nets.forward(params, obs)
        blocks = obs[arch.ego_inputs:].reshape(n, arch.per_vehicle_inputs)
        shuffled = blocks[rng.permutation(n)].ravel()
        q_perm = nets.forward(params, np.concatenate([obs[:arch.ego_inputs], shuffled]))
        np.testing.assert_array_equal(q, q_perm)


def test_zero_vehicle_input_is_finite(arch, rng):
    params = nets.init_network(arch, rng)
    q = nets.forward(params, random_observation(rng, 0, arch))
    assert q.shape == (arch.n_actions,)
    assert np.isfinite(q).all()


def test_zero_filters_make_output_constant_in_input(arch, rng):
    # with all weights zeroed the network must ignore the observation
    params = nets.NetworkParams(arch)
    q1 = nets.forward(params, random_observation(rng, 4, arch))
    q2 = nets.forward(params, random_observation(rng, 7, arch))
    np.testing.assert_array_equal(q1, q2)


def test_constant_advantage_collapses_to_value(arch, rng):
    # force the advantage head to a constant across actions: Q == V
    params = nets.init_network(arch, rng)
    params.adv_w[:] = params.adv_w[0]
    params.adv_b[:] = 3.7
    obs = random_observation(rng, 5, arch)
    q = nets.forward(params, obs)
    np.testing.assert_allclose(q, q[0], rtol=0, atol=1e-12)


def test_dueling_mean_identity(arch, rng):
    params = nets.init_network(arch, rng)
    # V(s) is recovered as the action mean; mean of (Q - V) must vanish
    for _ in range(20):
        q = nets.forward(params, random_observation(rng, int(rng.integers(0, 8)), arch))
        assert abs(np.mean(q - np.mean(q))) < 1e-12


def test_advantage_gradient_mean_subtraction_structure(arch, rng):
    # d Q(s,a) / d adv_w rows: chosen row carries (1 - 1/A), the rest -1/A,
    # so every other row is equal and the chosen row is -(A-1) times them
    params = nets.init_network(arch, rng)
    obs = random_observation(rng, 3, arch)
    action = 4
    grads = nets.backward(params, obs, action, 1.0)
    g = grads.adv_w
    others = [a for a in range(arch.n_actions) if a != action]
    for b in others[1:]:
        np.testing.assert_allclose(g[b], g[others[0]], rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g[action], -(arch.n_actions - 1) * g[others[0]],
                               rtol=1e-10, atol=1e-15)


def test_zero_upstream_gives_zero_gradients(arch, rng):
    params = nets.init_network(arch, rng)
    grads = nets.backward(params, random_observation(rng, 4, arch), 2, 0.0)
    assert not grads.flat.any()


def test_maxpool_tie_routes_to_first_frame(arch, rng):
    # duplicated vehicle blocks tie in the pool; gradient goes to the first
    params = nets.init_network(arch, rng)
    block = rng.uniform(-1, 1, size=arch.per_vehicle_inputs)
    obs = np.concatenate([rng.uniform(-1, 1, size=arch.ego_inputs), block, block])
    n_veh = np.array([2], dtype=np.int64)
    actions = np.array([0], dtype=np.int64)
    upstream = np.array([1.0])
    for impl in (numpy_impl, numba_impl):
        g = nets.zero_gradients(arch)
        impl.backward_batch(*params.as_kernel_args(), obs.reshape(1, -1), n_veh,
                            actions, upstream, *g.as_kernel_args())
        single = nets.zero_gradients(arch)
        impl.backward_batch(*params.as_kernel_args(),
                            obs[:arch.ego_inputs + arch.per_vehicle_inputs].reshape(1, -1),
                            np.array([1], dtype=np.int64), actions, upstream,
                            *single.as_kernel_args())
        # same conv gradients as the single-vehicle case: second frame inert
        np.testing.assert_allclose(g.conv1_w, single.conv1_w, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(g.conv2_w, single.conv2_w, rtol=1e-12, atol=1e-15)
