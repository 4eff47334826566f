"""Init, Huber, Adam and checkpoint contracts for the network engine."""

import numpy as np
import pytest

from highway_rpf import nets

from conftest import random_observation


def test_init_deterministic_per_seed(arch):
    a = nets.init_network(arch, np.random.default_rng(42))
    b = nets.init_network(arch, np.random.default_rng(42))
    np.testing.assert_array_equal(a.flat, b.flat)
    c = nets.init_network(arch, np.random.default_rng(43))
    assert not np.array_equal(a.flat, c.flat)


def test_init_respects_fan_in_bound(arch):
    for seed in range(5):
        params = nets.init_network(arch, np.random.default_rng(seed))
        for name, _ in arch.param_layout():
            view = getattr(params, name)
            if name.endswith("_w"):
                bound = np.sqrt(6.0 / arch.fan_in(name))
                assert np.abs(view).max() <= bound
            else:
                assert not view.any()  # biases start at zero


def test_malformed_observation_rejected(arch, rng):
    params = nets.init_network(arch, rng)
    with pytest.raises(nets.InputShapeError):
        nets.forward(params, np.zeros(6))  # 3 ego + half a vehicle block
    with pytest.raises(nets.InputShapeError):
        nets.forward(params, np.zeros(2))
    with pytest.raises(nets.InputShapeError):
        nets.backward(params, np.zeros((2, 7)), 0)


def test_huber_closed_forms():
    assert nets.huber_loss(0.0, 10.0) == (0.0, 0.0)
    loss, grad = nets.huber_loss(1.0, 10.0)
    assert loss == pytest.approx(0.5) and grad == pytest.approx(1.0)
    loss, grad = nets.huber_loss(20.0, 10.0)
    assert loss == pytest.approx(150.0) and grad == pytest.approx(10.0)
    loss, grad = nets.huber_loss(-20.0, 10.0)
    assert loss == pytest.approx(150.0) and grad == pytest.approx(-10.0)
    with pytest.raises(ValueError):
        nets.huber_loss(1.0, 0.0)


def test_huber_derivative_bounded():
    errors = np.linspace(-100, 100, 2001)
    _, grads = nets.huber_loss_batch(errors, 10.0)
    assert np.abs(grads).max() <= 10.0
    # quadratic region matches the identity derivative
    inside = np.abs(errors) <= 10.0
    np.testing.assert_allclose(grads[inside], errors[inside])


def test_adam_first_step_magnitude(arch, rng):
    # bias-corrected first step moves by ~lr in the gradient sign direction
    params = nets.init_network(arch, rng)
    before = params.flat.copy()
    grads = nets.zero_gradients(arch)
    grads.flat[:] = rng.normal(size=grads.flat.size)
    state = nets.AdamState.for_arch(arch)
    nets.adam_step(params, state, grads, learning_rate=5e-4)
    delta = params.flat - before
    moved = np.abs(grads.flat) > 1e-3
    np.testing.assert_allclose(np.abs(delta[moved]), 5e-4, rtol=1e-4)
    np.testing.assert_array_equal(np.sign(delta[moved]), -np.sign(grads.flat[moved]))
    assert state.step_count == 1


def test_adam_zero_gradient_is_noop(arch, rng):
    params = nets.init_network(arch, rng)
    before = params.flat.copy()
    state = nets.AdamState.for_arch(arch)
    nets.adam_step(params, state, nets.zero_gradients(arch), 5e-4)
    np.testing.assert_array_equal(params.flat, before)
    assert state.step_count == 1


def test_adam_deterministic(arch, rng):
    grads = nets.zero_gradients(arch)
    grads.flat[:] = rng.normal(size=grads.flat.size)
    results = []
    for _ in range(2):
        params = nets.init_network(arch, np.random.default_rng(0))
        state = nets.AdamState.for_arch(arch)
        for _ in range(3):
            nets.adam_step(params, state, grads, 1e-3)
        results.append(params.flat.copy())
    np.testing.assert_array_equal(results[0], results[1])


def test_adam_shape_mismatch_rejected(arch, small_arch, rng):
    params = nets.init_network(arch, rng)
    with pytest.raises(ValueError):
        nets.adam_step(params, nets.AdamState.for_arch(arch),
                       nets.zero_gradients(small_arch), 1e-3)


def test_parameters_stay_finite_under_updates(arch, rng):
    params = nets.init_network(arch, rng)
    state = nets.AdamState.for_arch(arch)
    grads = nets.zero_gradients(arch)
    for _ in range(50):
        grads.flat[:] = rng.normal(scale=10.0, size=grads.flat.size)
        nets.adam_step(params, state, grads, 5e-4)
        assert params.all_finite()


def test_network_checkpoint_roundtrip_bit_exact(arch, rng, tmp_path):
    params = nets.init_network(arch, rng)
    path = tmp_path / "net.qnet"
    nets.save_network(params, path)
    loaded = nets.load_network(path)
    np.testing.assert_array_equal(params.flat, loaded.flat)
    assert loaded.arch == arch
    # and once more through an explicit arch
    loaded2 = nets.load_network(path, arch)
    np.testing.assert_array_equal(params.flat, loaded2.flat)


def test_network_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.qnet"
    path.write_bytes(b"NOTANETWORK")
    with pytest.raises(ValueError):
        nets.load_network(path)


def test_adam_checkpoint_roundtrip(arch, rng, tmp_path):
    state = nets.AdamState.for_arch(arch)
    state.first_moment[:] = rng.normal(size=state.first_moment.size)
    state.second_moment[:] = rng.uniform(size=state.second_moment.size)
    state.step_count = 77
    path = tmp_path / "opt.bin"
    nets.save_adam(state, path)
    loaded = nets.load_adam(path)
    np.testing.assert_array_equal(state.first_moment, loaded.first_moment)
    np.testing.assert_array_equal(state.second_moment, loaded.second_moment)
    assert loaded.step_count == 77
    assert loaded.beta1 == state.beta1 and loaded.eps == state.eps


def test_forward_batch_and_single_agree(arch, rng):
    from highway_rpf import kernels
    params = nets.init_network(arch, rng)
    n = 5
    obs = random_observation(rng, n, arch)
    single = nets.forward(params, obs)
    batched = kernels.forward_batch(*params.as_kernel_args(),
                                    obs.reshape(1, -1),
                                    np.array([n], dtype=np.int64))
    np.testing.assert_array_equal(single, batched[0])
