"""Q-network parameters, initialization, forward/backward, Huber loss, Adam.

The network maps a normalized traffic observation to one action value per
discrete driving action.  The vehicle part of the input is processed by two
1-D convolutions (kernel 4 stride 4, then kernel 1 stride 1) followed by a
max-pool over the vehicle axis, which makes the output independent of the
input ordering of surrounding vehicles and of their count.  The pooled
features are concatenated with the ego inputs, passed through two
fully-connected ReLU layers, and split into a state-value head and an
advantage head recombined with mean-subtracted advantages.

No ML framework is used; the heavy lifting lives in ``highway_rpf.kernels``.
All parameters are float64 views into one flat buffer, so optimizer updates
and serialization operate on a single contiguous array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class InputShapeError(ValueError):
    """Observation vector does not match the network's expected layout."""


@dataclass(frozen=True)
class NetArch:
    """Layer sizes. Topology is fixed; sizes are configurable constants."""

    ego_inputs: int = 3
    per_vehicle_inputs: int = 4
    conv_filters: int = 32
    fc_units: int = 64
    n_actions: int = 10

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        c, h = self.conv_filters, self.fc_units
        return [
            ("conv1_w", (c, self.per_vehicle_inputs)),
            ("conv1_b", (c,)),
            ("conv2_w", (c, c)),
            ("conv2_b", (c,)),
            ("fc1_w", (h, self.ego_inputs + c)),
            ("fc1_b", (h,)),
            ("fc2_w", (h, h)),
            ("fc2_b", (h,)),
            ("value_w", (1, h)),
            ("value_b", (1,)),
            ("adv_w", (self.n_actions, h)),
            ("adv_b", (self.n_actions,)),
        ]

    # fan-in of each weight matrix, used for the init scale
    def fan_in(self, name: str) -> int:
        return {
            "conv1_w": self.per_vehicle_inputs,
            "conv2_w": self.conv_filters,
            "fc1_w": self.ego_inputs + self.conv_filters,
            "fc2_w": self.fc_units,
            "value_w": self.fc_units,
            "adv_w": self.fc_units,
        }[name]


class NetworkParams:
    """All weights of one Q-network as named views into a flat float64 buffer."""

    def __init__(self, arch: NetArch, flat: np.ndarray | None = None):
        self.arch = arch
        layout = arch.param_layout()
        total = sum(int(np.prod(shape)) for _, shape in layout)
        if flat is None:
            flat = np.zeros(total)
        if flat.shape != (total,) or flat.dtype != np.float64:
            raise ValueError(f"flat buffer must be float64[{total}]")
        self.flat = flat
        self._views: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            self._views[name] = flat[offset:offset + size].reshape(shape)
            offset += size

    def __getattr__(self, name: str) -> np.ndarray:
        views = self.__dict__.get("_views")
        if views is not None and name in views:
            return views[name]
        raise AttributeError(name)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.arch, self.flat.copy())

    def copy_from(self, other: "NetworkParams") -> None:
        self.flat[:] = other.flat

    def as_kernel_args(self) -> tuple[np.ndarray, ...]:
        v = self._views
        return (v["conv1_w"], v["conv1_b"], v["conv2_w"], v["conv2_b"],
                v["fc1_w"], v["fc1_b"], v["fc2_w"], v["fc2_b"],
                v["value_w"], v["value_b"], v["adv_w"], v["adv_b"])

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.flat).all())


def init_network(arch: NetArch, rng: np.random.Generator) -> NetworkParams:
    """Fan-in-scaled uniform weights (He-style for ReLU), zero biases."""
    params = NetworkParams(arch)
    for name, _ in arch.param_layout():
        if name.endswith("_w"):
            bound = np.sqrt(6.0 / arch.fan_in(name))
            view = getattr(params, name)
            view[:] = rng.uniform(-bound, bound, size=view.shape)
    return params


def zero_gradients(arch: NetArch) -> NetworkParams:
    """Gradient buffer with the same layout as the parameters."""
    return NetworkParams(arch)


def _check_obs(arch: NetArch, obs: np.ndarray) -> int:
    if obs.ndim != 1:
        raise InputShapeError(f"observation must be 1-D, got shape {obs.shape}")
    rest = obs.shape[0] - arch.ego_inputs
    if rest < 0 or rest % arch.per_vehicle_inputs != 0:
        raise InputShapeError(
            f"observation length {obs.shape[0]} does not decompose into "
            f"{arch.ego_inputs} ego inputs plus {arch.per_vehicle_inputs}-wide vehicle blocks")
    return rest // arch.per_vehicle_inputs


def forward(params: NetworkParams, obs: np.ndarray) -> np.ndarray:
    """Action values for one observation, shape [n_actions]."""
    obs = np.ascontiguousarray(obs, dtype=np.float64)
    n = _check_obs(params.arch, obs)
    q = kernels.forward_batch(*params.as_kernel_args(),
                              obs.reshape(1, -1), np.array([n], dtype=np.int64))
    return q[0]


def backward(params: NetworkParams, obs: np.ndarray, action_index: int,
             upstream_gradient: float = 1.0) -> NetworkParams:
    """Exact gradients of ``upstream_gradient * Q(obs, action_index)``."""
    obs = np.ascontiguousarray(obs, dtype=np.float64)
    n = _check_obs(params.arch, obs)
    grads = zero_gradients(params.arch)
    kernels.backward_batch(*params.as_kernel_args(),
                           obs.reshape(1, -1), np.array([n], dtype=np.int64),
                           np.array([action_index], dtype=np.int64),
                           np.array([float(upstream_gradient)]),
                           *grads.as_kernel_args())
    return grads


def huber_loss(td_error: float, delta: float) -> tuple[float, float]:
    """Huber value and derivative at ``td_error``; quadratic inside ``delta``."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    e = float(td_error)
    if abs(e) <= delta:
        return 0.5 * e * e, e
    return delta * (abs(e) - 0.5 * delta), delta if e > 0 else -delta


def huber_loss_batch(td_error: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(td_error)
    loss = np.where(a <= delta, 0.5 * td_error * td_error, delta * (a - 0.5 * delta))
    return loss, np.clip(td_error, -delta, delta)


@dataclass
class AdamState:
    """First/second moment estimates plus step count for one network."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_arch(cls, arch: NetArch, **kwargs) -> "AdamState":
        n = NetworkParams(arch).flat.shape[0]
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(params: NetworkParams, state: AdamState, grads: NetworkParams,
              learning_rate: float) -> None:
    """One bias-corrected Adam update, in place."""
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    if grads.flat.shape != params.flat.shape or state.first_moment.shape != params.flat.shape:
        raise ValueError("parameter/gradient/moment shapes do not match")
    state.step_count += 1
    t = state.step_count
    g = grads.flat
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    params.flat -= learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# checkpoint serialization: versioned binary layout, bit-exact round trip
# ---------------------------------------------------------------------------

NETWORK_MAGIC = b"HRPFQNET"
ADAM_MAGIC = b"HRPFADAM"
FORMAT_VERSION = 1


def _write_arrays(fh, magic: bytes, arrays: list[tuple[str, np.ndarray]]) -> None:
    fh.write(magic)
    fh.write(np.uint32(FORMAT_VERSION).tobytes())
    fh.write(np.uint32(len(arrays)).tobytes())
    for name, arr in arrays:  # shape table
        encoded = name.encode("ascii")
        fh.write(np.uint8(len(encoded)).tobytes())
        fh.write(encoded)
        fh.write(np.uint8(arr.ndim).tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
    for _, arr in arrays:  # raw data, little endian, declaration order
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_arrays(fh, magic: bytes) -> list[tuple[str, np.ndarray]]:
    if fh.read(len(magic)) != magic:
        raise ValueError("bad checkpoint magic")
    version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version}")
    count = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
    table = []
    for _ in range(count):
        name_len = int(np.frombuffer(fh.read(1), dtype="<u1")[0])
        name = fh.read(name_len).decode("ascii")
        ndim = int(np.frombuffer(fh.read(1), dtype="<u1")[0])
        shape = tuple(int(d) for d in np.frombuffer(fh.read(4 * ndim), dtype="<u4"))
        table.append((name, shape))
    arrays = []
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        arrays.append((name, data))
    return arrays


def save_network(params: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        _write_arrays(fh, NETWORK_MAGIC,
                      [(name, getattr(params, name)) for name, _ in params.arch.param_layout()])


def load_network(path, arch: NetArch | None = None) -> NetworkParams:
    with open(path, "rb") as fh:
        arrays = _read_arrays(fh, NETWORK_MAGIC)
    by_name = dict(arrays)
    if arch is None:
        arch = _infer_arch(by_name)
    params = NetworkParams(arch)
    expected = [name for name, _ in arch.param_layout()]
    if list(by_name) != expected:
        raise ValueError("checkpoint layer table does not match architecture")
    for name, _ in arch.param_layout():
        view = getattr(params, name)
        if by_name[name].shape != view.shape:
            raise ValueError(f"shape mismatch for {name}")
        view[:] = by_name[name]
    return params


def _infer_arch(by_name: dict[str, np.ndarray]) -> NetArch:
    conv = by_name["conv1_w"].shape[0]
    return NetArch(
        ego_inputs=by_name["fc1_w"].shape[1] - conv,
        per_vehicle_inputs=by_name["conv1_w"].shape[1],
        conv_filters=conv,
        fc_units=by_name["fc2_w"].shape[0],
        n_actions=by_name["adv_w"].shape[0],
    )


def save_adam(state: AdamState, path) -> None:
    meta = np.array([state.step_count, state.beta1, state.beta2, state.eps])
    with open(path, "wb") as fh:
        _write_arrays(fh, ADAM_MAGIC, [
            ("first_moment", state.first_moment),
            ("second_moment", state.second_moment),
            ("meta", meta),
        ])


def load_adam(path) -> AdamState:
    with open(path, "rb") as fh:
        arrays = dict(_read_arrays(fh, ADAM_MAGIC))
    meta = arrays["meta"]
    return AdamState(first_moment=arrays["first_moment"].copy(),
                     second_moment=arrays["second_moment"].copy(),
                     step_count=int(meta[0]), beta1=float(meta[1]),
                     beta2=float(meta[2]), eps=float(meta[3]))
