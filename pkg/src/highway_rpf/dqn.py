"""Double-DQN baseline agent with annealed epsilon-greedy exploration.

Shares the network engine and replay machinery with the ensemble but keeps
its own training-step implementation, so the two can be checked against each
other: a single-member ensemble with zero prior scale must reproduce this
agent's trajectory exactly under shared seeds.
"""

from __future__ import annotations

import numpy as np

from . import kernels, nets, seeding
from .config import TrainSettings
from .replay import Experience, NotReady, SharedReplayMemory


def epsilon_schedule(step: int, start: float = 1.0, end: float = 0.05,
                     final_step: int = 1_000_000) -> float:
    """Linear anneal from ``start`` at 0 to ``end`` at ``final_step``, then flat."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= final_step:
        return end
    return start + (end - start) * step / final_step


class DqnAgent:
    kind = "dqn"

    def __init__(self, settings: TrainSettings, master_seed: int,
                 arch: nets.NetArch | None = None):
        self.settings = settings
        self.arch = arch or nets.NetArch()
        self.master_seed = master_seed
        self.online = nets.init_network(self.arch, seeding.stream(master_seed, seeding.INIT_TRAINABLE, 0))
        self.target = self.online.copy()
        self.optimizer = nets.AdamState.for_arch(self.arch)
        # single logical buffer: one member bit, always set
        self.replay = SharedReplayMemory(settings.replay_capacity, 1,
                                         settings.observation_width())
        self._mask_rng = seeding.stream(master_seed, seeding.REPLAY_MASK)
        self._sample_rng = seeding.stream(master_seed, seeding.MINIBATCH, 0)
        self._explore_rng = seeding.stream(master_seed, seeding.EXPLORATION)
        self._grads = nets.zero_gradients(self.arch)
        self.train_iterations = 0
        self.frozen_epsilon: float | None = None  # pin to a value (0 for greedy runs)

    def begin_episode(self) -> None:
        pass

    def epsilon(self, step: int) -> float:
        if self.frozen_epsilon is not None:
            return self.frozen_epsilon
        s = self.settings
        return epsilon_schedule(step, s.eps_start, s.eps_end, s.eps_final_step)

    def select_action(self, obs: np.ndarray, eps: float, rng: np.random.Generator) -> int:
        if not 0.0 <= eps <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if rng.random() < eps:
            return int(rng.integers(self.arch.n_actions))
        return int(np.argmax(nets.forward(self.online, obs)))

    def act_training(self, obs: np.ndarray, step: int) -> int:
        return self.select_action(obs, self.epsilon(step), self._explore_rng)

    def act_greedy(self, obs: np.ndarray) -> int:
        return int(np.argmax(nets.forward(self.online, obs)))

    def record(self, exp: Experience) -> None:
        self.replay.add(exp, self._mask_rng, 1.0,
                        ego_dim=self.arch.ego_inputs, block=self.arch.per_vehicle_inputs)

    def train_tick(self) -> list[float | None]:
        self.train_iterations += 1
        try:
            slots = self.replay.sample_slots(0, self.settings.batch_size, self._sample_rng)
            loss = self.train_step(self.replay.gather(slots))
        except NotReady:
            loss = None
        if self.train_iterations % self.settings.target_sync_interval == 0:
            self.target.copy_from(self.online)
        return [loss]

    def train_step(self, batch: dict[str, np.ndarray]) -> float:
        """Double-Q target: online net picks the action, target net scores it."""
        s = self.settings
        rows = np.arange(batch["obs"].shape[0])

        q_next_online = kernels.forward_batch(
            *self.online.as_kernel_args(), batch["next_obs"], batch["next_n_veh"])
        best_next = np.argmax(q_next_online, axis=1)

        q_next_target = kernels.forward_batch(
            *self.target.as_kernel_args(), batch["next_obs"], batch["next_n_veh"])
        bootstrap = q_next_target[rows, best_next]

        targets = np.where(batch["terminal"], batch["reward"],
                           batch["reward"] + s.discount * bootstrap)

        q_current = kernels.forward_batch(
            *self.online.as_kernel_args(), batch["obs"], batch["n_veh"])
        td_error = targets - q_current[rows, batch["action"]]

        losses, dloss = nets.huber_loss_batch(td_error, s.huber_delta)
        upstream = -dloss / td_error.shape[0]
        kernels.backward_batch(*self.online.as_kernel_args(),
                               batch["obs"], batch["n_veh"], batch["action"], upstream,
                               *self._grads.as_kernel_args())
        nets.adam_step(self.online, self.optimizer, self._grads, s.learning_rate)
        return float(losses.mean())
