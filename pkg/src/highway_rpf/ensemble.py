"""Bootstrapped Q-ensemble with additive randomized prior networks.

Each member owns a trainable network, a frozen prior network, a target
snapshot and an Adam state.  A member's action values are
``trainable(s) + prior_scale * prior(s)``; gradients flow only through the
trainable part.  Exploration follows approximate Thompson sampling: one
member is drawn per episode and acted on greedily.

Member updates within a step are independent (disjoint parameters, private
RNG streams, read-only view of the shared replay), so their results do not
depend on execution order; they run sequentially here.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels, nets, seeding
from .config import TrainSettings
from .replay import Experience, NotReady, SharedReplayMemory


@dataclass
class EnsembleMember:
    trainable: nets.NetworkParams
    target: nets.NetworkParams
    prior: nets.NetworkParams
    optimizer: nets.AdamState


class EnsembleAgent:
    kind = "rpf"

    def __init__(self, settings: TrainSettings, master_seed: int,
                 arch: nets.NetArch | None = None):
        self.settings = settings
        self.arch = arch or nets.NetArch()
        self.master_seed = master_seed
        self.members: list[EnsembleMember] = []
        for k in range(settings.ensemble_size):
            trainable = nets.init_network(self.arch, seeding.stream(master_seed, seeding.INIT_TRAINABLE, k))
            prior = nets.init_network(self.arch, seeding.stream(master_seed, seeding.INIT_PRIOR, k))
            self.members.append(EnsembleMember(
                trainable=trainable,
                target=trainable.copy(),
                prior=prior,
                optimizer=nets.AdamState.for_arch(self.arch),
            ))
        self.replay = SharedReplayMemory(settings.replay_capacity,
                                         settings.ensemble_size,
                                         settings.observation_width())
        self._mask_rng = seeding.stream(master_seed, seeding.REPLAY_MASK)
        self._member_rng = seeding.stream(master_seed, seeding.MEMBER_CHOICE)
        self._sample_rngs = [seeding.stream(master_seed, seeding.MINIBATCH, k)
                             for k in range(settings.ensemble_size)]
        self._grads = nets.zero_gradients(self.arch)
        self.active_member = 0
        self.train_iterations = 0

    # -- acting ------------------------------------------------------------

    def begin_episode(self) -> int:
        self.active_member = int(self._member_rng.integers(self.settings.ensemble_size))
        return self.active_member

    def member_q(self, k: int, obs: np.ndarray) -> np.ndarray:
        member = self.members[k]
        q = nets.forward(member.trainable, obs)
        if self.settings.prior_scale != 0.0:
            q = q + self.settings.prior_scale * nets.forward(member.prior, obs)
        return q

    def member_q_matrix(self, obs: np.ndarray) -> np.ndarray:
        return np.stack([self.member_q(k, obs) for k in range(len(self.members))])

    def act_training(self, obs: np.ndarray, step: int) -> int:
        return int(np.argmax(self.member_q(self.active_member, obs)))

    def act_greedy(self, obs: np.ndarray) -> int:
        return int(np.argmax(self.member_q_matrix(obs).mean(axis=0)))

    # -- learning ----------------------------------------------------------

    def record(self, exp: Experience) -> None:
        self.replay.add(exp, self._mask_rng, self.settings.add_probability,
                        ego_dim=self.arch.ego_inputs, block=self.arch.per_vehicle_inputs)

    def train_tick(self) -> list[float | None]:
        """One update per member (skipping unready ones), then a target sync."""
        self.train_iterations += 1
        losses = [self.train_step_member(k) for k in range(len(self.members))]
        if self.train_iterations % self.settings.target_sync_interval == 0:
            for member in self.members:
                member.target.copy_from(member.trainable)
        return losses

    def train_step_member(self, k: int) -> float | None:
        try:
            slots = self.replay.sample_slots(k, self.settings.batch_size, self._sample_rngs[k])
        except NotReady:
            return None
        return self.update_member(k, self.replay.gather(slots))

    def update_member(self, k: int, batch: dict[str, np.ndarray]) -> float:
        """Double-Q update of one member on a gathered minibatch.

        The bootstrap action is chosen by the member's own (trainable+prior)
        network and evaluated by its target plus the same frozen prior; the
        prior and target contribute constants, so only the trainable network
        receives gradient.
        """
        member = self.members[k]
        s = self.settings
        rows = np.arange(batch["obs"].shape[0])

        prior_next = None
        prior_cur = None
        if s.prior_scale != 0.0:
            prior_next = s.prior_scale * kernels.forward_batch(
                *member.prior.as_kernel_args(), batch["next_obs"], batch["next_n_veh"])
            prior_cur = s.prior_scale * kernels.forward_batch(
                *member.prior.as_kernel_args(), batch["obs"], batch["n_veh"])

        q_next_online = kernels.forward_batch(
            *member.trainable.as_kernel_args(), batch["next_obs"], batch["next_n_veh"])
        if prior_next is not None:
            q_next_online = q_next_online + prior_next
        best_next = np.argmax(q_next_online, axis=1)

        q_next_target = kernels.forward_batch(
            *member.target.as_kernel_args(), batch["next_obs"], batch["next_n_veh"])
        if prior_next is not None:
            q_next_target = q_next_target + prior_next
        bootstrap = q_next_target[rows, best_next]

        targets = np.where(batch["terminal"], batch["reward"],
                           batch["reward"] + s.discount * bootstrap)

        q_current = kernels.forward_batch(
            *member.trainable.as_kernel_args(), batch["obs"], batch["n_veh"])
        if prior_cur is not None:
            q_current = q_current + prior_cur
        td_error = targets - q_current[rows, batch["action"]]

        losses, dloss = nets.huber_loss_batch(td_error, s.huber_delta)
        upstream = -dloss / td_error.shape[0]
        kernels.backward_batch(*member.trainable.as_kernel_args(),
                               batch["obs"], batch["n_veh"], batch["action"], upstream,
                               *self._grads.as_kernel_args())
        nets.adam_step(member.trainable, member.optimizer, self._grads, s.learning_rate)
        return float(losses.mean())

    # -- introspection -----------------------------------------------------

    def prior_digest(self) -> list[str]:
        return [hashlib.sha256(m.prior.flat.tobytes()).hexdigest() for m in self.members]
