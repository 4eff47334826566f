"""Shared experience replay with per-member membership masks.

One ring buffer stores each transition once; a boolean mask row records which
ensemble members may sample it.  This gives every member its own logical
buffer at the cost of a single shared one plus K bits per slot.  Overwritten
slots drop their old mask, and a member only ever samples slots whose bit is
set for it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Experience:
    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    terminal: bool


class NotReady(Exception):
    """A member does not yet own enough experiences for a minibatch."""


class SharedReplayMemory:
    def __init__(self, capacity: int, n_members: int, obs_width: int):
        if capacity <= 0 or n_members <= 0:
            raise ValueError("capacity and n_members must be positive")
        self.capacity = capacity
        self.n_members = n_members
        self.obs_width = obs_width
        self.obs = np.zeros((capacity, obs_width))
        self.n_veh = np.zeros(capacity, dtype=np.int64)
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_width))
        self.next_n_veh = np.zeros(capacity, dtype=np.int64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.mask = np.zeros((capacity, n_members), dtype=bool)
        self.size = 0
        self.insert_pos = 0

    def _store_obs(self, dest_obs, dest_nveh, slot: int, obs: np.ndarray, ego_dim: int, block: int) -> None:
        n = (obs.shape[0] - ego_dim) // block
        dest_obs[slot, :] = 0.0
        dest_obs[slot, :obs.shape[0]] = obs
        dest_nveh[slot] = n

    def add(self, exp: Experience, rng: np.random.Generator,
            add_probability: float, ego_dim: int = 3, block: int = 4) -> np.ndarray:
        """Store one experience; each member's bit set with ``add_probability``.

        Returns the mask row that was written. Exactly ``n_members`` uniform
        draws are consumed regardless of the probability.
        """
        slot = self.insert_pos
        self._store_obs(self.obs, self.n_veh, slot, exp.observation, ego_dim, block)
        self._store_obs(self.next_obs, self.next_n_veh, slot, exp.next_observation, ego_dim, block)
        self.action[slot] = exp.action
        self.reward[slot] = exp.reward
        self.terminal[slot] = exp.terminal
        self.mask[slot, :] = rng.random(self.n_members) < add_probability
        self.insert_pos = (self.insert_pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self.mask[slot].copy()

    def eligible_slots(self, member: int) -> np.ndarray:
        return np.flatnonzero(self.mask[:self.size, member])

    def member_count(self, member: int) -> int:
        return int(self.mask[:self.size, member].sum())

    def sample_slots(self, member: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform slot draws with replacement among the member's experiences."""
        eligible = self.eligible_slots(member)
        if eligible.shape[0] < batch_size:
            raise NotReady(f"member {member} owns {eligible.shape[0]} < {batch_size} experiences")
        picks = rng.integers(0, eligible.shape[0], size=batch_size)
        return eligible[picks]

    def gather(self, slots: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "obs": self.obs[slots],
            "n_veh": self.n_veh[slots],
            "action": self.action[slots],
            "reward": self.reward[slots],
            "next_obs": self.next_obs[slots],
            "next_n_veh": self.next_n_veh[slots],
            "terminal": self.terminal[slots],
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Everything needed to persist and restore the buffer."""
        return {
            "obs": self.obs, "n_veh": self.n_veh, "action": self.action,
            "reward": self.reward, "next_obs": self.next_obs,
            "next_n_veh": self.next_n_veh, "terminal": self.terminal,
            "mask": self.mask,
            "cursor": np.array([self.size, self.insert_pos], dtype=np.int64),
        }

    @classmethod
    def from_state_arrays(cls, arrays: dict[str, np.ndarray]) -> "SharedReplayMemory":
        mem = cls(arrays["obs"].shape[0], arrays["mask"].shape[1], arrays["obs"].shape[1])
        for name in ("obs", "n_veh", "action", "reward", "next_obs", "next_n_veh", "terminal", "mask"):
            getattr(mem, name)[:] = arrays[name]
        mem.size, mem.insert_pos = (int(v) for v in arrays["cursor"])
        return mem
