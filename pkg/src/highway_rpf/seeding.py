"""Named deterministic RNG streams.

Every source of randomness in a run is a separate PCG64 stream derived from
the master seed plus a stream id (and optional sub-keys such as a member or
episode index).  Streams never alias, so consuming draws from one component
cannot shift the randomness seen by another.  This is what makes two agents
trained under the same master seed see identical environments, and what makes
a single-member ensemble reproduce the plain DQN trajectory exactly.
"""

from __future__ import annotations

import numpy as np

# Stream ids. Values are part of the on-disk reproducibility contract:
# changing them changes every seeded run.
TRAIN_EPISODE = 1  # per-episode environment seeds during training
MEMBER_CHOICE = 2  # which ensemble member acts in an episode
REPLAY_MASK = 3    # per-experience buffer membership coin flips
MINIBATCH = 4      # per-member minibatch slot draws
INIT_TRAINABLE = 5  # trainable network weight init, per member
INIT_PRIOR = 6      # prior network weight init, per member
EVAL_EPISODE = 7    # fixed evaluation episode seeds
EXPLORATION = 8     # epsilon-greedy coin flips and random actions


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Return the generator for one named stream of a seeded run."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, *key])))


def generator_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_generator(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng
