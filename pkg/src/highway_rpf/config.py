"""Training profiles and run settings.

``paper`` carries the published full-scale hyperparameters; ``desk`` is the
scaled-down profile used by the acceptance suite (small ensemble, 100k steps,
lighter traffic) so a complete run fits on a workstation CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from . import env


@dataclass(frozen=True)
class TrainSettings:
    ensemble_size: int = 10
    prior_scale: float = 50.0        # weight of the frozen prior net in member Q
    add_probability: float = 0.5     # chance an experience enters each member buffer
    discount: float = 0.99
    learn_start: int = 50_000        # samples collected before updates begin
    replay_capacity: int = 500_000
    learning_rate: float = 5e-4
    batch_size: int = 32
    target_sync_interval: int = 20_000
    huber_delta: float = 10.0
    eps_start: float = 1.0           # annealed exploration, DQN baseline only
    eps_end: float = 0.05
    eps_final_step: int = 1_000_000
    total_steps: int = 5_000_000
    eval_interval: int = 50_000
    eval_episodes: int = 100
    n_vehicles: int = 25
    cv_safe: float = 0.02            # uncertainty threshold for gated deployment
    cv_min: float = 0.01             # converged in-distribution uncertainty level

    def nominal_scenario(self) -> env.ScenarioConfig:
        return env.ScenarioConfig(kind="nominal", n_vehicles=self.n_vehicles)

    def observation_width(self) -> int:
        return env.EGO_FEATURES + env.VEHICLE_FEATURES * self.n_vehicles

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


PROFILES: dict[str, TrainSettings] = {
    "paper": TrainSettings(),
    # scaled so that the whole run, including the prior-offset burn-in, fits
    # in ~100k samples: smaller ensemble, lighter traffic, weaker prior
    "desk": TrainSettings(
        ensemble_size=3,
        prior_scale=5.0,
        total_steps=100_000,
        eval_interval=10_000,
        eval_episodes=20,
        n_vehicles=12,
        learn_start=5_000,
        replay_capacity=100_000,
        target_sync_interval=2_000,
        eps_final_step=50_000,
    ),
}


def settings_from_sources(profile: str = "desk", config_path=None,
                          overrides: dict | None = None) -> TrainSettings:
    """Profile defaults, then config-file values, then explicit overrides."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    settings = PROFILES[profile]
    merged: dict = {}
    if config_path is not None:
        with open(config_path) as fh:
            merged.update(json.load(fh))
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - set(TrainSettings.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown settings keys: {sorted(unknown)}")
    return replace(settings, **merged) if merged else settings
