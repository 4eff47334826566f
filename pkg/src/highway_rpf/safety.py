"""Ensemble disagreement as an uncertainty measure, and the gated policy.

The spread of the member action values for a state-action pair, relative to
the magnitude of their mean, classifies how far the pair sits from the
training distribution.  Deployment picks the best mean-value action among
those whose relative spread stays under a threshold; when nothing qualifies,
a hard-brake fallback is used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import FALLBACK_ACTION

MEAN_FLOOR = 1e-6  # |mean| below this counts as maximally uncertain


@dataclass
class UncertaintyReport:
    q_mean: np.ndarray            # per-action ensemble mean
    q_std: np.ndarray             # per-action population spread
    cv: np.ndarray                # per-action relative spread (std / |mean|)
    chosen_action: int
    fallback_used: bool

    def csv_row(self) -> list:
        return ([f"{v:.6g}" for v in self.q_mean]
                + [f"{v:.6g}" for v in self.q_std]
                + [f"{v:.6g}" for v in self.cv]
                + [self.chosen_action, int(self.fallback_used)])

    @staticmethod
    def csv_header(n_actions: int) -> list[str]:
        return ([f"q_mean_{a}" for a in range(n_actions)]
                + [f"q_std_{a}" for a in range(n_actions)]
                + [f"cv_{a}" for a in range(n_actions)]
                + ["chosen_action", "fallback_used"])


def coefficient_of_variation(q_matrix: np.ndarray) -> np.ndarray:
    """Population std over members divided by |mean|, per action.

    Near-zero means are reported as +inf: an action whose estimated value is
    ~0 with any spread at all carries no usable signal.
    """
    q_matrix = np.asarray(q_matrix, dtype=np.float64)
    if q_matrix.ndim != 2 or q_matrix.shape[0] < 2:
        raise ValueError("need a [n_members >= 2, n_actions] value matrix")
    mean = q_matrix.mean(axis=0)
    std = q_matrix.std(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = std / np.abs(mean)
    return np.where(np.abs(mean) < MEAN_FLOOR, np.inf, cv)


def select_safe_action(q_matrix: np.ndarray, cv_safe: float) -> tuple[int, UncertaintyReport]:
    """Best mean-value action with relative spread under ``cv_safe``.

    Falls back to hard braking (stay in lane, -4 m/s^2) when every action is
    over the threshold. Ties break to the lowest action index.
    """
    q_matrix = np.asarray(q_matrix, dtype=np.float64)
    cv = coefficient_of_variation(q_matrix)
    mean = q_matrix.mean(axis=0)
    std = q_matrix.std(axis=0)
    allowed = cv < cv_safe
    if allowed.any():
        action = int(np.argmax(np.where(allowed, mean, -np.inf)))
        fallback = False
    else:
        action = FALLBACK_ACTION
        fallback = True
    return action, UncertaintyReport(q_mean=mean, q_std=std, cv=cv,
                                     chosen_action=action, fallback_used=fallback)


def greedy_report(q_matrix: np.ndarray) -> tuple[int, UncertaintyReport]:
    """Ungated mean-value argmax, still carrying the full uncertainty trace."""
    q_matrix = np.asarray(q_matrix, dtype=np.float64)
    mean = q_matrix.mean(axis=0)
    action = int(np.argmax(mean))
    return action, UncertaintyReport(q_mean=mean, q_std=q_matrix.std(axis=0),
                                     cv=coefficient_of_variation(q_matrix),
                                     chosen_action=action, fallback_used=False)


def confidence_measure(cv: float, cv_min: float, cv_safe: float) -> float:
    """Continuous confidence: 1 at ``cv_min``, 0 at ``cv_safe``, unclamped below."""
    if cv_safe <= cv_min or cv_min < 0:
        raise ValueError("need cv_safe > cv_min >= 0")
    return 1.0 - (cv - cv_min) / (cv_safe - cv_min)
