"""Uncertainty-aware tactical driving agents for a three-lane highway.

Bootstrapped Q-learning ensemble with additive randomized prior networks,
a Double-DQN baseline, a self-contained traffic microsimulator, and a
confidence gate that falls back to hard braking when the ensemble disagrees.
"""

__version__ = "0.1.0"
