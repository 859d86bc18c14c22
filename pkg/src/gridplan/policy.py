"""Exploration: decaying epsilon-greedy gated over Boltzmann sampling.

Epsilon decays exponentially in environment steps; the Boltzmann
temperature decays geometrically per episode down to a floor. The two
compose as epsilon-gated Boltzmann: with probability epsilon the action is
sampled from softmax(q / T), otherwise it is the greedy argmax. Epsilon
controls how often the agent explores, the temperature controls how random
the exploratory choice is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import stable_softmax


@dataclass
class ExplorationSchedule:
    eps_min: float = 0.1
    eps_max: float = 0.9
    decay_rate: float = 1e-4  # per environment step
    temp_initial: float = 1.0
    temp_decay: float = 0.99  # per episode
    temp_floor: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.eps_min <= self.eps_max <= 1.0:
            raise ValueError(f"need 0 <= eps_min <= eps_max <= 1, got "
                             f"[{self.eps_min}, {self.eps_max}]")
        if self.decay_rate < 0:
            raise ValueError("decay_rate must be >= 0")
        if self.temp_initial <= 0 or self.temp_floor <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 < self.temp_decay <= 1.0:
            raise ValueError("temp_decay must be in (0, 1]")

    @classmethod
    def frozen(cls, epsilon: float, temperature: float) -> "ExplorationSchedule":
        """Constant-rate exploration (used by the frozen-exploration ablation)."""
        return cls(eps_min=epsilon, eps_max=epsilon, decay_rate=0.0,
                   temp_initial=temperature, temp_decay=1.0,
                   temp_floor=temperature)

    def epsilon_at(self, step: int) -> float:
        """eps_min + (eps_max - eps_min) * exp(-decay_rate * step)."""
        if step < 0:
            raise ValueError("step must be >= 0")
        return self.eps_min + (self.eps_max - self.eps_min) * math.exp(
            -self.decay_rate * step)

    def temperature_at(self, episode: int) -> float:
        """max(temp_floor, temp_initial * temp_decay ** episode)."""
        if episode < 0:
            raise ValueError("episode must be >= 0")
        return max(self.temp_floor, self.temp_initial * self.temp_decay ** episode)


def greedy_action(q_values: np.ndarray) -> int:
    """Argmax with lowest-index tie-break (np.argmax convention)."""
    q_values = np.asarray(q_values, dtype=np.float64)
    if q_values.ndim != 1 or q_values.size == 0:
        raise ValueError("q_values must be a nonempty vector")
    return int(np.argmax(q_values))


def boltzmann_probabilities(q_values: np.ndarray, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q_values = np.asarray(q_values, dtype=np.float64)
    return stable_softmax(q_values / temperature)


def select_action(q_values: np.ndarray, schedule: ExplorationSchedule,
                  step: int, episode: int, rng: np.random.Generator) -> int:
    """Epsilon-gated Boltzmann action selection.

    Draw u ~ U[0,1); explore (Boltzmann sample) when u < epsilon(step),
    exploit (greedy) otherwise. Deterministic given the rng state.
    """
    q_values = np.asarray(q_values, dtype=np.float64)
    if q_values.ndim != 1 or q_values.size == 0:
        raise ValueError("q_values must be a nonempty vector")
    if not np.isfinite(q_values).all():
        raise ValueError("q_values must be finite")
    if rng.random() < schedule.epsilon_at(step):
        probs = boltzmann_probabilities(q_values, schedule.temperature_at(episode))
        return int(rng.choice(q_values.size, p=probs))
    return greedy_action(q_values)
