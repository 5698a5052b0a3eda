"""Seeded random stream for reproducible simulation runs."""

from __future__ import annotations

import random
from collections.abc import Sequence
from typing import TypeVar

T = TypeVar("T")


class SeededRNG:
    """Wrapper around random.Random owned by exactly one simulation."""

    def __init__(self, seed: int) -> None:
        self._seed = seed
        self._rng = random.Random(seed)

    @property
    def seed(self) -> int:
        return self._seed

    def random(self) -> float:
        return self._rng.random()

    def choice(self, seq: Sequence[T]) -> T:
        return self._rng.choice(seq)

    def gauss(self, mu: float, sigma: float) -> float:
        return self._rng.gauss(mu, sigma)

    def uniform(self, a: float, b: float) -> float:
        return self._rng.uniform(a, b)

    def randint(self, a: int, b: int) -> int:
        return self._rng.randint(a, b)

    def fork(self) -> SeededRNG:
        """Create a child stream with a derived seed.

        Forking in a fixed order gives each concern (channel losses, gossip
        targets, measurement noise) its own stream, so enabling one does not
        shift the draws of another.
        """
        return SeededRNG(self._rng.getrandbits(64))
