"""Weight-space operations over a population of networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import NO_AUGMENT
from .nn import Network

VARIANTS = ("papa", "papa_all", "papa_2", "baseline")


@dataclass
class Population:
    members: list
    seeds: list = field(default_factory=list)
    policies: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("population must have at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.manifest != first.manifest:
                raise ValueError("population members have different manifests")
        if not self.policies:
            self.policies = [NO_AUGMENT] * len(self.members)

    @property
    def p(self) -> int:
        return len(self.members)

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __getitem__(self, i) -> Network:
        return self.members[i]

    def vectors(self) -> np.ndarray:
        return np.stack([m.params for m in self.members])


@dataclass
class PapaConfig:
    variant: str = "papa"
    alpha: float = 0.99
    freq: int = 10  # SGD steps for papa, epochs for papa_all / papa_2
    window: Optional[tuple] = None  # inclusive (start_epoch, end_epoch); None = whole run
    repair_k: int = 5
    lr_scaling: bool = True
    mutation_sigma: float = 0.0  # GA-style mutation after each event; 0 disables

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.freq < 1:
            raise ValueError("freq must be >= 1")
        if self.repair_k < 0:
            raise ValueError("repair_k must be >= 0")
        if self.window is not None:
            start, end = self.window
            if start > end:
                raise ValueError("window start must not exceed its end")


def _mean_of(vectors, idx) -> np.ndarray:
    acc = np.zeros(vectors[0].shape, dtype=np.float64)
    for i in sorted(idx):
        acc += vectors[i]
    return acc / len(idx)


def population_mean(pop) -> np.ndarray:
    """Elementwise mean of member parameter vectors (float64, index order)."""
    members = pop.members if isinstance(pop, Population) else list(pop)
    if not members:
        raise ValueError("empty population")
    ref = members[0].manifest
    if any(m.manifest != ref for m in members):
        raise ValueError("population members have different manifests")
    return _mean_of([m.params for m in members], range(len(members)))


def effective_alpha(alpha_papa: float, gamma: float, gamma0: float, lr_scaling: bool = True) -> float:
    """1 - alpha' = (gamma / gamma0) * (1 - alpha_papa) when scaling is on."""
    if gamma0 <= 0:
        raise ValueError("gamma0 must be positive")
    if not lr_scaling:
        return alpha_papa
    if gamma > gamma0 * (1 + 1e-12):
        raise ValueError("gamma must not exceed gamma0")
    return 1.0 - (gamma / gamma0) * (1.0 - alpha_papa)


def papa_pull(pop: Population, alpha_papa: float, gamma: float, gamma0: float, lr_scaling: bool = True) -> float:
    """Pull every member toward the population mean; returns the alpha' used.

    The mean is taken once before any member moves.
    """
    if not 0 <= alpha_papa <= 1:
        raise ValueError("alpha_papa must be in [0, 1]")
    a = effective_alpha(alpha_papa, gamma, gamma0, lr_scaling)
    if a == 1.0:
        return a
    mean = population_mean(pop)
    for m in pop.members:
        new = a * m.params.astype(np.float64) + (1.0 - a) * mean
        m.params[...] = new
        m.touch()
    return a


def average_replace(pop: Population, m: int, rng: np.random.Generator) -> list:
    """Replace each slot by the mean of ``m`` members drawn without replacement.

    Draws are taken from the old population. Returns the drawn index sets.
    """
    if not 1 <= m <= pop.p:
        raise ValueError(f"m must be in [1, {pop.p}], got {m}")
    old = [mem.params.copy() for mem in pop.members]
    draws = []
    for slot in range(pop.p):
        idx = tuple(sorted(int(i) for i in rng.choice(pop.p, size=m, replace=False)))
        draws.append(idx)
        pop.members[slot].params[...] = _mean_of(old, idx)
        pop.members[slot].touch()
    return draws


def mutate(params: np.ndarray, generation: int, rng: np.random.Generator, sigma0: float = 0.01, mask=None) -> np.ndarray:
    """Add N(0, (sigma0 / generation)^2) noise to every entry selected by ``mask``."""
    if generation < 1:
        raise ValueError("generation must be >= 1")
    noise = rng.normal(0.0, sigma0 / generation, size=params.shape)
    if mask is not None:
        noise = noise * mask
    return (params + noise).astype(params.dtype)


@dataclass
class StepCounters:
    n_total: int  # steps since the last averaging event
    epoch: int  # 1-based epoch in progress
    epoch_end: bool = False


def should_average(counters: StepCounters, config: PapaConfig) -> bool:
    if config.variant == "baseline":
        return False
    if config.window is not None:
        start, end = config.window
        if not start <= counters.epoch <= end:
            return False
    if config.variant == "papa":
        return counters.n_total > 0 and counters.n_total % config.freq == 0
    return counters.epoch_end and counters.epoch % config.freq == 0
