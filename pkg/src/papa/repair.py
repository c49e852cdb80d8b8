"""REPAIR renormalization of averaged networks and batch-norm statistic rebuilding."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import NO_AUGMENT, AugmentPolicy, Dataset, apply_policy
from .nn import BN_EPS, Network, Observer, forward

REPAIR_SEED = 666
SIGMA_FLOOR = float(np.sqrt(BN_EPS))


@dataclass
class RepairPlan:
    weights: Sequence[float]
    data: Dataset
    k: int = 5
    seed: int = REPAIR_SEED
    policies: Optional[Sequence[AugmentPolicy]] = None
    batch_size: int = 64

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError(f"REPAIR weights must sum to 1, got {w.sum():.6g}")
        if self.k < 1:
            raise ValueError("REPAIR needs k >= 1")
        self.weights = w

    def policy(self, i) -> AugmentPolicy:
        return self.policies[i] if self.policies is not None else NO_AUGMENT


def attach_observers(net: Network, mode: str = "passive") -> Network:
    """Attach one observer after every Dense / Conv layer (in place)."""
    if net.observers:
        raise RuntimeError("observers already attached")
    layers = net.preactivation_layers()
    if not layers:
        raise ValueError("network has no preactivation layer")
    for layer in layers:
        channels = layer.bias.shape[0]
        net.observers[layer.name] = Observer(layer.name, channels, mode, dtype=net.dtype)
    return net


def detach_observers(net: Network) -> Network:
    net.observers = {}
    return net


def _batches(data: Dataset, seed: int, k: int, batch_size: int):
    rng = np.random.default_rng(seed)
    size = min(batch_size, data.n)
    for _ in range(k):
        yield rng.choice(data.n, size=size, replace=False)


def reset_batchnorm(
    net: Network,
    data: Dataset,
    policy: AugmentPolicy = NO_AUGMENT,
    seed: int = REPAIR_SEED,
    k: int = 5,
    batch_size: int = 64,
) -> Network:
    """Reset all batch-norm and observer statistics, then re-estimate them.

    k train-mode forward passes over seeded, policy-augmented batches; the
    running estimate is the plain average over those batches. The batch
    indices depend only on ``seed``, so every caller sees the same data.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if data.n == 0:
        raise ValueError("empty dataset")
    for bn in net.batchnorm_layers():
        bn.reset_stats()
    for obs in net.observers.values():
        obs.reset()
    aug_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    net.stat_mode, net.stat_batches = "cumulative", 0
    try:
        for idx in _batches(data, seed, k, batch_size):
            batch = apply_policy(idx, data, policy, aug_rng)
            forward(net, batch.x, "train")
    finally:
        net.stat_mode, net.stat_batches = "momentum", 0
    net.touch()
    return net


def _member_stats(member: Network, plan: RepairPlan, policy) -> dict:
    probe = member.copy()
    detach_observers(probe)
    attach_observers(probe, "passive")
    reset_batchnorm(probe, plan.data, policy, plan.seed, plan.k, plan.batch_size)
    return {name: (o.running_mean.astype(np.float64), o.std) for name, o in probe.observers.items()}


def collect_weighted_stats(members: Sequence[Network], plan: RepairPlan) -> dict:
    """Per preactivation layer: (sum_i w_i mu_i, sum_i w_i sigma_i).

    Members are probed on copies, so their own statistics are untouched.
    """
    if len(plan.weights) != len(members):
        raise ValueError("one REPAIR weight per member required")
    targets = {}
    for i, (w, member) in enumerate(zip(plan.weights, members)):
        if w == 0:
            continue
        for name, (mu, sigma) in _member_stats(member, plan, plan.policy(i)).items():
            if name not in targets:
                targets[name] = (np.zeros_like(mu), np.zeros_like(sigma))
            tm, ts = targets[name]
            tm += w * mu
            ts += w * sigma
    return targets


def fuse_coefficients(mu, sigma, mu_target, sigma_target):
    """Per-channel (slope, shift) so that slope * (z - mu) + mu_target has std sigma_target."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < SIGMA_FLOOR):
        warnings.warn("REPAIR: near-constant preactivation channel; std floored", RuntimeWarning, stacklevel=3)
        sigma = np.maximum(sigma, SIGMA_FLOOR)
    slope = np.asarray(sigma_target, dtype=np.float64) / sigma
    return slope, np.asarray(mu_target, dtype=np.float64) - slope * np.asarray(mu, dtype=np.float64)


def repair(
    avg_net: Network,
    members: Sequence[Network],
    plan: RepairPlan,
    policy: AugmentPolicy = NO_AUGMENT,
    targets: Optional[dict] = None,
) -> Network:
    """Return a copy of ``avg_net`` whose preactivation moments match the members' weighted moments.

    Layers are rescaled front to back; each layer's statistics are measured
    after the layers before it have been fused, then batch-norm statistics
    are rebuilt for the final network. ``targets`` may be passed to reuse a
    previous :func:`collect_weighted_stats` result.
    """
    for m in members:
        if m.manifest != avg_net.manifest:
            raise ValueError("members and averaged network differ in architecture")
    if targets is None:
        targets = collect_weighted_stats(members, plan)
    net = avg_net.copy()
    detach_observers(net)
    for layer in net.preactivation_layers():
        attach_observers(net, "passive")
        reset_batchnorm(net, plan.data, policy, plan.seed, plan.k, plan.batch_size)
        obs = net.observers[layer.name]
        mu_t, sigma_t = targets[layer.name]
        slope, shift = fuse_coefficients(obs.running_mean, obs.std, mu_t, sigma_t)
        w = layer.weight.astype(np.float64)
        layer.weight[...] = w * slope.reshape((-1,) + (1,) * (w.ndim - 1))
        layer.bias[...] = slope * layer.bias.astype(np.float64) + shift
        detach_observers(net)
    if net.batchnorm_layers():
        reset_batchnorm(net, plan.data, policy, plan.seed, plan.k, plan.batch_size)
    net.touch()
    return net


def measure_preactivation_stats(net: Network, data: Dataset, policy=NO_AUGMENT, seed=REPAIR_SEED, k=5, batch_size=64) -> dict:
    """Preactivation (mean, std) per Dense / Conv layer on the seeded stream; ``net`` is not modified."""
    probe = net.copy()
    detach_observers(probe)
    attach_observers(probe, "passive")
    reset_batchnorm(probe, data, policy, seed, k, batch_size)
    return {name: (o.running_mean.astype(np.float64), o.std) for name, o in probe.observers.items()}
