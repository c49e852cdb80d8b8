"""Feature-similarity diagnostics and averaging-event traces."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .nn import Network, extract_activations


def cosine_feature_similarity(net_a: Network, net_b: Network, layer: str, ds: Dataset, n_samples: Optional[int] = None) -> float:
    """Mean per-sample cosine between the flattened eval-mode activations of ``layer``.

    Samples where either activation vector is all zeros are skipped.
    """
    n = ds.n if n_samples is None else n_samples
    if n > ds.n or n < 1:
        raise ValueError(f"n_samples must be in [1, {ds.n}]")
    x = ds.inputs[:n]
    a = extract_activations(net_a, x, layer).reshape(n, -1).astype(np.float64)
    b = extract_activations(net_b, x, layer).reshape(n, -1).astype(np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        raise ValueError(f"all activation vectors at {layer!r} have zero norm")
    if not ok.all():
        warnings.warn(f"{(~ok).sum()} zero-norm samples skipped at {layer!r}", RuntimeWarning, stacklevel=2)
    cos = (a[ok] * b[ok]).sum(axis=1) / (na[ok] * nb[ok])
    return float(np.clip(cos.mean(), -1.0, 1.0))


def hidden_layers(net: Network) -> list:
    """Names of layers producing hidden features (every layer but the output one)."""
    return [name for name in net.layer_names[:-1]]


def mean_pairwise_similarity(members: Sequence[Network], layers, ds: Dataset, n_samples=None) -> dict:
    """Layer -> mean cosine similarity over all member pairs."""
    out = {}
    for layer in layers:
        vals = [
            cosine_feature_similarity(members[i], members[j], layer, ds, n_samples)
            for i in range(len(members))
            for j in range(i + 1, len(members))
        ]
        out[layer] = float(np.mean(vals))
    return out


@dataclass
class AveragingEvent:
    epoch: float
    pre_accuracies: list
    post_accuracy: float
    post_repair_accuracy: Optional[float] = None

    @property
    def pre_mean(self) -> float:
        return float(np.mean(self.pre_accuracies))

    @property
    def final_accuracy(self) -> float:
        return self.post_repair_accuracy if self.post_repair_accuracy is not None else self.post_accuracy


@dataclass
class AveragingEventTrace:
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def boosted_fraction(self, after_epoch: float = 0) -> float:
        ev = [e for e in self.events if e.epoch > after_epoch]
        if not ev:
            return float("nan")
        return sum(e.final_accuracy >= e.pre_mean for e in ev) / len(ev)


def record_averaging_event(
    trace: AveragingEventTrace,
    epoch: float,
    pre_members: Sequence[Network],
    post_members: Sequence[Network],
    ds_test: Dataset,
    repaired_members: Optional[Sequence[Network]] = None,
) -> AveragingEventTrace:
    """Append mean test accuracies before averaging, after averaging and after REPAIR."""
    from .soups import evaluate_accuracy

    if trace.events and epoch <= trace.events[-1].epoch:
        raise ValueError("averaging events must have strictly increasing epochs")
    pre = [evaluate_accuracy(m, ds_test) for m in pre_members]
    post = float(np.mean([evaluate_accuracy(m, ds_test) for m in post_members]))
    rep = None
    if repaired_members is not None:
        rep = float(np.mean([evaluate_accuracy(m, ds_test) for m in repaired_members]))
    trace.events.append(AveragingEvent(epoch, pre, post, rep))
    return trace
