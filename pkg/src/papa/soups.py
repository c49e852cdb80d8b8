"""Model soups, logit ensembles and accuracy evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset
from .nn import Network, predict
from .population import Population, _mean_of, population_mean
from .repair import RepairPlan, repair, reset_batchnorm


@dataclass
class SoupResult:
    network: Network
    included_member_ids: list
    val_accuracy_trace: list = field(default_factory=list)


def _members(pop) -> list:
    return pop.members if isinstance(pop, Population) else list(pop)


def ensemble_logits(pop, x: np.ndarray) -> np.ndarray:
    """Elementwise mean of the members' eval-mode logits."""
    members = _members(pop)
    acc = None
    for m in members:
        z = predict(m, x).astype(np.float64)
        acc = z if acc is None else acc + z
    return (acc / len(members)).astype(members[0].dtype)


def logits_of(model, x) -> np.ndarray:
    if isinstance(model, Network):
        return predict(model, x)
    if callable(model):
        return np.asarray(model(x))
    return ensemble_logits(model, x)


def evaluate_accuracy(model, ds: Dataset) -> float:
    """Argmax accuracy of a Network, a member sequence (logit ensemble) or a logits callable."""
    if ds.n == 0:
        raise ValueError("empty dataset")
    pred = np.argmax(logits_of(model, ds.inputs), axis=1)  # first max wins ties
    return float(np.mean(pred == ds.labels))


def evaluate_loss(model, ds: Dataset) -> float:
    from .data import one_hot
    from .nn import loss_softmax_ce

    z = logits_of(model, ds.inputs)
    return loss_softmax_ce(z, one_hot(ds.labels, ds.n_classes, z.dtype))[0]


def average_soup(pop, repair_plan: Optional[RepairPlan] = None, policy=None) -> Network:
    """Network holding the population mean; optionally REPAIRed against the members."""
    members = _members(pop)
    soup = members[0].copy()
    soup.params[...] = population_mean(members)
    soup.touch()
    if repair_plan is not None:
        kw = {} if policy is None else {"policy": policy}
        soup = repair(soup, members, repair_plan, **kw)
    return soup


@dataclass
class BNRebuild:
    """How soup candidates get batch-norm statistics: data and seed for ResetBatchNorm."""

    data: Dataset
    k: int = 5
    seed: int = 666
    batch_size: int = 64

    def apply(self, net: Network) -> Network:
        if net.batchnorm_layers():
            reset_batchnorm(net, self.data, seed=self.seed, k=self.k, batch_size=self.batch_size)
        return net


def greedy_soup(
    pop,
    eval_ds: Dataset,
    rebuild: Optional[BNRebuild] = None,
    rebuild_mode: str = "each",
) -> SoupResult:
    """Greedy soup: add members in decreasing accuracy order while soup accuracy does not drop.

    ``rebuild_mode`` controls batch-norm statistics for multi-member soups:
    ``"each"`` rebuilds every candidate before it is scored, ``"final"``
    rebuilds once on the returned soup, ``"none"`` keeps averaged statistics.
    """
    members = _members(pop)
    if not members:
        raise ValueError("empty population")
    if eval_ds.n == 0:
        raise ValueError("empty evaluation set")
    if rebuild_mode not in ("each", "final", "none"):
        raise ValueError(f"unknown rebuild mode {rebuild_mode!r}")
    accs = [evaluate_accuracy(m, eval_ds) for m in members]
    order = sorted(range(len(members)), key=lambda i: (-accs[i], i))
    vectors = [m.params for m in members]

    included = [order[0]]
    soup = members[order[0]].copy()
    best = accs[order[0]]
    trace = [best]
    for i in order[1:]:
        cand = soup.copy()
        cand.params[...] = _mean_of(vectors, included + [i])
        cand.touch()
        if rebuild is not None and rebuild_mode == "each":
            rebuild.apply(cand)
        acc = evaluate_accuracy(cand, eval_ds)
        if acc >= best:
            soup, best = cand, acc
            included.append(i)
        trace.append(best)
    if rebuild is not None and rebuild_mode == "final" and len(included) > 1:
        rebuild.apply(soup)
    return SoupResult(soup, included, trace)
