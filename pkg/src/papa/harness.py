"""Population training loop, checkpoints and metric emission."""

from __future__ import annotations

import csv
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .analysis import AveragingEventTrace, record_averaging_event
from .config import ConfigError, ExperimentConfig, config_digest
from .data import (
    Dataset,
    apply_policy,
    bundled_optdigits_path,
    epoch_order,
    holdout_split,
    load_cifar10_binary,
    load_optdigits,
    sample_policy,
    synthetic_blobs,
)
from .nn import BatchNorm, Conv2D, Dense, Flatten, AvgPool, Network, ReLU, build_network
from .optim import ScheduleSpec, SwaState, lr_at, make_optimizer, optimizer_step, swa_accumulate
from .population import Population, StepCounters, average_replace, mutate, papa_pull, should_average
from .repair import RepairPlan, collect_weighted_stats, repair, reset_batchnorm
from .soups import BNRebuild, SoupResult, average_soup, evaluate_accuracy, evaluate_loss, greedy_soup

log = logging.getLogger(__name__)

EVENT_KEY = 0xE7


# ---------------------------------------------------------------------------
# Seeds, data and models
# ---------------------------------------------------------------------------


def member_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(global_seed, spawn_key=(index,)).generate_state(1)[0])


def event_rng(global_seed: int, counter: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(global_seed, spawn_key=(EVENT_KEY, counter)))


@dataclass
class Splits:
    train: Dataset
    holdout: Dataset
    test: Dataset


def _load(cfg: ExperimentConfig, path: str) -> Dataset:
    if cfg.dataset == "optdigits":
        p = path or bundled_optdigits_path()
        if not p:
            raise ConfigError("optdigits needs data_path (no bundled copy found)")
        return load_optdigits(p)
    if cfg.dataset == "cifar10":
        if not path:
            raise ConfigError("cifar10 needs data_path")
        return load_cifar10_binary(path)
    s = cfg.synthetic
    return synthetic_blobs(s.n, s.classes, s.dim, seed=cfg.split_seed, spread=s.spread)


def load_splits(cfg: ExperimentConfig) -> Splits:
    """Train / holdout (greedy-soup selection) / test splits for a config."""
    full = _load(cfg, cfg.data_path)
    if cfg.test_path:
        train_full, test = full, _load(cfg, cfg.test_path)
    elif cfg.test_fraction > 0 or cfg.dataset == "synthetic":
        frac = cfg.test_fraction if cfg.test_fraction > 0 else 0.25
        if cfg.split_mode == "tail":
            cut = full.n - int(np.floor(frac * full.n + 0.5))
            train_full, test = full.subset(np.arange(cut)), full.subset(np.arange(cut, full.n))
        else:
            train_full, test = holdout_split(full, frac, cfg.split_seed)
    else:
        raise ConfigError("no test data: set test_path or test_fraction")
    train, holdout = holdout_split(train_full, cfg.holdout_fraction, cfg.seed)
    if is_conv(cfg.model):
        train, holdout, test = train.as_images(), holdout.as_images(), test.as_images()
    return Splits(train, holdout, test)


def is_conv(model: str) -> bool:
    return model == "smallconv"


def model_spec(model: str, in_shape: tuple, n_classes: int, batchnorm: bool = True) -> list:
    """Layer specs for ``logreg``, ``mlp[h1,h2,...]`` or ``smallconv``."""
    if model == "logreg":
        return [Dense(int(np.prod(in_shape)), n_classes)]
    m = re.fullmatch(r"mlp\[(\d+(?:,\d+)*)\]", model.replace(" ", ""))
    if m:
        widths = [int(w) for w in m.group(1).split(",")]
        specs, prev = [], int(np.prod(in_shape))
        for w in widths:
            specs += [Dense(prev, w), ReLU()]
            if batchnorm:
                specs.append(BatchNorm(w))
            prev = w
        return specs + [Dense(prev, n_classes)]
    if model == "smallconv":
        c, h, w = in_shape
        if h % 4 or w % 4:
            raise ConfigError("smallconv needs spatial dims divisible by 4")
        return [
            Conv2D(c, 16, 3, pad=1), ReLU(), BatchNorm(16), AvgPool(2),
            Conv2D(16, 32, 3, pad=1), ReLU(), BatchNorm(32), AvgPool(2),
            Flatten(), Dense(32 * (h // 4) * (w // 4), n_classes),
        ]
    raise ConfigError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    run_id: str
    epoch: int
    member_id: str
    split: str
    loss: Optional[float]
    accuracy: Optional[float]
    lr: Optional[float]
    event: str = "none"


METRIC_COLUMNS = [f.name for f in fields(MetricsRecord)]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_metrics(records, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])


def read_metrics(path) -> list:
    def opt_float(s):
        return float(s) if s != "" else None

    out = []
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        for row in reader:
            out.append(
                MetricsRecord(row[0], int(row[1]), row[2], row[3], opt_float(row[4]), opt_float(row[5]), opt_float(row[6]), row[7])
            )
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_TAG = "PAPA1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Network, path) -> None:
    lines = [f"{CHECKPOINT_TAG} {net.n_params}"]
    for e in net.manifest:
        lines.append(f"{e.layer},{e.role},{'x'.join(str(d) for d in e.shape)},{e.offset}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    payload = np.asarray(net.params, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_checkpoint(path):
    """Parse a checkpoint into ``(manifest, params)`` without building a network."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise CheckpointError(f"{path}: header not terminated")
    try:
        head = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: header is not ASCII") from None
    first = head[0].split(" ")
    if len(first) != 2 or first[0] != CHECKPOINT_TAG:
        raise CheckpointError(f"{path}: bad format tag {head[0][:20]!r}")
    try:
        count = int(first[1])
    except ValueError:
        raise CheckpointError(f"{path}: bad parameter count") from None
    manifest = []
    offset = 0
    for line in head[1:]:
        parts = line.split(",")
        if len(parts) != 4:
            raise CheckpointError(f"{path}: bad manifest line {line!r}")
        layer, role, dims, off = parts
        try:
            shape = tuple(int(d) for d in dims.split("x"))
            off = int(off)
        except ValueError:
            raise CheckpointError(f"{path}: bad manifest line {line!r}") from None
        if off != offset:
            raise CheckpointError(f"{path}: manifest offsets are not contiguous")
        entry = nn.ParamEntry(layer, role, shape, off)
        manifest.append(entry)
        offset += entry.size
    if offset != count:
        raise CheckpointError(f"{path}: manifest covers {offset} values, header says {count}")
    payload = raw[end + 2 :]
    if len(payload) != 4 * count:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {4 * count}")
    return manifest, np.frombuffer(payload, dtype="<f4").astype(np.float32)


def infer_dense_spec(manifest) -> list:
    """Rebuild a Dense/BatchNorm stack as laid out by ``model_spec``."""
    by_layer: dict = {}
    order = []
    for e in manifest:
        if e.layer not in by_layer:
            order.append(e.layer)
        by_layer.setdefault(e.layer, {})[e.role] = e.shape
    dense = [n for n in order if set(by_layer[n]) == {"weight", "bias"} and len(by_layer[n]["weight"]) == 2]
    specs = []
    for name in order:
        roles = by_layer[name]
        if name in dense:
            out_f, in_f = roles["weight"]
            specs.append(Dense(in_f, out_f, name=name))
            if name != dense[-1]:
                specs.append(ReLU())
        elif set(roles) == {"weight", "bias", "running_mean", "running_var"}:
            specs.append(BatchNorm(roles["weight"][0], name=name))
        else:
            raise CheckpointError("cannot infer architecture from manifest; supply the layer spec")
    return specs


def load_checkpoint(path, spec=None, input_shape=None) -> Network:
    manifest, params = read_checkpoint(path)
    if spec is None:
        spec = infer_dense_spec(manifest)
    net = Network(spec, dtype=np.float32, input_shape=input_shape)
    if net.manifest != manifest:
        raise CheckpointError(f"{path}: manifest does not match the given architecture")
    nn.set_params(net, params)
    return net


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class _Member:
    index: int
    seed: int
    net: Network
    policy: object
    opt: object
    aug_rng: np.random.Generator
    loss_sum: float = 0.0
    loss_count: int = 0


@dataclass
class RunResult:
    config: ExperimentConfig
    population: Population
    average_soup: Network
    greedy_soup: SoupResult
    metrics: list
    trace: AveragingEventTrace
    alpha_trace: list
    splits: Splits
    summary: dict = field(default_factory=dict)


def _train_segment(m: _Member, train: Dataset, order, start, count, batch_size, lrs):
    for s in range(count):
        i = start + s
        idx = order[i * batch_size : (i + 1) * batch_size]
        batch = apply_policy(idx, train, m.policy, m.aug_rng)
        logits, cache = nn.forward(m.net, batch.x, "train")
        loss, dlogits = nn.loss_softmax_ce(logits, batch.t)
        grads = nn.backward(m.net, cache, dlogits)
        optimizer_step(m.net.params, grads, m.opt, lrs[s])
        m.net.touch()
        m.loss_sum += loss
        m.loss_count += 1


def _schedule(cfg: ExperimentConfig, steps_per_epoch: int) -> ScheduleSpec:
    sc = cfg.schedule
    total = cfg.n_epochs * steps_per_epoch
    gmin = sc.lr_min if sc.kind != "constant" else min(sc.lr_min, cfg.optim.lr)
    return ScheduleSpec(
        kind=sc.kind,
        gamma0=cfg.optim.lr,
        gamma_min=gmin,
        total_steps=total,
        period=sc.period * steps_per_epoch,
        milestones=tuple(int(e) * steps_per_epoch for e in sc.milestones),
        factor=sc.factor,
    )


def build_population(cfg: ExperimentConfig, splits: Splits):
    in_shape = splits.train.inputs.shape[1:]
    spec = model_spec(cfg.model, in_shape, splits.train.n_classes, cfg.batchnorm)
    members = []
    for j in range(cfg.p):
        seed = member_seed(cfg.seed, j)
        init_seed = member_seed(cfg.seed, 0) if cfg.same_init else seed
        net = build_network(spec, init_seed, input_shape=in_shape)
        policy = sample_policy(np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,))), cfg.aug)
        opt = make_optimizer(
            cfg.optim.kind,
            net.params,
            mask=net.trainable_mask,
            weight_decay=cfg.optim.weight_decay,
            momentum=cfg.optim.momentum,
            betas=tuple(cfg.optim.betas),
            eps=cfg.optim.eps,
        )
        aug_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
        members.append(_Member(j, seed, net, policy, opt, aug_rng))
    return spec, members


def _repair_event(cfg, splits, old_nets, pop: Population, draws, policies):
    """REPAIR every slot against the members that were averaged into it."""
    cache = {}
    for slot, idx in enumerate(draws):
        weights = np.zeros(len(old_nets))
        weights[list(idx)] = 1.0 / len(idx)
        plan = RepairPlan(weights, splits.train, k=cfg.papa.repair_k, policies=policies)
        if idx not in cache:
            cache[idx] = collect_weighted_stats(old_nets, plan)
        fixed = repair(pop.members[slot], old_nets, plan, policy=policies[slot], targets=cache[idx])
        pop.members[slot].params[...] = fixed.params
        pop.members[slot].touch()


def run_training(cfg: ExperimentConfig, splits: Optional[Splits] = None, workers: Optional[int] = None) -> RunResult:
    """Train a population under the configured averaging variant and build its soups."""
    cfg.validate()
    splits = splits or load_splits(cfg)
    train, test = splits.train, splits.test
    workers = cfg.workers if workers is None else workers
    spe = train.n // cfg.batch_size
    if spe < 1:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds training set size {train.n}")
    sched = _schedule(cfg, spe)
    gamma0 = cfg.optim.lr
    spec, members = build_population(cfg, splits)
    pop = Population([m.net for m in members], [m.seed for m in members], [m.policy for m in members])
    papa = cfg.papa
    run_id = f"{config_digest(cfg)[:12]}-{int(time.time())}"

    metrics: list = []
    trace = AveragingEventTrace()
    alpha_trace: list = []
    swa = [SwaState() for _ in members]
    swa_start = int(np.floor(cfg.swa.start_fraction * cfg.n_epochs))
    n_total = 0
    t = 0
    events = 0
    has_bn = bool(pop.members[0].batchnorm_layers())
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run_segment(orders, start, count):
        lrs = [lr_at(sched, t + s) for s in range(count)]
        jobs = [(m, orders[m.index]) for m in members]
        if pool is None:
            for m, o in jobs:
                _train_segment(m, train, o, start, count, cfg.batch_size, lrs)
        else:
            list(pool.map(lambda job: _train_segment(job[0], train, job[1], start, count, cfg.batch_size, lrs), jobs))

    try:
        for epoch in range(1, cfg.n_epochs + 1):
            orders = {m.index: epoch_order(train.n, m.seed, epoch) for m in members}
            for m in members:
                m.loss_sum, m.loss_count = 0.0, 0
            i = 0
            while i < spe:
                if papa.variant == "papa":
                    count = min(papa.freq - n_total % papa.freq, spe - i)
                else:
                    count = spe - i
                run_segment(orders, i, count)
                i += count
                t += count
                n_total += count
                counters = StepCounters(n_total, epoch, epoch_end=(i == spe))
                if should_average(counters, papa):
                    events += 1
                    _averaging_event(cfg, splits, pop, members, epoch, t, spe, sched, gamma0, events, trace, alpha_trace, metrics, run_id)
                    n_total = 0

            lr_now = lr_at(sched, t)
            for m in members:
                acc = evaluate_accuracy(m.net, test)
                loss = evaluate_loss(m.net, test)
                metrics.append(MetricsRecord(run_id, epoch, str(m.index), "train", m.loss_sum / max(m.loss_count, 1), None, lr_now))
                metrics.append(MetricsRecord(run_id, epoch, str(m.index), "test", loss, acc, lr_now))
            if cfg.swa.enabled and epoch > swa_start:
                for j, m in enumerate(members):
                    swa[j] = swa_accumulate(swa[j], m.net.params)
    finally:
        if pool is not None:
            pool.shutdown()

    if cfg.swa.enabled and swa[0].n:
        for j, m in enumerate(members):
            m.net.params[...] = swa[j].mean
            if has_bn:
                reset_batchnorm(m.net, train, k=cfg.soup.k)
            m.net.touch()
            metrics.append(MetricsRecord(run_id, cfg.n_epochs, str(j), "test", evaluate_loss(m.net, test), evaluate_accuracy(m.net, test), None, "swa"))

    plan = None
    if cfg.soup.repair:
        plan = RepairPlan(np.full(cfg.p, 1.0 / cfg.p), train, k=cfg.soup.k, policies=pop.policies)
    avg = average_soup(pop, repair_plan=plan)
    if plan is None and has_bn:
        reset_batchnorm(avg, train, k=cfg.soup.k)
    greedy_ds = splits.holdout if (cfg.soup.greedy_eval == "holdout" and splits.holdout.n) else train
    greedy = greedy_soup(pop, greedy_ds, rebuild=BNRebuild(train, k=cfg.soup.k), rebuild_mode=cfg.soup.greedy_rebuild)

    last = cfg.n_epochs
    mean_acc = float(np.mean([evaluate_accuracy(m, test) for m in pop.members]))
    avg_acc = evaluate_accuracy(avg, test)
    greedy_acc = evaluate_accuracy(greedy.network, test)
    ens_acc = evaluate_accuracy(pop.members, test)
    metrics.append(MetricsRecord(run_id, last, "AVG", "test", evaluate_loss(avg, test), avg_acc, None))
    metrics.append(MetricsRecord(run_id, last, "GREEDY", "test", evaluate_loss(greedy.network, test), greedy_acc, None))
    metrics.append(MetricsRecord(run_id, last, "ENS", "test", evaluate_loss(pop.members, test), ens_acc, None))
    summary = {
        "run_id": run_id,
        "variant": papa.variant,
        "mean_accuracy": mean_acc,
        "avg_soup_accuracy": avg_acc,
        "greedy_soup_accuracy": greedy_acc,
        "ensemble_accuracy": ens_acc,
        "greedy_members": greedy.included_member_ids,
        "events": events,
    }
    return RunResult(cfg, pop, avg, greedy, metrics, trace, alpha_trace, splits, summary)


def _averaging_event(cfg, splits, pop, members, epoch, t, spe, sched, gamma0, events, trace, alpha_trace, metrics, run_id):
    papa = cfg.papa
    test = splits.test
    gamma = lr_at(sched, t)
    position = (t / spe)  # fractional epochs elapsed
    track = cfg.track_events and papa.variant in ("papa_all", "papa_2")
    pre = [m.copy() for m in pop.members] if (track or papa.repair_k) else None

    if papa.variant == "papa":
        a = papa_pull(pop, papa.alpha, gamma, gamma0, papa.lr_scaling)
        alpha_trace.append((t, gamma, a))
        metrics.append(MetricsRecord(run_id, epoch, "POP", "train", None, None, gamma, "papa_pull"))
    else:
        m = pop.p if papa.variant == "papa_all" else min(2, pop.p)
        draws = average_replace(pop, m, event_rng(cfg.seed, events))
        tag = "avg_all" if papa.variant == "papa_all" else "avg_pair"
        post = [mem.copy() for mem in pop.members] if track else None
        repaired = None
        if papa.repair_k:
            _repair_event(cfg, splits, pre, pop, draws, pop.policies)
            repaired = pop.members
        if track:
            record_averaging_event(trace, position, pre, post, test, repaired)
            ev = trace.events[-1]
            metrics.append(MetricsRecord(run_id, epoch, "POP", "test", None, ev.post_accuracy, gamma, tag))
            if repaired is not None:
                metrics.append(MetricsRecord(run_id, epoch, "POP", "test", None, ev.post_repair_accuracy, gamma, "repair"))

    if papa.mutation_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(EVENT_KEY, events, 1)))
        for mem in pop.members:
            mem.params[...] = mutate(mem.params, events, rng, papa.mutation_sigma, mask=mem.trainable_mask)
            mem.touch()
