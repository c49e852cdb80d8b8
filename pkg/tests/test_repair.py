import warnings

import numpy as np
import pytest

from papa.data import AugmentPolicy, Dataset, synthetic_blobs
from papa.nn import BatchNorm, Dense, ReLU, build_network, forward
from papa.population import population_mean
from papa.repair import (
    RepairPlan,
    attach_observers,
    collect_weighted_stats,
    detach_observers,
    fuse_coefficients,
    measure_preactivation_stats,
    repair,
    reset_batchnorm,
)

from conftest import train

SPEC = [Dense(12, 16), ReLU(), BatchNorm(16), Dense(16, 16), ReLU(), Dense(16, 4)]
PLAIN = [Dense(12, 16), ReLU(), Dense(16, 16), ReLU(), Dense(16, 4)]


@pytest.fixture(scope="module")
def data():
    return synthetic_blobs(n=400, n_classes=4, dim=12, seed=3)


@pytest.fixture(scope="module")
def trained(data):
    return [train(build_network(SPEC, s), data, steps=80, seed=s) for s in (1, 2)]


@pytest.fixture(scope="module")
def trained_plain(data):
    return [train(build_network(PLAIN, s), data, steps=80, seed=s) for s in (1, 2, 3)]


def averaged(members):
    net = members[0].copy()
    net.params[...] = population_mean(members)
    net.touch()
    return net


# -- observers ------------------------------------------------------------------


def test_observer_attach_and_passthrough(data):
    net = build_network([Dense(12, 5), ReLU(), Dense(5, 3)], 0)
    before, _ = forward(net, data.inputs[:20], "train")
    attach_observers(net, "passive")
    assert list(net.observers) == ["dense0", "dense1"]
    after, _ = forward(net, data.inputs[:20], "train")
    assert before.tobytes() == after.tobytes()
    with pytest.raises(RuntimeError):
        attach_observers(net)
    detach_observers(net)
    assert not net.observers


def test_active_observer_normalizes(data):
    net = build_network([Dense(12, 5)], 0)
    attach_observers(net, "active")
    out, _ = forward(net, data.inputs[:64], "train")
    assert np.all(np.abs(out.mean(0)) < 1e-4)


def test_no_preactivation_layer():
    with pytest.raises(ValueError):
        attach_observers(build_network([BatchNorm(3)], 0))


# -- reset_batchnorm -----------------------------------------------------------------


def test_reset_constant_preactivation():
    ds = Dataset(np.ones((100, 3), np.float32), np.zeros(100, dtype=np.int64), 2)
    net = build_network([Dense(3, 2), BatchNorm(2), Dense(2, 2)], 0)
    net.layer("dense0").bias[...] = [0.5, -1.5]
    reset_batchnorm(net, ds, k=3)
    bn = net.layer("bn0")
    c = net.layer("dense0").weight.sum(1) + net.layer("dense0").bias
    assert np.allclose(bn.running_mean, c, atol=1e-6)
    assert np.allclose(bn.running_var, 0, atol=1e-10)


def test_reset_is_reproducible(trained, data):
    a, b = trained[0].copy(), trained[0].copy()
    pol = AugmentPolicy(mixup_alpha=0.5)
    reset_batchnorm(a, data, pol, seed=666, k=5)
    reset_batchnorm(b, data, pol, seed=666, k=5)
    assert a.params.tobytes() == b.params.tobytes()
    reset_batchnorm(b, data, pol, seed=667, k=5)
    assert a.params.tobytes() != b.params.tobytes()


def test_reset_matches_two_pass_oracle(trained, data):
    net = trained[0].copy()
    reset_batchnorm(net, data, seed=666, k=5, batch_size=64)
    l0 = net.layer("dense0")
    rng = np.random.default_rng(666)
    means, varis = [], []
    for _ in range(5):
        idx = rng.choice(data.n, size=64, replace=False)
        h = np.maximum(data.inputs[idx].astype(np.float64) @ l0.weight.T.astype(np.float64) + l0.bias, 0)
        means.append(h.mean(0))
        varis.append(h.var(0, ddof=1))
    bn = net.layer("bn0")
    assert np.allclose(bn.running_mean, np.mean(means, 0), rtol=1e-5, atol=1e-6)
    assert np.allclose(bn.running_var, np.mean(varis, 0), rtol=1e-5, atol=1e-6)


def test_reset_errors(trained, data):
    with pytest.raises(ValueError):
        reset_batchnorm(trained[0].copy(), data, k=0)
    with pytest.raises(ValueError):
        reset_batchnorm(trained[0].copy(), data.subset([]), k=1)


# -- weighted stats ------------------------------------------------------------------


def test_plan_validation(data):
    with pytest.raises(ValueError):
        RepairPlan([0.3, 0.3], data)
    with pytest.raises(ValueError):
        RepairPlan([1.0], data, k=0)


def test_weighted_stats_identical_members(trained, data):
    plan = RepairPlan([0.5, 0.5], data)
    t = collect_weighted_stats([trained[0], trained[0]], plan)
    own = measure_preactivation_stats(trained[0], data)
    for name, (mu, sigma) in own.items():
        assert np.allclose(t[name][0], mu, atol=1e-6) and np.allclose(t[name][1], sigma, atol=1e-6)


def test_weighted_stats_scalar_oracle(trained_plain, data):
    w = [0.2, 0.5, 0.3]
    t = collect_weighted_stats(trained_plain, RepairPlan(w, data))
    per = [measure_preactivation_stats(m, data) for m in trained_plain]
    for name in t:
        for c in range(t[name][0].size):
            mu = sum(w[i] * float(per[i][name][0][c]) for i in range(3))
            sd = sum(w[i] * float(per[i][name][1][c]) for i in range(3))
            assert abs(t[name][0][c] - mu) < 1e-6 and abs(t[name][1][c] - sd) < 1e-6


def test_weighted_stats_midpoint():
    ds = Dataset(np.ones((70, 1), np.float32), np.zeros(70, dtype=np.int64), 2)
    a = build_network([Dense(1, 2)], 0)
    b = a.copy()
    a.params[...] = 0
    b.params[...] = [0, 0, 2, 2]  # bias 2
    t = collect_weighted_stats([a, b], RepairPlan([0.5, 0.5], ds))
    assert np.allclose(t["dense0"][0], 1.0)


def test_members_untouched(trained, data):
    snap = [m.params.copy() for m in trained]
    collect_weighted_stats(trained, RepairPlan([0.5, 0.5], data))
    for m, s in zip(trained, snap):
        assert m.params.tobytes() == s.tobytes() and not m.observers


# -- fusion ---------------------------------------------------------------------


def test_fuse_coefficients():
    slope, shift = fuse_coefficients([1.0, 2.0], [2.0, 1.0], [1.0, 0.0], [2.0, 3.0])
    assert np.allclose(slope, [1.0, 3.0]) and np.allclose(shift, [0.0, -6.0])
    with pytest.warns(RuntimeWarning):
        slope, _ = fuse_coefficients([0.0], [0.0], [0.0], [1.0])
    assert slope[0] == pytest.approx(1 / np.sqrt(1e-5))


def test_identity_case(trained, data):
    avg = trained[0].copy()
    reset_batchnorm(avg, data)
    out = repair(avg, [avg.copy(), avg.copy()], RepairPlan([0.5, 0.5], data))
    mask = avg.trainable_mask
    rel = np.abs(out.params - avg.params) / np.maximum(np.abs(avg.params), 1e-3)
    assert rel[mask].max() < 1e-4
    stats = measure_preactivation_stats(avg, data)
    for name, (mu, sigma) in stats.items():
        slope, shift = fuse_coefficients(mu, sigma, mu, sigma)
        assert np.allclose(slope, 1, atol=1e-3) and np.allclose(shift, 0, atol=1e-3)


def _moment_errors(net, targets, data):
    got = measure_preactivation_stats(net, data)
    worst = 0.0
    for name, (mu_t, sd_t) in targets.items():
        mu, sd = got[name]
        live = sd_t > 1e-3
        scale = np.maximum(np.abs(mu_t), sd_t)
        worst = max(worst, np.max(np.abs(mu - mu_t)[live] / scale[live]), np.max(np.abs(sd - sd_t)[live] / sd_t[live]))
    return worst


@pytest.mark.parametrize("which", ["bn", "plain"])
def test_moment_matching(which, trained, trained_plain, data):
    members = trained if which == "bn" else trained_plain[:2]
    plan = RepairPlan([0.5, 0.5], data)
    targets = collect_weighted_stats(members, plan)
    avg = averaged(members)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fixed = repair(avg, members, plan)
    assert _moment_errors(fixed, targets, data) < 0.05
    # the naive average does suffer variance collapse
    assert _moment_errors(avg, targets, data) > 0.05


def test_repair_is_idempotent_in_moments(trained_plain, data):
    members = trained_plain[:2]
    plan = RepairPlan([0.5, 0.5], data)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        once = repair(averaged(members), members, plan)
        twice = repair(once, members, plan)
    a, b = measure_preactivation_stats(once, data), measure_preactivation_stats(twice, data)
    for name in a:
        live = a[name][1] > 1e-3
        assert np.all(np.abs(a[name][1] - b[name][1])[live] / a[name][1][live] < 0.01)


def test_repair_returns_copy(trained, data):
    avg = averaged(trained)
    snap = avg.params.copy()
    out = repair(avg, trained, RepairPlan([0.5, 0.5], data))
    assert avg.params.tobytes() == snap.tobytes()
    assert out is not avg and not out.observers


def test_repair_architecture_mismatch(trained, data):
    other = build_network([Dense(12, 4)], 0)
    with pytest.raises(ValueError):
        repair(other, trained, RepairPlan([0.5, 0.5], data))
