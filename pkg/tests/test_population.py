import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from papa.nn import BatchNorm, Dense, ReLU, build_network
from papa.population import (
    PapaConfig,
    Population,
    StepCounters,
    average_replace,
    effective_alpha,
    mutate,
    papa_pull,
    population_mean,
    should_average,
)

SPEC = [Dense(4, 3), ReLU(), BatchNorm(3), Dense(3, 2)]


def make_pop(p, seed=0, spec=SPEC):
    members = [build_network(spec, seed * 100 + j, dtype=np.float64) for j in range(p)]
    rng = np.random.default_rng(seed)
    for m in members:
        m.params[...] = rng.normal(size=m.n_params)
    return Population(members)


def spread(pop):
    mean = population_mean(pop)
    return sum(float(np.sum((m.params - mean) ** 2)) for m in pop.members)


def test_population_requires_matching_members():
    with pytest.raises(ValueError):
        Population([])
    with pytest.raises(ValueError):
        Population([build_network(SPEC, 0), build_network([Dense(4, 2)], 0)])


def test_mean_examples():
    a = build_network([Dense(1, 1)], 0)
    b = a.copy()
    a.params[...] = 0
    b.params[...] = 2
    assert np.all(population_mean(Population([a, b])) == 1)
    pop = Population([a.copy(), a.copy(), a.copy()])
    assert np.array_equal(population_mean(pop), a.params)


def test_mean_matches_scalar_loop():
    pop = make_pop(3)
    mean = population_mean(pop)
    for i in range(pop.members[0].n_params):
        acc = 0.0
        for m in pop.members:
            acc += float(m.params[i])
        assert abs(mean[i] - acc / 3) < 1e-7


def test_effective_alpha_examples():
    assert effective_alpha(0.99, 0.1, 0.1) == pytest.approx(0.99)
    assert effective_alpha(0.99, 0.05, 0.1) == pytest.approx(0.995)
    assert effective_alpha(0.99, 0.05, 0.1, lr_scaling=False) == 0.99
    with pytest.raises(ValueError):
        effective_alpha(0.99, 0.1, 0.0)


def test_pull_scalar_example():
    a = build_network([Dense(1, 1)], 0, dtype=np.float64)
    b = a.copy()
    a.params[...] = 1.0
    b.params[...] = -1.0
    pop = Population([a, b])
    assert papa_pull(pop, 0.99, 0.1, 0.1) == pytest.approx(0.99)
    assert a.params[0] == pytest.approx(0.99)
    a.params[...] = 1.0
    b.params[...] = -1.0
    papa_pull(pop, 0.99, 0.05, 0.1)
    assert a.params[0] == pytest.approx(0.995)


def test_pull_extremes():
    pop = make_pop(4)
    before = pop.vectors().copy()
    papa_pull(pop, 1.0, 0.1, 0.1)
    assert np.array_equal(pop.vectors(), before)
    mean = population_mean(pop)
    papa_pull(pop, 0.0, 0.1, 0.1)
    for m in pop.members:
        assert np.allclose(m.params, mean, atol=1e-15)


def test_amortized_ema_arithmetic():
    assert 0.0195 <= 0.999 ** (781 * 5) <= 0.0205


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.floats(0.0, 0.999), st.floats(0.01, 1.0), st.integers(0, 10**5))
def test_pull_preserves_mean_and_contracts(p, alpha, ratio, seed):
    pop = make_pop(p, seed)
    mean0 = population_mean(pop)
    s0 = spread(pop)
    a = papa_pull(pop, alpha, 0.1 * ratio, 0.1)
    assert np.max(np.abs(population_mean(pop) - mean0)) < 1e-6
    assert spread(pop) == pytest.approx(a * a * s0, rel=1e-5)


def test_average_replace_all_and_pair():
    pop = make_pop(5)
    mean = population_mean(pop)
    draws = average_replace(pop, 5, np.random.default_rng(0))
    assert all(d == (0, 1, 2, 3, 4) for d in draws)
    for m in pop.members:
        assert m.params.tobytes() == pop.members[0].params.tobytes()
    assert np.array_equal(population_mean(pop), mean.astype(pop.members[0].dtype))
    pop = make_pop(2)
    mid = population_mean(pop)
    average_replace(pop, 2, np.random.default_rng(0))
    assert np.allclose(pop.members[0].params, mid) and np.allclose(pop.members[1].params, mid)
    with pytest.raises(ValueError):
        average_replace(pop, 3, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.data())
def test_average_replace_replays_draws(p, data):
    m = data.draw(st.integers(1, p))
    seed = data.draw(st.integers(0, 10**6))
    pop = make_pop(p, seed % 1000)
    old = [mem.params.copy() for mem in pop.members]
    draws = average_replace(pop, m, np.random.default_rng(seed))
    lo, hi = np.min(old, axis=0), np.max(old, axis=0)
    for slot, idx in enumerate(draws):
        assert len(set(idx)) == m
        expected = np.mean([old[i] for i in idx], axis=0)
        assert np.allclose(pop.members[slot].params, expected, atol=1e-12)
        assert np.all(pop.members[slot].params >= lo - 1e-12)
        assert np.all(pop.members[slot].params <= hi + 1e-12)


def test_variant_reduction_single_event():
    a, b = make_pop(4, 3), make_pop(4, 3)
    papa_pull(a, 0.0, 0.1, 0.1, lr_scaling=False)
    average_replace(b, 4, np.random.default_rng(9))
    for x, y in zip(a.members, b.members):
        assert np.max(np.abs(x.params - y.params)) < 1e-12


def test_mutate():
    rng = np.random.default_rng(0)
    p = np.zeros(100_000)
    out = mutate(p, 2, rng)
    assert abs(out.std() - 0.005) < 0.005 * 0.05
    assert np.array_equal(mutate(p, 2, np.random.default_rng(4)), mutate(p, 2, np.random.default_rng(4)))
    assert np.max(np.abs(mutate(np.ones(50), 10**9, rng) - 1)) < 1e-6
    with pytest.raises(ValueError):
        mutate(p, 0, rng)


def test_mutate_skips_running_stats():
    net = build_network(SPEC, 0)
    out = mutate(net.params, 1, np.random.default_rng(0), mask=net.trainable_mask)
    assert np.array_equal(out[~net.trainable_mask], net.params[~net.trainable_mask])
    assert np.all(out[net.trainable_mask] != net.params[net.trainable_mask])


def test_should_average_examples():
    papa = PapaConfig("papa", freq=10)
    assert should_average(StepCounters(10, 1), papa)
    assert not should_average(StepCounters(9, 1), papa)
    assert not should_average(StepCounters(0, 1), papa)
    allc = PapaConfig("papa_all", freq=5)
    assert not should_average(StepCounters(100, 4, True), allc)
    assert should_average(StepCounters(100, 5, True), allc)
    assert not should_average(StepCounters(100, 5, False), allc)
    windowed = PapaConfig("papa_all", freq=5, window=(0, 150))
    assert not should_average(StepCounters(1, 200, True), windowed)
    assert should_average(StepCounters(1, 150, True), windowed)
    assert not should_average(StepCounters(10, 10, True), PapaConfig("baseline"))


def test_papa_config_validation():
    for kw in ({"variant": "x"}, {"alpha": 1.5}, {"freq": 0}, {"repair_k": -1}, {"window": (5, 2)}):
        with pytest.raises(ValueError):
            PapaConfig(**kw)
