import numpy as np
import pytest
from scipy import stats

from geoq import markov, sim
from geoq.model import ArrivalModel, ConfigError, QueueParams


def test_config_validation():
    with pytest.raises(ConfigError):
        sim.SimConfig(sample_epochs=10)
    with pytest.raises(ConfigError):
        sim.SimConfig(replications=1)
    with pytest.raises(ConfigError):
        sim.SimConfig(warmup_epochs=-1)
    assert sim.SimConfig().warmup(QueueParams(6, 1.0, 0.2)) == 250


def test_departure_table_is_binomial_cdf():
    cdf = sim._departure_table(6, 0.3)
    for z in range(7):
        want = stats.binom.cdf(np.arange(cdf.shape[1]), z, 0.3)
        np.testing.assert_allclose(cdf[z, :-1], want[:-1], atol=1e-15)
        assert cdf[z, -1] == 1.0


def test_same_seed_same_histogram(small_params):
    cfg = sim.SimConfig(sample_epochs=5000, replications=3, seed=7)
    a = sim.simulate_census(small_params, cfg=cfg)
    b = sim.simulate_census(small_params, cfg=cfg)
    np.testing.assert_array_equal(a.probs, b.probs)
    assert a.metrics == b.metrics


def test_different_seeds_differ(small_params):
    a = sim.simulate_census(small_params, cfg=sim.SimConfig(5000, 3, seed=1))
    b = sim.simulate_census(small_params, cfg=sim.SimConfig(5000, 3, seed=2))
    assert not np.array_equal(a.probs, b.probs)


def test_ample_servers_histogram_is_poisson():
    p = QueueParams.from_load(200, 12.0, 0.4)
    res = sim.simulate_census(p, cfg=sim.SimConfig(100_000, 4, seed=3))
    want = stats.poisson(12.0).pmf(res.states)
    assert sim.total_variation(res.probs, want) < 0.01
    assert not res.overflow


def test_estimates_cover_the_exact_values(small_params):
    res = sim.simulate_census(small_params, cfg=sim.SimConfig(100_000, 10, seed=0))
    exact = markov.exact_metrics(markov.solve(small_params), small_params)
    for name, hw in res.half_width.items():
        assert abs(getattr(res.metrics, name) - getattr(exact, name)) <= 2 * hw, name
    assert abs(res.departure_rate - small_params.arrival_rate) <= 2 * res.departure_half_width


def test_general_arrivals(small_params):
    arr = ArrivalModel.general([0.6, 0, 0, 0, 0, 0, 0.4])
    p = QueueParams(18, arr.rate, 1 / 5.3)
    res = sim.simulate_census(p, arr, sim.SimConfig(50_000, 4, seed=5))
    assert res.departure_rate == pytest.approx(arr.rate, rel=0.02)


def test_total_variation_pads():
    assert sim.total_variation(np.array([1.0]), np.array([0.5, 0.5])) == pytest.approx(0.5)


def test_histogram_csv(tmp_path, small_params):
    res = sim.simulate_census(small_params, cfg=sim.SimConfig(2000, 2, seed=0))
    path = tmp_path / "h.csv"
    sim.write_histogram_csv(res, path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    assert list(data.dtype.names) == ["state", "probability", "half_width"]
    assert data["probability"].sum() == pytest.approx(1.0)
