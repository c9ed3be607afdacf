import math

import numpy as np
import pytest
from scipy import integrate, stats

from geoq import diffusion, markov
from geoq.diffusion import Variant, build_density
from geoq.model import ArrivalModel, ConfigError, QueueParams, diffusion_a, drift_b

N18 = QueueParams.from_utilization(18, 0.90, 1 / 5.3)
CASES = [
    N18,
    QueueParams.from_utilization(66, 0.92, 1 / 5.3),
    QueueParams.from_load(18, 16.2, 0.5),
    QueueParams.from_load(504, 482.06, 1 / 5.3),
    QueueParams.from_load(977, 964.0, 90.9434 / 964.0),
]


def quad_oracle(params, h, variant=Variant.STATE_DEPENDENT):
    """E h(Y) by nested adaptive quadrature split at the kinks."""
    mu, zeta, delta = params.service_prob, params.zeta, params.delta
    if variant is Variant.CONSTANT_COEFF:
        def a(x):
            return 2.0 * mu
    else:
        def a(x):
            return diffusion_a(x, params)

    kinks = sorted({-1.0 / delta, 0.0, -zeta})

    def exponent(x):
        pts = [k for k in kinks if min(0.0, x) < k < max(0.0, x)]
        edges = [0.0] + (pts if x > 0 else pts[::-1]) + [x]
        return sum(integrate.quad(lambda y: 2 * drift_b(y, params) / a(y), s, t, epsabs=1e-13, epsrel=1e-13)[0]
                   for s, t in zip(edges[:-1], edges[1:]))

    def dens(x):
        return math.exp(exponent(x)) / a(x)

    edges = [-np.inf] + kinks + [np.inf]

    def integral(f):
        return sum(integrate.quad(f, s, t, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
                   for s, t in zip(edges[:-1], edges[1:]))

    mass = integral(dens)
    return integral(lambda x: dens(x) * h(x)) / mass


@pytest.mark.parametrize("params", CASES[:3])
@pytest.mark.parametrize("variant", list(Variant))
def test_expectations_match_adaptive_quadrature(params, variant):
    dens = build_density(params, variant=variant)
    zeta = params.zeta
    for h in (lambda x: max(x + zeta, 0.0), lambda x: max(x, 0.0), lambda x: x * x):
        want = quad_oracle(params, h, variant)
        got = dens.expect(np.vectorize(h))
        assert got == pytest.approx(want, rel=1e-8, abs=1e-10)


@pytest.mark.parametrize("params", CASES)
@pytest.mark.parametrize("variant", list(Variant))
def test_density_invariants(params, variant):
    dens = build_density(params, variant=variant)
    assert dens.total_mass() == pytest.approx(1.0, abs=1e-9)
    assert np.all(dens.pdf(dens.grid) > 0)
    assert np.all(np.diff(dens.cdf_grid) >= 0)
    assert dens.cdf_grid[-1] == pytest.approx(1.0, abs=1e-9)
    assert dens.cdf_grid[0] == 0.0
    assert np.all(np.diff(dens.grid) > 0)


@pytest.mark.parametrize("params", CASES)
def test_tails_are_cut_forty_nats_down(params):
    dens = build_density(params)
    peak = dens.logpdf(dens.nodes()[0]).max()
    assert dens.logpdf(dens.grid[0]) < peak - diffusion.TAIL_NATS
    assert dens.logpdf(dens.grid[-1]) < peak - diffusion.TAIL_NATS


def test_constant_coefficient_gaussian_piece():
    dens = build_density(N18, variant=Variant.CONSTANT_COEFF)
    x1, x2 = -2.3, 0.2  # both left of -zeta = 0.447
    ratio = dens.pdf(x1) / dens.pdf(x2)
    assert ratio == pytest.approx(math.exp((x2**2 - x1**2) / 2), rel=1e-12)


def test_constant_coefficient_exponential_piece():
    dens = build_density(N18, variant=Variant.CONSTANT_COEFF)
    xs = -N18.zeta + np.array([0.5, 1.7, 4.0, 9.0])
    slopes = np.diff(dens.logpdf(xs)) / np.diff(xs)
    np.testing.assert_allclose(slopes, N18.zeta, rtol=1e-10)


def test_state_dependent_closed_form_pieces():
    p = QueueParams.from_load(18, 16.2, 0.5)
    dens = build_density(p)
    mu, lam = p.service_prob, p.arrival_rate
    # below -sqrt(R): a = mu(1 + Lambda), 2b/a = -2x/(1 + Lambda)
    x1, x2 = -6.0, -4.5
    assert x2 < -1 / p.delta
    assert dens.logpdf(x1) - dens.logpdf(x2) == pytest.approx(-(x1**2 - x2**2) / (1 + lam), rel=1e-10)
    # right of -zeta: log-linear with slope 2 mu zeta / a(-zeta)
    xs = -p.zeta + np.array([0.3, 2.0, 5.0])
    slopes = np.diff(dens.logpdf(xs)) / np.diff(xs)
    np.testing.assert_allclose(slopes, 2 * mu * p.zeta / diffusion_a(-p.zeta, p), rtol=1e-10)


@pytest.mark.parametrize("params", [N18, QueueParams.from_load(18, 16.2, 0.5)])
def test_continuity_at_breakpoints(params):
    dens = build_density(params)
    mu, delta, zeta, lam = params.service_prob, params.delta, params.zeta, params.arrival_rate

    def quadratic(x):
        return mu * (2 - mu + delta * (1 - mu) * x + mu * x * x)

    # one-sided limits: the outer constants against the middle quadratic
    assert mu * (1 + lam) == pytest.approx(quadratic(-1 / delta), abs=1e-10)
    assert dens.a(-zeta + 1.0) == pytest.approx(quadratic(-zeta), abs=1e-10)
    for kink in (-1 / delta, -zeta):
        eps = 1e-10
        left, right = dens.log_unnormalized(kink - eps), dens.log_unnormalized(kink + eps)
        assert left == pytest.approx(right, abs=1e-8)
        assert dens.pdf(kink - eps) == pytest.approx(dens.pdf(kink + eps), rel=1e-8)


def test_refining_the_grid_does_not_move_metrics():
    for p in CASES[:4]:
        a = diffusion.approx_metrics(build_density(p, spacing=0.05), p)
        b = diffusion.approx_metrics(build_density(p, spacing=0.025), p)
        for k, v in a.as_dict().items():
            assert getattr(b, k) == pytest.approx(v, abs=1e-6)


def test_general_arrivals_with_poisson_dispersion_match_poisson():
    lam = N18.arrival_rate
    pmf = stats.poisson(lam).pmf(np.arange(80))
    pmf /= pmf.sum()
    arr = ArrivalModel.general(pmf)
    p = QueueParams(18, arr.rate, N18.service_prob)
    assert arr.c_a == pytest.approx(2.0, abs=1e-13)
    a, b = build_density(p, arr), build_density(p)
    xs = np.linspace(-3, 6, 37)
    np.testing.assert_allclose(a.pdf(xs), b.pdf(xs), rtol=1e-10)


def test_underdispersed_arrivals_rejected_below_one():
    arr = ArrivalModel.general([0.0, 1.0])  # deterministic: c_A = 1
    with pytest.raises(ConfigError):
        build_density(QueueParams(4, 1.0, 0.5), arr)


def test_constant_coefficient_is_independent_of_mu():
    m = [diffusion.approx_metrics(build_density(QueueParams.from_load(18, 16.2, mu), variant=Variant.CONSTANT_COEFF))
         for mu in (1 / 2, 1 / 10)]
    s = [diffusion.approx_metrics(build_density(QueueParams.from_load(18, 16.2, mu))) for mu in (1 / 2, 1 / 10)]
    assert m[0].queue_len == pytest.approx(m[1].queue_len, rel=1e-10)
    assert m[0].idle_prob == pytest.approx(m[1].idle_prob, rel=1e-10)
    assert abs(s[0].queue_len - s[1].queue_len) > 0.05


@pytest.mark.parametrize(
    "params, variant, value",
    [
        (QueueParams.from_load(504, 482.06, 1 / 5.3), Variant.STATE_DEPENDENT, 4.78),
        (N18, Variant.CONSTANT_COEFF, 4.91),
        (QueueParams.from_utilization(66, 0.92, 1 / 5.3), Variant.STATE_DEPENDENT, 4.19),
    ],
)
def test_published_approximations(params, variant, value):
    m = diffusion.approx_metrics(build_density(params, variant=variant), params)
    assert m.queue_len == pytest.approx(value, abs=0.005)


def test_busy_servers_mean_is_r_for_exact_and_approximation():
    # E(X ^ N) = R holds for the chain; the approximation matches it only
    # through the drift balance, to quadrature accuracy
    for p in CASES[:3]:
        m = diffusion.approx_metrics(build_density(p), p)
        assert m.busy == pytest.approx(p.offered_load, rel=1e-8)


def test_wasserstein_against_scipy():
    pmf = markov.solve(N18)
    dens = build_density(N18)
    got = diffusion.wasserstein(pmf, dens, N18)
    fine = np.linspace(dens.grid[0], dens.grid[-1], 400_001)
    w = dens.pdf(fine)
    want = stats.wasserstein_distance(N18.scaled(pmf.states), fine, pmf.probs, w)
    assert got == pytest.approx(want, rel=1e-4)


def test_wasserstein_dominates_lipschitz_errors():
    for p in CASES[:3]:
        pmf = markov.solve(p)
        for v in Variant:
            rep = diffusion.distance_report(pmf, build_density(p, variant=v), p)
            for name in ("queue_len", "adj_queue_len", "busy"):
                assert rep.wasserstein >= rep.scaled[name] - 1e-6


def test_distance_report_errors_by_hand():
    pmf = markov.solve(N18)
    dens = build_density(N18)
    rep = diffusion.distance_report(pmf, dens, N18, with_wasserstein=False)
    e, a = rep.exact.queue_len, rep.approx.queue_len
    assert rep.scaled["queue_len"] == pytest.approx(abs(e - a) / math.sqrt(16.2))
    assert rep.relative["queue_len"] == pytest.approx(abs(e - a) / e)
    assert rep.scaled["idle_prob"] == pytest.approx(abs(rep.exact.idle_prob - rep.approx.idle_prob))
    assert rep.wasserstein is None


def test_write_csv(tmp_path):
    dens = build_density(N18)
    path = tmp_path / "d.csv"
    dens.write_csv(path)
    data = np.genfromtxt(path, delimiter=",", names=True)
    np.testing.assert_allclose(data["x"], dens.grid)
    assert data["cdf"][-1] == pytest.approx(1.0)
