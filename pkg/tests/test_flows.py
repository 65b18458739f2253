"""Flow fields against potentials, closed forms, and stationary laws."""
import numpy as np
import pytest

from gpm.errors import ConfigurationError, DivergenceError, DomainError
from gpm.flows import (
    FlowSpec, IntegratorSpec, SigmaSchedule, edm_fields, exact_flow_field,
    f_divergence_field, integrate, integrator_nfe, kde_log_density, kde_score,
    langevin_drift, mmd_field, mmd_witness, ncsn_drift, stein_smooth,
)
from gpm.targets import (
    GaussianMixture, ParticleCloud, gmm_sample, gmm_score, make_ring_mixture,
    noised_mixture,
)

RING5 = make_ring_mixture(5, radius=5.0, std=0.5)
SINGLE = GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([0.8]))


def fd_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


# -- mmd -------------------------------------------------------------------

def test_mmd_field_zero_when_clouds_match():
    pts = gmm_sample(RING5, 50, seed=0)
    field = mmd_field(pts, pts, 1.0, pts.positions)
    np.testing.assert_allclose(field, np.zeros_like(pts.positions), atol=1e-14)


def test_mmd_field_empty_cloud_rejected():
    with pytest.raises(ConfigurationError):
        ParticleCloud(np.zeros((0, 2)))  # empty rho is unrepresentable


def test_mmd_field_matches_fd_of_witness():
    rng = np.random.default_rng(4)
    data = ParticleCloud(rng.normal(size=(20, 2)))
    parts = ParticleCloud(rng.normal(size=(15, 2)) + 1.0)
    for _ in range(5):
        x = rng.normal(size=2)
        want = fd_grad(lambda v: mmd_witness(data, parts, 0.7, v), x)
        np.testing.assert_allclose(mmd_field(data, parts, 0.7, x), want, atol=1e-6)


# -- langevin / fixed-sigma ---------------------------------------------------

def test_langevin_drift_is_score():
    x = np.array([0.0, 0.0])
    np.testing.assert_allclose(langevin_drift(SINGLE, x), np.zeros(2))
    x = np.array([1.0, -2.0])
    np.testing.assert_allclose(langevin_drift(RING5, x),
                               noised_mixture(RING5, 0.0) and gmm_score(RING5, x))


def test_ncsn_drift_closed_form_and_continuity():
    x = np.array([0.4, -0.3])
    sigma = 0.9
    want = -x / (0.8**2 + sigma**2)
    np.testing.assert_allclose(ncsn_drift(SINGLE, sigma, x), want, rtol=1e-12)
    tiny = ncsn_drift(RING5, 1e-12, x)
    np.testing.assert_allclose(tiny, langevin_drift(RING5, x), atol=1e-9)


def test_ncsn_drift_matches_fd_of_noised_log_density():
    from gpm.targets import gmm_log_density
    noised = noised_mixture(RING5, 0.7)
    rng = np.random.default_rng(8)
    for _ in range(5):
        x = rng.normal(scale=3.0, size=2)
        want = fd_grad(lambda v: gmm_log_density(noised, v), x, step=1e-5)
        np.testing.assert_allclose(ncsn_drift(RING5, 0.7, x), want, atol=1e-6)


def test_langevin_stationary_moments():
    flow = FlowSpec(kind="forward-kl-langevin", target=SINGLE, end_time=None)
    integ = IntegratorSpec(method="euler-maruyama", steps=20_000, dt=1e-3)
    init = ParticleCloud(np.random.default_rng(0).normal(size=(64, 2)))
    snaps = integrate(flow, init, integ, seed=5)
    # pool the cloud over the tail of the chain for moment estimates
    tail = snaps[-1].positions
    var = tail.var(axis=0).mean()
    assert abs(var - 0.8**2) / 0.8**2 < 0.15
    assert np.all(np.abs(tail.mean(axis=0)) < 0.25)


# -- schedule and edm fields --------------------------------------------------

def test_schedule_endpoints_and_monotonicity():
    sched = SigmaSchedule(sigma_min=0.002, sigma_max=40.0, rho_interp=7.0)
    assert abs(sched.sigma(0.0) - 40.0) < 1e-12
    assert abs(sched.sigma(1.0) - 0.002) < 1e-12
    ts = np.linspace(0, 1, 100)
    sig = sched.sigma(ts)
    assert np.all(np.diff(sig) < 0)
    assert np.all(sched.dsigma_dt(ts) < 0)


def test_schedule_derivative_matches_fd():
    sched = SigmaSchedule(sigma_min=0.1, sigma_max=10.0, rho_interp=3.0)
    for t in [0.0, 0.3, 0.9, 1.0]:
        fd = (sched.sigma(min(t + 1e-6, 1.0)) - sched.sigma(max(t - 1e-6, 0.0))) / (
            min(t + 1e-6, 1.0) - max(t - 1e-6, 0.0))
        assert abs(sched.dsigma_dt(t) - fd) < 1e-4 * abs(fd)


def test_edm_fields_single_gaussian_and_ratio():
    sched = SigmaSchedule(sigma_min=0.01, sigma_max=5.0, rho_interp=7.0)
    x = np.array([1.0, 2.0])
    t = 0.4
    f = edm_fields(SINGLE, sched, t, x)
    sig = float(sched.sigma(t))
    dsig = float(sched.dsigma_dt(t))
    want = -dsig * sig * (-x / (0.8**2 + sig**2))
    np.testing.assert_allclose(f["ode_drift"], want, rtol=1e-12)
    np.testing.assert_allclose(f["sde_drift"], 2 * f["ode_drift"], rtol=1e-12)
    assert f["sde_diffusion"] == pytest.approx(np.sqrt(2 * abs(dsig * sig)))
    with pytest.raises(DomainError):
        edm_fields(SINGLE, sched, 1.5, x)


def test_edm_ode_closed_form_contraction():
    s = 0.8
    sched = SigmaSchedule(sigma_min=0.002, sigma_max=40.0, rho_interp=7.0)
    flow = FlowSpec(kind="edm-ode", target=SINGLE, schedule=sched)
    integ = IntegratorSpec(method="heun", steps=128, grid="edm-power")
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(32, 2)) * np.sqrt(s**2 + 40.0**2)
    snaps = integrate(flow, ParticleCloud(x0), integ, seed=0)
    factor = np.sqrt((s**2 + 0.002**2) / (s**2 + 40.0**2))
    np.testing.assert_allclose(snaps[-1].positions, x0 * factor, rtol=1e-3)


def test_heun_observed_order_at_least_1p9():
    s = 0.8
    sched = SigmaSchedule(sigma_min=0.002, sigma_max=40.0, rho_interp=7.0)
    flow = FlowSpec(kind="edm-ode", target=SINGLE, schedule=sched)
    x0 = np.array([[3.0, -2.0]])
    exact = x0 * np.sqrt((s**2 + 0.002**2) / (s**2 + 40.0**2))
    errs = []
    ns = [8, 16, 32, 64, 128]
    for n in ns:
        integ = IntegratorSpec(method="heun", steps=n, grid="edm-power")
        snaps = integrate(flow, ParticleCloud(x0), integ, seed=0)
        errs.append(np.abs(snaps[-1].positions - exact).max())
    orders = [np.log2(errs[i] / errs[i + 1]) for i in range(len(ns) - 1)]
    assert min(orders) >= 1.9


def test_heun_contraction_at_few_and_many_steps():
    # 13 NFEs (7 heun steps) is coarse on a lone Gaussian: the contraction
    # factor lands within ~30%; at 49 NFEs the covariance is within 5%.
    s = 0.8
    sched = SigmaSchedule(sigma_min=0.002, sigma_max=40.0, rho_interp=7.0)
    flow = FlowSpec(kind="edm-ode", target=SINGLE, schedule=sched)
    rng = np.random.default_rng(1)
    x0 = rng.standard_normal((20_000, 2)) * np.sqrt(s**2 + 40.0**2)
    factor = np.sqrt((s**2 + 0.002**2) / (s**2 + 40.0**2))
    coarse = integrate(flow, ParticleCloud(x0),
                       IntegratorSpec(method="heun", steps=7, grid="edm-power"),
                       seed=0)[-1].positions
    assert np.abs(coarse / (x0 * factor) - 1.0).max() < 0.3
    fine = integrate(flow, ParticleCloud(x0),
                     IntegratorSpec(method="heun", steps=25, grid="edm-power"),
                     seed=0)[-1].positions
    cov = np.cov(fine, rowvar=False)
    assert np.abs(np.diag(cov) / s**2 - 1.0).max() < 0.05


def test_zero_rate_schedule_fields_vanish():
    class FlatSchedule:
        end_time = 1.0

        def sigma(self, t):
            return 2.0

        def dsigma_dt(self, t):
            return 0.0

    f = edm_fields(SINGLE, FlatSchedule(), 0.5, np.array([1.0, 1.0]))
    np.testing.assert_allclose(f["ode_drift"], np.zeros(2))
    np.testing.assert_allclose(f["sde_drift"], np.zeros(2))
    assert f["sde_diffusion"] == 0.0


# -- exact flows and kde -----------------------------------------------------

def test_exact_ncsn_zero_at_fixed_point():
    sigma = 0.6
    noised = noised_mixture(RING5, sigma)
    rho = lambda pts: gmm_score(noised, pts)
    x = np.array([2.0, 1.0])
    out = exact_flow_field(RING5, rho, "ncsn", sigma, 0.0, x)
    np.testing.assert_allclose(out, np.zeros(2), atol=1e-14)


def test_exact_edm_reduces_to_ode_drift_at_fixed_point():
    sched = SigmaSchedule(sigma_min=0.01, sigma_max=5.0, rho_interp=7.0)
    t = 0.3
    sig = float(sched.sigma(t))
    noised = noised_mixture(RING5, sig)
    rho = lambda pts: gmm_score(noised, pts)
    x = np.array([0.5, -1.0])
    out = exact_flow_field(RING5, rho, "edm", sched, t, x)
    want = edm_fields(RING5, sched, t, x)["ode_drift"]
    np.testing.assert_allclose(out, want, rtol=1e-12)


def test_kde_score_single_particle():
    cloud = ParticleCloud(np.array([[1.0, 2.0]]))
    x = np.array([0.0, 0.0])
    np.testing.assert_allclose(kde_score(cloud, 0.5, x),
                               -(x - cloud.positions[0]) / 0.25, rtol=1e-12)


def test_kde_score_near_zero_at_center_of_standard_normal_cloud():
    cloud = ParticleCloud(np.random.default_rng(0).standard_normal((100_000, 2)))
    val = kde_score(cloud, 0.2, np.zeros(2))
    assert np.linalg.norm(val) < 0.05


def test_kde_score_matches_fd_of_kde_log_density():
    cloud = ParticleCloud(np.random.default_rng(1).normal(size=(50, 2)))
    x = np.array([0.3, -0.2])
    want = fd_grad(lambda v: kde_log_density(cloud, 0.4, v), x, step=1e-5)
    np.testing.assert_allclose(kde_score(cloud, 0.4, x), want, atol=1e-6)


def test_exact_ncsn_self_consistency_with_kde():
    sigma = 0.5
    noised = noised_mixture(RING5, sigma)
    cloud = gmm_sample(noised, 10_000, seed=2)
    bw = 0.25
    rho = lambda pts: kde_score(cloud, bw, pts)
    grid = gmm_sample(noised, 64, seed=3).positions
    field = exact_flow_field(RING5, rho, "ncsn", sigma, 0.0, grid)
    # KDE error budget: the residual field should be small on-distribution
    assert np.median(np.linalg.norm(field, axis=1)) < 0.35


# -- f-divergence ------------------------------------------------------------

def test_forward_kl_field_zero_when_rho_is_target():
    dens = lambda pts: np.exp(
        np.atleast_1d(np.asarray([__import__("gpm.targets", fromlist=["gmm_log_density"])
                                  .gmm_log_density(RING5, p) for p in np.atleast_2d(pts)])))
    # KL preset with rho == p: h is constant, so the FD field vanishes
    x = np.array([1.0, 1.0])
    out = f_divergence_field(RING5, dens, lambda u: np.log(u) + 1.0, x)
    np.testing.assert_allclose(out, np.zeros(2), atol=1e-6)


def test_kl_field_equals_score_difference():
    cloud = gmm_sample(RING5, 400, seed=5)
    bw = 0.5
    dens = lambda pts: np.exp(kde_log_density(cloud, bw, pts))
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = rng.normal(scale=2.0, size=2) + RING5.means[0]
        via_fd = f_divergence_field(RING5, dens, lambda u: np.log(u) + 1.0, x)
        exact = gmm_score(RING5, x) - kde_score(cloud, bw, x)
        np.testing.assert_allclose(via_fd, exact, atol=1e-5)


def test_chi2_field_small_on_matched_gaussians():
    gm = GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([1.0]))
    cloud = gmm_sample(gm, 20_000, seed=9)
    bw = 0.2
    dens = lambda pts: np.exp(kde_log_density(cloud, bw, pts))
    grid = gmm_sample(gm, 32, seed=10).positions
    field = f_divergence_field(gm, dens, lambda u: 2.0 * (u - 1.0), grid)
    assert np.median(np.linalg.norm(field, axis=1)) < 0.5


def test_f_divergence_domain_error_far_out():
    cloud = ParticleCloud(np.zeros((4, 2)))
    dens = lambda pts: np.exp(kde_log_density(cloud, 0.1, pts))
    with pytest.raises(DomainError):
        f_divergence_field(RING5, dens, lambda u: u, np.array([500.0, 500.0]))


# -- stein smoothing ----------------------------------------------------------

def test_stein_wide_kernel_averages_field():
    parts = ParticleCloud(np.random.default_rng(3).normal(size=(30, 2)))
    base = lambda pts: pts  # identity field
    out = stein_smooth(base, parts, kernel_sigma=1e6, x_index=4)
    np.testing.assert_allclose(out, parts.positions.mean(axis=0), rtol=1e-6)


def test_stein_single_particle_identity():
    parts = ParticleCloud(np.array([[2.0, -1.0]]))
    base = lambda pts: 3.0 * pts
    out = stein_smooth(base, parts, kernel_sigma=0.5, x_index=0)
    np.testing.assert_allclose(out, 3.0 * parts.positions[0])


def test_stein_antisymmetric_pair():
    p = np.array([[1.0, 0.0], [-1.0, 0.0]])
    parts = ParticleCloud(p)
    base = lambda pts: pts            # antisymmetric about the origin
    out0 = stein_smooth(base, parts, 0.8, 0)
    out1 = stein_smooth(base, parts, 0.8, 1)
    # brute-force two-particle sum
    k01 = np.exp(-0.5 * 4.0 / 0.8**2)
    want0 = (1.0 * p[0] + k01 * p[1]) / 2.0
    np.testing.assert_allclose(out0, want0, rtol=1e-12)
    np.testing.assert_allclose(out0, -out1, rtol=1e-12)


# -- integrate plumbing --------------------------------------------------------

def test_integrate_zero_field_returns_init():
    gm = GaussianMixture(np.array([1.0]), np.zeros((1, 2)), np.array([1.0]))
    # at rho == p the kl field vanishes identically: emulate with a cloud at
    # the analytic target using the exact-ncsn fixed point via huge kde n is
    # costly, so instead use a zero-velocity construction: mmd with data ==
    # particles stays put.
    init = gmm_sample(gm, 20, seed=0)
    flow = FlowSpec(kind="mmd", target=gm, end_time=1.0, kernel_sigma=1.0,
                    data_n=20)
    # data sample uses the same seed as integrate, so clouds coincide
    integ = IntegratorSpec(method="euler", steps=5)
    snaps = integrate(flow, gmm_sample(gm, 20, seed=7), integ, seed=7,
                      snapshot_every=1)
    first = snaps[0].positions
    np.testing.assert_allclose(snaps[-1].positions, first, atol=1e-12)


def test_integrate_linear_field_closed_form():
    # dx = -x dt via the kl preset on matched single Gaussians reduces to
    # gmm_score for a tiny kde... instead check the exposed euler path on
    # the analytic schedule flow (already covered) plus explicit order-1
    # contraction through langevin drift at zero temperature is not exposed;
    # use edm-ode euler at many steps:
    s = 1.0
    sched = SigmaSchedule(sigma_min=0.01, sigma_max=3.0, rho_interp=1.0)
    flow = FlowSpec(kind="edm-ode", target=GaussianMixture(
        np.array([1.0]), np.zeros((1, 2)), np.array([s])), schedule=sched)
    integ = IntegratorSpec(method="euler", steps=10_000)
    x0 = np.array([[2.0, 1.0]])
    snaps = integrate(flow, ParticleCloud(x0), integ, seed=0)
    want = x0 * np.sqrt((s**2 + 0.01**2) / (s**2 + 3.0**2))
    np.testing.assert_allclose(snaps[-1].positions, want, rtol=1e-3)


def test_integrate_rejects_mismatched_method():
    flow = FlowSpec(kind="edm-ode", target=SINGLE, schedule=SigmaSchedule())
    with pytest.raises(ConfigurationError):
        integrate(flow, ParticleCloud(np.zeros((2, 2))),
                  IntegratorSpec(method="euler-maruyama", steps=3), seed=0)
    sflow = FlowSpec(kind="forward-kl-langevin", target=SINGLE, end_time=1.0)
    with pytest.raises(ConfigurationError):
        integrate(sflow, ParticleCloud(np.zeros((2, 2))),
                  IntegratorSpec(method="heun", steps=3), seed=0)


def test_integrate_bitwise_reproducible():
    flow = FlowSpec(kind="forward-kl-langevin", target=RING5, end_time=None)
    integ = IntegratorSpec(method="euler-maruyama", steps=50, dt=1e-2)
    init = gmm_sample(RING5, 16, seed=0)
    a = integrate(flow, init, integ, seed=11)
    b = integrate(flow, init, integ, seed=11)
    np.testing.assert_array_equal(a[-1].positions, b[-1].positions)


def test_integrate_nfe_counting():
    assert integrator_nfe(
        FlowSpec(kind="edm-ode", target=SINGLE, schedule=SigmaSchedule()),
        IntegratorSpec(method="heun", steps=7)) == 13
    assert integrator_nfe(
        FlowSpec(kind="edm-ode", target=SINGLE, schedule=SigmaSchedule()),
        IntegratorSpec(method="euler", steps=13)) == 13


def test_infinite_horizon_needs_dt():
    flow = FlowSpec(kind="forward-kl-langevin", target=SINGLE, end_time=None)
    with pytest.raises(ConfigurationError):
        integrate(flow, ParticleCloud(np.zeros((2, 2))),
                  IntegratorSpec(method="euler-maruyama", steps=5), seed=0)


def test_divergence_reports_step_index():
    # blow the system up with an enormous kernel force
    sched = SigmaSchedule(sigma_min=0.002, sigma_max=40.0, rho_interp=7.0)
    flow = FlowSpec(kind="edm-ode", target=SINGLE, schedule=sched)
    x0 = np.full((1, 2), 1e300)
    with pytest.raises(DivergenceError) as err:
        integrate(flow, ParticleCloud(x0), IntegratorSpec(method="euler", steps=4),
                  seed=0)
    assert err.value.step >= 0
