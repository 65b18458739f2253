"""Generator-free particle flows: vector fields, schedules, integrators.

Fields come in two families. Objective-derived fields (squared MMD,
forward KL, entropy, f-divergences) depend on the current particle cloud;
diffusion-style fields (Langevin, fixed-sigma annealed score, and the
variance-inflating noising schedule with its deterministic counterpart)
only query the analytic target. "Exact" variants correct the
deterministic flow with an estimate of the current cloud's score.

Time runs in the generation direction: sigma schedules decrease, so
sigma'(t) < 0 and all drifts point toward the data. On a single Gaussian
N(0, s^2 I) the deterministic schedule flow has the closed form
x(t) = x(0) * sqrt((s^2 + sigma(t)^2) / (s^2 + sigma(0)^2)).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gpm.errors import ConfigurationError, DivergenceError, DomainError
from gpm.targets import (GaussianMixture, ParticleCloud, gmm_log_density,
                         gmm_sample, gmm_score, noised_mixture)

STOCHASTIC_KINDS = ("forward-kl-langevin", "ncsn", "edm-sde")
DETERMINISTIC_KINDS = ("mmd", "entropy", "f-divergence", "edm-ode",
                       "exact-ncsn", "exact-edm", "stein")
FLOW_KINDS = STOCHASTIC_KINDS + DETERMINISTIC_KINDS

F_PRIME_PRESETS = {
    # f(u) = u log u  ->  f'(u) = log u + 1
    "kl": lambda u: np.log(u) + 1.0,
    # f(u) = (u - 1)^2 -> f'(u) = 2 (u - 1)
    "chi2": lambda u: 2.0 * (u - 1.0),
}


def power_interp(alpha, sigma_min, sigma_max, rho):
    """Power interpolation between noise levels: alpha=0 -> max, 1 -> min."""
    r = 1.0 / rho
    base = sigma_max**r + np.asarray(alpha, dtype=np.float64) * (sigma_min**r - sigma_max**r)
    return base**rho


@dataclass(frozen=True)
class SigmaSchedule:
    """Noise level decreasing affinely from sigma_max at t=0 to sigma_min at t=T.

    rho_interp parameterizes the power-spaced solver ladder (the edm-power
    grid places times so sigma passes through that ladder); since sigma is
    affine in t, Runge-Kutta steps on that grid coincide with stepping in
    sigma itself.
    """

    sigma_min: float = 0.002
    sigma_max: float = 40.0
    rho_interp: float = 7.0
    end_time: float = 1.0

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ConfigurationError("need 0 < sigma_min < sigma_max")
        if self.rho_interp <= 0 or self.end_time <= 0:
            raise ConfigurationError("rho_interp and end_time must be positive")

    def sigma(self, t):
        u = np.asarray(t, dtype=np.float64) / self.end_time
        return self.sigma_max + u * (self.sigma_min - self.sigma_max)

    def dsigma_dt(self, t):
        slope = (self.sigma_min - self.sigma_max) / self.end_time
        return np.full_like(np.asarray(t, dtype=np.float64), slope) if np.ndim(t) else slope

    def inverse(self, sigma):
        """Time at which the schedule passes the given level."""
        u = (sigma - self.sigma_max) / (self.sigma_min - self.sigma_max)
        return float(u) * self.end_time

    def ladder(self, n_steps: int) -> np.ndarray:
        """n_steps+1 power-spaced levels from sigma_max down to sigma_min."""
        return power_interp(np.arange(n_steps + 1) / n_steps,
                            self.sigma_min, self.sigma_max, self.rho_interp)


@dataclass(frozen=True)
class IntegratorSpec:
    method: str                 # euler | heun | euler-maruyama
    steps: int
    grid: str = "uniform"       # uniform | edm-power
    dt: float | None = None     # step size for infinite-horizon flows

    def __post_init__(self):
        if self.method not in ("euler", "heun", "euler-maruyama"):
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.grid not in ("uniform", "edm-power"):
            raise ConfigurationError(f"unknown grid {self.grid!r}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")


@dataclass(frozen=True)
class FlowSpec:
    kind: str
    target: GaussianMixture
    end_time: float | None = None       # None: infinite horizon, budgeted by steps*dt
    kernel_sigma: float | None = None   # mmd / stein kernels
    sigma: float | None = None          # fixed noise level (ncsn, exact-ncsn)
    schedule: SigmaSchedule | None = None
    bandwidth: float | None = None      # cloud-score KDE; None = Scott's rule
    f_name: str | None = None           # f-divergence preset key
    data_n: int = 1024                  # size of the held data sample for mmd
    base: "FlowSpec | None" = None      # wrapped field for stein smoothing

    def __post_init__(self):
        if self.kind not in FLOW_KINDS:
            raise ConfigurationError(f"unknown flow kind {self.kind!r}")
        if self.kind in ("ncsn", "exact-ncsn") and not self.sigma:
            raise ConfigurationError(f"{self.kind} needs a positive sigma")
        if self.kind in ("edm-sde", "edm-ode", "exact-edm") and self.schedule is None:
            raise ConfigurationError(f"{self.kind} needs a sigma schedule")
        if self.kind in ("mmd", "stein") and not self.kernel_sigma:
            raise ConfigurationError(f"{self.kind} needs a kernel bandwidth")
        if self.kind == "f-divergence" and self.f_name not in F_PRIME_PRESETS:
            raise ConfigurationError(
                f"f-divergence preset must be one of {sorted(F_PRIME_PRESETS)}")
        if self.kind == "stein" and self.base is None:
            raise ConfigurationError("stein smoothing wraps a base flow")

    @property
    def stochastic(self):
        return self.kind in STOCHASTIC_KINDS

    def horizon(self, integrator: IntegratorSpec):
        if self.kind in ("edm-sde", "edm-ode", "exact-edm"):
            return self.schedule.end_time
        if self.end_time is not None:
            return self.end_time
        if integrator.dt is None:
            raise ConfigurationError(
                "infinite-horizon flow needs integrator.dt as an explicit step budget")
        return integrator.dt * integrator.steps


# -- pointwise fields -----------------------------------------------------

def _rbf(sq_dists, kernel_sigma):
    return np.exp(-0.5 * sq_dists / kernel_sigma**2)


def mmd_field(data: ParticleCloud, particles: ParticleCloud, kernel_sigma: float, x):
    """Gradient of the witness mean_y k(y, .) - mean_x' k(x', .) at x.

    This is the ascent direction for the squared-MMD objective under an
    unnormalized RBF kernel; attraction to the data sample minus
    repulsion from the current cloud.
    """
    if data.n < 1 or particles.n < 1:
        raise ConfigurationError("mmd_field needs non-empty clouds")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    attract = _kernel_mean_grad(data.positions, xb, kernel_sigma)
    repel = _kernel_mean_grad(particles.positions, xb, kernel_sigma)
    out = attract - repel
    return out[0] if single else out


def _kernel_mean_grad(points, xb, kernel_sigma):
    diff = points[None, :, :] - xb[:, None, :]            # (B, M, D)
    sq = np.einsum("bmd,bmd->bm", diff, diff)
    w = _rbf(sq, kernel_sigma) / kernel_sigma**2
    return np.einsum("bm,bmd->bd", w, diff) / points.shape[0]


def mmd_witness(data: ParticleCloud, particles: ParticleCloud, kernel_sigma: float, x):
    """Scalar witness function h whose gradient mmd_field returns."""
    x = np.asarray(x, dtype=np.float64)
    xb = np.atleast_2d(x)

    def mean_k(points):
        diff = points[None, :, :] - xb[:, None, :]
        sq = np.einsum("bmd,bmd->bm", diff, diff)
        return _rbf(sq, kernel_sigma).mean(axis=1)

    out = mean_k(data.positions) - mean_k(particles.positions)
    return float(out[0]) if x.ndim == 1 else out


def langevin_drift(gm: GaussianMixture, x):
    """Score drift; pair with sqrt(2) diffusion for the sampling chain."""
    return gmm_score(gm, x)


def ncsn_drift(gm: GaussianMixture, sigma: float, x):
    """Score of the sigma-noised target; pair with sqrt(2) diffusion."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    return gmm_score(noised_mixture(gm, sigma), x)


def edm_fields(gm: GaussianMixture, schedule: SigmaSchedule, t: float, x):
    """Drifts and diffusion of the noising-schedule flow at time t.

    With sigma decreasing in generation time (sigma' < 0), the drift
    -2 sigma' sigma grad log p^sigma points toward the data; the
    deterministic flow with the same marginals uses half that drift.
    """
    if t < 0 or t > schedule.end_time:
        raise DomainError(f"t={t} outside schedule domain [0, {schedule.end_time}]")
    sig = float(schedule.sigma(t))
    dsig = float(schedule.dsigma_dt(t))
    score = gmm_score(noised_mixture(gm, sig), x)
    rate = -dsig * sig                     # positive for decreasing schedules
    return {
        "ode_drift": rate * score,
        "sde_drift": 2.0 * rate * score,
        "sde_diffusion": float(np.sqrt(2.0 * abs(dsig * sig))),
    }


def kde_score(cloud: ParticleCloud, bandwidth: float, x):
    """Score of the Gaussian KDE over the cloud, computed in log space."""
    if bandwidth <= 0:
        raise ConfigurationError("bandwidth must be positive")
    n = cloud.n
    kde = GaussianMixture(np.full(n, 1.0 / n), cloud.positions, np.full(n, bandwidth))
    return gmm_score(kde, x)


def kde_log_density(cloud: ParticleCloud, bandwidth: float, x):
    n = cloud.n
    kde = GaussianMixture(np.full(n, 1.0 / n), cloud.positions, np.full(n, bandwidth))
    return gmm_log_density(kde, x)


def scott_bandwidth(cloud: ParticleCloud) -> float:
    """Scott's rule with the average per-dimension spread."""
    n, d = cloud.positions.shape
    spread = float(np.std(cloud.positions, axis=0).mean())
    return max(spread, 1e-6) * n ** (-1.0 / (d + 4))


def exact_flow_field(gm: GaussianMixture, rho_score, kind: str, sigma_or_schedule,
                     t: float, x):
    """Deterministic flow corrected by the current cloud's estimated score.

    kind 'ncsn': grad log p^sigma - rho_score; kind 'edm': the schedule
    rate times (2 grad log p^sigma - rho_score). Both vanish into the
    plain deterministic drift when rho matches the noised target.
    """
    if kind == "ncsn":
        noised = noised_mixture(gm, sigma_or_schedule)
        return gmm_score(noised, x) - rho_score(x)
    if kind == "edm":
        schedule = sigma_or_schedule
        sig = float(schedule.sigma(t))
        rate = -float(schedule.dsigma_dt(t)) * sig
        noised = noised_mixture(gm, sig)
        return rate * (2.0 * gmm_score(noised, x) - rho_score(x))
    raise ConfigurationError(f"unknown exact flow kind {kind!r}")


def f_divergence_field(gm: GaussianMixture, rho_density, f_prime, x,
                       fd_step: float = 1e-5):
    """Ascent field of h = -f'(rho/p) via central differences.

    rho_density maps points to densities of the current cloud estimate;
    the target density is analytic. Callers wanting the forward-KL field
    should use the exact score decomposition instead (see integrate).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)

    def h(points):
        rho = np.asarray(rho_density(points), dtype=np.float64)
        p = np.exp(gmm_log_density(gm, points))
        if np.any(rho <= 0) or np.any(p <= 0):
            bad = points[(rho <= 0) | (p <= 0)][0]
            raise DomainError(f"vanishing density at {bad}")
        return -f_prime(rho / p)

    out = np.zeros_like(xb)
    for d in range(xb.shape[1]):
        e = np.zeros(xb.shape[1])
        e[d] = fd_step
        out[:, d] = (h(xb + e) - h(xb - e)) / (2.0 * fd_step)
    return out[0] if single else out


def stein_smooth(base_field, particles: ParticleCloud, kernel_sigma: float,
                 x_index: int):
    """Kernel-average the base field over the cloud at particle x_index."""
    if kernel_sigma <= 0:
        raise ConfigurationError("kernel_sigma must be positive")
    pos = particles.positions
    diff = pos - pos[x_index]
    sq = (diff**2).sum(axis=1)
    w = _rbf(sq, kernel_sigma)
    values = np.asarray(base_field(pos), dtype=np.float64)
    return (w[:, None] * values).mean(axis=0)


# -- integration ----------------------------------------------------------

def _time_grid(flow: FlowSpec, integrator: IntegratorSpec):
    horizon = flow.horizon(integrator)
    n = integrator.steps
    if integrator.grid == "uniform" or flow.schedule is None:
        return np.linspace(0.0, horizon, n + 1)
    # place times so the schedule passes through the power-spaced ladder
    sched = flow.schedule
    times = np.array([sched.inverse(s) for s in sched.ladder(n)])
    times[0], times[-1] = 0.0, horizon
    return np.clip(times, 0.0, horizon)


def _deterministic_velocity(flow: FlowSpec, positions: np.ndarray, t: float,
                            data_cloud: ParticleCloud | None):
    cloud = ParticleCloud(positions, time=t)
    if flow.kind == "mmd":
        return mmd_field(data_cloud, cloud, flow.kernel_sigma, positions)
    if flow.kind == "entropy":
        bw = flow.bandwidth or scott_bandwidth(cloud)
        return -kde_score(cloud, bw, positions)
    if flow.kind == "f-divergence":
        bw = flow.bandwidth or scott_bandwidth(cloud)
        if flow.f_name == "kl":
            # exact decomposition grad log p - grad log rho
            return gmm_score(flow.target, positions) - kde_score(cloud, bw, positions)
        dens = lambda pts: np.exp(kde_log_density(cloud, bw, pts))
        return f_divergence_field(flow.target, dens, F_PRIME_PRESETS[flow.f_name],
                                  positions)
    if flow.kind == "edm-ode":
        return edm_fields(flow.target, flow.schedule, t, positions)["ode_drift"]
    if flow.kind == "exact-ncsn":
        bw = flow.bandwidth or scott_bandwidth(cloud)
        rho = lambda pts: kde_score(cloud, bw, pts)
        return exact_flow_field(flow.target, rho, "ncsn", flow.sigma, t, positions)
    if flow.kind == "exact-edm":
        bw = flow.bandwidth or scott_bandwidth(cloud)
        rho = lambda pts: kde_score(cloud, bw, pts)
        return exact_flow_field(flow.target, rho, "edm", flow.schedule, t, positions)
    if flow.kind == "stein":
        base = flow.base
        if base.stochastic:
            raise ConfigurationError("stein smoothing needs a deterministic base flow")
        raw = _deterministic_velocity(base, positions, t, data_cloud)
        diff = positions[:, None, :] - positions[None, :, :]
        sq = np.einsum("ijd,ijd->ij", diff, diff)
        w = _rbf(sq, flow.kernel_sigma)
        return (w @ raw) / positions.shape[0]
    raise ConfigurationError(f"{flow.kind} is not deterministic")


def _stochastic_fields(flow: FlowSpec, positions: np.ndarray, t: float):
    if flow.kind == "forward-kl-langevin":
        return langevin_drift(flow.target, positions), np.sqrt(2.0)
    if flow.kind == "ncsn":
        return ncsn_drift(flow.target, flow.sigma, positions), np.sqrt(2.0)
    if flow.kind == "edm-sde":
        f = edm_fields(flow.target, flow.schedule, t, positions)
        return f["sde_drift"], f["sde_diffusion"]
    raise ConfigurationError(f"{flow.kind} is not stochastic")


def integrator_nfe(flow: FlowSpec, integrator: IntegratorSpec) -> int:
    """Field evaluations per particle for one full integration."""
    if integrator.method == "heun":
        return 2 * integrator.steps - 1
    return integrator.steps


def integrate(flow: FlowSpec, init: ParticleCloud, integrator: IntegratorSpec,
              seed: int, snapshot_every: int = 0):
    """Run the flow from init; returns the list of snapshot clouds.

    Deterministic flows accept euler or heun; stochastic flows require
    euler-maruyama (one Gaussian increment per particle per step, drawn
    in fixed particle order). Snapshots always include the initial and
    terminal clouds.
    """
    if flow.stochastic and integrator.method != "euler-maruyama":
        raise ConfigurationError(
            f"{flow.kind} is stochastic; use euler-maruyama, not {integrator.method}")
    if not flow.stochastic and integrator.method == "euler-maruyama":
        raise ConfigurationError(
            f"{flow.kind} is deterministic; use euler or heun")
    rng = np.random.default_rng(seed)
    data_cloud = None
    if flow.kind == "mmd" or (flow.base is not None and flow.base.kind == "mmd"):
        # drawn from the run seed directly; integration noise stays untouched
        data_cloud = gmm_sample(flow.target, flow.data_n, seed=seed)
    times = _time_grid(flow, integrator)
    x = init.positions.copy()
    snaps = [ParticleCloud(x.copy(), time=float(times[0]))]
    n_steps = integrator.steps
    for i in range(n_steps):
        t0, t1 = float(times[i]), float(times[i + 1])
        dt = t1 - t0
        if integrator.method == "euler-maruyama":
            drift, diffusion = _stochastic_fields(flow, x, t0)
            noise = rng.standard_normal(x.shape)
            x = x + dt * drift + diffusion * np.sqrt(dt) * noise
        elif integrator.method == "euler":
            x = x + dt * _deterministic_velocity(flow, x, t0, data_cloud)
        else:  # heun; final step falls back to euler, giving 2N-1 evaluations
            v0 = _deterministic_velocity(flow, x, t0, data_cloud)
            xe = x + dt * v0
            if i == n_steps - 1:
                x = xe
            else:
                v1 = _deterministic_velocity(flow, xe, t1, data_cloud)
                x = x + 0.5 * dt * (v0 + v1)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(i)
        if (snapshot_every and (i + 1) % snapshot_every == 0) or i == n_steps - 1:
            snaps.append(ParticleCloud(x.copy(), time=t1))
    return snaps
