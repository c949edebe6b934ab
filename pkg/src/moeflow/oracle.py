"""Brute-force references for the closed-form theory.

The conditional optima of both training objectives are expectations under
the joint law of (z0, z1) given a path point (z_t, t). Two independent
estimators are provided:

* self-normalized importance weighting over Monte-Carlo pair draws, with
  either a narrow Gaussian kernel around the interpolation constraint
  ("kernel") or the exact conditional density of z_t given z1
  ("conditional"); the two cross-validate each other, and
* a deterministic trapezoid quadrature over (z0, z1) for 1-D specs, which
  integrates the same kernel-weighted functional exactly (point-mass
  components collapse their z1 axis to a finite sum).

Every Monte-Carlo output carries a standard-error estimate; tests compare
within multiples of it, never by raw equality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import datasets, moefm, nnet
from .datasets import MixtureSpec
from .errors import (
    EffectiveSampleSizeError,
    UnsupportedSpecError,
    ValidationError,
)
from .flow import TrainBatch
from .moefm import MoeFlowModel

KERNEL_BANDWIDTH_SCALE = 0.05
MIN_ESS = 100.0


@dataclass(frozen=True)
class ProbePoint:
    """Conditioning point (z_t, t) plus the Monte-Carlo budget."""

    z_t: tuple
    t: float
    mc_samples: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.t <= 1.0 - 1e-3:
            raise ValidationError("probe t must lie in (0, 1 - 1e-3]")
        if self.mc_samples < 1:
            raise ValidationError("mc_samples must be >= 1")

    @property
    def point(self) -> np.ndarray:
        return np.asarray(self.z_t, dtype=np.float64).reshape(-1)


@dataclass
class OracleEstimate:
    value: np.ndarray
    stderr: np.ndarray
    ess: float
    method: str


@dataclass
class MoefmOptima:
    pi: np.ndarray          # (K,)
    pi_stderr: np.ndarray   # (K,)
    u: np.ndarray           # (K, m); rows with undefined[k] are NaN
    u_stderr: np.ndarray    # (K, m)
    undefined: np.ndarray   # (K,) bool: pi_k too small to divide by
    ess: float


def _require_density_spec(spec: MixtureSpec) -> None:
    if spec.kind == "halfmoon":
        raise UnsupportedSpecError("oracle needs an analytic mixture spec")


def _draw_pairs(spec: MixtureSpec, probe: ProbePoint):
    """Shared (z1, z0) draws so different estimators see identical streams."""
    rng = np.random.default_rng(probe.seed)
    z1 = datasets.sample_with_rng(spec, probe.mc_samples, rng)
    z0 = rng.standard_normal(z1.shape)
    return z0, z1


def _log_weights(spec: MixtureSpec, probe: ProbePoint, z0, z1, method: str):
    """Unnormalized log importance weights and per-draw values of u*."""
    z_t = probe.point
    t = probe.t
    if method == "kernel":
        h = KERNEL_BANDWIDTH_SCALE * (1.0 - t)
        resid = z_t[None, :] - (t * z1 + (1.0 - t) * z0)
        logw = -np.sum(resid**2, axis=1) / (2.0 * h * h)
        u = z1 - z0
    elif method == "conditional":
        # z_t | z1 is N(t z1, (1-t)^2 I); conditioning on (z_t, z1) pins z0,
        # so the integrand value is u* = (z1 - z_t)/(1 - t).
        resid = z_t[None, :] - t * z1
        logw = -np.sum(resid**2, axis=1) / (2.0 * (1.0 - t) ** 2)
        u = (z1 - z_t[None, :]) / (1.0 - t)
    else:
        raise ValidationError(f"unknown oracle method {method!r}")
    return logw, u


def _normalized(logw: np.ndarray) -> np.ndarray:
    shifted = np.exp(logw - logw.max())
    return shifted / shifted.sum()


def _check_ess(wt: np.ndarray) -> float:
    ess = 1.0 / np.sum(wt**2)
    if ess < MIN_ESS:
        raise EffectiveSampleSizeError(
            f"effective sample size {ess:.1f} < {MIN_ESS:.0f}; increase "
            "mc_samples or widen the kernel bandwidth",
            ess=ess,
        )
    return float(ess)


def _ratio_mean(wt: np.ndarray, values: np.ndarray):
    """Self-normalized mean and delta-method stderr, shared by all oracles."""
    denom = wt.sum()
    est = (wt[:, None] * values).sum(axis=0) / denom
    resid = values - est[None, :]
    stderr = np.sqrt(np.sum((wt[:, None] * resid) ** 2, axis=0)) / denom
    return est, stderr


def vfm_optimum(spec: MixtureSpec, probe: ProbePoint, method: str = "kernel") -> OracleEstimate:
    """Estimate E[z1 - z0 | z_t, t], the pointwise optimum of the VFM loss."""
    _require_density_spec(spec)
    z0, z1 = _draw_pairs(spec, probe)
    logw, u = _log_weights(spec, probe, z0, z1, method)
    wt = _normalized(logw)
    ess = _check_ess(wt)
    est, stderr = _ratio_mean(wt, u)
    return OracleEstimate(est, stderr, ess, method)


def moefm_optima(
    spec: MixtureSpec, probe: ProbePoint, frozen_model: MoeFlowModel, method: str = "kernel"
) -> MoefmOptima:
    """Estimate the mixture's conditional optima for a frozen model.

    pi_hat_k = E[gamma_k | z_t, t] and u_hat_k = E[gamma_k u*]/E[gamma_k],
    with gamma computed from the frozen gate and expert values at the probe.
    Draws and weights are shared with vfm_optimum so the K=1 case collapses
    to it exactly.
    """
    _require_density_spec(spec)
    z0, z1 = _draw_pairs(spec, probe)
    logw, u = _log_weights(spec, probe, z0, z1, method)
    wt = _normalized(logw)
    ess = _check_ess(wt)
    gamma = moefm.responsibilities(
        frozen_model,
        np.tile(probe.point, (len(u), 1)),
        np.full(len(u), probe.t),
        u,
    )
    k = frozen_model.num_experts
    m = frozen_model.dim
    pi_hat, pi_stderr = _ratio_mean(wt, gamma)
    u_hat = np.full((k, m), np.nan)
    u_stderr = np.full((k, m), np.nan)
    undefined = pi_hat < 1e-6
    for j in range(k):
        if undefined[j]:
            continue
        u_hat[j], u_stderr[j] = _ratio_mean(wt * gamma[:, j], u)
    return MoefmOptima(pi_hat, pi_stderr, u_hat, u_stderr, undefined, ess)


# -- responsibility limits ----------------------------------------------------


@dataclass
class HardAssignment:
    """sigma -> 0 limit of the responsibilities at one probe."""

    members: tuple            # argmin-distance expert indices
    weights: np.ndarray       # renormalized routing over members
    full: np.ndarray          # (K,) vector, zero off the tie set


def sigma_zero_limit(frozen_model: MoeFlowModel, z, t, u_star, tie_tol: float = 1e-9) -> HardAssignment:
    """Nearest-expert assignment with routing-weighted tie splitting."""
    z_arr = np.asarray(z, dtype=np.float64).reshape(1, -1)
    u_arr = np.asarray(u_star, dtype=np.float64).reshape(-1)
    outs = np.stack(
        [nnet.forward(ex, z_arr, t)[0] for ex in frozen_model.experts], axis=0
    )
    dists = np.linalg.norm(outs - u_arr[None, :], axis=1)
    dmin = dists.min()
    members = np.flatnonzero(dists <= dmin + tie_tol * max(dmin, 1.0))
    pi = moefm.gating(frozen_model, z_arr[0], t)
    weights = pi[members] / pi[members].sum()
    full = np.zeros(frozen_model.num_experts)
    full[members] = weights
    return HardAssignment(tuple(int(i) for i in members), weights, full)


@dataclass
class SigmaSweepRow:
    sigma: float
    gamma_pi_deviation: float   # max |gamma - pi| over the batch
    expert_grad_norm: float     # L2 over all expert parameters
    expert_grad_max: float      # largest single entry


@dataclass
class SigmaSweepReport:
    rows: list
    deviation_monotone: bool
    grad_monotone: bool

    @property
    def passed(self) -> bool:
        return self.deviation_monotone and self.grad_monotone


def sigma_inf_limit_check(
    frozen_model: MoeFlowModel, batch: TrainBatch, sigmas=(10.0, 100.0, 1000.0)
) -> SigmaSweepReport:
    """Sweep sigma upward: responsibilities flatten to the routing and the
    expert gradient of the NLL dies off like 1/sigma^2."""
    pi = moefm.gating(frozen_model, batch.z_t, batch.t)
    rows = []
    for sigma in sigmas:
        model_s = MoeFlowModel(frozen_model.experts, frozen_model.gate, float(sigma))
        gamma = moefm.responsibilities(model_s, batch.z_t, batch.t, batch.u_star)
        dev = float(np.abs(gamma - pi).max())
        _, expert_grads, _ = moefm.moefm_nll_gradients(model_s, batch)
        flat = np.concatenate([g.ravel() for eg in expert_grads for g in eg])
        rows.append(
            SigmaSweepRow(float(sigma), dev, float(np.linalg.norm(flat)), float(np.abs(flat).max()))
        )
    devs = [r.gamma_pi_deviation for r in rows]
    grads = [r.expert_grad_norm for r in rows]
    return SigmaSweepReport(
        rows=rows,
        deviation_monotone=all(a >= b for a, b in zip(devs, devs[1:])),
        grad_monotone=all(a >= b for a, b in zip(grads, grads[1:])),
    )


# -- deterministic quadrature (1-D specs) -------------------------------------


def _trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    w = np.full(grid.shape, grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _quadrature_accumulate(spec: MixtureSpec, z_t: float, t: float, n_points: int, fn):
    """Sum fn(u_star, mass) over a (z0, z1) product grid.

    The outer loop runs over mixture components; point masses contribute a
    1-D z0 line, diffuse components a full 2-D cell grid. The weight is
    p(z0) p1(z1) kappa_h(z_t - interpolation), the same smoothed functional
    the importance sampler targets.
    """
    _require_density_spec(spec)
    if spec.dim != 1:
        raise UnsupportedSpecError("quadrature oracle is 1-D only")
    h = KERNEL_BANDWIDTH_SCALE * (1.0 - t)
    z0_grid = np.linspace(-6.0, 6.0, n_points)
    z0_w = _trapezoid_weights(z0_grid)
    phi0 = np.exp(-0.5 * z0_grid**2) / np.sqrt(2 * np.pi)
    for weight, mean, std in spec.components:
        mu = mean[0]
        if std == 0.0:
            # z1 pinned at the atom: only the z0 axis is integrated.
            interp = t * mu + (1.0 - t) * z0_grid
            kern = np.exp(-((z_t - interp) ** 2) / (2 * h * h))
            mass = weight * phi0 * z0_w * kern
            fn(mu - z0_grid, mass)
        else:
            z1_grid = np.linspace(mu - 6.0 * std, mu + 6.0 * std, n_points)
            z1_w = _trapezoid_weights(z1_grid)
            phi1 = np.exp(-0.5 * ((z1_grid - mu) / std) ** 2) / (std * np.sqrt(2 * np.pi))
            interp = t * z1_grid[None, :] + (1.0 - t) * z0_grid[:, None]
            kern = np.exp(-((z_t - interp) ** 2) / (2 * h * h))
            mass = weight * (phi0 * z0_w)[:, None] * (phi1 * z1_w)[None, :] * kern
            fn((z1_grid[None, :] - z0_grid[:, None]).ravel(), mass.ravel())


def quadrature_vfm_optimum(spec: MixtureSpec, z_t: float, t: float, n_points: int = 2000) -> float:
    """Deterministic value of E[z1 - z0 | z_t, t] (kernel-smoothed)."""
    num = 0.0
    den = 0.0

    def accumulate(u, mass):
        nonlocal num, den
        num += float(np.dot(mass, u))
        den += float(mass.sum())

    _quadrature_accumulate(spec, z_t, t, n_points, accumulate)
    return num / den


def quadrature_moefm_optima(
    spec: MixtureSpec, z_t: float, t: float, frozen_model: MoeFlowModel, n_points: int = 2000
):
    """Deterministic (pi_hat, u_hat) for a frozen 1-D model."""
    if frozen_model.dim != 1:
        raise UnsupportedSpecError("quadrature oracle is 1-D only")
    k = frozen_model.num_experts
    z_probe = np.array([[float(z_t)]])
    pi = moefm.gating(frozen_model, z_probe[0], t)
    expert_u = np.array(
        [nnet.forward(ex, z_probe, t)[0, 0] for ex in frozen_model.experts]
    )
    log_pi = np.log(np.maximum(pi, 1e-300))
    sig2 = 2.0 * frozen_model.sigma**2

    den = 0.0
    gamma_sum = np.zeros(k)
    gamma_u_sum = np.zeros(k)

    def accumulate(u, mass):
        nonlocal den
        log_num = log_pi[None, :] - (u[:, None] - expert_u[None, :]) ** 2 / sig2
        mx = log_num.max(axis=1, keepdims=True)
        gamma = np.exp(log_num - mx)
        gamma /= gamma.sum(axis=1, keepdims=True)
        den += float(mass.sum())
        gamma_sum[:] += mass @ gamma
        gamma_u_sum[:] += (mass * u) @ gamma

    _quadrature_accumulate(spec, z_t, t, n_points, accumulate)
    pi_hat = gamma_sum / den
    with np.errstate(invalid="ignore", divide="ignore"):
        u_hat = np.where(pi_hat > 1e-12, gamma_u_sum / gamma_sum, np.nan)
    return pi_hat, u_hat
