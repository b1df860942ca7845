"""Gaussian policy improvement under per-cluster divergence penalties.

A Gaussian policy is pushed along the critic gradient against a behavior
prior, paying a discounted-occupancy-weighted Pearson chi-square and/or KL
price. The step length kappa* solves a one-dimensional stationarity equation
with a closed Lambert-W form in the Pearson-only case. Mixture convexity of
f-divergences makes the per-cluster objectives a lower bound on the mixture
objective, which is what licenses training against one cluster at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import InputError, NumericalError


@dataclass
class GaussianDist:
    """Multivariate Gaussian with a strictly positive definite covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise InputError(f"mean/cov shapes {self.mean.shape}/{self.cov.shape}")
        if not np.allclose(self.cov, self.cov.T, rtol=0.0, atol=1e-12):
            raise InputError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise InputError("covariance must be positive definite") from exc

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise InputError(f"points must have dimension {self.dim}")
        diff = x - self.mean
        u = diff @ np.linalg.inv(self._chol).T
        maha = np.einsum("ij,ij->i", u, u)
        log_det = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (maha + log_det + self.dim * np.log(2.0 * np.pi))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._chol.T


@dataclass(frozen=True)
class PenaltyCoeffs:
    """Pearson weight alpha, KL weight beta_kl, and the discount gamma."""

    alpha: float
    beta_kl: float
    gamma: float

    def __post_init__(self):
        if self.alpha < 0 or self.beta_kl < 0:
            raise InputError("alpha and beta_kl must be nonnegative")
        if self.alpha + self.beta_kl <= 0:
            raise InputError("at least one of alpha, beta_kl must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise InputError("gamma must lie in [0, 1)")

    @property
    def rho_bar(self) -> float:
        """Geometric-series constant 1/(1 - gamma)."""
        return 1.0 / (1.0 - self.gamma)


@dataclass
class ClusterBehavior:
    """Mixture of per-cluster action Gaussians nu_m with weights w_m."""

    weights: np.ndarray
    components: list[GaussianDist]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.ndim != 1 or len(self.weights) != len(self.components):
            raise InputError("need one weight per component")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise InputError("weights must form a probability vector")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise InputError("components must share one dimension")

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def log_density(self, x: np.ndarray) -> np.ndarray:
        logs = np.stack([np.log(w) + c.logpdf(x) if w > 0
                         else np.full(np.atleast_2d(x).shape[0], -np.inf)
                         for w, c in zip(self.weights, self.components)], axis=1)
        peak = logs.max(axis=1)
        safe = np.where(np.isfinite(peak), peak, 0.0)
        return safe + np.log(np.exp(logs - safe[:, None]).sum(axis=1))

    def density(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(x))


def fit_cluster_behaviors(actions: np.ndarray, responsibilities: np.ndarray,
                          ridge: float = 1e-6) -> ClusterBehavior:
    """State-independent action Gaussians per cluster, ridged to stay PD."""
    actions = np.asarray(actions, dtype=float)
    resp = np.asarray(responsibilities, dtype=float)
    if actions.ndim != 2 or resp.ndim != 2 or actions.shape[0] != resp.shape[0]:
        raise InputError("actions and responsibilities must have matching rows")
    counts = resp.sum(axis=0)
    if np.any(counts <= 0):
        raise InputError("every cluster needs positive responsibility mass")
    weights = counts / counts.sum()
    comps = []
    for z in range(resp.shape[1]):
        mu = (resp[:, z] @ actions) / counts[z]
        diff = actions - mu
        cov = (diff * resp[:, z, None]).T @ diff / counts[z]
        comps.append(GaussianDist(mu, 0.5 * (cov + cov.T) + ridge * np.eye(actions.shape[1])))
    return ClusterBehavior(weights, comps)


# ------------------------------------------------------------- divergences

def gaussian_kl(p: GaussianDist, q: GaussianDist) -> float:
    """KL(p || q) in closed form; equal covariances reduce it to a quadratic."""
    if p.dim != q.dim:
        raise InputError("dimension mismatch")
    d = p.dim
    q_inv = np.linalg.inv(q.cov)
    delta = p.mean - q.mean
    trace = float(np.trace(q_inv @ p.cov))
    maha = float(delta @ q_inv @ delta)
    log_det = float(np.linalg.slogdet(q.cov)[1] - np.linalg.slogdet(p.cov)[1])
    return 0.5 * (trace + maha - d + log_det)


def gaussian_chi2_equal_cov(mu1: np.ndarray, mu2: np.ndarray, sigma: np.ndarray) -> float:
    """Pearson chi-square between equal-covariance Gaussians: e^(d^T S^-1 d) - 1."""
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=float))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if mu1.shape != mu2.shape or sigma.shape != (len(mu1), len(mu1)):
        raise InputError("dimension mismatch")
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise InputError("sigma must be positive definite") from exc
    delta = mu1 - mu2
    return float(np.expm1(delta @ np.linalg.solve(sigma, delta)))


def gaussian_chi2(p: GaussianDist, q: GaussianDist) -> float:
    """General Gaussian Pearson chi-square; inf when the integral diverges.

    chi2(p||q) + 1 = integral of p^2/q, finite iff 2 p_cov^-1 - q_cov^-1 is
    positive definite.
    """
    if p.dim != q.dim:
        raise InputError("dimension mismatch")
    p_inv = np.linalg.inv(p.cov)
    q_inv = np.linalg.inv(q.cov)
    a = 2.0 * p_inv - q_inv
    try:
        a_chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return float("inf")
    b = 2.0 * p_inv @ p.mean - q_inv @ q.mean
    # log of |q_cov|^(1/2) |p_cov|^(-1) |A|^(-1/2)
    log_coef = (0.5 * np.linalg.slogdet(q.cov)[1] - np.linalg.slogdet(p.cov)[1]
                - np.sum(np.log(np.diag(a_chol))))
    u = np.linalg.solve(a_chol, b)
    exponent = 0.5 * float(u @ u) - float(p.mean @ p_inv @ p.mean) \
        + 0.5 * float(q.mean @ q_inv @ q.mean)
    return float(np.expm1(log_coef + exponent))


def _grad_mu_kl(policy: GaussianDist, nu: GaussianDist) -> np.ndarray:
    return np.linalg.solve(nu.cov, policy.mean - nu.mean)


def _grad_mu_chi2(policy: GaussianDist, nu: GaussianDist) -> np.ndarray:
    """Gradient of the general Gaussian chi-square in the policy mean."""
    p_inv = np.linalg.inv(policy.cov)
    q_inv = np.linalg.inv(nu.cov)
    a = 2.0 * p_inv - q_inv
    b = 2.0 * p_inv @ policy.mean - q_inv @ nu.mean
    value_plus_one = gaussian_chi2(policy, nu) + 1.0
    if not math.isfinite(value_plus_one):
        raise NumericalError("chi-square divergence is infinite at this policy")
    return value_plus_one * 2.0 * (p_inv @ (np.linalg.solve(a, b) - policy.mean))


# -------------------------------------------------------------- step sizes

def lambert_w(z: float) -> float:
    """Principal-branch Lambert W on z > 0 by guarded Newton on w e^w = z.

    The residual tolerance is relative to z, which is the rounding floor of
    evaluating w e^w; a step that no longer moves w also counts as converged.
    """
    if not z > 0:
        raise InputError(f"lambert_w requires z > 0, got {z}")
    w = math.log1p(z)
    prev = None
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - z
        if abs(f) <= 4e-16 * z:
            return w
        step = f / (ew * (w + 1.0))
        # w stays in (0, inf) on this branch; halve any overshoot below 0.
        while w - step <= 0.0:
            step *= 0.5
        new_w = w - step
        # a fixed point or a two-cycle between adjacent floats is converged
        if new_w == w or new_w == prev:
            return new_w
        prev = w
        w = new_w
    raise NumericalError("lambert_w Newton iteration did not converge")


def kappa_star(r_curvature: float, coeffs: PenaltyCoeffs) -> float:
    """Positive root of (2 alpha rho e^(kappa^2 R) + beta_kl rho) kappa = 1.

    KL-only (alpha = 0) returns the exact closed form (1 - gamma)/beta_kl.
    Otherwise a bracketed Newton iteration drives the defining residual below
    1e-13. The root is unique because the left side is strictly increasing.
    """
    r = float(r_curvature)
    if not r > 0:
        raise InputError(f"curvature R must be positive, got {r}")
    rho = coeffs.rho_bar
    alpha, beta = coeffs.alpha, coeffs.beta_kl
    if alpha == 0.0:
        return (1.0 - coeffs.gamma) / beta
    lo, hi = 0.0, 1.0 / ((2.0 * alpha + beta) * rho)

    # Newton runs on the log of the product form, which stays finite and
    # nearly linear where e^(kappa^2 R) dwarfs everything else; the raw
    # residual would overflow there and its Newton steps crawl.
    def log_residual(k: float) -> float:
        expo = k * k * r
        if expo > 700.0:
            return math.log(2.0 * alpha * rho) + expo + math.log(k)
        return math.log(2.0 * alpha * rho * math.exp(expo) + beta * rho) + math.log(k)

    def residual(k: float) -> float:
        expo = k * k * r
        if expo > 700.0:
            return math.inf
        return (2.0 * alpha * rho * math.exp(expo) + beta * rho) * k - 1.0

    k = 0.5 * hi
    for _ in range(300):
        f = residual(k)
        if abs(f) < 1e-13:
            return k
        g = log_residual(k)
        if g > 0.0:
            hi = k
        else:
            lo = k
        expo = k * k * r
        if expo > 700.0:
            share = 1.0
        else:
            exp_term = 2.0 * alpha * rho * math.exp(expo)
            share = exp_term / (exp_term + beta * rho)
        slope = 1.0 / k + 2.0 * k * r * share
        k_newton = k - g / slope
        k = k_newton if lo < k_newton < hi else 0.5 * (lo + hi)
    if abs(residual(k)) < 1e-12:
        return k
    raise NumericalError("kappa_star iteration did not reach residual 1e-12")


def kappa_star_pearson_closed_form(r_curvature: float, alpha: float, gamma: float) -> float:
    """Lambert-W form of the Pearson-only step: sqrt(W(R/(2 lam^2))/(2R))."""
    r = float(r_curvature)
    if not r > 0:
        raise InputError(f"curvature R must be positive, got {r}")
    if alpha <= 0 or not 0.0 <= gamma < 1.0:
        raise InputError("need alpha > 0 and gamma in [0, 1)")
    lam = alpha / (1.0 - gamma)
    return math.sqrt(lambert_w(r / (2.0 * lam * lam)) / (2.0 * r))


def policy_update_mean(mu_beta: np.ndarray, sigma_beta: np.ndarray,
                       g: np.ndarray, kappa: float) -> np.ndarray:
    """Penalized-improvement mean mu_beta + kappa * Sigma_beta g."""
    mu_beta = np.atleast_1d(np.asarray(mu_beta, dtype=float))
    sigma_beta = np.atleast_2d(np.asarray(sigma_beta, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    d = len(mu_beta)
    if sigma_beta.shape != (d, d) or g.shape != (d,):
        raise InputError("dimension mismatch")
    try:
        np.linalg.cholesky(sigma_beta)
    except np.linalg.LinAlgError as exc:
        raise InputError("sigma_beta must be positive definite") from exc
    return mu_beta + kappa * (sigma_beta @ g)


def chi2_inflation_at_optimum(r_curvature: float,
                              coeffs: PenaltyCoeffs) -> tuple[float, float]:
    """(chi-square at the kappa* optimum, cap beta_kl/(2 alpha) - 1).

    The cap is guaranteed when beta_kl > 2 alpha and
    R <= 4 beta_kl^2 rho^2 ln(beta_kl/(2 alpha)); outside that curvature
    range the inflation can exceed it, so callers should treat the pair as a
    report rather than an unconditional inequality.
    """
    if coeffs.alpha <= 0:
        raise InputError("the inflation cap needs alpha > 0")
    k = kappa_star(r_curvature, coeffs)
    chi2 = float(np.expm1(k * k * float(r_curvature)))
    cap = coeffs.beta_kl / (2.0 * coeffs.alpha) - 1.0
    return chi2, cap


def cql_global_lower_bound(expected_q: float, sup_chi2: float,
                           alpha: float, gamma: float) -> float:
    """expected_q - alpha * sup_chi2 / (1 - gamma)."""
    if sup_chi2 < 0:
        raise InputError("sup_chi2 must be nonnegative")
    if alpha < 0 or not 0.0 <= gamma < 1.0:
        raise InputError("need alpha >= 0 and gamma in [0, 1)")
    return float(expected_q) - alpha * float(sup_chi2) / (1.0 - gamma)


# ------------------------------------------------- objectives and bounds

def per_cluster_objective(policy: GaussianDist, critic, states: np.ndarray,
                          nu_z: GaussianDist, coeffs: PenaltyCoeffs,
                          n_mc: int, rng: np.random.Generator) -> float:
    """MC value estimate minus the discounted per-cluster divergence price.

    ``critic`` is either an object exposing ``forward_batch`` over joint
    (state, action) rows or a callable ``(states, actions) -> values``.
    """
    if n_mc < 1:
        raise InputError("n_mc must be at least 1")
    states = np.atleast_2d(np.asarray(states, dtype=float))
    idx = rng.integers(states.shape[0], size=n_mc)
    actions = policy.sample(n_mc, rng)
    s_draw = states[idx]
    if hasattr(critic, "forward_batch"):
        q_values = critic.forward_batch(np.concatenate([s_draw, actions], axis=1))
    else:
        q_values = np.asarray(critic(s_draw, actions), dtype=float)
    price = coeffs.alpha * gaussian_chi2(policy, nu_z) \
        + coeffs.beta_kl * gaussian_kl(policy, nu_z)
    if not math.isfinite(price):
        raise NumericalError("divergence price is not finite for this cluster")
    return float(q_values.mean()) - coeffs.rho_bar * price


class BoundCheck(NamedTuple):
    lhs: float
    rhs: float
    stderr: float


DIVERGENCES = ("kl", "chi2", "mse")


def mixture_bound_check(policy: GaussianDist, clusters: ClusterBehavior,
                        divergence: str, n_mc: int = 20_000,
                        rng: np.random.Generator | None = None,
                        quad_tol: float = 1e-9) -> BoundCheck:
    """Compare D(pi || mixture) against sum_m w_m D(pi || nu_m).

    lhs comes from adaptive Simpson quadrature in 1-D and Monte Carlo in
    higher dimension (stderr reported; 0 for deterministic paths). rhs uses
    Gaussian closed forms for KL and chi-square. The MSE divergence is the
    mean squared density difference over a fixed evaluation grid, where the
    convexity bound holds pointwise and both sides are exact. Zero-weight
    components are dropped; a single surviving component makes the mixture a
    plain Gaussian, so lhs uses the same closed form as rhs.
    """
    divergence = divergence.lower()
    if divergence not in DIVERGENCES:
        raise InputError(f"divergence must be one of {DIVERGENCES}")
    if policy.dim != clusters.dim:
        raise InputError("policy and behavior dimensions differ")
    live = [(float(w), c) for w, c in zip(clusters.weights, clusters.components) if w > 0]
    weights = np.array([w for w, _ in live])
    comps = [c for _, c in live]
    mixture = ClusterBehavior(weights, comps)

    if divergence == "mse":
        grid = _density_grid(policy, comps)
        p_vals = policy.pdf(grid)
        comp_vals = np.stack([c.pdf(grid) for c in comps], axis=1)
        mix_vals = comp_vals @ weights
        lhs = float(np.mean((p_vals - mix_vals) ** 2))
        rhs = float(weights @ np.mean((p_vals[:, None] - comp_vals) ** 2, axis=0))
        return BoundCheck(lhs, rhs, 0.0)

    if divergence == "kl":
        rhs = float(sum(w * gaussian_kl(policy, c) for w, c in live))
    else:
        rhs = float(sum(w * gaussian_chi2(policy, c) for w, c in live))
    if not math.isfinite(rhs):
        raise NumericalError(f"closed-form {divergence} is not finite")

    if len(comps) == 1:
        lhs = gaussian_kl(policy, comps[0]) if divergence == "kl" \
            else gaussian_chi2(policy, comps[0])
        return BoundCheck(float(lhs), rhs, 0.0)

    if policy.dim == 1:
        lo, hi = _integration_range(policy, comps)
        if divergence == "kl":
            def integrand(x):
                pts = np.asarray(x, dtype=float).reshape(-1, 1)
                logp = policy.logpdf(pts)
                return np.exp(logp) * (logp - mixture.log_density(pts))
        else:
            def integrand(x):
                pts = np.asarray(x, dtype=float).reshape(-1, 1)
                logp = policy.logpdf(pts)
                return np.exp(2.0 * logp - mixture.log_density(pts))
        value = _adaptive_simpson(integrand, lo, hi, quad_tol)
        lhs = value if divergence == "kl" else value - 1.0
        if not math.isfinite(lhs):
            raise NumericalError(f"quadrature {divergence} estimate is not finite")
        return BoundCheck(float(lhs), rhs, 0.0)

    if rng is None:
        raise InputError("multivariate mixture bounds need an rng for MC")
    draws = policy.sample(n_mc, rng)
    logp = policy.logpdf(draws)
    log_mix = mixture.log_density(draws)
    if divergence == "kl":
        samples = logp - log_mix
    else:
        samples = np.exp(logp - log_mix) - 1.0
    lhs = float(samples.mean())
    stderr = float(samples.std(ddof=1) / np.sqrt(n_mc))
    if not math.isfinite(lhs) or not math.isfinite(stderr):
        raise NumericalError(f"MC {divergence} estimate is not finite")
    return BoundCheck(lhs, rhs, stderr)


def unbiased_cluster_gradient_check(policy: GaussianDist, clusters: ClusterBehavior,
                                    coeffs: PenaltyCoeffs, n_trials: int,
                                    rng: np.random.Generator,
                                    q_linear: np.ndarray | None = None
                                    ) -> tuple[np.ndarray, np.ndarray, float]:
    """Sampled-cluster policy gradient vs the weighted full gradient.

    Per-cluster objectives use a linear critic Q(a) = q^T a, so every
    mean-gradient is analytic. Returns (mean sampled gradient, full weighted
    gradient, worst componentwise deviation in standard-error units).
    """
    if n_trials < 1000:
        raise InputError("n_trials must be at least 1000")
    q = np.zeros(policy.dim) if q_linear is None else np.asarray(q_linear, dtype=float)
    if q.shape != (policy.dim,):
        raise InputError(f"q_linear must have shape ({policy.dim},)")
    per_cluster = np.stack([
        q - coeffs.rho_bar * (coeffs.alpha * _grad_mu_chi2(policy, c)
                              + coeffs.beta_kl * _grad_mu_kl(policy, c))
        for c in clusters.components])
    full = clusters.weights @ per_cluster
    draws = rng.choice(len(clusters.components), size=n_trials, p=clusters.weights)
    sampled = per_cluster[draws]
    mean = sampled.mean(axis=0)
    stderr = sampled.std(axis=0, ddof=1) / np.sqrt(n_trials)
    diff = np.abs(mean - full)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(diff == 0.0, 0.0, diff / stderr)
    return mean, full, float(np.max(z))


# ----------------------------------------------------------- integration

def _integration_range(policy: GaussianDist, comps: Sequence[GaussianDist],
                       n_sigma: float = 14.0) -> tuple[float, float]:
    dists = [policy, *comps]
    los = [float(d.mean[0]) - n_sigma * math.sqrt(float(d.cov[0, 0])) for d in dists]
    his = [float(d.mean[0]) + n_sigma * math.sqrt(float(d.cov[0, 0])) for d in dists]
    return min(los), max(his)


def _density_grid(policy: GaussianDist, comps: Sequence[GaussianDist],
                  points_per_dim: int = 121, n_sigma: float = 8.0) -> np.ndarray:
    dists = [policy, *comps]
    axes = []
    for j in range(policy.dim):
        lo = min(float(d.mean[j]) - n_sigma * math.sqrt(float(d.cov[j, j])) for d in dists)
        hi = max(float(d.mean[j]) + n_sigma * math.sqrt(float(d.cov[j, j])) for d in dists)
        axes.append(np.linspace(lo, hi, points_per_dim))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _adaptive_simpson(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                      tol: float, max_depth: int = 40) -> float:
    """Recursive adaptive Simpson rule on a vectorized integrand."""

    def simpson(lo: float, hi: float, flo: float, fmid: float, fhi: float) -> float:
        return (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)

    def recurse(lo: float, hi: float, flo: float, fmid: float, fhi: float,
                whole: float, depth: int) -> float:
        mid = 0.5 * (lo + hi)
        lmid = 0.5 * (lo + mid)
        rmid = 0.5 * (mid + hi)
        flm, frm = (float(v) for v in f(np.array([lmid, rmid])))
        left = simpson(lo, mid, flo, flm, fmid)
        right = simpson(mid, hi, fmid, frm, fhi)
        if depth >= max_depth:
            return left + right
        if abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(lo, mid, flo, flm, fmid, left, depth + 1)
                + recurse(mid, hi, fmid, frm, fhi, right, depth + 1))

    # Seed the recursion on a few panels so narrow modes are not missed.
    panels = np.linspace(a, b, 9)
    total = 0.0
    for lo, hi in zip(panels[:-1], panels[1:]):
        m = 0.5 * (lo + hi)
        flo, fm_, fhi = (float(v) for v in f(np.array([lo, m, hi])))
        whole = simpson(lo, hi, flo, fm_, fhi)
        total += recurse(lo, hi, flo, fm_, fhi, whole, 0)
    return total
