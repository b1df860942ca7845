"""Gaussian mixture over stacked gradient pairs, fit by ridge-regularized EM.

Rows of the data matrix are y_i = [g'_i ; g_i] in R^{2m}, so each cluster
covariance carries the target-side block, the online-side block and their
cross block in one symmetric matrix. The E-step works entirely in log space;
the M-step adds a ridge so every covariance stays safely positive definite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

# A cluster whose soft count falls below this fraction of N is starved and
# gets re-seeded at the least-explained point.
STARVED_FRACTION = 1e-6


@dataclass(frozen=True)
class StackedPairSet:
    """N x 2m matrix whose rows stack the target-side vector first."""

    matrix: np.ndarray
    m: int

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[1] != 2 * self.m or self.m < 1:
            raise InputError(f"expected an (N, {2 * self.m}) matrix, got {mat.shape}")

    @classmethod
    def from_pairs(cls, g_prime: np.ndarray, g: np.ndarray) -> "StackedPairSet":
        g_prime = np.asarray(g_prime, dtype=float)
        g = np.asarray(g, dtype=float)
        if g_prime.shape != g.shape or g_prime.ndim != 2:
            raise InputError(f"pair shapes must match, got {g_prime.shape} and {g.shape}")
        return cls(np.concatenate([g_prime, g], axis=1), g.shape[1])


@dataclass
class GaussianMixture:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, D)
    covariances: np.ndarray  # (K, D, D), each symmetric positive definite

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        k = self.weights.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != k:
            raise InputError("means must be (K, D)")
        d = self.means.shape[1]
        if self.covariances.shape != (k, d, d):
            raise InputError("covariances must be (K, D, D)")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise InputError("weights must be a probability vector")
        for z in range(k):
            if not np.allclose(self.covariances[z], self.covariances[z].T,
                               rtol=0.0, atol=1e-10):
                raise InputError(f"covariance {z} is not symmetric")
            try:
                np.linalg.cholesky(self.covariances[z])
            except np.linalg.LinAlgError as exc:
                raise InputError(f"covariance {z} is not positive definite") from exc

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "GaussianMixture":
        return GaussianMixture(self.weights.copy(), self.means.copy(),
                               self.covariances.copy())


@dataclass
class FitResult:
    """EM outcome; unpacks as (mixture, responsibilities) for convenience."""

    mixture: GaussianMixture
    responsibilities: np.ndarray
    log_likelihoods: list[float]
    n_iterations: int
    n_reseeds: int

    def __iter__(self):
        return iter((self.mixture, self.responsibilities))


def _as_matrix(y) -> np.ndarray:
    if isinstance(y, StackedPairSet):
        return np.asarray(y.matrix, dtype=float)
    return np.asarray(y, dtype=float)


def default_ridge(y) -> float:
    """1e-6 of the mean global variance, floored so degenerate data stays PD."""
    y = _as_matrix(y)
    mean_var = float(np.mean(np.var(y, axis=0)))
    return max(1e-6 * mean_var, 1e-12)


def _log_components(y: np.ndarray, mixture: GaussianMixture) -> np.ndarray:
    """log(p_z) + log N(y_i | mu_z, Omega_z) for every (i, z)."""
    n, d = y.shape
    out = np.empty((n, mixture.n_components))
    for z in range(mixture.n_components):
        chol = np.linalg.cholesky(mixture.covariances[z])
        diff = y - mixture.means[z]
        # Triangular back-substitution via inv(L); D stays small here.
        u = diff @ np.linalg.inv(chol).T
        maha = np.einsum("ij,ij->i", u, u)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        out[:, z] = (np.log(mixture.weights[z]) if mixture.weights[z] > 0 else -np.inf) \
            - 0.5 * (maha + log_det + d * np.log(2.0 * np.pi))
    return out


def _logsumexp_rows(logs: np.ndarray) -> np.ndarray:
    peak = logs.max(axis=1)
    safe = np.where(np.isfinite(peak), peak, 0.0)
    return safe + np.log(np.exp(logs - safe[:, None]).sum(axis=1))


def log_likelihood(y, mixture: GaussianMixture) -> float:
    y = _check_data(_as_matrix(y), mixture.dim)
    return float(_logsumexp_rows(_log_components(y, mixture)).sum())


def e_step(mixture: GaussianMixture, y) -> np.ndarray:
    """Responsibilities, rows normalized to sum to one exactly."""
    y = _check_data(_as_matrix(y), mixture.dim)
    logs = _log_components(y, mixture)
    logs -= _logsumexp_rows(logs)[:, None]
    resp = np.exp(logs)
    resp /= resp.sum(axis=1, keepdims=True)
    return resp


def m_step(y, resp: np.ndarray, ridge: float) -> GaussianMixture:
    """Weighted moment update with a ridge added to every covariance."""
    y = _as_matrix(y)
    resp = np.asarray(resp, dtype=float)
    n, d = y.shape
    if resp.shape[0] != n or resp.ndim != 2:
        raise InputError("responsibilities must be (N, K)")
    if ridge <= 0:
        raise InputError("ridge must be positive")
    counts = resp.sum(axis=0)
    if np.any(counts <= 0):
        raise InputError("every cluster needs positive soft count; reseed first")
    k = resp.shape[1]
    weights = counts / n
    means = (resp.T @ y) / counts[:, None]
    covs = np.empty((k, d, d))
    eye = ridge * np.eye(d)
    for z in range(k):
        diff = y - means[z]
        weighted = diff * resp[:, z, None]
        cov = (weighted.T @ diff) / counts[z]
        covs[z] = 0.5 * (cov + cov.T) + eye
    return GaussianMixture(weights, means, covs)


def _check_data(y: np.ndarray, dim: int | None = None) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise InputError(f"data must be a nonempty (N, D) matrix, got {y.shape}")
    if dim is not None and y.shape[1] != dim:
        raise InputError(f"data dimension {y.shape[1]} does not match mixture {dim}")
    if not np.all(np.isfinite(y)):
        raise InputError("data contains non-finite values")
    return y


def _kmeanspp_means(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = y.shape[0]
    chosen = [int(rng.integers(n))]
    dist2 = np.sum((y - y[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = dist2.sum()
        if total <= 0.0:
            chosen.append(int(rng.integers(n)))
        else:
            chosen.append(int(rng.choice(n, p=dist2 / total)))
        dist2 = np.minimum(dist2, np.sum((y - y[chosen[-1]]) ** 2, axis=1))
    return y[chosen].copy()


def _initial_mixture(y: np.ndarray, k: int, ridge: float,
                     rng: np.random.Generator) -> GaussianMixture:
    d = y.shape[1]
    global_cov = np.cov(y, rowvar=False, bias=True).reshape(d, d)
    global_cov = 0.5 * (global_cov + global_cov.T) + ridge * np.eye(d)
    means = _kmeanspp_means(y, k, rng)
    return GaussianMixture(np.full(k, 1.0 / k), means,
                           np.repeat(global_cov[None, :, :], k, axis=0))


def _reseed_starved(mixture: GaussianMixture, y: np.ndarray, starved: np.ndarray,
                    ridge: float) -> GaussianMixture:
    """Move starved clusters onto the least-explained points."""
    mix = mixture.copy()
    d = y.shape[1]
    global_cov = np.cov(y, rowvar=False, bias=True).reshape(d, d)
    global_cov = 0.5 * (global_cov + global_cov.T) + ridge * np.eye(d)
    order = np.argsort(_logsumexp_rows(_log_components(y, mixture)))
    for rank, z in enumerate(np.flatnonzero(starved)):
        mix.means[z] = y[order[rank % len(order)]]
        mix.covariances[z] = global_cov
        mix.weights[z] = 1.0 / mixture.n_components
    mix.weights /= mix.weights.sum()
    return mix


def fit(y, k: int, max_iters: int = 200, tol: float = 1e-7,
        seed: int = 0, ridge: float | None = None,
        init: GaussianMixture | None = None) -> FitResult:
    """Full EM loop. Deterministic given (y, k, seed).

    Iteration stops when the log-likelihood improvement drops below tol.
    The ridge added after each M-step can push the raw likelihood down by a
    hair on rank-deficient data; such a dip is treated as convergence and the
    pre-dip mixture is returned, so the recorded trace stays non-decreasing.
    Reseeding a starved cluster restarts EM from the modified mixture, and
    the trace documents that final run. ``init`` warm-starts from a previous
    mixture.
    """
    y = _check_data(_as_matrix(y))
    n = y.shape[0]
    if not 1 <= k <= n:
        raise InputError(f"need 1 <= K <= N, got K={k}, N={n}")
    if max_iters < 1:
        raise InputError("max_iters must be positive")
    eps = default_ridge(y) if ridge is None else float(ridge)
    if eps <= 0:
        raise InputError("ridge must be positive")
    rng = np.random.default_rng(seed)
    if init is not None:
        if init.n_components != k or init.dim != y.shape[1]:
            raise InputError("warm start shape does not match (K, D)")
        mixture = init.copy()
    else:
        mixture = _initial_mixture(y, k, eps, rng)

    trace: list[float] = []
    prev_ll = None
    prev_mixture = None
    reseeds = 0
    iters = 0
    while iters < max_iters:
        iters += 1
        logs = _log_components(y, mixture)
        ll = float(_logsumexp_rows(logs).sum())
        logs_n = logs - _logsumexp_rows(logs)[:, None]
        resp = np.exp(logs_n)
        resp /= resp.sum(axis=1, keepdims=True)
        counts = resp.sum(axis=0)
        starved = counts < STARVED_FRACTION * n
        if np.any(starved):
            mixture = _reseed_starved(mixture, y, starved, eps)
            reseeds += 1
            trace.clear()
            prev_ll = None
            prev_mixture = None
            continue
        if prev_ll is not None and ll < prev_ll:
            mixture = prev_mixture  # ridge dip: keep the better iterate
            break
        trace.append(ll)
        if prev_ll is not None and ll - prev_ll < tol:
            break
        prev_ll = ll
        prev_mixture = mixture
        mixture = m_step(y, resp, eps)
    final_resp = e_step(mixture, y)
    return FitResult(mixture, final_resp, trace, iters, reseeds)


def split_blocks(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Sigma', C, Sigma) blocks of one stacked 2m x 2m covariance matrix."""
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1] or omega.shape[0] % 2:
        raise InputError(f"expected a square even-dimensional matrix, got {omega.shape}")
    m = omega.shape[0] // 2
    return omega[:m, :m], omega[:m, m:], omega[m:, m:]


def extract_blocks(mixture: GaussianMixture, z: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Sigma'_z, C_z, Sigma_z) blocks of cluster z's stacked covariance."""
    if not 0 <= z < mixture.n_components:
        raise InputError(f"cluster index {z} out of range for K={mixture.n_components}")
    return split_blocks(mixture.covariances[z])


def sample_cluster(mixture: GaussianMixture, rng: np.random.Generator) -> int:
    """Draw z ~ Categorical(weights)."""
    return int(rng.choice(mixture.n_components, p=mixture.weights))


def effective_clusters(mixture: GaussianMixture, occupancy_threshold: float = 0.01) -> int:
    """Number of components whose weight reaches the occupancy threshold."""
    if not 0.0 < occupancy_threshold < 1.0:
        raise InputError("occupancy_threshold must lie in (0, 1)")
    return int(np.sum(mixture.weights >= occupancy_threshold))


def mixture_to_json(mixture: GaussianMixture) -> str:
    payload = {
        "K": mixture.n_components,
        "weights": [float(v) for v in mixture.weights],
        "means": [[float(v) for v in row] for row in mixture.means],
        "covariances": [[float(v) for v in cov.ravel(order="C")]
                        for cov in mixture.covariances],
    }
    return json.dumps(payload)


def mixture_from_json(text: str) -> GaussianMixture:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"mixture payload is not valid JSON: {exc}") from exc
    expected = {"K", "weights", "means", "covariances"}
    if not isinstance(payload, dict) or set(payload) != expected:
        raise FormatError(f"mixture payload must have exactly the keys {sorted(expected)}")
    k = payload["K"]
    if not isinstance(k, int) or k < 1:
        raise FormatError("K must be a positive integer")
    weights = np.array(payload["weights"], dtype=float)
    means = np.array(payload["means"], dtype=float)
    if weights.shape != (k,) or means.ndim != 2 or means.shape[0] != k:
        raise FormatError("weights/means shapes do not match K")
    d = means.shape[1]
    covs = payload["covariances"]
    if len(covs) != k or any(len(c) != d * d for c in covs):
        raise FormatError("covariances must hold K row-major D*D blocks")
    cov_arr = np.array(covs, dtype=float).reshape(k, d, d)
    try:
        return GaussianMixture(weights, means, cov_arr)
    except InputError as exc:
        raise FormatError(str(exc)) from exc
