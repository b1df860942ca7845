"""Instrumentation for the perturbation-variance decomposition of TD residuals.

Estimates the three directional moments A, B, C whose combination
gamma^2 k'^2 A + k^2 B - 2 gamma k k' C approximates Var[delta] under random
input perturbations, and cross-checks them against a direct Monte-Carlo
variance that actually perturbs the inputs. Also reports the cosine geometry
of the second-moment gradient split and small helpers used by the CLI
reports (normalized scores, PCA cluster projections).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .covstats import jacobi_svd
from .errors import InputError, NumericalError
from .gmm import StackedPairSet
from .nets import MlpCritic, TargetCritic, param_gradient

# Keeps the (replicates x batch) perturbation tensor within a few MB.
_REPLICATE_CHUNK = 512


def _as_net(critic) -> MlpCritic:
    return critic.net if isinstance(critic, TargetCritic) else critic


@dataclass(frozen=True)
class PerturbSpec:
    """Perturbation magnitudes and replicate count for directional probes.

    Directions are drawn uniformly on the unit sphere, one (w', w) pair per
    replicate, shared by every sample in the batch.
    """

    k: float
    k_prime: float
    n_directions: int

    def __post_init__(self):
        if self.k < 0 or self.k_prime < 0:
            raise InputError("displacement magnitudes must be nonnegative")
        if self.n_directions < 2:
            raise InputError("need at least 2 direction replicates")


def default_perturb_spec(features: np.ndarray, n_directions: int = 1000) -> PerturbSpec:
    """Magnitudes at 0.01 of the mean per-dimension feature deviation."""
    k = 0.01 * float(np.mean(np.std(np.asarray(features, dtype=float), axis=0)))
    return PerturbSpec(k=k, k_prime=k, n_directions=n_directions)


@dataclass(frozen=True)
class AbcEstimate:
    """Directional variance terms and their composed variance value.

    A = Var<w', g'>, B = Var<w, g>, C = Cov(<w', g'>, <w, g>), all over the
    joint (sample, replicate) cloud; composed may go negative at finite
    replicate counts through the cross term.
    """

    a: float
    b: float
    c: float
    composed: float

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise InputError("variance terms must be nonnegative")


def _draw_directions(rng: np.random.Generator, n_directions: int,
                     dim: int) -> tuple[np.ndarray, np.ndarray]:
    """One (w', w) unit-direction pair per replicate, target side first.

    Both probe estimators call this, so handing them generators with the same
    seed makes their direction clouds identical draw for draw.
    """
    w_prime = rng.standard_normal((n_directions, dim))
    w = rng.standard_normal((n_directions, dim))
    w_prime /= np.linalg.norm(w_prime, axis=1, keepdims=True)
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return w_prime, w


def _batch_inputs(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, x_prime = batch.joint_inputs()
    return x, x_prime, np.asarray(batch.r, dtype=float)


def estimate_abc(critic: MlpCritic, target: MlpCritic, batch, spec: PerturbSpec,
                 gamma: float, rng: np.random.Generator) -> AbcEstimate:
    """Monte-Carlo directional moments of the TD residual's variance split.

    Projections p'_{ir} = <w'_r, grad Q'(x'_i)> and p_{ir} = <w_r, grad
    Q(x_i)> are pooled over samples and replicates jointly; A, B, C are the
    population moments of that pooled cloud.
    """
    if len(batch) < 2:
        raise InputError("need at least 2 transitions")
    target = _as_net(target)
    x, x_prime, _ = _batch_inputs(batch)
    w_prime, w = _draw_directions(rng, spec.n_directions, x.shape[1])
    g_prime = target.input_gradient_batch(x_prime)
    g = critic.input_gradient_batch(x)
    proj_prime = (g_prime @ w_prime.T).ravel()
    proj = (g @ w.T).ravel()
    a = float(np.var(proj_prime))
    b = float(np.var(proj))
    c = float(np.mean(proj_prime * proj) - proj_prime.mean() * proj.mean())
    composed = (gamma * spec.k_prime) ** 2 * a + spec.k ** 2 * b \
        - 2.0 * gamma * spec.k * spec.k_prime * c
    return AbcEstimate(a=a, b=b, c=c, composed=composed)


def direct_var_delta(critic: MlpCritic, target: MlpCritic, batch,
                     spec: PerturbSpec, gamma: float,
                     rng: np.random.Generator) -> float:
    """Variance of the residual shift under actual input perturbations.

    Evaluates the networks at x + k w and x' + k' w' (no Taylor step),
    subtracts each sample's unperturbed residual so the base term drops out,
    and takes the population variance over the joint (sample, replicate)
    cloud. Rewards cancel in the differencing, so the result is invariant to
    constant reward shifts.
    """
    if len(batch) < 2:
        raise InputError("need at least 2 transitions")
    target = _as_net(target)
    x, x_prime, _ = _batch_inputs(batch)
    w_prime, w = _draw_directions(rng, spec.n_directions, x.shape[1])
    q_base = critic.forward_batch(x)
    qp_base = target.forward_batch(x_prime)
    n = x.shape[0]
    shifts = np.empty(spec.n_directions * n)
    for start in range(0, spec.n_directions, _REPLICATE_CHUNK):
        wp_c = w_prime[start:start + _REPLICATE_CHUNK]
        w_c = w[start:start + _REPLICATE_CHUNK]
        reps = wp_c.shape[0]
        xp_pert = (x_prime[None, :, :] + spec.k_prime * wp_c[:, None, :]).reshape(-1, x.shape[1])
        x_pert = (x[None, :, :] + spec.k * w_c[:, None, :]).reshape(-1, x.shape[1])
        dq_prime = target.forward_batch(xp_pert).reshape(reps, n) - qp_base
        dq = critic.forward_batch(x_pert).reshape(reps, n) - q_base
        shifts[start * n:(start + reps) * n] = (gamma * dq_prime - dq).ravel()
    return float(np.var(shifts))


def quadratic_form_variance(s1: np.ndarray, s2: np.ndarray, n_cross: np.ndarray,
                            g: np.ndarray, g_prime: np.ndarray,
                            gamma: float) -> float:
    """gamma^2 g'^T S2 g' + g^T S1 g - 2 gamma g'^T N g for block second moments."""
    s1 = np.atleast_2d(np.asarray(s1, dtype=float))
    s2 = np.atleast_2d(np.asarray(s2, dtype=float))
    n_cross = np.atleast_2d(np.asarray(n_cross, dtype=float))
    g = np.atleast_1d(np.asarray(g, dtype=float))
    g_prime = np.atleast_1d(np.asarray(g_prime, dtype=float))
    m = g.shape[0]
    mp = g_prime.shape[0]
    if s1.shape != (m, m) or s2.shape != (mp, mp) or n_cross.shape != (mp, m):
        raise InputError("block shapes do not match the gradient dimensions")
    return float(gamma * gamma * (g_prime @ s2 @ g_prime) + g @ s1 @ g
                 - 2.0 * gamma * (g_prime @ n_cross @ g))


class CosineReport(NamedTuple):
    """Cosines of the second-moment gradient against its two components.

    nan marks an undefined cosine (one of the gradients has zero norm).
    """

    cos_var: float
    cos_mean_sq: float


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return math.nan
    return float(u @ v) / (nu * nv)


def grad_cosine_report(critic: MlpCritic, target: MlpCritic, batch,
                       gamma: float) -> CosineReport:
    """Parameter-space cosine split of grad E[delta^2].

    The three scalars E[delta^2], (E delta)^2 and Var[delta] (population
    convention) differ only in the per-sample weights on dQ/dtheta, so each
    gradient is one backward pass. Their additive identity is checked to
    1e-10 before reporting.
    """
    if len(batch) < 2:
        raise InputError("need at least 2 transitions")
    target = _as_net(target)
    x, x_prime, r = _batch_inputs(batch)
    delta = r + gamma * (1.0 - batch.done) * target.forward_batch(x_prime) \
        - critic.forward_batch(x)
    n = delta.shape[0]
    mean = delta.mean()

    def flat_grad(weights: np.ndarray) -> np.ndarray:
        # d delta_i / d theta = -dQ(x_i)/d theta, folded into the weights
        _, grads = param_gradient(critic, x, lambda values, feats:
                                  (0.0, -weights, None))
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    grad_sq = flat_grad(2.0 * delta / n)
    grad_mean_sq = flat_grad(np.full(n, 2.0 * mean / n))
    grad_var = flat_grad(2.0 * (delta - mean) / n)
    gap = np.max(np.abs(grad_sq - grad_mean_sq - grad_var))
    if gap >= 1e-10:
        raise NumericalError(f"gradient identity violated by {gap:.3e}")
    return CosineReport(cos_var=_cosine(grad_sq, grad_var),
                        cos_mean_sq=_cosine(grad_sq, grad_mean_sq))


def normalized_score(score: float, random_score: float, expert_score: float) -> float:
    """100 * (score - random) / (expert - random)."""
    if expert_score == random_score:
        raise InputError("expert and random reference scores must differ")
    return 100.0 * (score - random_score) / (expert_score - random_score)


def pca_project(pairs: StackedPairSet | np.ndarray, dims: int = 2) -> np.ndarray:
    """Centered projection onto the top right singular vectors.

    Column variances of the output come out in descending order because the
    singular values do.
    """
    y = pairs.matrix if isinstance(pairs, StackedPairSet) else np.asarray(pairs, dtype=float)
    if y.ndim != 2 or y.shape[0] < 2:
        raise InputError("need a matrix with at least 2 rows")
    if not 1 <= dims <= y.shape[1]:
        raise InputError(f"dims must lie in [1, {y.shape[1]}]")
    centered = y - y.mean(axis=0)
    _, _, vt = jacobi_svd(centered)
    return centered @ vt[:dims].T
