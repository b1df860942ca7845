"""TD critic training with single-cluster minibatches and a cross-covariance penalty.

Each step draws one cluster from the current mixture, samples a minibatch
with that cluster's responsibilities as weights, and descends the TD loss
plus a penalty on the batch cross-covariance between target-side and
online-side feature rows. Clusters are refit periodically from stacked
gradient pairs. A baseline mode with uniform batches and no penalty shares
every other code path, so ablations are paired step for step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import gmm
from .covstats import cross_cov, normalized_trace, penalty
from .data import EnvSpec, OfflineDataset
from .errors import InputError, NumericalError, ParseError
from .gmm import GaussianMixture, StackedPairSet
from .nets import MlpCritic, Params, TargetCritic, add_scaled

FEATURE_MODES = ("surrogate", "exact_input_grad")
OPTIMIZERS = ("sgd", "adam")

METRIC_COLUMNS = ("step", "td_loss", "penalty", "objective",
                  "tr_n_sample_convention", "active_cluster",
                  "cluster_occupancy_entropy", "eval_return")


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run; defaults follow the reference setup."""

    steps: int
    gamma: float = 0.99
    penalty_weight: float = 0.3
    penalty_trace_weight: float = 0.0
    n_clusters: int = 5
    refresh_period: int = 200
    batch_size: int = 256
    ema_rate: float = 0.005
    learning_rate: float = 3e-4
    ridge: float | None = None
    seed: int = 0
    feature_mode: str = "surrogate"
    baseline_mode: bool = False
    optimizer: str = "sgd"
    hidden: tuple[int, ...] = (32, 32)
    probe_size: int | None = None
    em_max_iters: int = 50
    em_warm_iters: int = 10
    em_tol: float = 1e-6
    full_refit: bool = False
    eval_env: EnvSpec | None = None
    eval_every: int = 2000
    eval_episodes: int = 4
    check_identities: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise InputError("steps must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise InputError("gamma must lie in [0, 1)")
        if self.penalty_weight < 0:
            raise InputError("penalty_weight must be nonnegative")
        if self.refresh_period < 1:
            raise InputError("refresh_period must be at least 1")
        if self.batch_size < 2:
            raise InputError("batch_size must be at least 2")
        if self.n_clusters < 1:
            raise InputError("n_clusters must be at least 1")
        if not 0.0 < self.ema_rate <= 1.0:
            raise InputError("ema_rate must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be positive")
        if self.feature_mode not in FEATURE_MODES:
            raise InputError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise InputError(f"optimizer must be one of {OPTIMIZERS}")
        if self.probe_size is not None and self.probe_size < 2:
            raise InputError("probe_size must be at least 2")
        if self.eval_every < 1:
            raise InputError("eval_every must be at least 1")


@dataclass
class MetricRecord:
    step: int
    td_loss: float
    penalty: float
    objective: float
    tr_n_sample_convention: float
    active_cluster: int
    cluster_occupancy_entropy: float
    eval_return: float | None = None

    def as_row(self) -> list:
        return [self.step, repr(self.td_loss), repr(self.penalty),
                repr(self.objective), repr(self.tr_n_sample_convention),
                self.active_cluster, repr(self.cluster_occupancy_entropy),
                "" if self.eval_return is None else repr(self.eval_return)]


class RngStreams(NamedTuple):
    """Independent child generators; the split keeps the baseline paired.

    EM and cluster draws consume only their own streams, so turning
    clustering off cannot shift batch sampling or evaluation.
    """

    init: np.random.Generator
    em: np.random.Generator
    cluster: np.random.Generator
    batch: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        return cls(*np.random.default_rng(seed).spawn(5))


@dataclass
class TrainerState:
    online: MlpCritic
    target: TargetCritic
    mixture: GaussianMixture | None
    responsibilities: np.ndarray
    step: int
    rngs: RngStreams
    metrics: list[MetricRecord] = field(default_factory=list)
    visit_counts: np.ndarray | None = None
    identity_residual_max: float = 0.0
    zero_mass_redraws: int = 0


def _target_net(target) -> MlpCritic:
    return target.net if isinstance(target, TargetCritic) else target


def td_targets(batch: OfflineDataset, target, gamma: float) -> np.ndarray:
    """y_i = r_i + gamma (1 - done_i) Q'(s'_i, a'_i) with the logged next action."""
    if len(batch) == 0:
        raise InputError("batch must be nonempty")
    if not 0.0 <= gamma < 1.0:
        raise InputError("gamma must lie in [0, 1)")
    _, x_prime = batch.joint_inputs()
    return batch.r + gamma * (1.0 - batch.done) * _target_net(target).forward_batch(x_prime)


def td_loss(critic: MlpCritic, batch: OfflineDataset, targets: np.ndarray) -> float:
    """Mean squared TD residual against precomputed targets."""
    x, _ = batch.joint_inputs()
    delta = critic.forward_batch(x) - np.asarray(targets, dtype=float)
    return float(np.mean(delta * delta))


def gradient_pairs(critic: MlpCritic, target, batch: OfflineDataset,
                   feature_mode: str = "surrogate") -> tuple[np.ndarray, np.ndarray]:
    """Stacked feature rows (Gp from the target at x', G from the online at x)."""
    if feature_mode not in FEATURE_MODES:
        raise InputError(f"feature_mode must be one of {FEATURE_MODES}")
    if len(batch) == 0:
        raise InputError("batch must be nonempty")
    x, x_prime = batch.joint_inputs()
    tnet = _target_net(target)
    if feature_mode == "surrogate":
        return tnet.penultimate_features_batch(x_prime), critic.penultimate_features_batch(x)
    return tnet.input_gradient_batch(x_prime), critic.input_gradient_batch(x)


class _StepReport(NamedTuple):
    objective: float
    td: float
    penalty_part: float
    tr_n: float
    grads: Params | None
    delta: np.ndarray


def _objective_report(critic: MlpCritic, target, batch: OfflineDataset,
                      cfg: TrainConfig, with_grads: bool) -> _StepReport:
    """TD loss, penalty, and (optionally) the fused parameter gradient.

    The penalty is built on penultimate features on both sides regardless of
    cfg.feature_mode: differentiating an input-gradient penalty w.r.t.
    parameters would need a second backward pass, which the training path
    excludes. Target-side rows are constants (the target is not optimized),
    so the gradient flows only through the online rows.
    """
    n = len(batch)
    if n < 2:
        raise InputError("cross-covariance centering needs at least 2 rows")
    x, x_prime = batch.joint_inputs()
    tnet = _target_net(target)
    q_prime = tnet.forward_batch(x_prime)
    targets = batch.r + cfg.gamma * (1.0 - batch.done) * q_prime
    values, acts, _ = critic._forward_cached(critic._check_batch(x))
    feats = acts[-1]
    delta = values - targets
    td = float(np.mean(delta * delta))

    g_prime = tnet.penultimate_features_batch(x_prime)
    estimate = cross_cov(g_prime, feats, convention="sample")
    c_hat = estimate.matrix
    trace_c = float(np.trace(c_hat))
    pen_raw = penalty(estimate, cfg.penalty_trace_weight)
    lam = 0.0 if cfg.baseline_mode else cfg.penalty_weight
    pen_part = lam * pen_raw
    objective = td + pen_part
    tr_n = normalized_trace(c_hat, c_hat.shape[0])

    grads = None
    if with_grads:
        grad_values = 2.0 * delta / n
        grad_features = None
        if lam != 0.0:
            # d penalty / d G = 2a Gp_c (C + beta tr(C) I); the centering of G
            # contributes nothing because Gp_c's columns sum to zero.
            m = c_hat.shape[0]
            g_prime_c = g_prime - g_prime.mean(axis=0)
            a = 1.0 / (n - 1)
            grad_features = lam * 2.0 * a * (
                g_prime_c @ (c_hat + cfg.penalty_trace_weight * trace_c * np.eye(m)))
        grads = critic.backprop(x, grad_values, grad_features)
    return _StepReport(objective, td, pen_part, tr_n, grads, delta)


def batch_objective(critic: MlpCritic, target, batch: OfflineDataset,
                    cfg: TrainConfig) -> tuple[float, dict]:
    """Penalized objective value with its additive parts {td, penalty}."""
    rep = _objective_report(critic, target, batch, cfg, with_grads=False)
    return rep.objective, {"td": rep.td, "penalty": rep.penalty_part}


def single_cluster_batch(responsibilities: np.ndarray, z: int, batch_size: int,
                         rng: np.random.Generator) -> np.ndarray:
    """batch_size indices drawn with replacement, probability prop. to r_iz."""
    resp = np.asarray(responsibilities, dtype=float)
    if resp.ndim != 2 or not 0 <= z < resp.shape[1]:
        raise InputError("responsibilities must be 2-D with a valid column z")
    mass = resp[:, z].sum()
    if mass <= 0.0:
        raise InputError(f"cluster {z} carries no responsibility mass")
    return rng.choice(resp.shape[0], size=batch_size, replace=True,
                      p=resp[:, z] / mass)


def refresh_clusters(state: TrainerState, dataset: OfflineDataset,
                     cfg: TrainConfig) -> TrainerState:
    """Refit the mixture on stacked gradient pairs and refresh responsibilities.

    Fitting runs on a probe subsample when cfg.probe_size is set; the stored
    responsibilities always cover the full dataset so batch sampling can
    reach every transition. Warm starts reuse the previous mixture whenever
    the feature dimension is unchanged.
    """
    g_prime, g = gradient_pairs(state.online, state.target, dataset, cfg.feature_mode)
    pairs = StackedPairSet.from_pairs(g_prime, g)
    y = pairs.matrix
    fit_rows = y
    if cfg.probe_size is not None and cfg.probe_size < y.shape[0]:
        pick = state.rngs.em.choice(y.shape[0], size=cfg.probe_size, replace=False)
        fit_rows = y[np.sort(pick)]
    warm = (not cfg.full_refit and state.mixture is not None
            and state.mixture.dim == y.shape[1]
            and state.mixture.n_components == cfg.n_clusters)
    result = gmm.fit(fit_rows, cfg.n_clusters,
                     max_iters=cfg.em_warm_iters if warm else cfg.em_max_iters,
                     tol=cfg.em_tol,
                     seed=int(state.rngs.em.integers(2 ** 63)),
                     ridge=cfg.ridge,
                     init=state.mixture if warm else None)
    mixture = result.mixture
    responsibilities = gmm.e_step(mixture, y)
    return replace(state, mixture=mixture, responsibilities=responsibilities,
                   visit_counts=np.zeros(cfg.n_clusters))


class _Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def apply(self, params: Params, grads: Params) -> None:
        add_scaled(params, grads, -self.lr)


class _Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: Params | None = None
        self.v: Params | None = None

    def apply(self, params: Params, grads: Params) -> None:
        if self.m is None:
            self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
            self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
        self.t += 1
        scale = self.lr * math.sqrt(1.0 - self.b2 ** self.t) / (1.0 - self.b1 ** self.t)
        for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(params, grads, self.m, self.v):
            for p, g, m_, v_ in ((w, gw, mw, vw), (b, gb, mb, vb)):
                m_ *= self.b1
                m_ += (1.0 - self.b1) * g
                v_ *= self.b2
                v_ += (1.0 - self.b2) * g * g
                p -= scale * m_ / (np.sqrt(v_) + self.eps)


def _make_optimizer(cfg: TrainConfig):
    return _Sgd(cfg.learning_rate) if cfg.optimizer == "sgd" else _Adam(cfg.learning_rate)


def _occupancy_entropy(counts: np.ndarray) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log(p)))


def _check_step_identities(state: TrainerState, delta: np.ndarray,
                           x: np.ndarray, critic: MlpCritic) -> None:
    """Per-batch second-moment identity and its parameter-gradient split."""
    n = delta.shape[0]
    mean = float(delta.mean())
    var = float(np.mean((delta - mean) ** 2))
    residual = abs(float(np.mean(delta * delta)) - (mean * mean + var))
    state.identity_residual_max = max(state.identity_residual_max, residual)
    if residual >= 1e-12:
        raise NumericalError(f"second-moment identity violated by {residual:.3e}")
    g_sq = critic.backprop(x, 2.0 * delta / n, None)
    g_mean = critic.backprop(x, np.full(n, 2.0 * mean / n), None)
    g_var = critic.backprop(x, 2.0 * (delta - mean) / n, None)
    worst = 0.0
    for (aw, ab), (bw, bb), (cw, cb) in zip(g_sq, g_mean, g_var):
        worst = max(worst, float(np.max(np.abs(aw - bw - cw))),
                    float(np.max(np.abs(ab - bb - cb))))
    if worst >= 1e-10:
        raise NumericalError(f"gradient identity violated by {worst:.3e}")


def _greedy_action(critic: MlpCritic, state_vec: np.ndarray, env: EnvSpec) -> np.ndarray:
    """Best action over a ball grid, refined by projected gradient ascent."""
    da, bound = env.da, env.action_bound
    candidates = [np.zeros(da)]
    if da == 2:
        for frac in (0.35, 0.7, 1.0):
            for ang in np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False):
                candidates.append(frac * bound * np.array([np.cos(ang), np.sin(ang)]))
    else:
        for frac in (0.35, 0.7, 1.0):
            for j in range(da):
                e = np.zeros(da)
                e[j] = frac * bound
                candidates.extend((e, -e))
    cand = np.stack(candidates)
    joint = np.concatenate([np.repeat(state_vec[None, :], cand.shape[0], axis=0), cand],
                           axis=1)
    values = critic.forward_batch(joint)
    best = cand[int(np.argmax(values))]
    best_val = float(values.max())
    ds = state_vec.shape[0]
    a = best.copy()
    step_len = 0.3 * bound
    for _ in range(8):
        x = np.concatenate([state_vec, a])[None, :]
        grad_a = critic.input_gradient_batch(x)[0, ds:]
        norm = float(np.linalg.norm(grad_a))
        if norm == 0.0:
            break
        trial = a + step_len * grad_a / norm
        t_norm = float(np.linalg.norm(trial))
        if t_norm > bound:
            trial = trial * (bound / t_norm)
        val = critic.forward(np.concatenate([state_vec, trial]))
        if val > best_val:
            best_val, a = val, trial
        else:
            step_len *= 0.5
    return a


def _eval_return(critic: MlpCritic, env: EnvSpec, episodes: int,
                 rng: np.random.Generator) -> float:
    total = 0.0
    for _ in range(episodes):
        s = env.sample_initial_state(rng)
        ep = 0.0
        for _ in range(env.horizon):
            a = _greedy_action(critic, s, env)
            ep += env.reward(s, a)
            s = env.step(s, a)
        total += ep
    return total / episodes


def train(dataset: OfflineDataset, cfg: TrainConfig,
          on_refresh=None) -> tuple[MlpCritic, list[MetricRecord]]:
    """Run the training loop and return the online critic with its metric log.

    Identical (dataset, cfg) pairs reproduce bit-identical logs. With
    penalty_weight=0 and n_clusters=1 the run is bit-identical to
    baseline_mode because both draw batches through the same weighted-choice
    call with an all-uniform weight column, and clustering consumes only its
    own random streams. ``on_refresh(step, mixture)`` is invoked after every
    cluster refresh (step 0 included).
    """
    if len(dataset) == 0:
        raise InputError("dataset must be nonempty")
    rngs = RngStreams.from_seed(cfg.seed)
    online = MlpCritic.init(dataset.ds + dataset.da, cfg.hidden, rngs.init)
    target = TargetCritic.of(online, cfg.ema_rate)
    n_clusters = 1 if cfg.baseline_mode else cfg.n_clusters
    state = TrainerState(online=online, target=target, mixture=None,
                         responsibilities=np.ones((len(dataset), 1)),
                         step=0, rngs=rngs, visit_counts=np.zeros(n_clusters))
    if not cfg.baseline_mode:
        state = refresh_clusters(state, dataset, cfg)
        if on_refresh is not None:
            on_refresh(0, state.mixture)
    optimizer = _make_optimizer(cfg)

    for step in range(1, cfg.steps + 1):
        state.step = step
        if not cfg.baseline_mode and step % cfg.refresh_period == 0:
            state = refresh_clusters(state, dataset, cfg)
            state.step = step
            if on_refresh is not None:
                on_refresh(step, state.mixture)
        if cfg.baseline_mode:
            z = 0
        else:
            z = gmm.sample_cluster(state.mixture, state.rngs.cluster)
            while state.responsibilities[:, z].sum() <= 0.0:
                state.zero_mass_redraws += 1
                z = gmm.sample_cluster(state.mixture, state.rngs.cluster)
        idx = single_cluster_batch(state.responsibilities, z, cfg.batch_size,
                                   state.rngs.batch)
        batch = dataset.take(idx)
        rep = _objective_report(state.online, state.target, batch, cfg, with_grads=True)
        if cfg.check_identities:
            x, _ = batch.joint_inputs()
            _check_step_identities(state, rep.delta, x, state.online)
        optimizer.apply(state.online.layers, rep.grads)
        state.target.update(state.online)
        state.visit_counts[z] += 1
        eval_ret = None
        if cfg.eval_env is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            eval_ret = _eval_return(state.online, cfg.eval_env, cfg.eval_episodes,
                                    state.rngs.eval)
        state.metrics.append(MetricRecord(
            step=step, td_loss=rep.td, penalty=rep.penalty_part,
            objective=rep.objective, tr_n_sample_convention=rep.tr_n,
            active_cluster=z,
            cluster_occupancy_entropy=_occupancy_entropy(state.visit_counts),
            eval_return=eval_ret))
    return state.online, state.metrics


def metrics_to_csv(records: list[MetricRecord], path) -> None:
    """Write the metric log; zero records still produce the header row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in records:
            writer.writerow(rec.as_row())


def metrics_from_csv(path) -> list[dict]:
    """Rows as dicts with floats parsed; empty eval cells become None.

    Raises ParseError carrying the 1-based line number of the first
    malformed row (header is line 1).
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != list(METRIC_COLUMNS):
            raise ParseError(1, f"unexpected metrics header in {path}")
        for raw in reader:
            if None in raw or any(v is None for v in raw.values()):
                raise ParseError(reader.line_num, "wrong number of fields")
            try:
                row = {"step": int(raw["step"]),
                       "active_cluster": int(raw["active_cluster"]),
                       "eval_return": None if raw["eval_return"] == ""
                       else float(raw["eval_return"])}
                for key in ("td_loss", "penalty", "objective",
                            "tr_n_sample_convention", "cluster_occupancy_entropy"):
                    row[key] = float(raw[key])
            except ValueError as exc:
                raise ParseError(reader.line_num, str(exc)) from exc
            rows.append(row)
    return rows
