"""Offline transition datasets for a small point-mass control task.

The task is deliberately tiny: states and actions live in Euclidean balls
(``||s|| <= box_radius``, ``||a|| <= action_bound``), the dynamics are
``s' = clip(s + 0.1 a)``, and the reward is ``-||s||^2 - 0.1 ||a||^2``.
Norm clipping (not per-coordinate) keeps the reward bound
``-(box_radius^2 + 0.1 action_bound^2) <= r <= 0`` exact.

Behavior data comes from an M-mode Gaussian action mixture, one mode drawn
per trajectory, and the next action is the behavior's actually-taken one, so
consecutive rows of a trajectory form SARSA pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError, ParseError

STEP_GAIN = 0.1
ACTION_COST = 0.1


def _clip_norm(v: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm <= radius or norm == 0.0:
        return v
    return v * (radius / norm)


@dataclass(frozen=True)
class EnvSpec:
    """Point-mass task plus the Gaussian behavior mixture that explores it."""

    ds: int = 2
    da: int = 2
    env_name: str = "pointmass"
    horizon: int = 40
    box_radius: float = 1.0
    action_bound: float = 1.0
    mode_means: tuple[tuple[float, ...], ...] = ((0.0, 0.0),)
    mode_covs: tuple[tuple[tuple[float, ...], ...], ...] = (((0.01, 0.0), (0.0, 0.01)),)
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.ds < 1 or self.da < 1 or self.horizon < 1:
            raise InputError("ds, da and horizon must be positive")
        if self.box_radius <= 0 or self.action_bound <= 0:
            raise InputError("box_radius and action_bound must be positive")
        if self.noise_scale < 0:
            raise InputError("noise_scale must be nonnegative")
        if len(self.mode_means) != len(self.mode_covs) or not self.mode_means:
            raise InputError("need one covariance per behavior mode")
        for mu, cov in zip(self.mode_means, self.mode_covs):
            c = np.asarray(cov, dtype=float)
            if len(mu) != self.da or c.shape != (self.da, self.da):
                raise InputError("behavior mode shapes must match da")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError as exc:
                raise InputError("behavior mode covariance must be PD") from exc

    @property
    def n_modes(self) -> int:
        return len(self.mode_means)

    @classmethod
    def with_circular_modes(cls, n_modes: int, mode_radius: float = 0.6,
                            mode_std: float = 0.05, **kwargs) -> "EnvSpec":
        """Behavior modes evenly spaced on a circle in the action plane."""
        da = kwargs.get("da", 2)
        if da < 2:
            raise InputError("circular mode placement needs da >= 2")
        means = []
        for j in range(n_modes):
            angle = 2.0 * np.pi * j / n_modes
            mu = np.zeros(da)
            mu[0] = mode_radius * np.cos(angle)
            mu[1] = mode_radius * np.sin(angle)
            means.append(tuple(float(v) for v in mu))
        cov = tuple(tuple(float(v) for v in row) for row in mode_std ** 2 * np.eye(da))
        return cls(mode_means=tuple(means), mode_covs=tuple(cov for _ in range(n_modes)),
                   **kwargs)

    def reward(self, s: np.ndarray, a: np.ndarray) -> float:
        return float(-(s @ s) - ACTION_COST * (a @ a))

    def step(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Deterministic dynamics; replaying (s, a) reproduces s_next exactly."""
        return _clip_norm(np.asarray(s, dtype=float) + STEP_GAIN * np.asarray(a, dtype=float),
                          self.box_radius)

    def sample_action(self, mode: int, rng: np.random.Generator) -> np.ndarray:
        mu = np.asarray(self.mode_means[mode], dtype=float)
        chol = np.linalg.cholesky(np.asarray(self.mode_covs[mode], dtype=float))
        a = mu + self.noise_scale * (chol @ rng.standard_normal(self.da))
        return _clip_norm(a, self.action_bound)

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from the state ball."""
        direction = rng.standard_normal(self.ds)
        direction /= np.linalg.norm(direction)
        radius = self.box_radius * rng.uniform() ** (1.0 / self.ds)
        return radius * direction


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    a_next: np.ndarray
    done: bool

    def __eq__(self, other) -> bool:
        if not isinstance(other, Transition):
            return NotImplemented
        return (np.array_equal(self.s, other.s) and np.array_equal(self.a, other.a)
                and self.r == other.r and np.array_equal(self.s_next, other.s_next)
                and np.array_equal(self.a_next, other.a_next) and self.done == other.done)


@dataclass
class OfflineDataset:
    """Column-major bag of transitions plus the header describing its origin."""

    ds: int
    da: int
    env_name: str
    n_modes: int
    seed: int
    s: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    r: np.ndarray = field(repr=False)
    s_next: np.ndarray = field(repr=False)
    a_next: np.ndarray = field(repr=False)
    done: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = len(self.r)
        shapes = {"s": (n, self.ds), "a": (n, self.da), "s_next": (n, self.ds),
                  "a_next": (n, self.da)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise InputError(f"{name} must have shape {shape}")
        if self.done.shape != (n,) or self.done.dtype != bool:
            raise InputError("done must be a boolean vector")

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]),
                          self.s_next[i], self.a_next[i], bool(self.done[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        header_eq = (self.ds, self.da, self.env_name, self.n_modes, self.seed) == \
                    (other.ds, other.da, other.env_name, other.n_modes, other.seed)
        return header_eq and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("s", "a", "r", "s_next", "a_next", "done"))

    def joint_inputs(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, x') pairs where x = concat(s, a) and x' = concat(s', a')."""
        return (np.concatenate([self.s, self.a], axis=1),
                np.concatenate([self.s_next, self.a_next], axis=1))

    def take(self, idx: np.ndarray) -> "OfflineDataset":
        return OfflineDataset(self.ds, self.da, self.env_name, self.n_modes, self.seed,
                              self.s[idx], self.a[idx], self.r[idx],
                              self.s_next[idx], self.a_next[idx], self.done[idx])


def generate(spec: EnvSpec, n_trajectories: int, seed: int) -> OfflineDataset:
    """Roll n_trajectories full episodes under the behavior mixture.

    One behavior mode is drawn per trajectory (uniformly). The final step of
    each trajectory is marked done; its a_next slot is a zero vector and is
    never consumed because targets bootstrap with (1 - done).
    """
    if n_trajectories < 1:
        raise InputError("n_trajectories must be positive")
    rng = np.random.default_rng(seed)
    rows_s, rows_a, rows_r, rows_sn, rows_an, rows_done = [], [], [], [], [], []
    for _ in range(n_trajectories):
        mode = int(rng.integers(spec.n_modes))
        states = [spec.sample_initial_state(rng)]
        actions = []
        for _ in range(spec.horizon):
            actions.append(spec.sample_action(mode, rng))
            states.append(spec.step(states[-1], actions[-1]))
        for t in range(spec.horizon):
            last = t == spec.horizon - 1
            rows_s.append(states[t])
            rows_a.append(actions[t])
            rows_r.append(spec.reward(states[t], actions[t]))
            rows_sn.append(states[t + 1])
            rows_an.append(np.zeros(spec.da) if last else actions[t + 1])
            rows_done.append(last)
    return OfflineDataset(spec.ds, spec.da, spec.env_name, spec.n_modes, seed,
                          np.array(rows_s), np.array(rows_a),
                          np.array(rows_r), np.array(rows_sn),
                          np.array(rows_an), np.array(rows_done, dtype=bool))


def subsample(dataset: OfflineDataset, n: int, seed: int) -> OfflineDataset:
    """Uniform subsample without replacement, original row order kept."""
    if not 1 <= n <= len(dataset):
        raise InputError(f"cannot take {n} of {len(dataset)} transitions")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(dataset), size=n, replace=False))
    return dataset.take(idx)


# ------------------------------------------------------------------- JSONL

_HEADER_KEYS = {"ds": int, "da": int, "env": str, "modes": int, "seed": int}
_ROW_KEYS = {"s", "a", "r", "sn", "an", "done"}


def save_jsonl(dataset: OfflineDataset, path: str) -> None:
    """One header line, then one JSON object per transition.

    Floats are emitted with repr precision, so a load after save reproduces
    every bit.
    """
    with open(path, "w", encoding="utf-8") as fh:
        header = {"ds": dataset.ds, "da": dataset.da, "env": dataset.env_name,
                  "modes": dataset.n_modes, "seed": dataset.seed}
        fh.write(json.dumps(header) + "\n")
        for i in range(len(dataset)):
            row = {"s": [float(v) for v in dataset.s[i]],
                   "a": [float(v) for v in dataset.a[i]],
                   "r": float(dataset.r[i]),
                   "sn": [float(v) for v in dataset.s_next[i]],
                   "an": [float(v) for v in dataset.a_next[i]],
                   "done": bool(dataset.done[i])}
            fh.write(json.dumps(row) + "\n")


def _float_vector(value, length: int, line: int, key: str) -> list[float]:
    if (not isinstance(value, list) or len(value) != length
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise ParseError(line, f"field {key!r} must be a list of {length} numbers")
    return [float(v) for v in value]


def load_jsonl(path: str) -> OfflineDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"header is not valid JSON: {exc.msg}") from exc
    if not isinstance(header, dict) or set(header) != set(_HEADER_KEYS):
        raise ParseError(1, f"header must have exactly the keys {sorted(_HEADER_KEYS)}")
    for key, typ in _HEADER_KEYS.items():
        if not isinstance(header[key], typ) or (typ is int and isinstance(header[key], bool)):
            raise ParseError(1, f"header field {key!r} must be {typ.__name__}")
    ds, da = header["ds"], header["da"]
    if ds < 1 or da < 1:
        raise ParseError(1, "header dimensions must be positive")

    cols: dict[str, list] = {k: [] for k in _ROW_KEYS}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            raise ParseError(lineno, "blank line")
        try:
            row = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"not valid JSON: {exc.msg}") from exc
        if not isinstance(row, dict) or set(row) != _ROW_KEYS:
            raise ParseError(lineno, f"row must have exactly the keys {sorted(_ROW_KEYS)}")
        cols["s"].append(_float_vector(row["s"], ds, lineno, "s"))
        cols["a"].append(_float_vector(row["a"], da, lineno, "a"))
        cols["sn"].append(_float_vector(row["sn"], ds, lineno, "sn"))
        cols["an"].append(_float_vector(row["an"], da, lineno, "an"))
        if not isinstance(row["r"], (int, float)) or isinstance(row["r"], bool):
            raise ParseError(lineno, "field 'r' must be a number")
        if not isinstance(row["done"], bool):
            raise ParseError(lineno, "field 'done' must be a boolean")
        cols["r"].append(float(row["r"]))
        cols["done"].append(row["done"])
    if not cols["r"]:
        raise FormatError("dataset has a header but no transitions")
    return OfflineDataset(ds, da, header["env"], header["modes"], header["seed"],
                          np.array(cols["s"]), np.array(cols["a"]), np.array(cols["r"]),
                          np.array(cols["sn"]), np.array(cols["an"]),
                          np.array(cols["done"], dtype=bool))
