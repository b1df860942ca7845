"""Dense ReLU MLP critic with exact reverse-mode gradients.

The critic maps a joint state-action vector to a scalar value. Everything is
plain numpy: forward passes, input gradients, parameter gradients, and the
EMA target update are all explicit, so results are bit-reproducible given a
seed and there is no hidden autodiff tape.

Convention fixed throughout: the ReLU subgradient at exactly 0 is 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InputError

Params = list[tuple[np.ndarray, np.ndarray]]


class MlpCritic:
    """Fully connected ReLU network with a linear scalar head.

    ``layers`` is a list of ``(W, b)`` pairs where ``W`` has shape
    ``(fan_out, fan_in)``. At least one hidden layer is required because the
    penultimate-feature surrogate needs a hidden activation to read.
    """

    def __init__(self, layers: Params):
        if len(layers) < 2:
            raise InputError("critic needs at least one hidden layer")
        arch = [layers[0][0].shape[1]]
        for i, (w, b) in enumerate(layers):
            w = np.asarray(w, dtype=float)
            b = np.asarray(b, dtype=float)
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise InputError(f"layer {i}: weight/bias shapes {w.shape}/{b.shape}")
            if w.shape[1] != arch[-1]:
                raise InputError(f"layer {i}: fan-in {w.shape[1]} != {arch[-1]}")
            arch.append(w.shape[0])
        if arch[-1] != 1:
            raise InputError("output head must be scalar")
        self.layers: Params = [(np.array(w, dtype=float), np.array(b, dtype=float))
                               for w, b in layers]
        self.arch = arch

    # ---------------------------------------------------------------- setup

    @classmethod
    def init(cls, input_dim: int, hidden: tuple[int, ...] = (32, 32),
             rng: np.random.Generator | None = None) -> "MlpCritic":
        """He-style Gaussian init, zero biases. Deterministic given ``rng``."""
        if input_dim < 1 or any(h < 1 for h in hidden) or len(hidden) < 1:
            raise InputError(f"bad architecture: input {input_dim}, hidden {hidden}")
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [input_dim, *hidden, 1]
        layers = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            layers.append((w, np.zeros(fan_out)))
        return cls(layers)

    def copy(self) -> "MlpCritic":
        return MlpCritic([(w.copy(), b.copy()) for w, b in self.layers])

    @property
    def input_dim(self) -> int:
        return self.arch[0]

    @property
    def feature_dim(self) -> int:
        """Width of the penultimate (last hidden) layer."""
        return self.arch[-2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MlpCritic):
            return NotImplemented
        return self.arch == other.arch and all(
            np.array_equal(w, w2) and np.array_equal(b, b2)
            for (w, b), (w2, b2) in zip(self.layers, other.layers))

    # -------------------------------------------------------------- forward

    def _check_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise InputError(f"expected (n, {self.input_dim}) inputs, got {x.shape}")
        return x

    def _forward_cached(self, x: np.ndarray):
        """Returns (values, activations, pre_activations).

        ``activations[0]`` is the input; ``activations[-1]`` the penultimate
        features. ``pre_activations`` has one entry per hidden layer.
        """
        acts = [x]
        pres = []
        h = x
        for w, b in self.layers[:-1]:
            z = h @ w.T + b
            pres.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        w_out, b_out = self.layers[-1]
        values = h @ w_out.T + b_out
        return values[:, 0], acts, pres

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Scalar critic values for a batch of joint inputs, shape (n,)."""
        return self._forward_cached(self._check_batch(x))[0]

    def forward(self, x: np.ndarray) -> float:
        """Critic value at a single joint input vector."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise InputError(f"expected a flat input vector, got shape {x.shape}")
        return float(self.forward_batch(x[None, :])[0])

    def penultimate_features_batch(self, x: np.ndarray) -> np.ndarray:
        """Last hidden activations, shape (n, feature_dim)."""
        _, acts, _ = self._forward_cached(self._check_batch(x))
        return acts[-1]

    def penultimate_features(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise InputError(f"expected a flat input vector, got shape {x.shape}")
        return self.penultimate_features_batch(x[None, :])[0]

    # ------------------------------------------------------------ gradients

    def input_gradient_batch(self, x: np.ndarray) -> np.ndarray:
        """dQ/dx for every row, shape (n, input_dim). Exact reverse pass."""
        x = self._check_batch(x)
        _, _, pres = self._forward_cached(x)
        w_out = self.layers[-1][0]
        g = np.repeat(w_out, x.shape[0], axis=0)  # (n, width of last hidden)
        for (w, _), z in zip(reversed(self.layers[:-1]), reversed(pres)):
            g = (g * (z > 0.0)) @ w
        return g

    def input_gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise InputError(f"expected a flat input vector, got shape {x.shape}")
        return self.input_gradient_batch(x[None, :])[0]

    def backprop(self, x: np.ndarray, grad_values: np.ndarray,
                 grad_features: np.ndarray | None = None) -> Params:
        """Parameter gradients given upstream gradients on a batch.

        ``grad_values[i]`` is dL/d(value_i); ``grad_features[i]`` optionally
        adds dL/d(penultimate_features_i). Both paths are accumulated in a
        single reverse pass, so a loss that touches the features directly
        (the cross-covariance penalty does) costs no extra forward work.
        """
        x = self._check_batch(x)
        n = x.shape[0]
        grad_values = np.asarray(grad_values, dtype=float)
        if grad_values.shape != (n,):
            raise InputError(f"grad_values must have shape ({n},)")
        _, acts, pres = self._forward_cached(x)
        feats = acts[-1]
        w_out, _ = self.layers[-1]

        grads: Params = [None] * len(self.layers)  # type: ignore[list-item]
        grads[-1] = (grad_values[None, :] @ feats, np.array([grad_values.sum()]))
        g = grad_values[:, None] * w_out  # gradient flowing into the features
        if grad_features is not None:
            grad_features = np.asarray(grad_features, dtype=float)
            if grad_features.shape != feats.shape:
                raise InputError(f"grad_features must have shape {feats.shape}")
            g = g + grad_features
        for i in range(len(self.layers) - 2, -1, -1):
            dz = g * (pres[i] > 0.0)
            grads[i] = (dz.T @ acts[i], dz.sum(axis=0))
            if i > 0:
                g = dz @ self.layers[i][0]
        return grads

    # -------------------------------------------------------- serialization

    def to_json(self) -> str:
        payload = {
            "arch": self.arch,
            "layers": [{"w": [float(v) for v in w.ravel(order="C")],
                        "b": [float(v) for v in b]} for w, b in self.layers],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "MlpCritic":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"critic payload is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or set(payload) != {"arch", "layers"}:
            raise FormatError("critic payload must have exactly the keys arch, layers")
        arch = payload["arch"]
        entries = payload["layers"]
        if (not isinstance(arch, list) or len(arch) < 3
                or not all(isinstance(d, int) and d > 0 for d in arch)):
            raise FormatError(f"bad arch {arch!r}")
        if not isinstance(entries, list) or len(entries) != len(arch) - 1:
            raise FormatError("layer count does not match arch")
        layers = []
        for i, entry in enumerate(entries):
            if not isinstance(entry, dict) or set(entry) != {"w", "b"}:
                raise FormatError(f"layer {i} must have exactly the keys w, b")
            fan_out, fan_in = arch[i + 1], arch[i]
            w, b = entry["w"], entry["b"]
            if len(w) != fan_out * fan_in or len(b) != fan_out:
                raise FormatError(f"layer {i}: got {len(w)} weights, "
                                  f"expected {fan_out * fan_in}")
            layers.append((np.array(w, dtype=float).reshape(fan_out, fan_in),
                           np.array(b, dtype=float)))
        return cls(layers)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "MlpCritic":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass
class TargetCritic:
    """Slow copy of an online critic, moved by exponential averaging."""

    net: MlpCritic
    ema_rate: float = 0.005

    def __post_init__(self):
        if not 0.0 < self.ema_rate <= 1.0:
            raise InputError(f"ema_rate must lie in (0, 1], got {self.ema_rate}")

    @classmethod
    def of(cls, online: MlpCritic, ema_rate: float = 0.005) -> "TargetCritic":
        return cls(online.copy(), ema_rate)

    def update(self, online: MlpCritic) -> None:
        ema_update(self.net, online, self.ema_rate)


def ema_update(target: MlpCritic, online: MlpCritic, rate: float) -> None:
    """In place: target <- rate * online + (1 - rate) * target."""
    if not 0.0 < rate <= 1.0:
        raise InputError(f"rate must lie in (0, 1], got {rate}")
    if target.arch != online.arch:
        raise InputError(f"arch mismatch: {target.arch} vs {online.arch}")
    for (tw, tb), (ow, ob) in zip(target.layers, online.layers):
        tw += rate * (ow - tw)
        tb += rate * (ob - tb)


def param_gradient(critic: MlpCritic, x: np.ndarray, loss_closure) -> tuple[float, Params]:
    """Exact parameter gradient of a scalar loss of the critic's outputs.

    ``loss_closure(values, features) -> (loss, grad_values, grad_features)``
    where ``grad_features`` may be None if the loss ignores the penultimate
    features. Returns ``(loss, grads)`` with ``grads`` shaped like the layers.
    """
    x = critic._check_batch(np.asarray(x, dtype=float))
    values, acts, _ = critic._forward_cached(x)
    loss, grad_values, grad_features = loss_closure(values, acts[-1])
    grads = critic.backprop(x, grad_values, grad_features)
    return float(loss), grads


def zeros_like_params(critic: MlpCritic) -> Params:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in critic.layers]


def add_scaled(params: Params, grads: Params, scale: float) -> None:
    """In place: params += scale * grads, layer by layer."""
    for (w, b), (gw, gb) in zip(params, grads):
        w += scale * gw
        b += scale * gb


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in params])
