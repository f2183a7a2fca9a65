"""Behavior-cloning baseline: a small tanh MLP fit to (state, control) pairs with AdamW."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chain_policy import RolloutRecord
from .dynamics import DEFAULT_DT, SystemModel, TargetSpec, rk4_step
from .errors import ConfigurationError

FORMAT_VERSION = 1
HIDDEN = (24, 24, 16)


@dataclass
class MlpParams:
    sizes: tuple
    weights: list  # weights[i] has shape (sizes[i], sizes[i+1])
    biases: list
    mean: np.ndarray
    std: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    losses: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "version": FORMAT_VERSION,
            "sizes": list(self.sizes),
            "normalization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "input_box": [self.u_lo.tolist(), self.u_hi.tolist()],
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in zip(self.weights, self.biases)],
        })

    @classmethod
    def from_json(cls, text: str) -> "MlpParams":
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported params version {doc.get('version')}")
        return cls(
            tuple(doc["sizes"]),
            [np.array(layer["w"], dtype=float) for layer in doc["layers"]],
            [np.array(layer["b"], dtype=float) for layer in doc["layers"]],
            np.array(doc["normalization"]["mean"], dtype=float),
            np.array(doc["normalization"]["std"], dtype=float),
            np.array(doc["input_box"][0], dtype=float),
            np.array(doc["input_box"][1], dtype=float),
        )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1.2e-3
    weight_decay: float = 5e-4
    epochs: int = 40
    batch: int = 64
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr > 0 and self.weight_decay >= 0 and self.epochs > 0 and self.batch > 0):
            raise ConfigurationError("training hyperparameters must be positive")


def init_params(n: int, m: int, rng: np.random.Generator, input_box: np.ndarray, hidden=HIDDEN) -> MlpParams:
    sizes = (n, *hidden, m)
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-lim, lim, size=(a, b)))
        biases.append(np.zeros(b))
    input_box = np.asarray(input_box, dtype=float)
    return MlpParams(sizes, weights, biases, np.zeros(n), np.ones(n), input_box[:, 0].copy(), input_box[:, 1].copy())


def _forward_cache(params: MlpParams, x: np.ndarray):
    h = (np.atleast_2d(x) - params.mean) / params.std
    acts = [h]
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def raw_output(params: MlpParams, x) -> np.ndarray:
    return _forward_cache(params, np.asarray(x, dtype=float))[-1]


def forward(params: MlpParams, x) -> np.ndarray:
    """Network output clamped to the input box; batched over leading rows."""
    x = np.asarray(x, dtype=float)
    out = np.clip(raw_output(params, x), params.u_lo, params.u_hi)
    return out[0] if x.ndim == 1 else out


def loss_and_grads(params: MlpParams, x: np.ndarray, y: np.ndarray):
    """Mean-squared imitation loss (pre-clamp output) and its gradients."""
    acts = _forward_cache(params, x)
    diff = acts[-1] - y
    count = diff.shape[0]
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    delta = 2.0 * diff / count
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i].T) * (1.0 - acts[i] ** 2)
    return loss, gw, gb


def dataset(demos: Sequence) -> tuple[np.ndarray, np.ndarray]:
    xs, us = [], []
    for d in demos:
        if len(d.controls):
            xs.append(d.trajectory.states[:-1])
            us.append(d.controls)
    if not xs:
        raise ConfigurationError("behavior cloning needs at least one demonstration sample")
    return np.concatenate(xs), np.concatenate(us)


def train(demos: Sequence, cfg: TrainConfig, input_box: np.ndarray) -> MlpParams:
    x, y = dataset(demos)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(x.shape[1], y.shape[1], rng, input_box)
    params.mean = x.mean(axis=0)
    std = x.std(axis=0)
    params.std = np.where(std > 1e-12, std, 1.0)

    tensors = params.weights + params.biases
    m1 = [np.zeros_like(t) for t in tensors]
    m2 = [np.zeros_like(t) for t in tensors]
    b1, b2 = cfg.betas
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for lo in range(0, len(x), cfg.batch):
            idx = order[lo : lo + cfg.batch]
            _, gw, gb = loss_and_grads(params, x[idx], y[idx])
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for t, g, a, v in zip(tensors, gw + gb, m1, m2):
                a *= b1
                a += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                # decoupled decay: not folded into the moments
                t -= cfg.lr * (a / c1 / (np.sqrt(v / c2) + cfg.adam_eps) + cfg.weight_decay * t)
        params.losses.append(loss_and_grads(params, x, y)[0])
    return params


def bc_rollout_batch(model: SystemModel, spec: TargetSpec, params: MlpParams, x0s, horizon: float,
                     dt: float = DEFAULT_DT) -> list[RolloutRecord]:
    """Closed-loop u = forward(x) at every integrator step; same termination rules as the chain policy."""
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    total = int(round(horizon / dt))
    n_roll = len(x0s)
    reached = spec.contains(x0s)
    reach_time = np.where(reached, 0.0, float(horizon))
    failure = [""] * n_roll
    ids = np.flatnonzero(~reached)
    x = x0s[ids].copy()
    for k in range(total):
        if len(ids) == 0:
            break
        x = rk4_step(model, x, forward(params, x), dt)
        hit = spec.contains(x)
        bad = ~(np.all(np.isfinite(x), axis=1) & model.in_box(x))
        done = hit | bad
        if done.any():
            for b in np.flatnonzero(done):
                if hit[b]:
                    reached[ids[b]] = True
                    reach_time[ids[b]] = (k + 1) * dt
                else:
                    failure[ids[b]] = "left state box"
            ids, x = ids[~done], x[~done]
    return [RolloutRecord(x0s[r].copy(), bool(reached[r]), float(reach_time[r]), [], failure=failure[r])
            for r in range(n_roll)]


def bc_rollout(model, spec, params, x0, horizon: float, dt: float = DEFAULT_DT) -> RolloutRecord:
    return bc_rollout_batch(model, spec, params, np.asarray(x0, dtype=float)[None, :], horizon, dt)[0]
