"""Receding-horizon cross-entropy planner used to generate expert demonstrations."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .dynamics import DEFAULT_DT, SystemModel, TargetSpec, Trajectory, delta_h, rk4_step, simulate, wrap_delta
from .errors import ConfigurationError, ExpertFailure

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ExpertConfig:
    plan_horizon: float = 2.0
    n_segments: int = 10
    population: int = 64
    elites: int = 8
    iters: int = 12
    replan_every: float = 0.1
    weights: tuple = (100.0, 1.0, 0.01)
    max_episode: float = 60.0
    seed: int = 0
    plan_dt: float = 0.01
    init_std_frac: float = 0.5
    std_floor_frac: float = 0.05
    box_penalty: float = 1e6

    def __post_init__(self):
        for name in ("n_segments", "population", "elites", "iters"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.elites > self.population:
            raise ConfigurationError("elites must not exceed population")
        if not (self.plan_horizon > 0 and self.replan_every > 0 and self.plan_dt > 0):
            raise ConfigurationError("horizons and steps must be positive")


@dataclass
class Demonstration:
    x0: np.ndarray
    controls: np.ndarray
    duration: float
    trajectory: Trajectory
    terminal_dh: float
    dt: float = DEFAULT_DT
    system_id: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "version": FORMAT_VERSION,
            "system_id": self.system_id,
            "x0": [float(v) for v in self.x0],
            "dt": self.dt,
            "controls": self.controls.tolist(),
            "duration": self.duration,
        })

    @classmethod
    def from_json(cls, text: str, model: SystemModel, spec: TargetSpec) -> "Demonstration":
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported demonstration version {doc.get('version')}")
        x0 = np.array(doc["x0"], dtype=float)
        controls = np.array(doc["controls"], dtype=float).reshape(-1, model.m)
        return replay(model, spec, x0, controls, doc["dt"], doc.get("system_id", model.name))


def replay(model: SystemModel, spec: TargetSpec, x0, controls: np.ndarray, dt: float, system_id: str = "") -> Demonstration:
    """Rebuild a demonstration by open-loop re-simulation of its recorded controls."""
    x0 = np.asarray(x0, dtype=float)
    if len(controls) == 0:
        traj = Trajectory(np.zeros(1), x0[None, :].copy(), np.zeros((0, model.m)))
    else:
        traj = simulate(model, x0, controls, len(controls) * dt, dt)
    return Demonstration(x0, controls, len(controls) * dt, traj,
                         float(delta_h(model, spec, traj.states[-1])), dt, system_id or model.name)


def deep_in_target(model: SystemModel, spec: TargetSpec, x) -> np.ndarray:
    return spec.contains(x) & (delta_h(model, spec, x) <= -spec.eps_margin)


def _plan_cost(model: SystemModel, spec: TargetSpec, x: np.ndarray, seqs: np.ndarray, cfg: ExpertConfig) -> np.ndarray:
    w_term, w_dh, w_u = cfg.weights
    pop = len(seqs)
    steps = max(1, int(round(cfg.plan_horizon / cfg.plan_dt)))
    per_seg = max(1, steps // cfg.n_segments)
    xs = np.broadcast_to(x, (pop, model.n)).copy()
    cost = np.zeros(pop)
    outside = np.zeros(pop, dtype=bool)
    for k in range(steps):
        u = seqs[:, min(k // per_seg, cfg.n_segments - 1)]
        xs = rk4_step(model, xs, u, cfg.plan_dt)
        cost += cfg.plan_dt * (w_dh * np.maximum(delta_h(model, spec, xs) + spec.eps_margin, 0.0) + w_u * np.sum(u * u, axis=1))
        outside |= ~model.in_box(xs)
    cost += w_term * np.sum(wrap_delta(xs - spec.center, model.periods) ** 2, axis=1)
    cost[outside] += cfg.box_penalty
    cost[~np.isfinite(cost)] = np.inf
    return cost


def _cem(model, spec, x, cfg: ExpertConfig, rng, init_mean=None) -> np.ndarray:
    # the incumbent best sequence is re-injected every iteration and returned
    lo, hi = model.input_box[:, 0], model.input_box[:, 1]
    u_abs = model.u_abs
    mean = np.zeros((cfg.n_segments, model.m)) if init_mean is None else np.array(init_mean, dtype=float)
    std = np.broadcast_to(cfg.init_std_frac * u_abs, mean.shape).copy()
    floor = cfg.std_floor_frac * u_abs
    best = np.clip(mean, lo, hi)
    best_cost = _plan_cost(model, spec, x, best[None], cfg)[0]
    for _ in range(cfg.iters):
        noise = rng.standard_normal((cfg.population, cfg.n_segments, model.m))
        seqs = np.clip(mean + std * noise, lo, hi)
        seqs[0] = best
        cost = _plan_cost(model, spec, x, seqs, cfg)
        order = np.argsort(cost, kind="stable")
        if cost[order[0]] < best_cost:
            best, best_cost = seqs[order[0]].copy(), cost[order[0]]
        elite = seqs[order[: cfg.elites]]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), floor)
    return best


def plan_step(model: SystemModel, spec: TargetSpec, x, cfg: ExpertConfig, rng: np.random.Generator,
              init_mean: Optional[np.ndarray] = None) -> np.ndarray:
    """One cross-entropy optimization over piecewise-constant input sequences; returns the first input."""
    return _cem(model, spec, np.asarray(x, dtype=float), cfg, rng, init_mean)[0]


def shift_plan(mean: np.ndarray, elapsed: float, cfg: ExpertConfig) -> np.ndarray:
    """Warm start: the previous plan advanced by ``elapsed`` seconds, padded with its last input."""
    seg = cfg.plan_horizon / cfg.n_segments
    src = np.floor((np.arange(cfg.n_segments) * seg + elapsed) / seg + 1e-9).astype(int)
    return mean[np.minimum(src, cfg.n_segments - 1)]


def generate_demonstration(
    model: SystemModel,
    spec: TargetSpec,
    x0,
    cfg: ExpertConfig,
    rng: np.random.Generator,
    dt: float = DEFAULT_DT,
    stop: Optional[Callable[[np.ndarray], bool]] = None,
) -> Demonstration:
    """Closed-loop expert episode, replanning every ``replan_every`` seconds until ``stop``.

    By default the episode ends once the state is inside the target ball with
    an energy at least ``eps_margin`` deep in the band, so the last certified
    snippets keep a positive margin. A start already inside the ball gives an
    empty demonstration.
    """
    if stop is None:
        if spec.contains(np.asarray(x0, dtype=float)):
            return replay(model, spec, x0, np.zeros((0, model.m)), dt)
        stop = lambda s: bool(deep_in_target(model, spec, s))  # noqa: E731
    x = np.asarray(x0, dtype=float).copy()
    hold = max(1, int(round(cfg.replan_every / dt)))
    cap = int(round(cfg.max_episode / dt))
    states = [x.copy()]
    controls = []
    k = 0
    done = stop(x)
    plan = None
    while not done:
        if k >= cap:
            raise ExpertFailure(f"expert did not reach the target within {cfg.max_episode} s from {x0}")
        init = None if plan is None else shift_plan(plan, hold * dt, cfg)
        plan = _cem(model, spec, x, cfg, rng, init)
        u = plan[0]
        for _ in range(hold):
            x = rk4_step(model, x, u, dt)
            if not np.all(np.isfinite(x)):
                raise ExpertFailure("expert rollout diverged")
            states.append(x.copy())
            controls.append(u.copy())
            k += 1
            if stop(x):
                done = True
                break
            if k >= cap:
                break
    states = np.array(states)
    controls = np.array(controls).reshape(-1, model.m)
    traj = Trajectory(np.arange(len(states)) * dt, states, controls)
    return Demonstration(np.asarray(x0, dtype=float).copy(), controls, len(controls) * dt, traj,
                         float(delta_h(model, spec, states[-1])), dt, model.name)


def demo_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per demonstration index."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def config_dict(cfg: ExpertConfig) -> dict:
    d = asdict(cfg)
    d["weights"] = list(cfg.weights)
    return d
