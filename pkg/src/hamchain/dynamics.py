"""Lossless Hamiltonian models, RK4 flow and target-set energy geometry.

States are numpy arrays whose last axis has length ``n``; every evaluator
broadcasts over leading axes so batches of states integrate together.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, IntegrationBlowup, NoHitError

Array = np.ndarray

DEFAULT_DT = 1e-3
SAFETY = 1.05


@dataclass(frozen=True, eq=False)
class SystemModel:
    """dx/dt = J(x) grad H(x) + G(x) u on a compact box.

    ``fast_field`` is an optional closed-form evaluator of the same vector field;
    builtins supply one so rollouts avoid the batched matrix products.
    """

    name: str
    n: int
    m: int
    hamiltonian: Callable[[Array], Array]
    grad_h: Callable[[Array], Array]
    interconnection: Callable[[Array], Array]
    input_map: Callable[[Array], Array]
    state_box: Array
    input_box: Array
    l_h: float
    lip_l: float
    c_f: float
    mu_h: Optional[float] = None
    c_zero: Optional[float] = None
    fast_field: Optional[Callable[[Array, Array], Array]] = None
    periods: Optional[Array] = None  # per-axis period, 0 for non-periodic axes
    params: dict = field(default_factory=dict)

    @property
    def diameter(self) -> float:
        widths = self.state_box[:, 1] - self.state_box[:, 0]
        return float(np.sqrt(np.sum(widths**2)))

    @property
    def zero_input_speed(self) -> float:
        """Bound on ||J grad H|| over the box (falls back to c_f)."""
        return self.c_zero if self.c_zero is not None else self.c_f

    @property
    def u_abs(self) -> Array:
        return np.max(np.abs(self.input_box), axis=1)

    def vector_field(self, x: Array, u: Array) -> Array:
        if self.fast_field is not None:
            return self.fast_field(x, u)
        return structured_field(self, x, u)

    def in_box(self, x: Array, tol: float = 1e-9) -> Array:
        lo, hi = self.state_box[:, 0], self.state_box[:, 1]
        ok = (x >= lo - tol) & (x <= hi + tol)
        if self.periods is not None:
            ok |= self.periods > 0  # angles never leave the box
        return np.all(ok, axis=-1)


def wrap_delta(d: Array, periods: Optional[Array]) -> Array:
    """Shortest representative of a coordinate difference on periodic axes."""
    if periods is None:
        return d
    safe = np.where(periods > 0, periods, 1.0)
    return np.where(periods > 0, d - safe * np.round(d / safe), d)


def structured_field(model: SystemModel, x: Array, u: Array) -> Array:
    jac = model.interconnection(x)
    g = model.input_map(x)
    return np.einsum("...ij,...j->...i", jac, model.grad_h(x)) + np.einsum("...ij,...j->...i", g, u)


def _check_dims(model: SystemModel, x: Array, u: Array) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1:] != (model.n,):
        raise ConfigurationError(f"state has shape {x.shape}, model expects last axis {model.n}")
    if u.shape[-1:] != (model.m,):
        raise ConfigurationError(f"input has shape {u.shape}, model expects last axis {model.m}")
    return x, u


def rhs(model: SystemModel, x, u) -> Array:
    """Evaluate J(x) grad H(x) + G(x) u."""
    x, u = _check_dims(model, x, u)
    return structured_field(model, x, u)


def rk4_step(model: SystemModel, x: Array, u: Array, dt: float) -> Array:
    # no validation: hot path for batched rollouts
    f = model.vector_field
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_step(model: SystemModel, x, u, dt: float) -> Array:
    """One classical RK4 step with the input held constant."""
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    x, u = _check_dims(model, x, u)
    with np.errstate(over="ignore", invalid="ignore"):
        out = rk4_step(model, x, u, dt)
    if not np.all(np.isfinite(out)):
        raise IntegrationBlowup(f"non-finite state after step from {x}")
    return out


@dataclass
class Trajectory:
    times: Array
    states: Array
    controls: Array

    def __post_init__(self):
        if len(self.states) != len(self.times):
            raise ConfigurationError("states and times differ in length")
        if len(self.controls) != max(len(self.times) - 1, 0):
            raise ConfigurationError("controls must have one entry per grid interval")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ConfigurationError("times must be strictly increasing")

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        m = self.controls.shape[1] if self.controls.ndim == 2 and len(self.controls) else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)])
            for k, t in enumerate(self.times):
                u = [repr(float(v)) for v in self.controls[k]] if k < len(self.controls) else [""] * m
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[k]] + u)


def n_steps(duration: float, dt: float) -> int:
    steps = int(round(duration / dt))
    if steps < 1 or abs(steps * dt - duration) > 0.5 * dt:
        raise ConfigurationError(f"duration {duration} is not a multiple of dt {dt}")
    return steps


def control_grid(signal, steps: int, dt: float, m: int) -> Array:
    """Per-integrator-step inputs from None (zero), an array, or a snippet."""
    if signal is None:
        return np.zeros((steps, m))
    if isinstance(signal, np.ndarray):
        values, dt_u = signal, dt
    else:
        values, dt_u = np.asarray(signal.values, dtype=float), signal.dt_u
    values = values.reshape(len(values), m)
    idx = np.floor((np.arange(steps) * dt + 1e-9 * dt) / dt_u).astype(int)
    if idx[-1] >= len(values):
        raise ConfigurationError("control signal shorter than the requested duration")
    return values[idx]


def simulate(model: SystemModel, x0, signal, duration: float, dt: float = DEFAULT_DT) -> Trajectory:
    """Roll the flow forward under a zero-order-held signal (None = zero input)."""
    steps = n_steps(duration, dt)
    controls = control_grid(signal, steps, dt, model.m)
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((steps + 1, model.n))
    states[0] = x
    for k in range(steps):
        x = rk4_step(model, x, controls[k], dt)
        states[k + 1] = x
    if not np.all(np.isfinite(states)):
        raise IntegrationBlowup("non-finite state during simulation")
    return Trajectory(np.arange(steps + 1) * dt, states, controls)


@dataclass(frozen=True)
class TargetSpec:
    center: Array
    radius: float
    h_min: float
    h_max: float
    eps_margin: float
    periods: Optional[Array] = None

    def __post_init__(self):
        if not self.h_min <= self.h_max:
            raise ConfigurationError("h_min must not exceed h_max")
        if not self.eps_margin > 0:
            raise ConfigurationError("eps_margin must be positive")

    @property
    def h_plus(self) -> float:
        return 0.5 * (self.h_max + self.h_min)

    @property
    def h_minus(self) -> float:
        return 0.5 * (self.h_max - self.h_min)

    def contains(self, x: Array) -> Array:
        return np.linalg.norm(wrap_delta(np.asarray(x) - self.center, self.periods), axis=-1) <= self.radius

    @classmethod
    def from_ball(cls, model: SystemModel, center, radius: float, eps_margin: float) -> "TargetSpec":
        center = np.asarray(center, dtype=float)
        lo, hi = energy_band_of_ball(model, center, radius)
        if eps_margin >= 0.5 * (hi - lo):
            raise ConfigurationError("eps_margin must be smaller than half the target energy band")
        return cls(center, float(radius), lo, hi, float(eps_margin), model.periods)


def delta_h_of_energy(spec: TargetSpec, h):
    # max(H - h_max, h_min - H) == |H - h_plus| - h_minus, with an exact sign
    return np.maximum(h - spec.h_max, spec.h_min - h)


def delta_h(model: SystemModel, spec: TargetSpec, x):
    """Signed energy distance to the target band; <= 0 exactly inside it."""
    return delta_h_of_energy(spec, model.hamiltonian(np.asarray(x, dtype=float)))


def ball_samples(center: Array, radius: float, n_points: int = 4096) -> Array:
    """Deterministic nested sample of a closed ball (center + boundary + interior)."""
    center = np.asarray(center, dtype=float)
    n = center.shape[0]
    if n_points < 1:
        raise ConfigurationError("need at least one ball sample")
    if radius == 0:
        return center[None, :]
    if n == 2:
        side = max(int(round(math.sqrt(n_points))), 1)
        ang = 2 * np.pi * np.arange(side) / side
        rad = radius * np.arange(1, side + 1) / side
        rr, aa = np.meshgrid(rad, ang, indexing="ij")
        pts = np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=-1).reshape(-1, 2)
    else:
        n_dirs = max(n_points // 16, 2 * n)
        dirs = np.random.default_rng(0).standard_normal((n_dirs, n))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dirs = np.concatenate([np.eye(n), -np.eye(n), dirs])
        rad = radius * np.arange(1, 17) / 16
        pts = (rad[:, None, None] * dirs[None]).reshape(-1, n)
    return np.concatenate([center[None, :], center + pts])


def energy_band_of_ball(model: SystemModel, center, radius: float, n_points: int = 4096) -> tuple[float, float]:
    """Approximate (min H, max H) over the ball by dense deterministic sampling."""
    h = model.hamiltonian(ball_samples(np.asarray(center, dtype=float), radius, n_points))
    if h.size == 0:
        raise ConfigurationError("empty ball sample")
    return float(h.min()), float(h.max())


def first_hit(traj: Trajectory, pred: Callable[[Array], Array]) -> Optional[float]:
    """Earliest grid time t > 0 whose state satisfies ``pred`` (vectorized over rows)."""
    mask = np.asarray(pred(traj.states[1:]), dtype=bool)
    hits = np.flatnonzero(mask)
    if hits.size == 0:
        return None
    return float(traj.times[hits[0] + 1])


def decrease_rate(model: SystemModel, spec: TargetSpec, x, traj: Trajectory) -> float:
    """Average decrease of delta_h until the trajectory first enters the eps-band."""
    inside = lambda s: delta_h(model, spec, s) <= -spec.eps_margin  # noqa: E731
    t_hit = first_hit(traj, inside)
    if t_hit is None:
        raise NoHitError("trajectory never enters the eps-shrunk target band")
    k = int(np.searchsorted(traj.times, t_hit))
    t_rel = t_hit - traj.times[0]
    return float((delta_h(model, spec, x) - delta_h(model, spec, traj.states[k])) / t_rel)


# ---------------------------------------------------------------- builtins

_J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
_G2 = np.array([[0.0], [1.0]])


def _const(mat: Array) -> Callable[[Array], Array]:
    return lambda x: np.broadcast_to(mat, np.shape(x)[:-1] + mat.shape)


def _abs_max(lo: float, hi: float) -> float:
    return max(abs(lo), abs(hi))


def _max_abs_trig(lo: float, hi: float, fn) -> float:
    """max |fn| over [lo, hi]; |sin| peaks at pi/2 + k pi, |cos| at k pi."""
    phase = 0.5 * np.pi if fn is np.sin else 0.0
    if math.ceil((lo - phase) / np.pi) <= math.floor((hi - phase) / np.pi):
        return 1.0
    return float(max(abs(fn(lo)), abs(fn(hi))))


def builtin_spring_mass(m: float = 1.0, k: float = 1.0, u_abs: float = 20.0, box=None) -> SystemModel:
    box = np.array(box if box is not None else [[-5.0, 5.0], [-5.0, 5.0]], dtype=float)
    q_max, p_max = _abs_max(*box[0]), _abs_max(*box[1])

    def hamiltonian(x):
        return x[..., 1] ** 2 / (2 * m) + 0.5 * k * x[..., 0] ** 2

    def grad_h(x):
        return np.stack([k * x[..., 0], x[..., 1] / m], axis=-1)

    def fast(x, u):
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
        out[..., 0] = x[..., 1] / m
        out[..., 1] = u[..., 0] - k * x[..., 0]
        return out

    return SystemModel(
        name="spring_mass",
        n=2,
        m=1,
        hamiltonian=hamiltonian,
        grad_h=grad_h,
        interconnection=_const(_J2),
        input_map=_const(_G2),
        state_box=box,
        input_box=np.array([[-u_abs, u_abs]]),
        l_h=math.hypot(k * q_max, p_max / m),
        lip_l=max(k, 1.0 / m),
        c_f=math.hypot(p_max / m, k * q_max + u_abs),
        mu_h=min(k, 1.0 / m),
        c_zero=math.hypot(k * q_max, p_max / m),
        fast_field=fast,
        params={"m": m, "k": k, "u_abs": u_abs},
    )


def builtin_pendulum(m: float = 1.0, l: float = 2.0, g: float = 9.81, u_abs: float = 20.0, box=None,
                     periodic: bool = True) -> SystemModel:
    """Pendulum with angle q and angular momentum p; by default q lives on the circle."""
    box = np.array(box if box is not None else [[-2 * np.pi, 4 * np.pi], [-30.0, 30.0]], dtype=float)
    inertia = m * l * l
    mgl = m * g * l
    p_max = _abs_max(*box[1])
    sin_max = _max_abs_trig(box[0, 0], box[0, 1], np.sin)
    cos_max = _max_abs_trig(box[0, 0], box[0, 1], np.cos)
    # cos reaches -1 at odd multiples of pi inside the box
    if math.ceil((box[0, 0] - np.pi) / (2 * np.pi)) <= math.floor((box[0, 1] - np.pi) / (2 * np.pi)):
        cos_min = -1.0
    else:
        cos_min = float(min(np.cos(box[0, 0]), np.cos(box[0, 1])))
    mu = min(mgl * cos_min, 1.0 / inertia)

    def hamiltonian(x):
        return x[..., 1] ** 2 / (2 * inertia) + mgl * (1.0 - np.cos(x[..., 0]))

    def grad_h(x):
        return np.stack([mgl * np.sin(x[..., 0]), x[..., 1] / inertia], axis=-1)

    def fast(x, u):
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
        out[..., 0] = x[..., 1] / inertia
        out[..., 1] = u[..., 0] - mgl * np.sin(x[..., 0])
        return out

    return SystemModel(
        name="pendulum",
        n=2,
        m=1,
        hamiltonian=hamiltonian,
        grad_h=grad_h,
        interconnection=_const(_J2),
        input_map=_const(_G2),
        state_box=box,
        input_box=np.array([[-u_abs, u_abs]]),
        l_h=math.hypot(mgl * sin_max, p_max / inertia),
        lip_l=max(mgl * cos_max, 1.0 / inertia),
        c_f=math.hypot(p_max / inertia, mgl * sin_max + u_abs),
        mu_h=mu if mu > 0 else None,
        c_zero=math.hypot(mgl * sin_max, p_max / inertia),
        fast_field=fast,
        periods=np.array([2 * np.pi, 0.0]) if periodic else None,
        params={"m": m, "l": l, "g": g, "u_abs": u_abs, "periodic": periodic},
    )


def estimate_constants(
    name: str,
    n: int,
    m: int,
    hamiltonian,
    grad_h,
    interconnection,
    input_map,
    state_box,
    input_box,
    resolution: int = 200,
) -> SystemModel:
    """Build a model for user-supplied evaluators, sampling L_H, C_f, L, mu_H on a grid.

    Sampled maxima are inflated by 5%; sampled minima for mu_H deflated by 5%.
    """
    state_box = np.asarray(state_box, dtype=float)
    input_box = np.asarray(input_box, dtype=float)
    res = max(3, min(resolution, int(round(2e5 ** (1.0 / n)))))
    axes = [np.linspace(lo, hi, res) for lo, hi in state_box]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    verts = np.stack(np.meshgrid(*input_box, indexing="ij"), axis=-1).reshape(-1, m)

    probe = SystemModel(name, n, m, hamiltonian, grad_h, interconnection, input_map, state_box, input_box, 0.0, 0.0, 0.0)
    l_h = float(np.max(np.linalg.norm(grad_h(pts), axis=-1)))
    c_f = 0.0
    lip = 0.0
    h = 1e-6 * max(1.0, probe.diameter)
    for u in verts:
        ub = np.broadcast_to(u, (len(pts), m))
        c_f = max(c_f, float(np.max(np.linalg.norm(structured_field(probe, pts, ub), axis=-1))))
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            cols.append((structured_field(probe, pts + e, ub) - structured_field(probe, pts - e, ub)) / (2 * h))
        jac = np.stack(cols, axis=-1)
        lip = max(lip, float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1)))))
    hess_cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        hess_cols.append((grad_h(pts + e) - grad_h(pts - e)) / (2 * h))
    hess = np.stack(hess_cols, axis=-1)
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    mu = float(np.min(np.linalg.eigvalsh(hess)))
    return SystemModel(
        name=name,
        n=n,
        m=m,
        hamiltonian=hamiltonian,
        grad_h=grad_h,
        interconnection=interconnection,
        input_map=input_map,
        state_box=state_box,
        input_box=input_box,
        l_h=SAFETY * l_h,
        lip_l=SAFETY * lip,
        c_f=SAFETY * c_f,
        mu_h=mu / SAFETY if mu > 0 else None,
    )


def builtin(name: str, **kwargs) -> SystemModel:
    if name == "spring_mass":
        return builtin_spring_mass(**kwargs)
    if name == "pendulum":
        return builtin_pendulum(**kwargs)
    raise ConfigurationError(f"unknown system {name!r}")
