"""Closed-form reachability bounds and an empirical decrease-rate estimate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .dynamics import DEFAULT_DT, first_hit, delta_h
from .errors import ConfigurationError, ExpertFailure


@dataclass(frozen=True)
class BoundInputs:
    l_h: float
    c_f: float
    lip_l: float
    mu_h: Optional[float]
    d_x: float
    eps: float
    v0: float
    v_lower: float
    h1: float
    h2: float
    t1: float = 0.0
    t2: float = 0.0
    tau_min: float = 1.0
    c_level: float = 0.0


def lemma1_bounds(l_h: float, c_f: float, eps: float) -> tuple[float, float]:
    """(max decrease rate, min hitting time) = (L_H C_f, eps / (L_H C_f))."""
    if not (l_h > 0 and c_f > 0):
        raise ConfigurationError("l_h and c_f must be positive")
    v_max = l_h * c_f
    return v_max, eps / v_max


def theorem2_radius(v_eps_x: float, v0: float, t_star: float, l_h: float, lip_l: float) -> float:
    if not v_eps_x > v0:
        raise ConfigurationError("radius needs v_eps(x) > v0")
    return (v_eps_x - v0) * t_star / (l_h * (1.0 + math.exp(lip_l * t_star)))


def sample_complexity_value(b: BoundInputs) -> float:
    if b.mu_h is None or not b.mu_h > 0:
        raise ConfigurationError("sample-complexity bound needs a strongly convex Hamiltonian (mu_h > 0)")
    if not 0 < b.v0 < b.v_lower:
        raise ConfigurationError("need 0 < v0 < v_lower")
    if not b.eps > 0:
        raise ConfigurationError("eps must be positive")
    ratio = 1.0 - b.v0 / b.v_lower
    try:
        growth = math.exp(2.0 * b.lip_l * (b.l_h * b.d_x + b.eps) / b.v_lower)
    except OverflowError:
        return math.inf
    return (b.h2 - b.h1) * 16.0 * b.l_h**2 / (b.mu_h * ratio**2) * growth / b.eps**2


def sample_complexity(b: BoundInputs):
    """Upper bound on the number of certified triples, rounded up (inf when it overflows a float)."""
    value = sample_complexity_value(b)
    return value if math.isinf(value) else math.ceil(value)


def finite_time_bound(b: BoundInputs) -> float:
    if not (b.v0 > 0 and b.tau_min > 0):
        raise ConfigurationError("v0 and tau_min must be positive")
    return b.l_h * b.d_x / b.v0 * (1.0 + b.t1 / b.tau_min) + b.t2


def report(b: BoundInputs) -> dict:
    out = {"inputs": asdict(b)}
    v_max, t_min = lemma1_bounds(b.l_h, b.c_f, b.eps)
    out["lemma1"] = {"v_max": v_max, "t_min": t_min}
    try:
        out["sample_complexity"] = sample_complexity(b)
    except ConfigurationError as exc:
        out["sample_complexity"] = None
        out["sample_complexity_error"] = str(exc)
    try:
        out["finite_time_bound"] = finite_time_bound(b)
    except ConfigurationError as exc:
        out["finite_time_bound"] = None
        out["finite_time_error"] = str(exc)
    return out


def format_report(rep: dict) -> str:
    lines = [
        f"lemma1: v_eps <= {rep['lemma1']['v_max']:.6g}, T*_eps >= {rep['lemma1']['t_min']:.6g} s",
    ]
    if rep["sample_complexity"] is None:
        lines.append(f"sample complexity: unavailable ({rep['sample_complexity_error']})")
    else:
        n = rep["sample_complexity"]
        lines.append(f"sample complexity: N <= {n if n < 1e12 else format(float(n), '.6g')}")
    if rep["finite_time_bound"] is None:
        lines.append(f"finite-time bound: unavailable ({rep['finite_time_error']})")
    else:
        lines.append(f"finite-time bound: T_max <= {rep['finite_time_bound']:.6g} s")
    return "\n".join(lines)


def estimate_v_lower(model, spec, expert_cfg, sample_states, rng, dt: float = DEFAULT_DT) -> dict:
    """Empirical proxy for the uniform decrease rate, using expert rollouts in place of optimal controls.

    Expert hitting times over-estimate the optimal ones, so the returned rate
    is biased low. States already inside the eps-band are skipped.
    """
    from .expert import generate_demonstration

    rates, excluded = [], []
    for i, x in enumerate(np.atleast_2d(np.asarray(sample_states, dtype=float))):
        dh0 = float(delta_h(model, spec, x))
        if dh0 <= -spec.eps_margin:
            excluded.append((i, "inside eps-band"))
            continue
        stop = lambda s: bool(delta_h(model, spec, s) <= -spec.eps_margin)  # noqa: E731
        try:
            demo = generate_demonstration(model, spec, x, expert_cfg, rng, dt, stop=stop)
        except ExpertFailure as exc:
            excluded.append((i, str(exc)))
            continue
        t_hit = first_hit(demo.trajectory, lambda s: delta_h(model, spec, s) <= -spec.eps_margin)
        if t_hit is None:
            excluded.append((i, "no hit"))
            continue
        rates.append((dh0 + spec.eps_margin) / t_hit)
    return {
        "v_lower": float(min(rates)) if rates else None,
        "rates": rates,
        "samples": len(rates),
        "excluded": excluded,
        "note": "expert controls stand in for optimal ones; the estimate is biased low",
    }
