"""Nonparametric chain policies: assignment sets, selection rule, rollout and construction."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import (
    DEFAULT_DT,
    SystemModel,
    TargetSpec,
    Trajectory,
    ball_samples,
    delta_h,
    wrap_delta,
    delta_h_of_energy,
    rk4_step,
)
from .errors import ConfigurationError

FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ControlSnippet:
    """Zero-order-held input on (0, duration]; ``values[k]`` acts on (k dt_u, (k+1) dt_u]."""

    duration: float
    dt_u: float
    values: np.ndarray

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigurationError("snippet duration must be positive")
        expected = math.ceil(self.duration / self.dt_u - 1e-9)
        if len(self.values) != expected:
            raise ConfigurationError(f"snippet has {len(self.values)} values, expected {expected}")

    @property
    def steps(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class AssignmentTriple:
    center: np.ndarray
    radius: float
    snippet: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("assignment radius must be positive")


@dataclass(eq=False)
class AssignmentSet:
    triples: list[AssignmentTriple]
    alphabet: list[ControlSnippet]
    default_duration: float = DEFAULT_DT
    v0: float = 0.0
    system_id: str = ""
    diagnostics: dict = field(default_factory=dict)
    periods: Optional[np.ndarray] = None  # copied from the model; distances wrap on periodic axes

    def __post_init__(self):
        if self.periods is not None:
            self.periods = np.asarray(self.periods, dtype=float)
        for tr in self.triples:
            if not 0 <= tr.snippet < len(self.alphabet):
                raise ConfigurationError(f"triple refers to missing snippet {tr.snippet}")
        self._centers = None
        self._radii = None

    def __len__(self) -> int:
        return len(self.triples)

    @property
    def centers(self) -> np.ndarray:
        if self._centers is None:
            if self.triples:
                self._centers = np.array([t.center for t in self.triples], dtype=float)
            else:
                self._centers = np.empty((0, 0))
        return self._centers

    @property
    def radii(self) -> np.ndarray:
        if self._radii is None:
            self._radii = np.array([t.radius for t in self.triples], dtype=float)
        return self._radii

    def default_snippet(self, m: int) -> ControlSnippet:
        return ControlSnippet(self.default_duration, self.default_duration, np.zeros((1, m)))

    def snippet_of(self, index: int, m: int) -> ControlSnippet:
        """Snippet for a selection index (0 = default, i >= 1 = triple i)."""
        if index == 0:
            return self.default_snippet(m)
        return self.alphabet[self.triples[index - 1].snippet]

    # -- persistence

    def to_json(self) -> str:
        doc = {
            "version": FORMAT_VERSION,
            "system_id": self.system_id,
            "v0": self.v0,
            "default_duration": self.default_duration,
            "periods": None if self.periods is None else self.periods.tolist(),
            "triples": [
                {
                    "center": [float(v) for v in t.center],
                    "radius": float(t.radius),
                    "snippet": {
                        "dt_u": self.alphabet[t.snippet].dt_u,
                        "duration": self.alphabet[t.snippet].duration,
                        "values": self.alphabet[t.snippet].values.tolist(),
                    },
                }
                for t in self.triples
            ],
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "AssignmentSet":
        doc = json.loads(text)
        if doc.get("version") != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported assignment-set version {doc.get('version')}")
        triples, alphabet = [], []
        for i, t in enumerate(doc["triples"]):
            sn = t["snippet"]
            alphabet.append(ControlSnippet(sn["duration"], sn["dt_u"], np.array(sn["values"], dtype=float)))
            triples.append(AssignmentTriple(np.array(t["center"], dtype=float), t["radius"], i))
        return cls(triples, alphabet, doc["default_duration"], doc["v0"], doc["system_id"],
                   periods=doc.get("periods"))


# ------------------------------------------------------------- selection


def _ratios(aset: AssignmentSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.linalg.norm(wrap_delta(x[..., None, :] - aset.centers, aset.periods), axis=-1) / aset.radii


def rho(aset: AssignmentSet, x):
    """min_i ||x - x_i|| / r_i."""
    if not aset.triples:
        raise ConfigurationError("rho is undefined for an empty assignment set")
    return np.min(_ratios(aset, x), axis=-1)


def select_index(aset: AssignmentSet, x):
    """Index map: 0 outside the support, else 1-based argmin of the normalized distance."""
    if not aset.triples:
        return np.zeros(np.shape(x)[:-1], dtype=int) if np.ndim(x) > 1 else 0
    ratios = _ratios(aset, x)
    best = np.argmin(ratios, axis=-1)  # first minimum -> lowest index on ties
    inside = np.take_along_axis(ratios, best[..., None], axis=-1)[..., 0] <= 1.0
    out = np.where(inside, best + 1, 0)
    return int(out) if out.ndim == 0 else out


class SupportIndex:
    """KD-tree backed batch version of ``select_index`` plus a clearance bound."""

    def __init__(self, aset: AssignmentSet):
        self.aset = aset
        self.empty = len(aset) == 0
        self.periods = aset.periods
        if not self.empty:
            self.tree = cKDTree(self._chart(aset.centers), boxsize=self.periods)
            self.r_max = float(aset.radii.max())

    def _chart(self, xs: np.ndarray) -> np.ndarray:
        # the periodic tree wants coordinates in [0, period)
        if self.periods is None:
            return xs
        return np.where(self.periods > 0, np.mod(xs, np.where(self.periods > 0, self.periods, 1.0)), xs)

    def clearance(self, xs: np.ndarray) -> np.ndarray:
        """Lower bound on the distance from each state to Supp(K)."""
        if self.empty:
            return np.full(len(xs), np.inf)
        d, _ = self.tree.query(self._chart(xs), k=1)
        return d - self.r_max

    def select(self, xs: np.ndarray) -> np.ndarray:
        out = np.zeros(len(xs), dtype=int)
        if self.empty:
            return out
        centers, radii = self.aset.centers, self.aset.radii
        cands = self.tree.query_ball_point(self._chart(xs), self.r_max * (1 + 1e-12) + 1e-300)
        for b, cand in enumerate(cands):
            if not cand:
                continue
            cand = np.sort(np.asarray(cand, dtype=int))
            ratios = np.linalg.norm(wrap_delta(xs[b] - centers[cand], self.periods), axis=-1) / radii[cand]
            j = int(np.argmin(ratios))
            if ratios[j] <= 1.0:
                out[b] = cand[j] + 1
        return out


# -------------------------------------------------------------- snippets


class SnippetTable:
    """Flat storage of every triple's snippet on the integrator grid."""

    def __init__(self, aset: AssignmentSet, m: int, dt: float):
        chunks, lengths = [], []
        for tr in aset.triples:
            sn = aset.alphabet[tr.snippet]
            steps = int(round(sn.duration / dt))
            idx = np.floor((np.arange(steps) * dt + 1e-9 * dt) / sn.dt_u).astype(int)
            chunks.append(np.asarray(sn.values, dtype=float).reshape(-1, m)[idx])
            lengths.append(steps)
        self.lengths = np.array(lengths, dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)[:-1]]).astype(int) if lengths else np.zeros(0, int)
        self.flat = np.concatenate(chunks) if chunks else np.zeros((0, m))


def run_snippets(model: SystemModel, starts: np.ndarray, triple_ids: np.ndarray, table: SnippetTable, dt: float) -> np.ndarray:
    """End states after applying each (0-based) triple's full snippet from each start."""
    starts = np.asarray(starts, dtype=float)
    triple_ids = np.asarray(triple_ids, dtype=int)
    lengths = table.lengths[triple_ids]
    order = np.argsort(-lengths, kind="stable")
    x = starts[order].copy()
    offs = table.offsets[triple_ids][order]
    lens = lengths[order]
    for k in range(int(lens.max()) if len(lens) else 0):
        live = int(np.searchsorted(-lens, -k, side="left"))  # count of lens > k
        if live == 0:
            break
        u = table.flat[offs[:live] + k]
        x[:live] = rk4_step(model, x[:live], u, dt)
    out = np.empty_like(x)
    out[order] = x
    return out


# --------------------------------------------------------------- rollout


@dataclass
class RolloutRecord:
    x0: np.ndarray
    reached: bool
    reach_time: float
    snippet_log: list  # (start_time, index, executed_duration)
    trajectory: Optional[Trajectory] = None
    failure: str = ""


def rollout_batch(
    model: SystemModel,
    spec: TargetSpec,
    aset: AssignmentSet,
    x0s,
    horizon: float,
    dt: float = DEFAULT_DT,
    record_trajectory: bool = False,
) -> list[RolloutRecord]:
    """Execute the chain policy from many initial states at once.

    Snippets run to completion; the only early exit is target entry (or
    leaving the state box, which fails the rollout). Outside the support the
    zero default is applied for ``aset.default_duration``; when the KD-tree
    proves a state cannot reach the support within several default periods
    those periods are merged, which changes nothing observable.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    n_roll = len(x0s)
    total = int(round(horizon / dt))
    if total < 1:
        raise ConfigurationError("horizon must span at least one step")
    tau0 = max(1, int(round(aset.default_duration / dt)))
    index = SupportIndex(aset)
    table = SnippetTable(aset, model.m, dt)
    lengths = np.concatenate([[0], table.lengths]).astype(int)  # indexed by selection (0 = default)
    offsets = np.concatenate([[-1], table.offsets]).astype(int)
    # the default input is zero, so zero-input speed bounds the drift toward the support
    step_bound = 1.25 * model.zero_input_speed * dt

    reached = np.zeros(n_roll, dtype=bool)
    reach_time = np.full(n_roll, float(horizon))
    end_step = np.full(n_roll, total)
    failure = [""] * n_roll
    logs: list[list] = [[] for _ in range(n_roll)]

    start_in = spec.contains(x0s)
    reached[start_in] = True
    reach_time[start_in] = 0.0
    end_step[start_in] = 0

    ids = np.flatnonzero(~start_in)
    x = x0s[ids].copy()
    sel = np.zeros(len(ids), dtype=int)  # current index (0 = default)
    phase = np.zeros(len(ids), dtype=int)
    rem = np.zeros(len(ids), dtype=int)
    offs = np.zeros(len(ids), dtype=int)
    traj = [x0s[0].copy()] if record_trajectory else None
    ctrl = [] if record_trajectory else None
    u = np.zeros((len(ids), model.m))

    for k in range(total):
        if len(ids) == 0:
            break
        need = np.flatnonzero(rem == 0)
        if need.size:
            xs = x[need]
            clear = index.clearance(xs)
            chosen = np.zeros(need.size, dtype=int)
            near = np.flatnonzero(clear <= 0)
            if near.size:
                chosen[near] = index.select(xs[near])
            periods = np.floor(np.minimum(np.where(clear > 0, clear, 0.0) / (step_bound * tau0), total))
            steps = np.where(chosen > 0, lengths[chosen], np.maximum(periods, 1).astype(int) * tau0)
            offs[need] = np.where(chosen > 0, offsets[chosen], -1)
            for j in np.flatnonzero(chosen):
                logs[ids[need[j]]].append((k, int(chosen[j]), int(steps[j])))
            sel[need] = chosen
            rem[need] = steps
            phase[need] = 0
        active = sel > 0
        u[:] = 0.0
        if active.any():
            u[active] = table.flat[offs[active] + phase[active]]
        x = rk4_step(model, x, u, dt)
        phase += 1
        rem -= 1
        if record_trajectory:
            traj.append(x[0].copy())
            ctrl.append(u[0].copy())

        hit = spec.contains(x)
        bad = ~(np.all(np.isfinite(x), axis=1) & model.in_box(x))
        done = hit | bad
        if done.any():
            for b in np.flatnonzero(done):
                rid = ids[b]
                end_step[rid] = k + 1
                if hit[b]:
                    reached[rid] = True
                    reach_time[rid] = (k + 1) * dt
                else:
                    failure[rid] = "non-finite" if not np.all(np.isfinite(x[b])) else "left state box"
            keep = ~done
            ids, x, sel, phase, rem, offs, u = ids[keep], x[keep], sel[keep], phase[keep], rem[keep], offs[keep], u[keep]

    records = []
    for r in range(n_roll):
        log = [(e[0] * dt, e[1], min(e[2], end_step[r] - e[0]) * dt) for e in _with_defaults(logs[r], end_step[r])]
        records.append(RolloutRecord(x0s[r].copy(), bool(reached[r]), float(reach_time[r]), log, failure=failure[r]))
    if record_trajectory:
        states = np.array(traj)
        controls = np.array(ctrl).reshape(-1, model.m)
        records[0].trajectory = Trajectory(np.arange(len(states)) * dt, states, controls)
    return records


def _with_defaults(entries: list, end: int) -> list:
    """Fill the gaps between snippet entries with merged default periods."""
    out, cursor = [], 0
    for start, i, steps in entries:
        if start > cursor:
            out.append((cursor, 0, start - cursor))
        out.append((start, i, steps))
        cursor = start + steps
    if end > cursor:
        out.append((cursor, 0, end - cursor))
    return out


def rollout(model, spec, aset, x0, horizon: float, dt: float = DEFAULT_DT) -> RolloutRecord:
    """Single closed-loop execution, with its trajectory recorded."""
    return rollout_batch(model, spec, aset, np.asarray(x0, dtype=float)[None, :], horizon, dt, record_trajectory=True)[0]


# ---------------------------------------------------------- construction


def certified_radius(dh_start, dh_end, t, v0: float, l_h: float, lip_l: float):
    """(dh_start - dh_end - v0 t) / (L_H + L_H e^{L t}); non-positive means no certificate."""
    t = np.asarray(t, dtype=float)
    return (dh_start - dh_end - v0 * t) / (l_h + l_h * np.exp(lip_l * t))


def default_v0(model: SystemModel, spec: TargetSpec, demos) -> float:
    rates = []
    for d in demos:
        if d.duration > 0:
            dh = delta_h(model, spec, d.trajectory.states[[0, -1]])
            rates.append((dh[0] - dh[1]) / d.duration)
    rate = float(np.mean(rates)) if rates else 0.0
    return max(1e-3 * rate, 1e-4)


def default_duration_grid(dt: float, cap: float = 5.0) -> np.ndarray:
    step = 10
    return np.arange(step, int(round(cap / dt)) + 1, step)


def build_assignment_set(
    model: SystemModel,
    spec: TargetSpec,
    demos: Sequence,
    v0: Optional[float] = None,
    duration_grid: Optional[Sequence[float]] = None,
    dt: float = DEFAULT_DT,
    default_duration: float = DEFAULT_DT,
) -> AssignmentSet:
    """Greedy anchor walk along each demonstration (certified snippet extraction)."""
    if v0 is None:
        v0 = default_v0(model, spec, demos)
    if not v0 > 0:
        raise ConfigurationError("v0 must be positive")
    if duration_grid is None:
        grid = default_duration_grid(dt)
    else:
        grid = np.unique(np.round(np.asarray(duration_grid, dtype=float) / dt).astype(int))
        grid = grid[grid > 0]

    triples: list[AssignmentTriple] = []
    alphabet: list[ControlSnippet] = []
    diag = {"empty_demos": [], "shallow_endpoints": [], "per_demo": [], "anchors": []}
    for j, demo in enumerate(demos):
        states = demo.trajectory.states
        controls = demo.controls
        steps = len(states) - 1
        dh = delta_h(model, spec, states)
        inside = spec.contains(states)
        if dh[-1] > -spec.eps_margin:
            diag["shallow_endpoints"].append(j)
        s = 0
        count = 0
        while s < steps and not inside[s]:
            g = grid[grid < steps - s]
            if steps - s <= grid[-1]:
                g = np.append(g, steps - s)  # the rest of the demonstration is always a candidate
            if g.size == 0:
                break
            r = certified_radius(dh[s], dh[s + g], g * dt, v0, model.l_h, model.lip_l)
            if not np.any(r > 0):
                break
            best = int(np.argmax(r))  # grid ascending -> smallest t on ties
            t_i, r_i = int(g[best]), float(r[best])
            alphabet.append(ControlSnippet(t_i * dt, dt, controls[s : s + t_i].copy()))
            triples.append(AssignmentTriple(states[s].copy(), r_i, len(alphabet) - 1))
            diag["anchors"].append((j, s))
            count += 1
            dist = np.linalg.norm(states[s + 1 : s + t_i + 1] - states[s], axis=1)
            out = np.flatnonzero(dist >= r_i)
            s += int(out[0]) + 1 if out.size else t_i
        if count == 0:
            diag["empty_demos"].append(j)
        diag["per_demo"].append(count)
    return AssignmentSet(triples, alphabet, default_duration, float(v0), model.name, diag, model.periods)


# ---------------------------------------------------------- verification


@dataclass
class Condition1Entry:
    index: int
    margin: float
    ok: bool


def check_condition1(model: SystemModel, spec: TargetSpec, aset: AssignmentSet, v0: Optional[float] = None,
                     dt: float = DEFAULT_DT, tol: float = 1e-9) -> list[Condition1Entry]:
    """Local energy decrease at each center, replaying the snippet from the center."""
    v0 = aset.v0 if v0 is None else v0
    if not aset.triples:
        return []
    table = SnippetTable(aset, model.m, dt)
    ends = run_snippets(model, aset.centers, np.arange(len(aset)), table, dt)
    tau = table.lengths * dt
    r = aset.radii
    lhs = delta_h(model, spec, ends) + v0 * tau + model.l_h * r * np.exp(model.lip_l * tau)
    rhs_ = delta_h(model, spec, aset.centers) - model.l_h * r
    margin = rhs_ - lhs
    return [Condition1Entry(i + 1, float(mg), bool(mg >= -tol)) for i, mg in enumerate(margin)]


def sample_in_balls(model: SystemModel, aset: AssignmentSet, per_ball: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniform rejection samples in each ball intersected with the state box."""
    n = model.n
    pts, owners = [], []
    for i, tr in enumerate(aset.triples):
        got = []
        have = 0
        while have < per_ball:
            cand = rng.uniform(-1.0, 1.0, size=(4 * per_ball, n))
            cand = cand[np.linalg.norm(cand, axis=1) <= 1.0] * tr.radius + tr.center
            cand = cand[model.in_box(cand, tol=0.0)]
            got.append(cand)
            have += len(cand)
        block = np.concatenate(got)[:per_ball]
        pts.append(block)
        owners.append(np.full(len(block), i))
    return np.concatenate(pts), np.concatenate(owners)


def ball_decrease_violations(model, spec, aset, per_ball: int = 100, seed: int = 0, dt: float = DEFAULT_DT,
                             tol: float = 1e-6, chunk: int = 200_000) -> dict:
    """Check dH(phi(tau_i, y, u_i)) + v0 tau_i <= dH(y) for sampled y in every certified ball."""
    if not aset.triples:
        return {"samples": 0, "violations": 0, "worst_margin": math.inf}
    rng = np.random.default_rng(seed)
    ys, owners = sample_in_balls(model, aset, per_ball, rng)
    table = SnippetTable(aset, model.m, dt)
    worst = math.inf
    bad = 0
    for lo in range(0, len(ys), chunk):
        y, own = ys[lo : lo + chunk], owners[lo : lo + chunk]
        ends = run_snippets(model, y, own, table, dt)
        margin = delta_h(model, spec, y) + tol - (delta_h(model, spec, ends) + aset.v0 * table.lengths[own] * dt)
        bad += int(np.count_nonzero(margin < 0))
        worst = min(worst, float(margin.min()) - tol)
    return {"samples": int(len(ys)), "violations": bad, "worst_margin": worst}


def energy_range_on_box(model: SystemModel, resolution: int = 200) -> tuple[float, float]:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in model.state_box]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.n)
    h = model.hamiltonian(pts)
    return float(h.min()), float(h.max())


def support_energy_bands(model: SystemModel, aset: AssignmentSet, n_points: int = 4096) -> np.ndarray:
    bands = np.empty((len(aset), 2))
    for i, tr in enumerate(aset.triples):
        h = model.hamiltonian(ball_samples(tr.center, tr.radius, n_points))
        bands[i] = h.min(), h.max()
    return bands


def check_condition2(model: SystemModel, spec: TargetSpec, aset: AssignmentSet, s0_samples, grid: int = 1000,
                     n_points: int = 1024) -> dict:
    """Energy coverage: every energy with 0 < dH <= c must lie in H(Supp(K)).

    Energies inside the target band itself are excluded; there the zero input
    alone finishes the task.
    """
    s0 = np.atleast_2d(np.asarray(s0_samples, dtype=float))
    c = float(np.max(delta_h(model, spec, s0)))
    h_lo, h_hi = energy_range_on_box(model)
    pieces = []
    if c > 0:
        lo_piece = (max(spec.h_min - c, h_lo), spec.h_min)
        hi_piece = (spec.h_max, min(spec.h_max + c, h_hi))
        pieces = [p for p in (lo_piece, hi_piece) if p[1] > p[0]]
    if not pieces:
        return {"c": c, "grid": [], "uncovered": [], "gaps": []}
    total = sum(b - a for a, b in pieces)
    energies = np.concatenate([
        np.linspace(a, b, max(2, int(round(grid * (b - a) / total))) + 1)
        for a, b in pieces
    ])
    energies = energies[delta_h_of_energy(spec, energies) > 0]
    covered = np.zeros(len(energies), dtype=bool)
    if aset.triples:
        bands = support_energy_bands(model, aset, n_points)
        order = np.argsort(bands[:, 0])
        bands = bands[order]
        for a, b in _merge(bands):
            covered |= (energies >= a) & (energies <= b)
    uncovered = energies[~covered]
    return {"c": c, "grid": energies.tolist(), "uncovered": uncovered.tolist(), "gaps": _runs(energies, covered)}


def _merge(bands: np.ndarray) -> list[tuple[float, float]]:
    merged = []
    for a, b in bands:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def _runs(energies: np.ndarray, covered: np.ndarray) -> list[tuple[float, float]]:
    gaps, start = [], None
    for e, ok in zip(energies, covered):
        if not ok and start is None:
            start = e
            last = e
        elif not ok:
            last = e
        elif start is not None:
            gaps.append((float(start), float(last)))
            start = None
    if start is not None:
        gaps.append((float(start), float(last)))
    return gaps
