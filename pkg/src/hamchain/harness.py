"""Experiment runner: sample test states, generate demonstrations, sweep M, write CSVs and figures."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

try:
    import tomllib as toml_reader
except ImportError:  # Python < 3.11
    import tomli as toml_reader

from .bc_baseline import MlpParams, TrainConfig, bc_rollout_batch, train
from .chain_policy import AssignmentSet, ball_decrease_violations, build_assignment_set, rollout_batch
from .dynamics import DEFAULT_DT, SystemModel, TargetSpec, builtin, delta_h
from .errors import ConfigurationError, ExpertFailure
from .expert import Demonstration, ExpertConfig, demo_rng, generate_demonstration

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["policy", "m", "success_rate", "avg_reach_time", "n_triples"]

# per-system defaults; every field can be overridden from the TOML file
PRESETS = {
    "spring_mass": {
        "system_params": {"m": 1.0, "k": 1.0, "u_abs": 20.0},
        "center": [0.0, 0.0],
        "eps_margin": 1e-3,
        "h_bar": 0.5,
        "horizon": 20.0,
        "expert": {"weights": [100.0, 1000.0, 0.01], "max_episode": 20.0},
    },
    "pendulum": {
        "system_params": {"m": 1.0, "l": 2.0, "g": 9.81, "u_abs": 20.0},
        "center": [float(np.pi), 0.0],
        "eps_margin": 1e-2,
        "h_bar": 30.0,
        "horizon": 150.0,
        "expert": {"weights": [1.0, 100.0, 0.01], "max_episode": 150.0},
    },
}


@dataclass
class Seeds:
    sampling: int = 0
    expert: int = 1
    bc: int = 2


@dataclass
class ExperimentConfig:
    system: str = "spring_mass"
    system_params: dict = field(default_factory=dict)
    center: list = field(default_factory=lambda: [0.0, 0.0])
    radius: float = 0.1
    eps_margin: float = 1e-3
    h_bar: float = 0.5
    n_test: int = 500
    m_sweep: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    horizon: float = 20.0
    dt: float = DEFAULT_DT
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/out"
    expert: dict = field(default_factory=dict)
    bc: dict = field(default_factory=dict)
    v0: Optional[float] = None
    default_duration: float = DEFAULT_DT
    demo_retries: int = 5
    demo_start: str = "extremal"  # or "uniform"
    extremal_fraction: float = 0.02
    check_balls: bool = True
    per_ball: int = 100

    def __post_init__(self):
        if self.n_test <= 0:
            raise ConfigurationError("n_test must be positive")
        if not self.horizon > 0:
            raise ConfigurationError("horizon must be positive")
        if not self.m_sweep or min(self.m_sweep) < 1:
            raise ConfigurationError("m_sweep needs positive demo counts")
        if not (self.radius > 0 and self.dt > 0):
            raise ConfigurationError("radius and dt must be positive")
        if self.demo_start not in ("extremal", "uniform"):
            raise ConfigurationError("demo_start must be 'extremal' or 'uniform'")
        if not 0 < self.extremal_fraction <= 1:
            raise ConfigurationError("extremal_fraction must lie in (0, 1]")

    @classmethod
    def preset(cls, system: str, **overrides) -> "ExperimentConfig":
        if system not in PRESETS:
            raise ConfigurationError(f"unknown system {system!r}")
        doc = copy.deepcopy(PRESETS[system])
        doc["system"] = system
        return cls.from_dict(_deep_merge(doc, overrides))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        doc = dict(doc)
        seeds = doc.pop("seeds", {})
        if isinstance(seeds, dict):
            try:
                seeds = Seeds(**seeds)
            except TypeError as exc:
                raise ConfigurationError(f"bad seeds table: {exc}") from None
        return cls(seeds=seeds, **doc)

    def to_dict(self) -> dict:
        return asdict(self)

    def expert_config(self) -> ExpertConfig:
        doc = dict(self.expert)
        doc.setdefault("seed", self.seeds.expert)
        if "weights" in doc:
            doc["weights"] = tuple(doc["weights"])
        try:
            return ExpertConfig(**doc)
        except TypeError as exc:
            raise ConfigurationError(f"bad expert table: {exc}") from None

    def train_config(self) -> TrainConfig:
        doc = dict(self.bc)
        doc.setdefault("seed", self.seeds.bc)
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        try:
            return TrainConfig(**doc)
        except TypeError as exc:
            raise ConfigurationError(f"bad bc table: {exc}") from None


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a TOML file (system key picks the preset) and apply keyword overrides."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = toml_reader.load(fh)
        except (OSError, toml_reader.TOMLDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    doc = _deep_merge(doc, {k: v for k, v in overrides.items() if v is not None})
    system = doc.pop("system", "spring_mass")
    return ExperimentConfig.preset(system, **doc)


def setup(cfg: ExperimentConfig) -> tuple[SystemModel, TargetSpec]:
    model = builtin(cfg.system, **cfg.system_params)
    spec = TargetSpec.from_ball(model, cfg.center, cfg.radius, cfg.eps_margin)
    lo, hi = model.state_box[:, 0], model.state_box[:, 1]
    c = np.asarray(cfg.center, dtype=float)
    if np.any(c - cfg.radius < lo) or np.any(c + cfg.radius > hi):
        raise ConfigurationError("target ball must lie inside the state box")
    return model, spec


# ------------------------------------------------------------- sampling


def sample_initial_states(model: SystemModel, h_bar: float, count: int, rng: np.random.Generator,
                          chunk: int = 100_000, max_draws: int = 10_000_000) -> np.ndarray:
    """Uniform rejection sampling on the state box, accepting H(x) <= h_bar."""
    lo, hi = model.state_box[:, 0], model.state_box[:, 1]
    got, have, draws = [], 0, 0
    while have < count:
        cand = rng.uniform(lo, hi, size=(chunk, model.n))
        draws += chunk
        keep = cand[model.hamiltonian(cand) <= h_bar]
        got.append(keep)
        have += len(keep)
        if draws >= max_draws and have < 1e-4 * draws:
            raise ConfigurationError(f"h_bar={h_bar} accepts {have} of {draws} box samples; raise h_bar")
    return np.concatenate(got)[:count]


def stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag,)))


TEST_STREAM, DEMO_STREAM = 0, 1


def demo_start_sampler(cfg: ExperimentConfig, model: SystemModel, spec: TargetSpec):
    """Draw demonstration starts from S0 on their own stream.

    ``uniform`` draws from S0 itself. ``extremal`` keeps only the
    ``extremal_fraction`` of S0 farthest from the target band in energy, so a
    single demonstration already sweeps every energy layer of S0.
    """
    rng = stream(cfg.seeds.sampling, DEMO_STREAM)
    if cfg.demo_start == "uniform":
        return lambda: sample_initial_states(model, cfg.h_bar, 1, rng)[0]
    ref = sample_initial_states(model, cfg.h_bar, 20_000, rng)
    cut = np.quantile(delta_h(model, spec, ref), 1.0 - cfg.extremal_fraction)

    def draw():
        while True:
            xs = sample_initial_states(model, cfg.h_bar, 1000, rng)
            keep = xs[delta_h(model, spec, xs) >= cut]
            if len(keep):
                return keep[0]

    return draw


def generate_demos(cfg: ExperimentConfig, model: SystemModel, spec: TargetSpec, count: int) -> list[Demonstration]:
    """Expert demonstrations on their own seed stream; failed starts are redrawn."""
    ecfg = cfg.expert_config()
    draw = demo_start_sampler(cfg, model, spec)
    demos, failures, attempt = [], [], 0
    while len(demos) < count:
        x0 = draw()
        try:
            demos.append(generate_demonstration(model, spec, x0, ecfg, demo_rng(ecfg.seed, attempt), cfg.dt))
            log.info("demo %d from %s: %.3f s", len(demos) - 1, np.round(x0, 4), demos[-1].duration)
        except ExpertFailure as exc:
            failures.append(str(exc))
            if len(failures) > cfg.demo_retries:
                raise ExpertFailure(f"{len(failures)} expert failures (budget {cfg.demo_retries}): {failures}") from None
        attempt += 1
    return demos


def demo_digest(demos: Sequence[Demonstration]) -> str:
    h = hashlib.sha256()
    for d in demos:
        h.update(hashlib.sha256(d.to_json().encode()).digest())
    return h.hexdigest()


# ----------------------------------------------------------- evaluation


@dataclass
class ResultRecord:
    policy: str
    m: int
    success_rate: float
    avg_reach_time: float
    n_triples: Optional[int]
    wall_time: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success rate outside [0, 1]")


@dataclass
class ExperimentResult:
    records: list
    detail: list  # (policy, m, test_idx, x0, reached, reach_time)
    sets: dict  # m -> AssignmentSet
    params: dict  # m -> MlpParams
    checks: dict  # m -> ball-decrease report
    digests: dict  # m -> (chain digest, bc digest)
    demos: list
    test_states: np.ndarray
    wall_time: float = 0.0


def _summarize(policy: str, m: int, recs, horizon: float, n_triples, wall: float) -> ResultRecord:
    reached = np.array([r.reached for r in recs])
    times = np.array([r.reach_time if r.reached else horizon for r in recs])
    return ResultRecord(policy, m, float(reached.mean()), float(times.mean()), n_triples, wall)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    t_start = time.perf_counter()
    model, spec = setup(cfg)
    tests = sample_initial_states(model, cfg.h_bar, cfg.n_test, stream(cfg.seeds.sampling, TEST_STREAM))
    demos = generate_demos(cfg, model, spec, max(cfg.m_sweep))
    tcfg = cfg.train_config()

    out = ExperimentResult([], [], {}, {}, {}, {}, demos, tests)
    for m in sorted(set(cfg.m_sweep)):
        used = demos[:m]
        t0 = time.perf_counter()
        aset = build_assignment_set(model, spec, used, v0=cfg.v0, dt=cfg.dt, default_duration=cfg.default_duration)
        recs = rollout_batch(model, spec, aset, tests, cfg.horizon, cfg.dt)
        out.records.append(_summarize("chain", m, recs, cfg.horizon, len(aset), time.perf_counter() - t0))
        out.detail += [("chain", m, i, r.x0, r.reached, r.reach_time) for i, r in enumerate(recs)]
        out.sets[m] = aset
        if cfg.check_balls:
            out.checks[m] = ball_decrease_violations(model, spec, aset, cfg.per_ball, seed=cfg.seeds.sampling, dt=cfg.dt)

        t0 = time.perf_counter()
        params = train(used, tcfg, model.input_box)
        recs = bc_rollout_batch(model, spec, params, tests, cfg.horizon, cfg.dt)
        out.records.append(_summarize("bc", m, recs, cfg.horizon, None, time.perf_counter() - t0))
        out.detail += [("bc", m, i, r.x0, r.reached, r.reach_time) for i, r in enumerate(recs)]
        out.params[m] = params
        out.digests[m] = (demo_digest(used), demo_digest(used))
        log.info("M=%d chain %.3f / bc %.3f", m, out.records[-2].success_rate, out.records[-1].success_rate)
    out.wall_time = time.perf_counter() - t_start
    if write:
        write_outputs(cfg, out)
    return out


# -------------------------------------------------------------- outputs


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, records: Sequence[ResultRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in RESULT_COLUMNS])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["m"] = int(r["m"])
        r["success_rate"] = float(r["success_rate"])
        r["avg_reach_time"] = float(r["avg_reach_time"])
        r["n_triples"] = int(r["n_triples"]) if r["n_triples"] else None
    return rows


def write_outputs(cfg: ExperimentConfig, res: ExperimentResult) -> Path:
    root = Path(cfg.output_dir)
    (root / "demos").mkdir(parents=True, exist_ok=True)
    (root / "policies").mkdir(exist_ok=True)
    (root / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    manifest = {}
    for j, d in enumerate(res.demos):
        text = d.to_json()
        name = f"demo_{j:02d}.json"
        (root / "demos" / name).write_text(text)
        manifest[name] = hashlib.sha256(text.encode()).hexdigest()
    manifest_doc = {
        "files": manifest,
        "consumed": {str(m): {"chain": c, "bc": b} for m, (c, b) in res.digests.items()},
    }
    (root / "demos" / "manifest.json").write_text(json.dumps(manifest_doc, indent=2) + "\n")
    for m, aset in res.sets.items():
        (root / "policies" / f"chain_m{m}.json").write_text(aset.to_json())
    for m, params in res.params.items():
        (root / "policies" / f"bc_m{m}.json").write_text(params.to_json())

    write_results_csv(root / "results.csv", res.records)
    with open(root / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "m", "wall_time"])
        for r in res.records:
            w.writerow([r.policy, r.m, f"{r.wall_time:.3f}"])
        w.writerow(["total", "", f"{res.wall_time:.3f}"])
    n = res.test_states.shape[1]
    with open(root / "detail.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "m", "test_idx", *[f"x0_{i}" for i in range(n)], "reached", "reach_time"])
        for policy, m, i, x0, ok, t in res.detail:
            w.writerow([policy, m, i, *[repr(float(v)) for v in x0], int(ok), repr(float(t))])
    if res.checks:
        with open(root / "checks.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "samples", "violations", "worst_margin"])
            for m, c in res.checks.items():
                w.writerow([m, c["samples"], c["violations"], repr(c["worst_margin"])])
    emit_plot_script(root)
    render_figures(read_results_csv(root / "results.csv"), root, title=cfg.system)
    return root


PLOT_SCRIPT = '''"""Re-render the success-rate and reach-time curves from results.csv."""
import sys
from pathlib import Path

from hamchain.harness import read_results_csv, render_figures

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent
render_figures(read_results_csv(root / "results.csv"), root)
'''


def emit_plot_script(out_dir) -> Path:
    path = Path(out_dir) / "plot_results.py"
    path.write_text(PLOT_SCRIPT)
    return path


def render_figures(rows: Sequence[dict], out_dir, title: str = "") -> list[Path]:
    """Success rate and average reach time against M, one line per policy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    styles = {"chain": ("C0", "o", "chain policy"), "bc": ("C3", "s", "behavior cloning")}
    for key, ylabel, fname in (("success_rate", "success rate", "success_rate.png"),
                               ("avg_reach_time", "average reach time [s]", "reach_time.png")):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for policy, (color, marker, label) in styles.items():
            pts = sorted((r["m"], r[key]) for r in rows if r["policy"] == policy)
            if pts:
                ms, vs = zip(*pts)
                ax.plot(ms, vs, color=color, marker=marker, label=label)
        ax.set_xlabel("number of demonstrations M")
        ax.set_ylabel(ylabel)
        if key == "success_rate":
            ax.set_ylim(-0.03, 1.03)
        if title:
            ax.set_title(title.replace("_", "-"))
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=150)
        plt.close(fig)
        paths.append(out_dir / fname)
    return paths


def load_demos(paths, model: SystemModel, spec: TargetSpec) -> list[Demonstration]:
    return [Demonstration.from_json(Path(p).read_text(), model, spec) for p in paths]


def load_policy(path):
    text = Path(path).read_text()
    doc = json.loads(text)
    return AssignmentSet.from_json(text) if "triples" in doc else MlpParams.from_json(text)
