import numpy as np
import pytest

from hamchain.dynamics import TargetSpec, builtin_pendulum, builtin_spring_mass
from hamchain.expert import ExpertConfig, demo_rng, generate_demonstration
from hamchain.harness import ExperimentConfig, generate_demos, setup

SM_EXPERT = ExpertConfig(weights=(100.0, 1000.0, 0.01), max_episode=20.0)
PD_EXPERT = ExpertConfig(weights=(1.0, 100.0, 0.01), max_episode=150.0)


@pytest.fixture(scope="session")
def sm():
    return builtin_spring_mass()


@pytest.fixture(scope="session")
def sm_spec(sm):
    return TargetSpec.from_ball(sm, [0.0, 0.0], 0.1, 1e-3)


@pytest.fixture(scope="session")
def pd():
    return builtin_pendulum()


@pytest.fixture(scope="session")
def pd_spec(pd):
    return TargetSpec.from_ball(pd, [np.pi, 0.0], 0.1, 1e-2)


@pytest.fixture(scope="session")
def sm_demo(sm, sm_spec):
    return generate_demonstration(sm, sm_spec, [1.0, 0.0], SM_EXPERT, demo_rng(0, 0))


@pytest.fixture(scope="session")
def sm_demos3(sm, sm_spec, sm_demo):
    starts = [[np.cos(2.1), np.sin(2.1)], [np.cos(4.2), np.sin(4.2)]]
    more = [generate_demonstration(sm, sm_spec, x0, SM_EXPERT, demo_rng(0, j + 1)) for j, x0 in enumerate(starts)]
    return [sm_demo, *more]


@pytest.fixture(scope="session")
def sm_run_demo():
    """First demonstration of the default spring-mass experiment (start drawn from S0)."""
    cfg = ExperimentConfig.preset("spring_mass")
    model, spec = setup(cfg)
    return generate_demos(cfg, model, spec, 1)[0]


ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; lines are echoed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
