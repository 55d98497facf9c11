from __future__ import annotations

from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rbflio.kinematics import load_robot_description

settings.register_profile("repo", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=60)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def leg():
    return load_robot_description()


@pytest.fixture(scope="session")
def robot_text():
    return resources.files("rbflio.data").joinpath("legged_wheel.robot").read_text()


@pytest.fixture(scope="session")
def small_bundle(leg, robot_text):
    """Short staircase sequence (about 4 s) shared by integration tests."""
    from dataclasses import replace

    from rbflio.sim import get_scenario, simulate

    sc = get_scenario("staircase_1")
    sc = replace(sc, profile=replace(sc.profile, waypoints=((0.0, 0.0), (3.0, 0.0)), stationary_start=0.3,
                                     stationary_end=0.2))
    return simulate(sc, 3, leg, robot_text)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, max_angle=np.pi):
    from rbflio.so3 import so3_exp

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0, max_angle))


# acceptance summary: one line per criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(cid: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (bool(ok), detail)
    print(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid}: {'PASS' if ok else 'FAIL'}  {detail}")
