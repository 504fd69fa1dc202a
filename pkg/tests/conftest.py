import math

import pytest
from hypothesis import HealthCheck, settings

from rwtree.env import EnvironmentModel, calibrate_two_point

settings.register_profile(
    "rwtree",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("rwtree")


@pytest.fixture(scope="session")
def model15():
    return calibrate_two_point(1.5)


@pytest.fixture(scope="session")
def model20():
    return calibrate_two_point(2.0)


@pytest.fixture(scope="session")
def biased_tree():
    # m = 2 children, each one step closer to the root in potential
    return EnvironmentModel.lambda_biased(2, 2.0)


@pytest.fixture(scope="session")
def flat_chain():
    # every vertex has one child at the same potential
    return EnvironmentModel.tabulated([(1.0, [0.0])])


def sigma_band(estimate, stderr, target, n_sigma=3.0):
    return abs(estimate - target) <= n_sigma * stderr + 1e-12 * max(1.0, abs(target))


LN2 = math.log(2.0)


# Small but complete runs of every command, shared by the CLI and acceptance tests.
SMALL_PARAMS = {
    "check-env": {},
    "simulate-walk": {"steps": 3000},
    "reduce": {"steps": 5000},
    "heights": {"steps": 5000},
    "spine-sample": {"depth": 12, "samples": 300},
    "eigen": {"I_max": 20, "replicates": 3000},
    "verify": {"samples": 3000, "I_max": 20, "spine_depth": 60},
    "tails": {"samples": 20_000, "w_depth": 12, "w_samples": 20_000},
    "scaling": {"n_grid": [1000, 2000], "replicates": 40, "M": [1.0]},
}


def small_config(command, out, seed=7, workers=1, model=None):
    return {
        "schema_version": 1,
        "model": model or {"kind": "calibrated", "kappa": 1.5, "offspring": 2},
        "master_seed": seed,
        "workers": workers,
        "output_dir": str(out),
        "params": dict(SMALL_PARAMS[command]),
    }


def artifact_bytes(out):
    """Every artifact except the manifest, which carries wall time and worker count."""
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
