import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ctube import config
from ctube.control import simulate

SCENARIOS = Path(config.__file__).parent / "scenarios"

# acceptance verdicts, echoed again in the terminal summary
ACCEPTANCE_LINES: list = []


def scenario(name: str, **overrides):
    cfg = config.load(SCENARIOS / f"{name}.cfg")
    return replace(cfg, **overrides) if overrides else cfg


class RunCache:
    """Closed-loop runs shared across test modules; each is timed once."""

    def __init__(self):
        self._runs = {}

    def get(self, name: str):
        if name not in self._runs:
            cfg = scenario(name)
            start = time.perf_counter()
            if cfg.controller_kind == "nmpc":
                from ctube.nmpc import receding_horizon_run

                res = receding_horizon_run(
                    cfg.nmpc_problem(), cfg.x0, cfg.t_end, sim_dt=cfg.dt, replan_every=cfg.nmpc["replan_every"]
                )
                extra = res
                traj = res.trajectory
            else:
                aux = [cfg.obstacle_barrier()] if cfg.obstacle is not None else []
                traj = simulate(cfg.system(), cfg.controller(), cfg.x0, cfg.t_end, cfg.dt, aux_barriers=aux)
                extra = None
            self._runs[name] = (cfg, traj, time.perf_counter() - start, extra)
        return self._runs[name]


@pytest.fixture(scope="session")
def runs():
    return RunCache()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
