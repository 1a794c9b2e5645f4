import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qdvox.config import RunConfig

settings.register_profile("qdvox", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "qdvox"))

# (criterion, passed, detail) rows collected by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    passed = sum(ok for _, ok, _ in ACCEPTANCE)
    terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE)} criteria passed")


def tiny_config(tmp_path, treatment="standard", generations=6, seed=0, **treatment_kw):
    """A run that finishes in a few seconds: 3x3 box, 3x3 archive, short episodes."""
    cfg = RunConfig(box=(3, 3), archive_dims=(3, 3), checkpoint_interval=3,
                    out_dir=str(tmp_path / f"{treatment}_{seed}"))
    cfg = cfg.override("task", episode_steps=40)
    cfg = cfg.override("treatment", treatment=treatment, generations=generations, master_seed=seed,
                       parents_per_gen=6, evals_per_individual=2, bootstrap_size=6,
                       no_migration_after=min(3, generations - 1), **treatment_kw)
    return cfg.override("pollination", frequency=3, episodes_per_teacher=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
