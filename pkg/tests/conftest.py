import dataclasses
import functools
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mtlmark.data import SplitSpec  # noqa: E402
from mtlmark.experiment import ExperimentConfig, ablation_config, run_host  # noqa: E402


def seeded_config(seed: int) -> ExperimentConfig:
    """Default experiment with every random source tied to ``seed``."""
    cfg = ExperimentConfig()
    cfg.data.seed = seed
    cfg.data.split = SplitSpec(0.5, 0.25, 0.25, seed)
    cfg.model.seed = seed
    cfg.train = dataclasses.replace(cfg.train, seed=seed)
    return cfg.validate()


@functools.lru_cache(maxsize=None)
def _clean(seed):
    run = run_host(seeded_config(seed), ablation_config(seeded_config(seed).train, "none"))
    return run.clean, run.primary_report


@functools.lru_cache(maxsize=None)
def host_run(seed: int = 0, ablation: str = "both"):
    """Trained + embedded host for ``seed``; the clean stage is shared across ablations."""
    cfg = seeded_config(seed)
    return run_host(cfg, ablation_config(cfg.train, ablation), clean=_clean(seed))


@pytest.fixture(scope="session")
def host():
    return host_run(0, "both")
