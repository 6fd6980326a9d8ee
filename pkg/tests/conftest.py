import sys
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(max(1, torch.get_num_threads()))

import numpy as np
import pytest

from c2da.phantom import CohortConfig, generate_cohort
from c2da.volume import LabelMap, Volume

SMOKE_COHORT = {
    "master_seed": 5,
    "counts": {"source": 2, "target_train": 2, "target_val": 2, "target_test": 2},
    "source_gw_range": [26, 26],
    "target_gw_range": [26, 27],
}

# desk-scale schedule shared by the CLI and engine smoke tests
SMOKE_TRAIN = {
    "working_size": [64, 96],
    "base_width": 8,
    "generator_width": 8,
    "batch_size": 2,
    "epochs": 1,
    "steps_per_epoch": 2,
}


def toy_pair(seed, shape=(24, 32, 4), spacing=(1.0, 1.0, 2.0)):
    """Random blob phantom with all seven classes."""
    rng = np.random.default_rng(seed)
    h, w = np.meshgrid(np.linspace(-1, 1, shape[0]), np.linspace(-1, 1, shape[1]), indexing="ij")
    r = np.hypot(h, w)[..., None] * np.ones(shape[2])
    lab = np.zeros(shape, np.int8)
    for c, radius in enumerate((0.95, 0.8, 0.65, 0.5, 0.35, 0.2), start=1):
        lab[r <= radius] = c
    img = lab * 0.15 + rng.normal(0, 0.02, size=shape)
    return Volume(img, spacing), LabelMap(lab, spacing)


@pytest.fixture(scope="session")
def smoke_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke") / "cohort"
    generate_cohort(CohortConfig.from_dict(SMOKE_COHORT), root)
    return root


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, name, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
