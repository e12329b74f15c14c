import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from multistain.synthdata import TissueSpec, generate_dataset  # noqa: E402

torch.set_num_threads(1)

# criterion number -> (name, passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def small_records():
    return generate_dataset(TissueSpec(), 40, seed=0)


@pytest.fixture(scope="session")
def positive_record(small_records):
    return next(r for r in small_records if not r.is_negative)


@pytest.fixture(scope="session")
def negative_record(small_records):
    return next(r for r in small_records if r.is_negative)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_output_root(monkeypatch):
    monkeypatch.delenv("MULTISTAIN_OUTPUT_ROOT", raising=False)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        tr.write_line(f"criterion {k} {name}: {'PASS' if ok else 'FAIL'}  {detail}")


def record_acceptance(number: int, name: str, ok: bool, detail: str = ""):
    ACCEPTANCE[number] = (name, bool(ok), detail)
    print(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'}  {detail}")


os.environ.setdefault("MPLBACKEND", "Agg")
