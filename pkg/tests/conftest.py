import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_drone(tmp_path_factory):
    """A 90-sample drone dataset at 2048 Hz, small enough for training smoke tests."""
    from crosstalk_mtl.benchmarks import GenSpec, build_dataset

    out = tmp_path_factory.mktemp("tiny_drone")
    spec = GenSpec("drone", sample_rate=2048, duration=576 / 2048, total=90, seed=3,
                   target_ibr={"fault": 2.0, "drone_type": 1.0, "direction": 1.0})
    build_dataset(spec, out)
    return out / "manifest.csv"


@pytest.fixture(scope="session")
def tiny_motor(tmp_path_factory):
    """Motor dataset with three samples in each of the 36 compound cells."""
    from crosstalk_mtl.benchmarks import GenSpec, build_dataset

    out = tmp_path_factory.mktemp("tiny_motor")
    spec = GenSpec("motor", sample_rate=2048, duration=0.25, seed=5, counts=[3] * 36,
                   target_ibr={"irf": 1.0, "orf": 1.0, "misalignment": 1.0, "unbalance": 1.0, "compound": 1.0})
    build_dataset(spec, out)
    return out / "manifest.csv"


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    """Keep the worst outcome per criterion; printed at the end of the session."""
    prev = ACCEPTANCE.get(n)
    if prev is None or (prev[0] and not ok):
        ACCEPTANCE[n] = (ok, detail)
    elif prev[0] == ok:
        ACCEPTANCE[n] = (ok, f"{prev[1]}; {detail}")
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
