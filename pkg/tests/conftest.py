import os
from pathlib import Path

import numpy as np
import pytest

from desae.backbone_io import BackboneStructure, list_structure_files, parse_structure
from desae.geometry import random_backbone

DATA_DIR = Path(__file__).parent / "data"
EXPERIMENTAL_DIR = Path(os.environ.get("DESAE_ANCHOR_DIR", DATA_DIR / "experimental"))


def random_rotation_matrix(rng) -> np.ndarray:
    """Haar-random rotation via QR, independent of the package's quaternion code."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_structure(rng) -> BackboneStructure:
    return random_backbone(rng, 12, "small")


@pytest.fixture(scope="session")
def experimental_structures() -> list[BackboneStructure]:
    return [parse_structure(p) for p in list_structure_files(EXPERIMENTAL_DIR)]


def make_structure(coords, sequence=None, sid="t") -> BackboneStructure:
    coords = np.asarray(coords, dtype=np.float64)
    n = len(coords)
    return BackboneStructure(sid, sequence or "A" * n, coords, np.ones((n, 4), dtype=bool))


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request, capsys):
    """Record one PASS/FAIL line per acceptance criterion and echo it live."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        results[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
