from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from scenerefine.datagen import box_mesh, cylinder_mesh
from scenerefine.geometry import ObjectModel
from scenerefine.symmetry import SymmetryClass

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cube_model():
    return ObjectModel.from_mesh(box_mesh(0.1, 0.1, 0.1), SymmetryClass("cuboid"), 1024, seed=3, name="cube")


@pytest.fixture(scope="session")
def cylinder_model():
    return ObjectModel.from_mesh(cylinder_mesh(0.04, 0.12, 48), SymmetryClass("cylindrical"), 1024, seed=4,
                                 class_id=1, name="cylinder")


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(number, name, ok, detail)``."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, name, ok, detail):
        line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
