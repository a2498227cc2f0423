import numpy as np
import pytest

from patchsweep.fixtures import two_patch_example
from patchsweep.mesh import (
    StructuredMeshSpec,
    build_structured_mesh,
    decompose_structured,
    level_symmetric_directions,
)


def bits(a):
    """View a float array as raw 64-bit patterns for bitwise comparison."""
    return np.ascontiguousarray(a, dtype=np.float64).view(np.uint64)


@pytest.fixture
def two_patch():
    return two_patch_example()


@pytest.fixture(scope="session")
def cube8():
    mesh = build_structured_mesh(StructuredMeshSpec((8, 8, 8)))
    return decompose_structured(mesh, (4, 4, 4)), level_symmetric_directions(2)


@pytest.fixture
def cube4():
    mesh = build_structured_mesh(StructuredMeshSpec((4, 4, 4)))
    return decompose_structured(mesh, (2, 2, 2)), level_symmetric_directions(2)


_criteria: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or (call.when != "call" and call.excinfo is None):
        return
    entry = _criteria.setdefault(marker.args[0], {"ok": True, "details": []})
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    for item in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        if item.when != "call":
            continue
        for name, value in item.user_properties:
            if name == "criterion":
                n, text = value
                _criteria.setdefault(n, {"ok": True, "details": []})["details"].append(text)
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        entry = _criteria[n]
        status = "PASS" if entry["ok"] else "FAIL"
        detail = "; ".join(entry["details"])
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  {detail}" if detail else ""))
