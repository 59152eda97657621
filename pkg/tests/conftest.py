import warnings

import numpy as np
import pytest

from lightweight import models
from lightweight.mesh import TetMesh


def icosphere(radius=1.0, levels=3):
    """Subdivided icosahedron surface plus a center node fanned into tets."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6),
         (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(levels):
        cache, nf = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    nodes = np.vstack([np.array(verts) * radius, [[0.0, 0.0, 0.0]]])
    center = len(verts)
    tets = np.array([(a, b, c, center) for a, b, c in f])
    return TetMesh(nodes, tets)


@pytest.fixture(scope="session")
def cube6():
    """Unit cube, 8 nodes, 6 tets."""
    return models.voxel_mesh(np.ones((1, 1, 1), bool))


@pytest.fixture(scope="session")
def unit_cube():
    """Unit cube of 4x4x4 voxels (384 tets)."""
    return models.voxel_mesh(np.ones((4, 4, 4), bool), 0.25)


@pytest.fixture(scope="session")
def small_bar():
    """Cantilever 10 x 3 x 3 with unit voxels, contact on every free surface node."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return models.cantilever(length=10, width=3, height=3, h=1.0, shell=1.0, contact="all")


@pytest.fixture(scope="session")
def sphere():
    return icosphere(1.0, 4)


# -- acceptance report ------------------------------------------------------------

_CRITERIA = {}
_DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None:
        return
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(mark, "PASS")
        _CRITERIA[mark] = "PASS" if prev == "PASS" and report.outcome == "passed" else "FAIL"
        _DETAILS.setdefault(mark, []).extend(v for k, v in report.user_properties if k == "detail")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), verdict in sorted(_CRITERIA.items()):
        detail = "; ".join(_DETAILS.get((number, title), []))
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}" + (f"  [{detail}]" if detail else ""))
