import time
from contextlib import contextmanager

import numpy as np
import pytest

from meshfuse import body_model as bm
from meshfuse.geometry import TriangleMesh


@pytest.fixture(scope="session")
def toy():
    return bm.make_toy_model()


@pytest.fixture(scope="session")
def toy_small():
    return bm.make_toy_model(1)


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)):
    """Outward-wound subdivided icosahedron."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache, nf = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    V = np.array(verts) * radius + np.asarray(center, float)
    return TriangleMesh(V, np.array(f), np.zeros(len(V), np.int64))


def unit_cube(lo=(0.0, 0.0, 0.0), size=1.0):
    """Closed outward-wound axis-aligned cube."""
    c = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    V = np.asarray(lo, float) + size * c
    F = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
    return TriangleMesh(V, F)


def random_rotation(rng):
    from scipy.spatial.transform import Rotation
    return Rotation.random(random_state=rng.integers(2**31)).as_matrix()


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run

ACCEPTANCE = []


@contextmanager
def criterion(name):
    """Record the outcome of the enclosed checks under ``name``.

    The body may set ``rec["detail"]`` to a short measurement string.
    """
    rec = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield rec
    except BaseException as exc:
        msg = rec["detail"] or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE.append((name, False, msg, time.perf_counter() - t0))
        raise
    ACCEPTANCE.append((name, True, rec["detail"], time.perf_counter() - t0))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail, secs in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({secs:.1f} s)  {detail}")
