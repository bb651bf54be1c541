import numpy as np
import pytest

from nbvscan.geometry import Mesh

CUBE_FACES = np.array([
    [0, 2, 1], [0, 3, 2],      # z = lo
    [4, 5, 6], [4, 6, 7],      # z = hi
    [0, 1, 5], [0, 5, 4],      # y = lo
    [2, 3, 7], [2, 7, 6],      # y = hi
    [1, 2, 6], [1, 6, 5],      # x = hi
    [3, 0, 4], [3, 4, 7],      # x = lo
])


def box_mesh(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5), albedo=0.8) -> Mesh:
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]], dtype=float)
    return Mesh(v, CUBE_FACES.copy(), np.full(12, albedo))


@pytest.fixture
def cube() -> Mesh:
    return box_mesh()


def brute_force_raycast(mesh: Mesh, origin, direction, eps=1e-6):
    """Nearest hit over every face, written independently of the accelerator."""
    best_t, best_f = np.inf, -1
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    for f, (a, b, c) in enumerate(mesh.faces):
        p0, p1, p2 = mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]
        n = np.cross(p1 - p0, p2 - p0)
        denom = n @ d
        if abs(denom) < 1e-14:
            continue
        t = n @ (p0 - o) / denom
        if not t > eps:
            continue
        x = o + t * d
        # inside test via same-side signs of sub-triangle normals
        s0 = np.cross(p1 - p0, x - p0) @ n
        s1 = np.cross(p2 - p1, x - p1) @ n
        s2 = np.cross(p0 - p2, x - p2) @ n
        tol = -1e-9 * (n @ n)
        if s0 >= tol and s1 >= tol and s2 >= tol and t < best_t - 1e-12:
            best_t, best_f = t, f
    return best_t, best_f


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance check, then assert it."""
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE[number] = f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE[number])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
