import math

import numpy as np
import pytest

from terrain_nav.assessment import AssessmentConfig
from terrain_nav.terrain import TerrainSpec, synthesize_terrain, voxelize


def make_map(*primitives, res=0.1, spacing=0.05, **kw):
    spec = TerrainSpec.model_validate({"primitives": list(primitives), "spacing": spacing, **kw})
    cloud = synthesize_terrain(spec)
    return cloud, voxelize(cloud, res)


def plate(x=(0, 10), y=(0, 10), z=0.0):
    return {"type": "plate", "x": list(x), "y": list(y), "z": z}


_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    measured = dict(item.user_properties).get("measured", "")
    _CRITERIA[mark.args[0]] = (mark.args[1], rep.outcome, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome, measured = _CRITERIA[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} - {title}" + (f" [{measured}]" if measured else ""))


@pytest.fixture(scope="session")
def flat10():
    """10 x 10 m plate sampled every 5 cm, voxelised at 10 cm."""
    return make_map(plate())


@pytest.fixture(scope="session")
def island():
    """Main plate plus an island beyond a 1.5 m gap."""
    return make_map(plate((0, 6), (0, 4)), plate((7.5, 10), (0, 4)))


@pytest.fixture
def acfg():
    return AssessmentConfig()


def assert_monotone_non_increasing(values):
    v = np.asarray(values)
    assert np.all(np.diff(v) <= 1e-12), v


# -- independent oracles --------------------------------------------------------------------------


def brute_force_normal(pts: np.ndarray) -> np.ndarray:
    """Grid search over upward unit normals minimising the sum of squared residuals."""
    c = pts - pts.mean(axis=0)

    def best(theta, phi):
        T, P = np.meshgrid(theta, phi, indexing="ij")
        n = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
        sse = np.sum((c @ n.T) ** 2, axis=0)
        i = int(np.argmin(sse))
        return n[i], T.ravel()[i], P.ravel()[i]

    n, t, p = best(np.radians(np.arange(0, 90.01, 1.0)), np.radians(np.arange(0, 360, 1.0)))
    for step in (0.1, 0.01):
        span = 12 * step
        n, t, p = best(np.radians(np.arange(math.degrees(t) - span, math.degrees(t) + span, step)),
                       np.radians(np.arange(math.degrees(p) - span * 5, math.degrees(p) + span * 5, step * 5)))
    return n


def angle(a, b):
    """Unsigned angle between two lines (radians), accurate near zero."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return math.atan2(np.linalg.norm(np.cross(a, b)), abs(float(np.dot(a, b))))


def naive_posterior(x, y, q, sigma_f, ell, noise):
    """Dense-matrix GP posterior with explicit kernel loops and a plain inverse."""
    n, m = len(x), len(q)
    k = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            k[i, j] = sigma_f ** 2 * math.exp(-np.sum((x[i] - x[j]) ** 2) / (2 * ell ** 2))
    ks = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            ks[i, j] = sigma_f ** 2 * math.exp(-np.sum((x[i] - q[j]) ** 2) / (2 * ell ** 2))
    inv = np.linalg.inv(k + noise * np.eye(n))
    mean = ks.T @ inv @ y
    var = sigma_f ** 2 - np.einsum("im,ij,jm->m", ks, inv, ks)
    return mean, np.maximum(var, 0)
