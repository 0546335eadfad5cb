import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bispde.mesh import assemble_fem, build_mesh
from bispde.model import ModelSpec, Observation, ObservationTable, Problem

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def small_dataset(seed=0, n_stations=8, years=(2000, 2001), h_every=2, scale=10.0):
    """Tiny synthetic table: every station observes T, every other one H."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, scale, (n_stations, 2))
    recs = []
    for yr in years:
        for i, p in enumerate(pts):
            for f in "TH":
                if f == "H" and i % h_every:
                    continue
                recs.append(
                    Observation(f"s{i}", yr, f, float(rng.normal()), p[0], p[1], 100.0 * i, 1e4 * i)
                )
    return pts, ObservationTable.from_records(recs)


@pytest.fixture(scope="session")
def tiny():
    """Mesh with at most 40 nodes carrying a two-year table."""
    pts, obs = small_dataset()
    mesh = build_mesh(pts, 4.5, 1.0)
    assert mesh.n_vertices <= 40
    return mesh, assemble_fem(mesh), obs


@pytest.fixture(scope="session")
def tiny_problems(tiny):
    mesh, fem, obs = tiny
    years = obs.years()
    return {k: Problem(obs, mesh, ModelSpec(k, years), fem) for k in ("UM", "BM_TH", "BM_HT")}


THETA = {
    "UM": np.array([0.3, 0.5, 0.4, 0.7]),
    "BM_TH": np.array([0.3, 0.5, -0.2, 0.6, 0.4, 0.7]),
    "BM_HT": np.array([0.3, 0.5, 0.2, 0.6, 0.4, 0.7]),
}


@pytest.fixture(scope="session")
def unit_square_mesh():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    return build_mesh(pts, 0.2, 0.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
