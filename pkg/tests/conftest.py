import numpy as np
import pytest

from rhythmhead import geometry
from rhythmhead.render import Camera, TexturedMesh, load_template


def smooth_texture(vertices: np.ndarray) -> np.ndarray:
    x, y, z = vertices.T
    return np.clip(np.stack([0.55 + 0.25 * np.sin(1.3 * x), 0.45 + 0.2 * np.cos(1.1 * y), 0.4 + 0.1 * z], 1), 0, 1)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return geometry.axis_angle_to_matrix(axis * rng.uniform(0, max_angle))


def random_pose(rng, max_angle=np.pi, max_shift=1.0):
    return geometry.RigidTransform(random_rotation(rng, max_angle), rng.uniform(-max_shift, max_shift, 3))


@pytest.fixture(scope="session")
def canonical():
    return geometry.load_canonical()


@pytest.fixture(scope="session")
def textured_template() -> TexturedMesh:
    t = load_template()
    return t.with_colors(smooth_texture(t.vertices))


@pytest.fixture
def camera():
    return Camera()


# --- acceptance reporting ------------------------------------------------------------

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Call with (ok, detail) once per acceptance criterion; prints one line and asserts."""

    def report(ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
