import numpy as np
import pytest

from atlasforge.geometry import CameraConfig, box, canonical_viewpoints, uv_sphere
from atlasforge.raster import rasterize_buffers


def smooth_image(height, width, channels=3, seed=0, amplitude=0.12):
    """Sum of low-frequency sinusoids (1 to 4 cycles across the frame) around mid-gray."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    yy, xx = yy / height, xx / width
    out = np.full((height, width, channels), 0.5)
    for c in range(channels):
        for _ in range(4):
            fx, fy = rng.integers(1, 5, 2)
            ph = rng.uniform(0, 2 * np.pi, 2)
            out[:, :, c] += amplitude * np.sin(2 * np.pi * fx * xx + ph[0]) * np.cos(2 * np.pi * fy * yy + ph[1])
    return np.clip(out, 0, 1)


def smooth_atlas(resolution, channels=3, seed=0, amplitude=0.12):
    return smooth_image(resolution, resolution, channels, seed, amplitude)


@pytest.fixture(scope="session")
def sphere():
    return uv_sphere()


@pytest.fixture(scope="session")
def cube():
    return box()


@pytest.fixture(scope="session")
def views128():
    return canonical_viewpoints(CameraConfig(image_size=128))


@pytest.fixture(scope="session")
def sphere_buffers128(sphere, views128):
    return [rasterize_buffers(sphere, v) for v in views128]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and rep.when == "call":
        rep.user_properties.append(("criterion", marker.args))


def pytest_terminal_summary(terminalreporter):
    rows = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(rep.user_properties)
            if "criterion" in props:
                number, title = props["criterion"]
                measured = props.get("measured", "")
                rows.append((number, "PASS" if rep.passed else "FAIL", title, measured))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, measured in sorted(rows):
        terminalreporter.write_line(f"[{status}] {number:2d}. {title}" + (f"  ({measured})" if measured else ""))
