import json

import pytest

from polaris.scene import parse_scene


def sphere_doc(material=None, width=32, height=32, samples=64, **env):
    """Unit sphere over a ground plane under ambient light and one low sun."""
    return {
        "camera": {"position": [0, 1.5, 5], "vertical_fov": 35, "width": width, "height": height},
        "primitives": [
            {"type": "sphere", "center": [0, 0, 0], "radius": 1, "material": 0},
            {"type": "plane", "point": [0, -1, 0], "normal": [0, 1, 0], "material": 1},
        ],
        "materials": [
            material or {"m": 0, "roughness": 0.2, "ks": 1.0, "eta": [0.2, 0.5, 1.4], "k": [3.4, 2.6, 1.9]},
            {"m": 1, "albedo": [0.6, 0.5, 0.4], "roughness": 0.4, "ks": 0.5},
        ],
        "env": env or {"ambient": [0.5, 0.5, 0.5],
                       "suns": [{"direction": [1, 0.3, 0.2], "angular_radius": 15, "radiance": 10}]},
        "sampling": {"hemisphere_samples": samples, "seed": 0},
    }


@pytest.fixture(scope="session")
def sphere_scene():
    return parse_scene(json.dumps(sphere_doc()))


@pytest.fixture(scope="session")
def sphere_doc_factory():
    return sphere_doc


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
