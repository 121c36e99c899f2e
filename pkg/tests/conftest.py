import numpy as np
import pytest

from sgmapper import synthetic
from sgmapper.geometry import PointCloud

# fixture knobs for edge proposal: the default map base leaves eroded,
# merely touching boxes without any point pair inside the proximity radius
FIXTURE_EDGES = {"base_voxel": 0.08, "min_ratio": 0.04}


@pytest.fixture(scope="session")
def fixture_dataset(tmp_path_factory):
    return synthetic.generate(tmp_path_factory.mktemp("fixture") / "ds", "default")


@pytest.fixture(scope="session")
def bench_dataset(tmp_path_factory):
    return synthetic.generate(tmp_path_factory.mktemp("bench") / "ds", "bench")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box_cloud(lo, hi, n=500, seed=0, color=None):
    r = np.random.default_rng(seed)
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    pts = lo + r.random((n, 3)) * (hi - lo)
    cols = None if color is None else np.tile(np.asarray(color, float), (n, 1))
    return PointCloud(pts, cols)


def pipeline_config(dataset, output, **sections):
    from sgmapper.config import from_dict

    data = {"dataset": str(dataset), "output": str(output), "edges": dict(FIXTURE_EDGES)}
    for key, value in sections.items():
        data.setdefault(key, {}).update(value) if isinstance(value, dict) else data.__setitem__(key, value)
    return from_dict(data)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
