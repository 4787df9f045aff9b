import numpy as np
import pytest

from ovsg.benchmark import SyntheticSpec, generate_synthetic_dataset
from ovsg.types import BBox


def random_box(rng: np.random.Generator) -> BBox:
    """Valid center-format box fully inside the unit frame."""
    x1, y1 = rng.uniform(0.0, 0.8, size=2)
    w, h = rng.uniform(0.02, 1.0 - x1), rng.uniform(0.02, 1.0 - y1)
    return BBox.from_corners(x1, y1, x1 + w, y1 + h)


@pytest.fixture(scope="session")
def toy_data():
    return generate_synthetic_dataset(SyntheticSpec(n_scenes=8, n_objects=8, n_relations=4, seed=3))


ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE[key])
