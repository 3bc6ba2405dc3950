import pytest

from spotfusion.dataio import SyntheticSpec, generate_synthetic
from spotfusion.rng import SeededRng


@pytest.fixture
def rng():
    return SeededRng(123)


@pytest.fixture(scope="session")
def default_dataset():
    """The generator's default instance: 16x16 hex grid, 4 domains, noise 0.5,
    seed 7, with image.  Built once; treated as read-only by tests."""
    return generate_synthetic(SyntheticSpec(), SeededRng(7))
