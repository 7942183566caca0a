import pytest


def pytest_collection_modifyitems(config, items):
    """Run the acceptance suite last; its fixtures train for hours."""
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


@pytest.fixture
def rng64():
    import numpy as np

    return np.random.default_rng(20240517)
