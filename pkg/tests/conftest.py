"""Shared fixtures for the test suite."""

import pytest

from remlab import (DesignSpec, FixedEffects, VarianceParams, simulate,
                    sufficient_stats)


@pytest.fixture(scope="session")
def medium_dataset():
    """A moderately sized balanced dataset with an interior maximiser."""
    return simulate(DesignSpec(200, 9), FixedEffects(2.0, 1.0),
                    VarianceParams(4.0, 1.0, 1.0, -0.5), 11)


@pytest.fixture(scope="session")
def medium_stats(medium_dataset):
    return sufficient_stats(medium_dataset)
