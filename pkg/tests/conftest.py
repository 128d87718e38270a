"""Shared fixtures for Bounded Leray Lab tests."""

import math

import numpy as np
import pytest

# Import the lab modules from the repository root
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))
import spectral_core as sc


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance-size grids (deselect with -m "not slow")')


@pytest.fixture
def grid2d():
    """2D grid on [-4pi, 4pi)^2, N = 128: integer frequencies sit on the grid."""
    return sc.make_grid(2, 4 * math.pi, 128)


@pytest.fixture
def small_grid():
    """Coarse 2D grid for property tests."""
    return sc.make_grid(2, 4 * math.pi, 64)


@pytest.fixture
def trace_grid():
    """2D grid whose window holds the dual test family: [-8pi, 8pi)^2, N = 128."""
    return sc.make_grid(2, 8 * math.pi, 128)


@pytest.fixture
def flow_grid():
    """8pi box for 2pi-periodic flow data, N = 64."""
    return sc.make_grid(2, 8 * math.pi, 64)


@pytest.fixture
def random_vector(grid2d):
    return sc.random_smooth_field(grid2d, 'vector', seed=1, kmax=40.0)


def flipped(samples, d):
    """samples(-x) for arrays whose origin sits at index N/2."""
    axes = tuple(range(-d, 0))
    return np.roll(np.flip(samples, axis=axes), 1, axis=axes)


def taylor_green(grid):
    """2D Taylor-Green vortex with a small shear so the flow is not steady."""
    return sc.field_from_function(grid, lambda x, y: [
        np.sin(x) * np.cos(y) + 0.1 * np.sin(2.0 * y), -np.cos(x) * np.sin(y)], 'vector')
