"""Shared fixtures: system constants and cached halo orbits"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from cr3bp import SystemParams  # noqa: E402


@pytest.fixture(scope="session")
def params() -> SystemParams:
    return SystemParams()


@pytest.fixture(scope="session")
def small_halo(params):
    """Orbit just above the L1 energy (smallest amplitude in the family)"""
    import halo
    return halo.solve_halo(halo.E_L1 + 0.01, params)


@pytest.fixture(scope="session")
def alpha0_halo(params):
    import halo
    return halo.halo_for_alpha(0.0, params)
