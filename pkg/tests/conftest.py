import numpy as np
import pytest

from somacube.env import N_POSITIONS, AssemblyEnv
from somacube.geometry import Piece, cell_index, normalize_cells, orientation_table


@pytest.fixture(scope="session")
def table():
    return orientation_table()


@pytest.fixture(scope="session")
def env3():
    return AssemblyEnv(level=3)


def action_for(piece: Piece, cells) -> int:
    """Flat action id placing `piece` exactly on `cells` (test helper)."""
    table = orientation_table()
    cells = frozenset(cells)
    anchor = (
        min(c[0] for c in cells),
        min(c[1] for c in cells),
        min(c[2] for c in cells),
    )
    ori = table.canonical_id(piece, normalize_cells(cells))
    return ori * N_POSITIONS + cell_index(anchor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
