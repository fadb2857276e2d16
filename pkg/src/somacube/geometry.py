"""Exact Soma-cube geometry.

Defines the seven pieces in canonical local frames, the 24-element proper
rotation group of the cube, orientation enumeration, and cell placement
arithmetic on the 3x3x3 assembly grid.

Orientation indexing convention: orientation ids form a single flat index in
[0, 116), partitioned by piece in piece-id order with per-piece slot counts
(CORNER 8, POSITIVE 24, NEGATIVE 24, ZEE 12, TEE 12, ELL 24, THREE 12).
The two chiral screws (POSITIVE, NEGATIVE) have a 180-degree self-symmetry,
so only 12 of their 24 rotated forms are geometrically distinct; the index
deliberately keeps all 24 (each distinct form appears under two ids) because
the 116-slot layout is the fixed contract for the action space, the network
orientation head, and checkpoints. `distinct_orientations` gives the
deduplicated geometric view.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from typing import Iterable

GRID = 3
N_CELLS = GRID**3

Cell = tuple[int, int, int]
# A rotation is a signed axis-permutation matrix stored as three rows.
Rotation = tuple[tuple[int, int, int], tuple[int, int, int], tuple[int, int, int]]

IDENTITY: Rotation = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


class Piece(IntEnum):
    CORNER = 0
    POSITIVE = 1
    NEGATIVE = 2
    ZEE = 3
    TEE = 4
    ELL = 5
    THREE = 6


# Canonical local frames, min corner at the origin.
# CORNER is the tripod (one arm along each axis), POSITIVE/NEGATIVE are the
# two mirror-image screws, ZEE/TEE/ELL are the flat tetrominoes, THREE is the
# bent tromino. Cell counts sum to 27.
PIECE_CELLS: dict[Piece, frozenset[Cell]] = {
    Piece.CORNER: frozenset({(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1)}),
    Piece.POSITIVE: frozenset({(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)}),
    Piece.NEGATIVE: frozenset({(0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 1, 1)}),
    Piece.ZEE: frozenset({(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)}),
    Piece.TEE: frozenset({(0, 0, 0), (1, 0, 0), (2, 0, 0), (1, 1, 0)}),
    Piece.ELL: frozenset({(0, 0, 0), (1, 0, 0), (2, 0, 0), (0, 1, 0)}),
    Piece.THREE: frozenset({(0, 0, 0), (1, 0, 0), (0, 1, 0)}),
}

# Published per-piece orientation slot counts (see module docstring).
ORIENTATION_SLOTS: dict[Piece, int] = {
    Piece.CORNER: 8,
    Piece.POSITIVE: 24,
    Piece.NEGATIVE: 24,
    Piece.ZEE: 12,
    Piece.TEE: 12,
    Piece.ELL: 24,
    Piece.THREE: 12,
}

N_ORIENTATIONS = sum(ORIENTATION_SLOTS.values())  # 116


def cell_index(cell: Cell) -> int:
    """Flat grid index: x + 3y + 9z."""
    x, y, z = cell
    return x + 3 * y + 9 * z


def index_to_cell(index: int) -> Cell:
    return (index % 3, (index // 3) % 3, index // 9)


def in_grid(cell: Cell) -> bool:
    return all(0 <= v < GRID for v in cell)


def rotate_cell(rot: Rotation, cell: Cell) -> Cell:
    return (
        rot[0][0] * cell[0] + rot[0][1] * cell[1] + rot[0][2] * cell[2],
        rot[1][0] * cell[0] + rot[1][1] * cell[1] + rot[1][2] * cell[2],
        rot[2][0] * cell[0] + rot[2][1] * cell[1] + rot[2][2] * cell[2],
    )


def compose(r1: Rotation, r2: Rotation) -> Rotation:
    """Matrix product r1 @ r2, i.e. apply r2 first."""
    return tuple(
        tuple(sum(r1[i][k] * r2[k][j] for k in range(3)) for j in range(3))
        for i in range(3)
    )  # type: ignore[return-value]


def invert(rot: Rotation) -> Rotation:
    # orthogonal with integer entries: inverse is the transpose
    return tuple(tuple(rot[j][i] for j in range(3)) for i in range(3))  # type: ignore[return-value]


def _determinant(rot: Rotation) -> int:
    (a, b, c), (d, e, f), (g, h, i) = rot
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


@lru_cache(maxsize=1)
def enumerate_rotations() -> tuple[Rotation, ...]:
    """All 24 proper rotations of the cube as signed axis permutations.

    Canonical order: ascending lexicographic over the row tuples.
    """
    mats = []
    for perm in itertools.permutations((0, 1, 2)):
        for signs in itertools.product((-1, 1), repeat=3):
            rows = []
            for axis, sign in zip(perm, signs):
                row = [0, 0, 0]
                row[axis] = sign
                rows.append(tuple(row))
            rot: Rotation = tuple(rows)  # type: ignore[assignment]
            if _determinant(rot) == 1:
                mats.append(rot)
    return tuple(sorted(mats))


def normalize_cells(cells: Iterable[Cell]) -> frozenset[Cell]:
    """Translate so the bounding-box min corner sits at the origin."""
    cells = list(cells)
    mx = min(c[0] for c in cells)
    my = min(c[1] for c in cells)
    mz = min(c[2] for c in cells)
    return frozenset((x - mx, y - my, z - mz) for x, y, z in cells)


def _sorted_form(cells: Iterable[Cell]) -> tuple[Cell, ...]:
    return tuple(sorted(cells))


def rotated_forms(cells: Iterable[Cell]) -> list[tuple[Cell, ...]]:
    """The 24 rotated, translation-normalized forms in rotation order.

    No deduplication: symmetric shapes repeat forms.
    """
    base = list(cells)
    return [
        _sorted_form(normalize_cells(rotate_cell(r, c) for c in base))
        for r in enumerate_rotations()
    ]


def distinct_orientations(cells: Iterable[Cell]) -> list[tuple[Cell, ...]]:
    """Geometrically distinct orientations (cell-set dedup), sorted."""
    return sorted(set(rotated_forms(cells)))


def canonical_orientations(piece: Piece) -> list[tuple[Cell, ...]]:
    """The piece's orientation list backing its block of the flat index.

    Deduplicated forms in sorted order for pieces whose slot count equals
    their distinct-form count; for the screws all 24 rotated forms are kept,
    ordered by (form, rotation order) so twin slots sit adjacent.
    """
    base = PIECE_CELLS[piece]
    slots = ORIENTATION_SLOTS[piece]
    distinct = distinct_orientations(base)
    if len(distinct) == slots:
        return distinct
    forms = rotated_forms(base)
    order = {form: i for i, form in enumerate(distinct)}
    ranked = sorted(range(24), key=lambda i: (order[forms[i]], i))
    out = [forms[i] for i in ranked]
    if len(out) != slots:
        raise AssertionError(f"{piece.name}: {len(out)} forms != {slots} slots")
    return out


@dataclass(frozen=True)
class Orientation:
    """One entry of the flat orientation index."""

    index: int
    piece: Piece
    local_index: int
    cells: tuple[Cell, ...]


class OrientationTable:
    """Flat orientation index over all pieces: ids in [0, 116)."""

    def __init__(self) -> None:
        entries: list[Orientation] = []
        starts: dict[Piece, int] = {}
        for piece in Piece:
            starts[piece] = len(entries)
            for local, cells in enumerate(canonical_orientations(piece)):
                entries.append(Orientation(len(entries), piece, local, cells))
        self.orientations: tuple[Orientation, ...] = tuple(entries)
        self._starts = starts

    def __len__(self) -> int:
        return len(self.orientations)

    def __getitem__(self, index: int) -> Orientation:
        return self.orientations[index]

    def count(self, piece: Piece) -> int:
        return ORIENTATION_SLOTS[piece]

    def ids_for(self, piece: Piece) -> range:
        start = self._starts[piece]
        return range(start, start + ORIENTATION_SLOTS[piece])

    def global_index(self, piece: Piece, local_index: int) -> int:
        if not 0 <= local_index < ORIENTATION_SLOTS[piece]:
            raise IndexError(f"{piece.name} has no orientation {local_index}")
        return self._starts[piece] + local_index

    def piece_of(self, index: int) -> Piece:
        return self.orientations[index].piece

    def canonical_id(self, piece: Piece, cells: Iterable[Cell]) -> int:
        """Lowest orientation id of `piece` whose form equals `cells`."""
        form = _sorted_form(normalize_cells(cells))
        for oid in self.ids_for(piece):
            if self.orientations[oid].cells == form:
                return oid
        raise ValueError(f"cells are not an orientation of {piece.name}")


@lru_cache(maxsize=1)
def orientation_table() -> OrientationTable:
    return OrientationTable()


def place(orientation_cells: Iterable[Cell], anchor: Cell) -> frozenset[Cell] | None:
    """Translate a normalized orientation so its min corner lands on `anchor`.

    Returns None when any translated cell leaves the grid (an a-priori
    illegal action, not an error).
    """
    ax, ay, az = anchor
    out = []
    for x, y, z in orientation_cells:
        c = (x + ax, y + ay, z + az)
        if not (0 <= c[0] < GRID and 0 <= c[1] < GRID and 0 <= c[2] < GRID):
            return None
        out.append(c)
    return frozenset(out)
