import itertools

import pytest
from hypothesis import given, strategies as st

from somacube.geometry import (
    IDENTITY,
    N_ORIENTATIONS,
    ORIENTATION_SLOTS,
    PIECE_CELLS,
    Piece,
    canonical_orientations,
    cell_index,
    compose,
    distinct_orientations,
    enumerate_rotations,
    index_to_cell,
    invert,
    normalize_cells,
    place,
    rotate_cell,
)

EXPECTED_SLOTS = {
    Piece.CORNER: 8,
    Piece.POSITIVE: 24,
    Piece.NEGATIVE: 24,
    Piece.ZEE: 12,
    Piece.TEE: 12,
    Piece.ELL: 24,
    Piece.THREE: 12,
}

# True cell-set-distinct forms: the two screws carry a 180-degree
# self-symmetry, so each of their 24 indexed slots covers 12 distinct forms.
EXPECTED_DISTINCT = {
    Piece.CORNER: 8,
    Piece.POSITIVE: 12,
    Piece.NEGATIVE: 12,
    Piece.ZEE: 12,
    Piece.TEE: 12,
    Piece.ELL: 24,
    Piece.THREE: 12,
}


class TestRotations:
    def test_contains_identity(self):
        assert IDENTITY in enumerate_rotations()

    def test_exactly_24(self):
        assert len(enumerate_rotations()) == 24
        assert len(set(enumerate_rotations())) == 24

    def test_closure_all_576_pairs(self):
        rots = enumerate_rotations()
        group = set(rots)
        for r1, r2 in itertools.product(rots, repeat=2):
            assert compose(r1, r2) in group

    def test_every_element_has_inverse(self):
        group = set(enumerate_rotations())
        for r in enumerate_rotations():
            inv = invert(r)
            assert inv in group
            assert compose(r, inv) == IDENTITY
            assert compose(inv, r) == IDENTITY

    def test_deterministic_order(self):
        assert enumerate_rotations() == tuple(sorted(enumerate_rotations()))


class TestCellIndex:
    def test_bijection(self):
        seen = set()
        for x in range(3):
            for y in range(3):
                for z in range(3):
                    i = cell_index((x, y, z))
                    assert index_to_cell(i) == (x, y, z)
                    seen.add(i)
        assert seen == set(range(27))

    def test_layout(self):
        assert cell_index((0, 0, 0)) == 0
        assert cell_index((1, 0, 0)) == 1
        assert cell_index((0, 1, 0)) == 3
        assert cell_index((0, 0, 1)) == 9


class TestOrientations:
    def test_piece_cell_counts(self):
        counts = {p: len(PIECE_CELLS[p]) for p in Piece}
        assert counts[Piece.THREE] == 3
        assert sum(counts.values()) == 27

    def test_pieces_face_connected(self):
        for p, cells in PIECE_CELLS.items():
            frontier = {next(iter(cells))}
            seen = set(frontier)
            while frontier:
                nxt = set()
                for x, y, z in frontier:
                    for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                        c = (x + d[0], y + d[1], z + d[2])
                        if c in cells and c not in seen:
                            nxt.add(c)
                            seen.add(c)
                frontier = nxt
            assert seen == cells, p

    def test_slot_counts(self):
        for p, n in EXPECTED_SLOTS.items():
            assert ORIENTATION_SLOTS[p] == n
            assert len(canonical_orientations(p)) == n
        assert N_ORIENTATIONS == 116

    def test_distinct_counts(self):
        for p, n in EXPECTED_DISTINCT.items():
            assert len(distinct_orientations(PIECE_CELLS[p])) == n

    def test_screws_are_mirror_twins_not_rotations(self):
        pos = set(distinct_orientations(PIECE_CELLS[Piece.POSITIVE]))
        neg = set(distinct_orientations(PIECE_CELLS[Piece.NEGATIVE]))
        assert not pos & neg

    def test_dedup_idempotent(self):
        for p in Piece:
            for form in distinct_orientations(PIECE_CELLS[p]):
                again = distinct_orientations(form)
                assert len(again) == len(distinct_orientations(PIECE_CELLS[p]))

    def test_orientations_normalized(self, table):
        for o in table.orientations:
            assert normalize_cells(o.cells) == frozenset(o.cells)

    def test_global_ids_partition(self, table):
        assert len(table) == 116
        covered = []
        for p in Piece:
            ids = table.ids_for(p)
            assert len(ids) == EXPECTED_SLOTS[p]
            for local, gid in enumerate(ids):
                assert table.global_index(p, local) == gid
                assert table.piece_of(gid) is p
            covered.extend(ids)
        assert covered == list(range(116))

    def test_global_index_bounds(self, table):
        with pytest.raises(IndexError):
            table.global_index(Piece.CORNER, 8)

    def test_screw_slots_cover_each_form_twice(self, table):
        for p in (Piece.POSITIVE, Piece.NEGATIVE):
            forms = [table[i].cells for i in table.ids_for(p)]
            by_form = {}
            for f in forms:
                by_form[f] = by_form.get(f, 0) + 1
            assert set(by_form.values()) == {2}


class TestPlace:
    def test_single_cell_translation(self):
        assert place({(0, 0, 0)}, (2, 2, 2)) == frozenset({(2, 2, 2)})

    def test_four_bar_never_fits(self):
        bar = {(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)}
        assert place(bar, (0, 0, 0)) is None

    def test_three_piece_hand_translation(self):
        ell = {(0, 0, 0), (1, 0, 0), (1, 1, 0)}
        assert place(ell, (1, 1, 0)) == frozenset({(1, 1, 0), (2, 1, 0), (2, 2, 0)})

    def test_out_of_bounds_is_none(self):
        assert place({(0, 0, 0), (0, 0, 2)}, (0, 0, 1)) is None

    @given(
        st.sets(
            st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(0, 2)),
            min_size=1,
            max_size=5,
        ),
        st.tuples(st.integers(-1, 3), st.integers(-1, 3), st.integers(-1, 3)),
    )
    def test_place_stays_in_grid_and_preserves_size(self, cells, anchor):
        shape = normalize_cells(cells)
        out = place(shape, anchor)
        if out is not None:
            assert len(out) == len(shape)
            assert all(0 <= v <= 2 for c in out for v in c)


class TestRotationOrbit:
    def test_rotating_any_orientation_stays_in_orbit(self, table):
        rots = enumerate_rotations()
        for p in Piece:
            orbit = set(distinct_orientations(PIECE_CELLS[p]))
            sample = table[table.ids_for(p)[0]].cells
            for r in rots[:6]:
                rotated = normalize_cells(rotate_cell(r, c) for c in sample)
                assert tuple(sorted(rotated)) in orbit
