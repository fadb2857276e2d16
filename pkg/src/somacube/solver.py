"""Exhaustive assembly oracle.

Enumerates every way a piece subset tiles a target region of the 3x3x3 grid,
via two structurally independent searches (fill the lowest empty cell vs
place pieces in id order) whose agreement is the correctness cross-check.
Also orders solutions robot-friendly (ground first, vertically accessible)
and samples reachable states for the legal-mask audit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .env import (
    FULL_OCCUPANCY,
    N_CELLS,
    N_POSITIONS,
    AssemblyEnv,
    action_table,
    bits_of,
)
from .geometry import PIECE_CELLS, Cell, Piece, cell_index, index_to_cell, orientation_table

# Published claim the audit report carries for comparison; never asserted.
REFERENCE_MASK_RATIO = 1.26


@dataclass(frozen=True)
class Solution:
    """One complete tiling: (piece, orientation id, position id) per piece."""

    placements: tuple[tuple[int, int, int], ...]

    def owner_map(self) -> tuple[int, ...]:
        table = action_table()
        owner = [-1] * N_CELLS
        for piece, ori, pos in self.placements:
            bits = int(table.cells_bits[ori * N_POSITIONS + pos])
            for i in range(N_CELLS):
                if bits >> i & 1:
                    owner[i] = piece
        return tuple(owner)

    def cells_by_piece(self) -> dict[int, frozenset[Cell]]:
        table = action_table()
        return {
            piece: table.cells[ori * N_POSITIONS + pos]  # type: ignore[misc]
            for piece, ori, pos in self.placements
        }


@dataclass(frozen=True)
class OrderedSolution:
    solution: Solution
    order: tuple[int, ...]

    def action_sequence(self) -> list[int]:
        by_piece = {p: (o, pos) for p, o, pos in self.solution.placements}
        return [by_piece[p][0] * N_POSITIONS + by_piece[p][1] for p in self.order]


@lru_cache(maxsize=None)
def _canonical_orientation_ids(piece: Piece) -> tuple[int, ...]:
    """First orientation id per geometrically distinct form of the piece."""
    table = orientation_table()
    seen: set[tuple[Cell, ...]] = set()
    out = []
    for oid in table.ids_for(piece):
        cells = table[oid].cells
        if cells not in seen:
            seen.add(cells)
            out.append(oid)
    return tuple(out)


def _placements(piece: Piece, region_bits: int) -> list[tuple[int, int, int]]:
    """(orientation id, position id, footprint bits) inside the region."""
    table = action_table()
    out = []
    for ori in _canonical_orientation_ids(piece):
        base = ori * N_POSITIONS
        for pos in range(N_POSITIONS):
            a = base + pos
            if not table.valid[a]:
                continue
            bits = int(table.cells_bits[a])
            if bits & ~region_bits:
                continue
            out.append((ori, pos, bits))
    return out


@lru_cache(maxsize=1)
def _cell_neighbor_bits() -> tuple[int, ...]:
    masks = []
    for i in range(N_CELLS):
        x, y, z = index_to_cell(i)
        m = 0
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            c = (x + d[0], y + d[1], z + d[2])
            if all(0 <= v < 3 for v in c):
                m |= 1 << cell_index(c)
        masks.append(m)
    return tuple(masks)


def _check_precondition(pieces: tuple[Piece, ...], region_bits: int) -> None:
    need = region_bits.bit_count()
    have = sum(len(PIECE_CELLS[p]) for p in pieces)
    if have != need:
        raise ValueError(
            f"piece cells ({have}) do not match region size ({need})"
        )
    if len(set(pieces)) != len(pieces):
        raise ValueError("duplicate pieces")


def solve_all(
    pieces: tuple[Piece, ...] | list[Piece],
    region: frozenset[Cell] | None = None,
    strategy: str = "cell",
) -> list[Solution]:
    """Every solution exactly once, in deterministic (sorted) order.

    `strategy` picks the search shape: "cell" recurses on the lowest empty
    cell, "piece" recurses over pieces in id order with region pruning. Both
    return identical sets.
    """
    pieces = tuple(sorted(pieces))
    region_bits = FULL_OCCUPANCY if region is None else bits_of(region)
    _check_precondition(pieces, region_bits)
    if strategy == "cell":
        raw = _solve_cell_major(pieces, region_bits)
    elif strategy == "piece":
        raw = _solve_piece_major(pieces, region_bits)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return sorted(raw, key=lambda s: s.placements)


def _solve_cell_major(pieces: tuple[Piece, ...], region_bits: int) -> list[Solution]:
    by_cell: list[list[tuple[int, int, int, int]]] = [[] for _ in range(N_CELLS)]
    for k, piece in enumerate(pieces):
        for ori, pos, bits in _placements(piece, region_bits):
            b = bits
            while b:
                low = (b & -b).bit_length() - 1
                by_cell[low].append((k, ori, pos, bits))
                b &= b - 1

    solutions: list[Solution] = []
    chosen: list[tuple[int, int, int]] = [None] * len(pieces)  # type: ignore[list-item]

    def dfs(occ: int, used: int) -> None:
        empty = region_bits & ~occ
        if not empty:
            solutions.append(
                Solution(tuple(sorted((int(pieces[k]), o, p) for k, (o, p) in enumerate(chosen))))  # type: ignore[arg-type]
            )
            return
        cell = (empty & -empty).bit_length() - 1
        for k, ori, pos, bits in by_cell[cell]:
            if used >> k & 1 or bits & occ:
                continue
            chosen[k] = (ori, pos)
            dfs(occ | bits, used | 1 << k)

    dfs(0, 0)
    return solutions


def _region_sizes_feasible(empty: int, achievable: frozenset[int]) -> bool:
    """Every connected empty region must have a size the remaining piece
    cell-counts can sum to."""
    neigh = _cell_neighbor_bits()
    rest = empty
    while rest:
        seed = rest & -rest
        comp = seed
        frontier = seed
        while frontier:
            grow = 0
            f = frontier
            while f:
                i = (f & -f).bit_length() - 1
                grow |= neigh[i]
                f &= f - 1
            new = grow & rest & ~comp
            comp |= new
            frontier = new
        if comp.bit_count() not in achievable:
            return False
        rest &= ~comp
    return True


def _solve_piece_major(pieces: tuple[Piece, ...], region_bits: int) -> list[Solution]:
    placements = [_placements(p, region_bits) for p in pieces]
    by_cell: list[list[tuple[int, int]]] = [[] for _ in range(N_CELLS)]
    for k in range(len(pieces)):
        for idx, (_, _, bits) in enumerate(placements[k]):
            b = bits
            while b:
                low = (b & -b).bit_length() - 1
                by_cell[low].append((k, idx))
                b &= b - 1

    sizes = [len(PIECE_CELLS[p]) for p in pieces]
    achievable: list[frozenset[int]] = []
    for k in range(len(pieces) + 1):
        sums = {0}
        for s in sizes[k:]:
            sums |= {x + s for x in sums}
        achievable.append(frozenset(sums))

    def coverable(occ: int, k: int) -> bool:
        empty = region_bits & ~occ
        b = empty
        while b:
            cell = (b & -b).bit_length() - 1
            ok = False
            for kk, idx in by_cell[cell]:
                if kk < k:
                    continue
                if placements[kk][idx][2] & occ:
                    continue
                ok = True
                break
            if not ok:
                return False
            b &= b - 1
        return True

    solutions: list[Solution] = []
    chosen: list[tuple[int, int]] = [None] * len(pieces)  # type: ignore[list-item]

    def dfs(k: int, occ: int) -> None:
        if k == len(pieces):
            solutions.append(
                Solution(tuple(sorted((int(pieces[i]), o, p) for i, (o, p) in enumerate(chosen))))
            )
            return
        for ori, pos, bits in placements[k]:
            if bits & occ:
                continue
            nxt = occ | bits
            empty = region_bits & ~nxt
            if empty and not _region_sizes_feasible(empty, achievable[k + 1]):
                continue
            if empty and not coverable(nxt, k + 1):
                continue
            chosen[k] = (ori, pos)
            dfs(k + 1, nxt)

    dfs(0, 0)
    return solutions


def verify(sol: Solution, region: frozenset[Cell] | None = None) -> bool:
    """Completeness (union covers the region) and pairwise non-overlap."""
    region_bits = FULL_OCCUPANCY if region is None else bits_of(region)
    table = action_table()
    occ = 0
    for _, ori, pos in sol.placements:
        a = ori * N_POSITIONS + pos
        if not table.valid[a]:
            return False
        bits = int(table.cells_bits[a])
        if bits & occ:
            return False
        occ |= bits
    return occ == region_bits


def rotation_distinct_count(solutions: list[Solution]) -> int:
    """Number of solution classes under whole-assembly rotation.

    Canonical representative: the lexicographically smallest of the 24
    rotated owner maps (rotation about the grid centre), compared as bytes.
    """
    from .geometry import enumerate_rotations, rotate_cell

    # perms[r][j] = source cell index whose owner lands on cell j under r
    perms = []
    for r in enumerate_rotations():
        perm = [0] * N_CELLS
        for i in range(N_CELLS):
            x, y, z = index_to_cell(i)
            c = rotate_cell(r, (x - 1, y - 1, z - 1))
            j = cell_index((c[0] + 1, c[1] + 1, c[2] + 1))
            perm[j] = i
        perms.append(np.array(perm))

    owners = np.array([sol.owner_map() for sol in solutions], dtype=np.int8)
    n = owners.shape[0]
    best: list[bytes | None] = [None] * n
    for perm in perms:
        rotated = owners[:, perm]
        raw = rotated.tobytes()
        for i in range(n):
            key = raw[i * N_CELLS:(i + 1) * N_CELLS]
            if best[i] is None or key < best[i]:
                best[i] = key
    return len(set(best))


def order_robot_friendly(sol: Solution) -> OrderedSolution | None:
    """Greedy-with-backtracking placement order: lower pieces first, every
    prefix supported and vertically accessible. None when no order exists."""
    table = action_table()
    entries = []
    for piece, ori, pos in sol.placements:
        a = ori * N_POSITIONS + pos
        entries.append(
            (piece, int(table.cells_bits[a]), int(table.below_bits[a]), int(table.above_bits[a]), float(table.mean_z[a]))
        )

    order: list[int] = []

    def dfs(occ: int, remaining: list[int]) -> bool:
        if not remaining:
            return True
        ranked = sorted(remaining, key=lambda i: (entries[i][4], entries[i][0]))
        for i in ranked:
            piece, bits, below, above, _ = entries[i]
            if (below & occ) != below:
                continue
            if above & occ:
                continue
            order.append(piece)
            rest = [j for j in remaining if j != i]
            if dfs(occ | bits, rest):
                return True
            order.pop()
        return False

    if dfs(0, list(range(len(entries)))):
        return OrderedSolution(sol, tuple(order))
    return None


@dataclass(frozen=True)
class MaskAuditReport:
    samples: int
    mean_legal: float
    min_legal: int
    max_legal: int
    ratio_full_over_mean: float
    reference_ratio: float
    action_space: int
    theoretical_raw_actions: int

    def as_dict(self) -> dict:
        return {
            "samples": self.samples,
            "mean_legal": self.mean_legal,
            "min_legal": self.min_legal,
            "max_legal": self.max_legal,
            "ratio_full_over_mean": self.ratio_full_over_mean,
            "paper_ref_ratio": self.reference_ratio,
            "action_space": self.action_space,
            "theoretical_raw_actions": self.theoretical_raw_actions,
        }


def mask_ratio_report(samples: int, seed: int, level: int = 3) -> MaskAuditReport:
    """Legal-action counts over randomly sampled non-terminal reachable states."""
    if samples <= 0:
        raise ValueError("samples must be positive")
    from .env import N_ACTIONS, THEORETICAL_RAW_ACTIONS

    env = AssemblyEnv(level=level, order_policy="shuffled")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 20_251_118]))
    counts = []
    for i in range(samples):
        state = env.reset(seed=seed, episode=i)
        count = int(env.legal_mask(state).sum())
        depth = int(rng.integers(0, len(state.piece_order)))
        for _ in range(depth):
            mask = env.legal_mask(state)
            legal = np.flatnonzero(mask)
            if legal.size == 0:
                break
            nxt, _, outcome, info = env.step(state, int(rng.choice(legal)))
            if outcome.terminal:
                # keep the last live state: dead ends and completions are
                # terminal, the audit covers non-terminal states only
                break
            state = nxt
            count = int(info["next_mask"].sum())
        counts.append(count)

    mean = float(np.mean(counts))
    return MaskAuditReport(
        samples=samples,
        mean_legal=mean,
        min_legal=int(min(counts)),
        max_legal=int(max(counts)),
        ratio_full_over_mean=float(N_ACTIONS / mean) if mean else float("inf"),
        reference_ratio=REFERENCE_MASK_RATIO,
        action_space=N_ACTIONS,
        theoretical_raw_actions=THEORETICAL_RAW_ACTIONS,
    )
