"""Assembly MDP on the 3x3x3 grid.

State encoding, legality predicates, the legal-action mask over the flat
116x27 action space, transitions with the shaped (or sparse) reward, and
termination. States are immutable values; `AssemblyEnv.step` returns a new
state. Occupancy is kept as a 27-bit integer so predicates reduce to a few
bitwise operations over precomputed per-action masks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from . import zyz
from .geometry import (
    GRID,
    N_CELLS,
    N_ORIENTATIONS,
    Cell,
    Piece,
    cell_index,
    index_to_cell,
    orientation_table,
    place,
)

N_POSITIONS = N_CELLS
N_ACTIONS = N_ORIENTATIONS * N_POSITIONS  # 3132
THEORETICAL_RAW_ACTIONS = 7 * 24 * 27  # 4536, before orientation dedup

FULL_OCCUPANCY = (1 << N_CELLS) - 1

# Ordered piece subsets per curriculum level.
LEVEL_PIECES: dict[int, tuple[Piece, ...]] = {
    1: (Piece.CORNER, Piece.POSITIVE),
    2: (Piece.CORNER, Piece.POSITIVE, Piece.NEGATIVE),
    3: tuple(Piece),
}

STATE_DIM = 36


class IllegalActionError(RuntimeError):
    """Raised when step() is handed a mask-false action: a caller bug."""


class EmptyMaskError(RuntimeError):
    """Raised on a non-terminal empty legal mask where one is required."""


class Outcome(Enum):
    RUNNING = "running"
    COMPLETE = "complete"
    DEAD_END = "dead_end"

    @property
    def terminal(self) -> bool:
        return self is not Outcome.RUNNING


@dataclass(frozen=True)
class RewardBreakdown:
    base: float
    ground: float
    access: float
    height: float
    logic: float
    structure: float

    @property
    def total(self) -> float:
        return (
            self.base + self.ground + self.access + self.height + self.logic + self.structure
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "base": self.base,
            "ground": self.ground,
            "access": self.access,
            "height": self.height,
            "logic": self.logic,
            "structure": self.structure,
            "total": self.total,
        }


@dataclass(frozen=True)
class EnvState:
    occupancy: int
    placed: tuple[bool, ...]
    piece_order: tuple[int, ...]
    cursor: int
    owner: tuple[int, ...]
    prev_mean_height: float | None

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.piece_order)

    @property
    def current_piece(self) -> int | None:
        if self.done:
            return None
        return self.piece_order[self.cursor]

    def occupied(self, cell: Cell) -> bool:
        return bool(self.occupancy >> cell_index(cell) & 1)


def bits_of(cells: Iterable[Cell]) -> int:
    mask = 0
    for c in cells:
        mask |= 1 << cell_index(c)
    return mask


def _neighbors(cell: Cell) -> list[Cell]:
    x, y, z = cell
    out = []
    for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
        c = (x + d[0], y + d[1], z + d[2])
        if 0 <= c[0] < GRID and 0 <= c[1] < GRID and 0 <= c[2] < GRID:
            out.append(c)
    return out


class ActionTable:
    """Per-action geometry for the flat index a = orientation*27 + position.

    `valid` marks in-bounds placements. For valid actions, `cells_bits` is
    the 27-bit footprint, `below_bits` the support cells required from the
    environment, `above_bits` the cells that must be empty for a clear
    vertical descent, and `neighbor_bits` the face-adjacent shell used by the
    structure reward.
    """

    def __init__(self) -> None:
        table = orientation_table()
        n = N_ACTIONS
        self.valid = np.zeros(n, dtype=bool)
        self.cells_bits = np.zeros(n, dtype=np.int64)
        self.below_bits = np.zeros(n, dtype=np.int64)
        self.above_bits = np.zeros(n, dtype=np.int64)
        self.neighbor_bits = np.zeros(n, dtype=np.int64)
        self.min_z = np.zeros(n, dtype=np.int8)
        self.max_z = np.zeros(n, dtype=np.int8)
        self.mean_z = np.zeros(n, dtype=np.float64)
        self.n_cells = np.zeros(n, dtype=np.int8)
        self.ori_of = np.repeat(np.arange(N_ORIENTATIONS, dtype=np.int32), N_POSITIONS)
        self.pos_of = np.tile(np.arange(N_POSITIONS, dtype=np.int32), N_ORIENTATIONS)
        self.piece_of = np.array(
            [int(table.piece_of(o)) for o in range(N_ORIENTATIONS)], dtype=np.int32
        )[self.ori_of]
        self.cells: list[frozenset[Cell] | None] = [None] * n

        for ori in range(N_ORIENTATIONS):
            shape = table[ori].cells
            for pos in range(N_POSITIONS):
                a = ori * N_POSITIONS + pos
                placed = place(shape, index_to_cell(pos))
                if placed is None:
                    continue
                self.valid[a] = True
                self.cells[a] = placed
                self.cells_bits[a] = bits_of(placed)
                zs = [c[2] for c in placed]
                self.min_z[a] = min(zs)
                self.max_z[a] = max(zs)
                self.mean_z[a] = sum(zs) / len(zs)
                self.n_cells[a] = len(placed)
                below = {
                    (x, y, z - 1)
                    for x, y, z in placed
                    if z > 0 and (x, y, z - 1) not in placed
                }
                self.below_bits[a] = bits_of(below)
                above = {
                    (x, y, zz)
                    for x, y, z in placed
                    for zz in range(z + 1, GRID)
                    if (x, y, zz) not in placed
                }
                self.above_bits[a] = bits_of(above)
                shell = {nb for c in placed for nb in _neighbors(c)} - placed
                self.neighbor_bits[a] = bits_of(shell)


@lru_cache(maxsize=1)
def action_table() -> ActionTable:
    return ActionTable()


def encode_action(orientation_id: int, position_id: int) -> int:
    if not 0 <= orientation_id < N_ORIENTATIONS:
        raise ValueError(f"orientation id {orientation_id} out of range")
    if not 0 <= position_id < N_POSITIONS:
        raise ValueError(f"position id {position_id} out of range")
    return orientation_id * N_POSITIONS + position_id


def decode_action(action: int) -> tuple[int, int]:
    if not 0 <= action < N_ACTIONS:
        raise ValueError(f"action id {action} out of range")
    return action // N_POSITIONS, action % N_POSITIONS


# --- legality predicates (per placement, on raw cell sets) -----------------


def check_collision(state: EnvState, cells: Iterable[Cell]) -> bool:
    """True iff the placement intersects nothing already on the grid."""
    return (state.occupancy & bits_of(cells)) == 0


def check_support(state: EnvState, cells: Iterable[Cell]) -> bool:
    """Every raised cell rests on the table, the piece itself, or the grid."""
    cs = set(cells)
    for x, y, z in cs:
        if z == 0:
            continue
        below = (x, y, z - 1)
        if below in cs or state.occupied(below):
            continue
        return False
    return True


def check_vertical_access(state: EnvState, cells: Iterable[Cell]) -> bool:
    """A rigid descent along -z reaches the placement without obstruction.

    Cells of the piece above its own cells are fine; anything already on the
    grid in the columns above is not.
    """
    cs = set(cells)
    for x, y, z in cs:
        for zz in range(z + 1, GRID):
            if (x, y, zz) in cs:
                continue
            if state.occupied((x, y, zz)):
                return False
    return True


DEFAULT_GRID_ORIGIN_MM = (300.0, -45.0, 0.0)
DEFAULT_CELL_PITCH_MM = 45.0


def grid_cell_pose(cell: Cell, origin_mm=DEFAULT_GRID_ORIGIN_MM, pitch_mm=DEFAULT_CELL_PITCH_MM) -> zyz.Pose:
    """Placement pose for a grid cell: top-down tool orientation."""
    position = np.array(origin_mm, dtype=float) + pitch_mm * np.asarray(cell, dtype=float)
    return zyz.Pose(position=position, rotation=zyz.rot_from_zyz(0.0, np.pi, 0.0))


class AssemblyEnv:
    """The assembly environment for one curriculum level.

    Stateless apart from configuration and precomputed tables: `reset`
    produces a fresh immutable state and `step` maps (state, action) to the
    successor. The reachability oracle is evaluated once per grid position at
    construction; the default geometric oracle accepts the whole grid.
    """

    def __init__(
        self,
        level: int = 3,
        order_policy: str = "fixed",
        reward_profile: str = "shaped",
        kinematics: zyz.KinematicModel | None = None,
        reach_oracle: Callable[[zyz.Pose], bool] | None = None,
        pieces: Sequence[Piece] | None = None,
        require_legal: bool = True,
    ) -> None:
        if level not in LEVEL_PIECES:
            raise ValueError(f"level must be 1, 2 or 3, got {level}")
        if order_policy not in ("fixed", "shuffled"):
            raise ValueError(f"unknown order policy {order_policy!r}")
        if reward_profile not in ("shaped", "sparse"):
            raise ValueError(f"unknown reward profile {reward_profile!r}")
        self.level = level
        self.order_policy = order_policy
        self.reward_profile = reward_profile
        self.require_legal = require_legal
        self.pieces: tuple[Piece, ...] = tuple(pieces) if pieces else LEVEL_PIECES[level]
        self.table = action_table()

        model = kinematics or zyz.KinematicModel()
        oracle = reach_oracle or (lambda pose: zyz.ik_feasible(pose, model))
        reach_by_pos = np.array(
            [oracle(grid_cell_pose(index_to_cell(p))) for p in range(N_POSITIONS)],
            dtype=bool,
        )
        self._reach = reach_by_pos[self.table.pos_of]

    # -- episode setup -------------------------------------------------

    def reset(self, seed: int, episode: int = 0) -> EnvState:
        order = list(self.pieces)
        if self.order_policy == "shuffled":
            rng = np.random.default_rng(np.random.SeedSequence([seed, episode]))
            rng.shuffle(order)
        return self.reset_with_order(order)

    def reset_with_order(self, order: Sequence[Piece | int]) -> EnvState:
        ids = tuple(int(p) for p in order)
        if len(set(ids)) != len(ids):
            raise ValueError("piece order contains duplicates")
        return EnvState(
            occupancy=0,
            placed=(False,) * 7,
            piece_order=ids,
            cursor=0,
            owner=(-1,) * N_CELLS,
            prev_mean_height=None,
        )

    # -- mask ------------------------------------------------------------

    def legal_mask(self, state: EnvState) -> np.ndarray:
        """Boolean legality over the 3,132-entry action space."""
        if state.done:
            return np.zeros(N_ACTIONS, dtype=bool)
        t = self.table
        occ = state.occupancy
        return (
            (t.piece_of == state.current_piece)
            & t.valid
            & self._reach
            & ((t.cells_bits & occ) == 0)
            & ((t.below_bits & occ) == t.below_bits)
            & ((t.above_bits & occ) == 0)
        )

    def check_reachable(self, action: int) -> bool:
        return bool(self._reach[action])

    def _action_legal(self, state: EnvState, action: int) -> tuple[bool, str]:
        t = self.table
        occ = state.occupancy
        if not t.valid[action]:
            return False, "out of bounds"
        if t.piece_of[action] != state.current_piece:
            return False, "orientation not owned by current piece"
        if not self._reach[action]:
            return False, "unreachable"
        if t.cells_bits[action] & occ:
            return False, "collision"
        if (t.below_bits[action] & occ) != t.below_bits[action]:
            return False, "unsupported"
        if t.above_bits[action] & occ:
            return False, "vertical path blocked"
        return True, ""

    # -- transition -------------------------------------------------------

    def step(self, state: EnvState, action: int) -> tuple[EnvState, RewardBreakdown, Outcome, dict]:
        if state.done:
            raise IllegalActionError("episode already finished")
        if not 0 <= action < N_ACTIONS:
            raise IllegalActionError(f"action id {action} out of range")
        legal, why = self._action_legal(state, action)
        if not legal:
            if self.require_legal:
                raise IllegalActionError(f"action {action}: {why}")
            return self._illegal_step(state, action, why)

        t = self.table
        piece = state.current_piece
        next_state = self._write_placement(state, action)
        next_mask, outcome = self._outcome(next_state)

        access_clear = (t.above_bits[action] & state.occupancy) == 0
        if self.reward_profile == "sparse":
            complete = outcome is Outcome.COMPLETE
            breakdown = RewardBreakdown(100.0 if complete else 10.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        else:
            breakdown = self._shaped(state, action, access_clear)

        info = {
            "cells": t.cells[action],
            "next_mask": next_mask,
            "next_legal_count": int(next_mask.sum()),
            "piece": Piece(piece).name,
        }
        return next_state, breakdown, outcome, info

    def _write_placement(self, state: EnvState, action: int) -> EnvState:
        piece = state.current_piece
        bits = int(self.table.cells_bits[action])
        owner = list(state.owner)
        for i in range(N_CELLS):
            if bits >> i & 1:
                owner[i] = piece
        placed = list(state.placed)
        placed[piece] = True
        return EnvState(
            occupancy=state.occupancy | bits,
            placed=tuple(placed),
            piece_order=state.piece_order,
            cursor=state.cursor + 1,
            owner=tuple(owner),
            prev_mean_height=float(self.table.mean_z[action]),
        )

    def _outcome(self, next_state: EnvState) -> tuple[np.ndarray, Outcome]:
        if next_state.done:
            return np.zeros(N_ACTIONS, dtype=bool), Outcome.COMPLETE
        next_mask = self.legal_mask(next_state)
        return next_mask, Outcome.RUNNING if next_mask.any() else Outcome.DEAD_END

    def _shaped(self, state: EnvState, action: int, access_clear: bool) -> RewardBreakdown:
        t = self.table
        min_z = int(t.min_z[action])
        max_z = int(t.max_z[action])
        mean_z = float(t.mean_z[action])

        if min_z == 0:
            if state.cursor == 0:
                ground = 30.0
            elif state.cursor <= 5 and self._all_prior_grounded(state):
                ground = 25.0
            else:
                ground = 0.0
        else:
            ground = 0.0

        access = 8.0 if access_clear else -30.0
        height = -8.0 * max_z

        if state.prev_mean_height is None:
            logic = 0.0
        elif mean_z <= state.prev_mean_height:
            logic = 15.0
        else:
            logic = -15.0

        touching = int(t.neighbor_bits[action]) & state.occupancy
        structure = 2.0 * touching.bit_count()
        return RewardBreakdown(10.0, ground, access, height, logic, structure)

    def _all_prior_grounded(self, state: EnvState) -> bool:
        min_z_by_piece: dict[int, int] = {}
        for i, p in enumerate(state.owner):
            if p >= 0:
                z = i // 9
                if p not in min_z_by_piece or z < min_z_by_piece[p]:
                    min_z_by_piece[p] = z
        return all(z == 0 for z in min_z_by_piece.values())

    def _illegal_step(self, state: EnvState, action: int, why: str) -> tuple[EnvState, RewardBreakdown, Outcome, dict]:
        """Unmasked ablation: physically impossible writes stay no-ops with a
        penalty; support/access/reach violations execute with honest reward."""
        t = self.table
        if why in ("out of bounds", "orientation not owned by current piece"):
            penalty = RewardBreakdown(-5.0, 0.0, 0.0, 0.0, 0.0, 0.0)
            return state, penalty, Outcome.RUNNING, {"rejected": why, "next_mask": self.legal_mask(state)}
        if why == "collision":
            penalty = RewardBreakdown(-10.0, 0.0, 0.0, 0.0, 0.0, 0.0)
            return state, penalty, Outcome.RUNNING, {"rejected": why, "next_mask": self.legal_mask(state)}
        if self.reward_profile == "sparse":
            penalty = RewardBreakdown(-5.0, 0.0, 0.0, 0.0, 0.0, 0.0)
            return state, penalty, Outcome.RUNNING, {"rejected": why, "next_mask": self.legal_mask(state)}
        # executable but robot-hostile (floating, blocked descent, out of reach)
        next_state = self._write_placement(state, action)
        next_mask, outcome = self._outcome(next_state)
        access_clear = (t.above_bits[action] & state.occupancy) == 0
        breakdown = self._shaped(state, action, access_clear)
        info = {"cells": t.cells[action], "next_mask": next_mask, "violated": why}
        return next_state, breakdown, outcome, info

    # -- encoding ----------------------------------------------------------

    def encode_state(self, state: EnvState) -> np.ndarray:
        """36 floats: 27 occupancy bits, 7-piece one-hot, progress ratios."""
        vec = np.zeros(STATE_DIM, dtype=np.float32)
        occ = state.occupancy
        for i in range(N_CELLS):
            if occ >> i & 1:
                vec[i] = 1.0
        if not state.done:
            vec[N_CELLS + state.current_piece] = 1.0
        n = len(state.piece_order)
        vec[34] = sum(state.placed) / n
        vec[35] = state.cursor / n
        return vec


def bellman_target(
    reward: float,
    gamma: float,
    q_next: np.ndarray,
    mask_next: np.ndarray,
    terminal: bool,
) -> float:
    """Masked Bellman target: illegal successor actions never contribute."""
    if terminal:
        return float(reward)
    legal = np.asarray(q_next)[np.asarray(mask_next, dtype=bool)]
    if legal.size == 0:
        raise EmptyMaskError("non-terminal state with empty legal mask")
    return float(reward) + float(gamma) * float(legal.max())


def state_hash(state: EnvState) -> str:
    payload = (state.occupancy, state.placed, state.piece_order, state.cursor)
    return hashlib.sha256(repr(payload).encode()).hexdigest()[:16]


def trace_record(
    state: EnvState, action: int, breakdown: RewardBreakdown, outcome: Outcome
) -> dict:
    """One JSON-lines record of an episode trace."""
    return {
        "state": state_hash(state),
        "action": int(action),
        "reward": breakdown.as_dict(),
        "done": outcome.value,
    }


def write_trace(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
