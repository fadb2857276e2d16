"""ZYZ Euler machinery and motion-safety planning.

Rotation construction/extraction, the proximity index for near-singular
detection, the singularity guard, the 6-step safe-regrasp sequence, and the
pluggable kinematic feasibility oracle with its geometric default.

Conventions: angles in radians; extraction returns beta in [0, pi] and
alpha, gamma in (-pi, pi]. The wrist singularities sit at beta = +/-90 deg;
the extraction degeneracy (alpha/gamma coupling) sits at beta in {0, pi} and
is what the `singular` flag of `zyz_from_rot` reports, with gamma pinned
to 0 there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

BETA_CLAMP = math.radians(89.9)
PI_TRIGGER = 0.9  # proximity index above this is near-singular
# |cos(beta)| below 0.1 is the same band as PI > 0.9; the guard and the
# default regrasp threshold both use it so the two triggers agree.
NEAR_SINGULAR_COS = 0.1
DEFAULT_BETA_THRESHOLD = math.acos(NEAR_SINGULAR_COS)
RETRACT_MM = 50.0

_EXTRACTION_EPS = 1e-7


class NotARotationError(ValueError):
    """Input matrix is not orthonormal with determinant +1."""


@dataclass(frozen=True)
class ZyzAngles:
    alpha: float
    beta: float
    gamma: float

    def __iter__(self):
        return iter((self.alpha, self.beta, self.gamma))


@dataclass(frozen=True)
class Pose:
    """Position in millimetres (robot-base frame) plus a rotation matrix."""

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))


@dataclass(frozen=True)
class KinematicModel:
    """Reach, safe-workspace box, joint limits and safety margins."""

    reach_mm: float = 900.0
    box_x_mm: tuple[float, float] = (-500.0, 500.0)
    box_y_mm: tuple[float, float] = (-500.0, 500.0)
    box_z_mm: tuple[float, float] = (0.0, 800.0)
    joint_limits_deg: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "J1": (-360.0, 360.0),
            "J2": (-95.0, 95.0),
            "J3": (-135.0, 135.0),
            "J4": (-360.0, 360.0),
            "J5": (-135.0, 135.0),
            "J6": (-360.0, 360.0),
        }
    )
    margin_critical_deg: float = 5.0  # J2, J3, J5
    margin_continuous_deg: float = 10.0  # J1, J4, J6


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_from_zyz(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """R = Rz(alpha) @ Ry(beta) @ Rz(gamma), written out entry by entry."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    return np.array(
        [
            [ca * cb * cg - sa * sg, -ca * cb * sg - sa * cg, ca * sb],
            [sa * cb * cg + ca * sg, -sa * cb * sg + ca * cg, sa * sb],
            [-sb * cg, sb * sg, cb],
        ]
    )


def _validate_rotation(R: np.ndarray, tol: float) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise NotARotationError(f"expected 3x3 matrix, got {R.shape}")
    err = np.linalg.norm(R.T @ R - np.eye(3))
    det = np.linalg.det(R)
    if err > tol or abs(det - 1.0) > tol:
        raise NotARotationError(
            f"not a rotation: ||R^T R - I|| = {err:.3e}, det = {det:.9f}"
        )
    return R


def zyz_from_rot(R: np.ndarray, tol: float = 1e-8) -> tuple[ZyzAngles, bool]:
    """Extract ZYZ angles; `singular` marks the beta in {0, pi} degeneracy.

    At the degeneracy only the total z-angle is determined: gamma is pinned
    to 0 and alpha carries the whole z-rotation.
    """
    R = _validate_rotation(R, tol)
    cb = min(1.0, max(-1.0, float(R[2, 2])))
    beta = math.acos(cb)
    sb = math.hypot(float(R[0, 2]), float(R[1, 2]))
    if sb < _EXTRACTION_EPS:
        if cb > 0:  # beta ~ 0: R collapses to Rz(alpha + gamma)
            alpha = math.atan2(float(R[1, 0]), float(R[0, 0]))
        else:  # beta ~ pi: R = [[-ca, -sa, .], [-sa? ...]] -> recover alpha
            alpha = math.atan2(-float(R[1, 0]), -float(R[0, 0]))
        return ZyzAngles(alpha, beta, 0.0), True
    alpha = math.atan2(float(R[1, 2]), float(R[0, 2]))
    gamma = math.atan2(float(R[2, 1]), -float(R[2, 0]))
    return ZyzAngles(alpha, beta, gamma), False


def proximity_index(beta: float) -> float:
    """1 - |cos(beta)|: 0 far from the wrist singularity, 1 at +/-90 deg."""
    return 1.0 - abs(math.cos(beta))


def clamp_beta(beta: float) -> float:
    """Clamp into the safe band [-89.9 deg, 89.9 deg]."""
    return min(BETA_CLAMP, max(-BETA_CLAMP, beta))


def near_singular(beta: float) -> bool:
    return abs(math.cos(beta)) < NEAR_SINGULAR_COS


# --- feasibility oracles ----------------------------------------------------


def ik_feasible(pose: Pose, model: KinematicModel) -> bool:
    """Geometric surrogate for reachability.

    Inside the safe-workspace box, within arm reach, and with the tool beta
    at least the critical-joint margin away from the +/-90 deg singularity.
    """
    x, y, z = (float(v) for v in pose.position)
    if not (model.box_x_mm[0] <= x <= model.box_x_mm[1]):
        return False
    if not (model.box_y_mm[0] <= y <= model.box_y_mm[1]):
        return False
    if not (model.box_z_mm[0] <= z <= model.box_z_mm[1]):
        return False
    if math.sqrt(x * x + y * y + z * z) > model.reach_mm:
        return False
    angles, _ = zyz_from_rot(pose.rotation)
    margin = math.radians(model.margin_critical_deg)
    dev = min(abs(angles.beta - math.pi / 2), abs(angles.beta + math.pi / 2))
    return dev >= margin


def always_true_oracle(pose: Pose) -> bool:
    return True


def always_false_oracle(pose: Pose) -> bool:
    return False


def clamp_sensitive_oracle(limit: float = BETA_CLAMP) -> Callable[[Pose], bool]:
    """Scripted oracle: rejects any pose whose beta exceeds the clamp bound.

    Raw near-singular targets (beta just past 89.9 deg) fail; the same target
    after clamping passes. Used to pin guard-vs-no-guard behaviour exactly.
    """

    def oracle(pose: Pose) -> bool:
        angles, _ = zyz_from_rot(pose.rotation)
        return abs(angles.beta) <= limit + 1e-9

    return oracle


# --- plans -------------------------------------------------------------------


class StepKind(Enum):
    CLAMP_BETA = "clamp_beta"
    WRIST_CLEARANCE = "wrist_clearance"
    RETRACT_OPEN = "retract_open"
    CORRECTIVE_CLOSE = "corrective_close"
    ALIGN_INTERMEDIATE = "align_intermediate"
    LINEAR_FALLBACK = "linear_fallback"


STEP_ORDER = tuple(StepKind)


class PlanOutcome(Enum):
    DIRECT_SUCCESS = "direct_success"
    GUARDED_SUCCESS = "guarded_success"
    REGRASP_SUCCESS = "regrasp_success"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class RegraspStep:
    kind: StepKind
    pose: Pose
    note: str = ""


@dataclass(frozen=True)
class RegraspPlan:
    outcome: PlanOutcome
    steps: tuple[RegraspStep, ...]
    target: Pose
    angles: ZyzAngles

    @property
    def success(self) -> bool:
        return self.outcome is not PlanOutcome.INFEASIBLE


def _regrasp_sequence(
    target: Pose,
    angles: ZyzAngles,
    model: KinematicModel,
    oracle: Callable[[Pose], bool],
) -> RegraspPlan:
    """Run the recovery steps in fixed order, stopping at the first pose the
    oracle accepts. Exhausting all six yields an infeasible plan."""
    a, b, g = angles
    steps: list[RegraspStep] = []

    def done() -> RegraspPlan:
        return RegraspPlan(PlanOutcome.REGRASP_SUCCESS, tuple(steps), target, angles)

    # 1. proximity relaxation: clamp beta into the safe band
    working = Pose(target.position, rot_from_zyz(a, clamp_beta(b), g))
    steps.append(RegraspStep(StepKind.CLAMP_BETA, working))
    if oracle(working):
        return done()

    # 2. wrist clearance: roll the tool z by +/-90 deg
    for sign, note in ((1.0, "+90deg"), (-1.0, "-90deg")):
        cand = Pose(working.position, working.rotation @ rot_z(sign * math.pi / 2))
        if oracle(cand):
            steps.append(RegraspStep(StepKind.WRIST_CLEARANCE, cand, note))
            return done()
    steps.append(
        RegraspStep(
            StepKind.WRIST_CLEARANCE,
            Pose(working.position, working.rotation @ rot_z(math.pi / 2)),
            "+/-90deg rejected",
        )
    )

    # 3. safe retraction: 50 mm straight up, gripper open
    cand = Pose(working.position + np.array([0.0, 0.0, RETRACT_MM]), working.rotation)
    steps.append(RegraspStep(StepKind.RETRACT_OPEN, cand, "open gripper"))
    if oracle(cand):
        return done()

    # 4. regrasp with corrective rotation [0, 0, 90deg], gripper closed
    cand = Pose(working.position, working.rotation @ rot_from_zyz(0.0, 0.0, math.pi / 2))
    steps.append(RegraspStep(StepKind.CORRECTIVE_CLOSE, cand, "close gripper"))
    if oracle(cand):
        return done()

    # 5. stable intermediate alignment [alpha, 180deg, gamma]
    cand = Pose(working.position, rot_from_zyz(a, math.pi, g))
    steps.append(RegraspStep(StepKind.ALIGN_INTERMEDIATE, cand))
    if oracle(cand):
        return done()

    # 6. linear Cartesian fallback at the clamped target
    steps.append(RegraspStep(StepKind.LINEAR_FALLBACK, working, "cartesian interpolation"))
    if oracle(working):
        return done()

    return RegraspPlan(PlanOutcome.INFEASIBLE, tuple(steps), target, angles)


def safe_regrasp(
    target: Pose,
    beta_threshold: float = DEFAULT_BETA_THRESHOLD,
    model: KinematicModel | None = None,
    oracle: Callable[[Pose], bool] | None = None,
) -> RegraspPlan:
    """Proximity-guarded regrasp: benign targets pass straight through; a
    proximity index above 0.9 or |beta| past the threshold runs the recovery
    sequence."""
    model = model or KinematicModel()
    oracle = oracle or (lambda pose: ik_feasible(pose, model))
    angles, _ = zyz_from_rot(target.rotation)
    pi_val = proximity_index(angles.beta)
    if pi_val > PI_TRIGGER or abs(angles.beta) > beta_threshold:
        return _regrasp_sequence(target, angles, model, oracle)
    return RegraspPlan(PlanOutcome.DIRECT_SUCCESS, (), target, angles)


def singularity_guard(
    target_rotation: np.ndarray,
    current: Pose,
    model: KinematicModel | None = None,
    oracle: Callable[[Pose], bool] | None = None,
    frame: str = "tool",
) -> RegraspPlan:
    """Reach a target orientation at the current position, safely.

    The direct attempt is always made first, so the guard can only add
    successes over unguarded execution. Near-singular targets then get the
    clamped two-step motion (wrist roll to an intermediate, then the clamped
    target); anything still infeasible falls through to the full recovery
    sequence.
    """
    if frame not in ("tool", "base"):
        raise ValueError(f"unknown frame {frame!r}")
    model = model or KinematicModel()
    oracle = oracle or (lambda pose: ik_feasible(pose, model))

    target = Pose(current.position, np.asarray(target_rotation, dtype=float))
    angles, _ = zyz_from_rot(target.rotation)

    if oracle(target):
        return RegraspPlan(PlanOutcome.DIRECT_SUCCESS, (), target, angles)

    if near_singular(angles.beta):
        a, b, g = angles
        clamped = Pose(target.position, rot_from_zyz(a, clamp_beta(b), g))
        if frame == "tool":
            inter_rot = current.rotation @ rot_z(math.pi / 2)
        else:
            inter_rot = rot_z(math.pi / 2) @ current.rotation
        intermediate = Pose(current.position, inter_rot)
        if oracle(intermediate) and oracle(clamped):
            steps = (
                RegraspStep(StepKind.CLAMP_BETA, clamped),
                RegraspStep(StepKind.WRIST_CLEARANCE, intermediate, "wrist roll +90deg"),
            )
            return RegraspPlan(PlanOutcome.GUARDED_SUCCESS, steps, target, angles)

    return _regrasp_sequence(target, angles, model, oracle)


# --- benchmarking ------------------------------------------------------------


@dataclass(frozen=True)
class GuardBenchmark:
    n_targets: int
    success_with_guard: float
    success_without_guard: float
    mean_steps_with_guard: float
    mean_steps_without_guard: float
    outcomes: tuple[str, ...]


DEFAULT_HOME_ROTATION = np.eye(3)


def near_singular_suite(n: int = 100, seed: int = 7) -> list[Pose]:
    """Deterministic targets with beta in (89.9 deg, 90 deg], positions well
    inside the workspace box."""
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n):
        beta = math.radians(89.9 + 0.1 * (i + 1) / n)
        alpha = float(rng.uniform(-math.pi, math.pi))
        gamma = float(rng.uniform(-math.pi, math.pi))
        position = np.array(
            [
                float(rng.uniform(250.0, 450.0)),
                float(rng.uniform(-200.0, 200.0)),
                float(rng.uniform(100.0, 400.0)),
            ]
        )
        poses.append(Pose(position, rot_from_zyz(alpha, beta, gamma)))
    return poses


def guard_benchmark(
    targets: Sequence[Pose],
    model: KinematicModel | None = None,
    oracle: Callable[[Pose], bool] | None = None,
) -> GuardBenchmark:
    """Success fraction with the guard vs direct execution on each target."""
    if not targets:
        raise ValueError("target list is empty")
    model = model or KinematicModel()
    oracle = oracle or (lambda pose: ik_feasible(pose, model))

    with_hits = 0
    without_hits = 0
    step_counts = []
    outcomes = []
    for t in targets:
        current = Pose(t.position, DEFAULT_HOME_ROTATION)
        plan = singularity_guard(t.rotation, current, model, oracle)
        outcomes.append(plan.outcome.value)
        step_counts.append(len(plan.steps))
        if plan.success:
            with_hits += 1
        if oracle(t):
            without_hits += 1
    n = len(targets)
    return GuardBenchmark(
        n_targets=n,
        success_with_guard=with_hits / n,
        success_without_guard=without_hits / n,
        mean_steps_with_guard=sum(step_counts) / n,
        mean_steps_without_guard=0.0,
        outcomes=tuple(outcomes),
    )
