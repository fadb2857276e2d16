"""Command-line entry point.

Subcommands: solve, train, eval, mask-audit, zyz-sim, report. Every command
is deterministic given (config, seed); data files are byte-stable when
--no-timestamps is passed. Exit codes: 0 success, 2 config or precondition
error, 3 numerical failure, 4 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import curriculum, dqn, solver, zyz
from .env import AssemblyEnv, Outcome
from .geometry import Piece, orientation_table


class ConfigError(ValueError):
    pass


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

DEFAULT_CONFIG: dict = {
    "train": {
        "lr": 1e-4,
        "gamma": 0.99,
        "batch": 512,
        "target_update_every": 20,
        "warmup": 1000,
        "grad_clip": 1.0,
        "buffer_capacity": 50000,
        "seed": 42,
        "arch": "hier",
        "dropout": 0.3,
    },
    "epsilon": {
        "kind": "exp",
        "start": 0.9,
        "rate": 0.995,
        "floor": 0.05,
        "end": 0.1,
        "steps": 40000,
    },
    "run": {
        "reward": "shaped",
        "order": "shuffled",
        "decay_clock": "episode",
        "scale": "desk",
        "checkpoint_every": 1000,
    },
    "kinematics": {
        "reach_mm": 900.0,
        "box_x_mm": [-500.0, 500.0],
        "box_y_mm": [-500.0, 500.0],
        "box_z_mm": [0.0, 800.0],
        "margin_critical_deg": 5.0,
        "margin_continuous_deg": 10.0,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _deep_merge(cfg, user)
    return cfg


def _write_json(path: Path, obj, no_timestamps: bool) -> None:
    if not no_timestamps:
        obj = dict(obj)
        obj["created_unix"] = int(time.time())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: dict, args) -> None:
    _write_json(out / "config.json", cfg, args.no_timestamps)


# --- solve -------------------------------------------------------------------

_PIECE_NAMES = {p.name.lower(): p for p in Piece}


def _parse_pieces(arg: str) -> tuple[Piece, ...]:
    if arg.strip().lower() == "all":
        return tuple(Piece)
    pieces = []
    for name in arg.split(","):
        key = name.strip().lower()
        if key not in _PIECE_NAMES:
            raise ConfigError(f"unknown piece {name!r} (expected one of "
                              f"{', '.join(_PIECE_NAMES)} or 'all')")
        pieces.append(_PIECE_NAMES[key])
    return tuple(pieces)


def cmd_solve(args) -> int:
    load_config(args.config)  # validate early; solve has no tunables in it
    pieces = _parse_pieces(args.pieces)
    try:
        solutions = solver.solve_all(pieces, strategy=args.strategy)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = _out_dir(args)

    ordered = 0
    records = []
    for sol in solutions:
        osol = solver.order_robot_friendly(sol)
        if osol is not None:
            ordered += 1
        records.append(
            {
                "placements": [
                    {"piece": Piece(p).name, "orientation": o, "anchor": pos}
                    for p, o, pos in sol.placements
                ],
                "robot_order": [Piece(p).name for p in osol.order] if osol else None,
            }
        )
    with open(out / "solutions.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(records, fh, sort_keys=True)
        fh.write("\n")

    summary = {
        "pieces": [p.name for p in pieces],
        "raw_solutions": len(solutions),
        "rotation_distinct": solver.rotation_distinct_count(solutions),
        "orderable": ordered,
        "unorderable": len(solutions) - ordered,
        "strategy": args.strategy,
    }
    _write_json(out / "summary.json", summary, args.no_timestamps)
    print(
        f"solve: {summary['raw_solutions']} solutions "
        f"({summary['rotation_distinct']} rotation-distinct, "
        f"{summary['unorderable']} unorderable) -> {out}"
    )
    return EXIT_OK


# --- train -------------------------------------------------------------------


def _train_config(cfg: dict, args) -> tuple[dqn.TrainConfig, dqn.EpsilonSchedule, dict]:
    train = dict(cfg["train"])
    if args.seed is not None:
        train["seed"] = args.seed
    if getattr(args, "arch", None):
        train["arch"] = args.arch
    eps = dict(cfg["epsilon"])
    if getattr(args, "epsilon", None):
        eps["kind"] = args.epsilon
    run = dict(cfg["run"])
    if getattr(args, "reward", None):
        run["reward"] = args.reward
    if getattr(args, "order", None):
        run["order"] = args.order
    if getattr(args, "scale", None):
        run["scale"] = args.scale
    try:
        tc = dqn.TrainConfig(**train)
        schedule = dqn.EpsilonSchedule(**eps)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad training configuration: {e}") from e
    cfg = dict(cfg)
    cfg["train"], cfg["epsilon"], cfg["run"] = train, eps, run
    return tc, schedule, cfg


def _levels_for(args, cfg: dict) -> list[curriculum.LevelConfig]:
    scale = cfg["run"].get("scale", "desk")
    try:
        defaults = {lc.level: lc for lc in curriculum.default_levels(scale)}
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.level is None:
        return [defaults[1], defaults[2], defaults[3]]
    base = defaults[args.level]
    episodes = args.episodes if args.episodes is not None else base.episodes
    threshold = args.threshold if args.threshold is not None else base.success_threshold
    return [
        curriculum.LevelConfig(
            level=base.level,
            episodes=episodes,
            success_threshold=threshold,
            max_steps=base.max_steps,
            window=base.window,
        )
    ]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tc, schedule, cfg = _train_config(cfg, args)
    levels = _levels_for(args, cfg)
    out = _out_dir(args)
    _echo_config(out, cfg, args)

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    checkpoint_every = cfg["run"].get("checkpoint_every", 1000)

    steps_fh = open(out / "steps.csv", "w", newline="", encoding="utf-8")
    steps_writer = csv.writer(steps_fh)
    steps_writer.writerow(["episode", "step", "epsilon", "loss", "reward", "legal_count"])

    def log_step(rec: dict) -> None:
        steps_writer.writerow(
            [
                rec["episode"],
                rec["step"],
                repr(rec["epsilon"]),
                "" if rec["loss"] is None else repr(rec["loss"]),
                repr(rec["reward"]),
                rec["legal_count"],
            ]
        )

    trainer = curriculum.Trainer(
        cfg=tc,
        schedule=schedule,
        reward_profile=cfg["run"]["reward"],
        order_policy=cfg["run"]["order"],
        decay_clock=cfg["run"]["decay_clock"],
        step_log=log_step,
    )

    metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")

    def on_episode(stats: curriculum.EpisodeStats) -> None:
        metrics_fh.write(json.dumps(stats.as_dict(), sort_keys=True) + "\n")
        done = stats.global_episode + 1
        if done % checkpoint_every == 0:
            dqn.save_checkpoint(trainer.net, ckpt_dir / f"ckpt_ep{done}.bin")

    try:
        level_metrics = trainer.run_curriculum(levels, on_episode)
    except dqn.NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        metrics_fh.close()
        steps_fh.close()
        return EXIT_NUMERIC
    finally:
        if not metrics_fh.closed:
            metrics_fh.close()
        if not steps_fh.closed:
            steps_fh.close()

    dqn.save_checkpoint(trainer.net, ckpt_dir / "final.bin")
    summary = curriculum.summarize(level_metrics)
    _write_json(out / "summary.json", summary, args.no_timestamps)
    for m in level_metrics:
        rate = m.success_rate()
        print(
            f"train: level {m.level}: {len(m.episodes)} episodes, "
            f"success {rate:.3f}" + (f", promoted at {m.promoted_at}" if m.promoted_at else "")
        )
    return EXIT_OK


# --- eval --------------------------------------------------------------------


def evaluate_policy(
    net: dqn.QNet,
    level: int,
    episodes: int,
    seed: int,
    order_policy: str = "shuffled",
    reward_profile: str = "shaped",
    trace: list | None = None,
) -> dict:
    """Greedy (epsilon = 0) rollouts; reports success rate, mean reward and
    mean episode length. Pass a list as `trace` to collect per-step records."""
    from .env import trace_record

    env = AssemblyEnv(level=level, order_policy=order_policy, reward_profile=reward_profile)
    rng = np.random.default_rng(seed)
    successes = 0
    rewards = []
    lengths = []
    for ep in range(episodes):
        state = env.reset(seed=seed, episode=ep)
        total = 0.0
        steps = 0
        outcome = Outcome.RUNNING
        while True:
            mask = env.legal_mask(state)
            if not mask.any():
                outcome = Outcome.DEAD_END
                break
            action = dqn.select_action(net, env.encode_state(state), mask, 0.0, rng)
            nxt, breakdown, outcome, _ = env.step(state, action)
            if trace is not None:
                rec = trace_record(state, action, breakdown, outcome)
                rec["episode"] = ep
                trace.append(rec)
            state = nxt
            total += breakdown.total
            steps += 1
            if outcome.terminal:
                break
        successes += outcome is Outcome.COMPLETE
        rewards.append(total)
        lengths.append(steps)
    return {
        "level": level,
        "episodes": episodes,
        "success_rate": successes / episodes,
        "mean_reward": float(np.mean(rewards)),
        "mean_length": float(np.mean(lengths)),
    }


def cmd_eval(args) -> int:
    load_config(args.config)
    try:
        net = dqn.load_checkpoint(args.checkpoint)
    except (OSError, dqn.CheckpointError) as e:
        print(f"error: cannot load checkpoint: {e}", file=sys.stderr)
        return EXIT_IO
    trace: list | None = [] if (args.trace and args.out) else None
    report = evaluate_policy(
        net,
        level=args.level,
        episodes=args.episodes,
        seed=args.seed if args.seed is not None else 42,
        order_policy=args.order or "shuffled",
        trace=trace,
    )
    if args.out:
        out = _out_dir(args)
        _write_json(out / "eval.json", report, args.no_timestamps)
        if trace is not None:
            from .env import write_trace

            write_trace(out / "trace.jsonl", trace)
    print(
        f"eval: level {report['level']}: success {report['success_rate']:.3f}, "
        f"mean reward {report['mean_reward']:.1f}, mean length {report['mean_length']:.2f}"
    )
    return EXIT_OK


# --- mask-audit ----------------------------------------------------------------


def cmd_mask_audit(args) -> int:
    load_config(args.config)
    if args.samples <= 0:
        raise ConfigError("--samples must be positive")
    report = solver.mask_ratio_report(args.samples, args.seed if args.seed is not None else 42,
                                      level=args.level)
    out = _out_dir(args)
    d = report.as_dict()
    with open(out / "mask_audit.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(d.keys()))
        w.writerow([repr(v) if isinstance(v, float) else v for v in d.values()])
    print(
        f"mask-audit: mean legal {report.mean_legal:.1f} of {report.action_space} "
        f"(ratio {report.ratio_full_over_mean:.2f}, reference {report.reference_ratio})"
    )
    return EXIT_OK


# --- zyz-sim -------------------------------------------------------------------

_ORACLES = {
    "geometric": None,  # resolved against the kinematic model
    "always-true": zyz.always_true_oracle,
    "always-false": zyz.always_false_oracle,
    "clamp-sensitive": zyz.clamp_sensitive_oracle(),
}


def _load_targets(path: str) -> list[zyz.Pose]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    poses = []
    for i, item in enumerate(data):
        position = item["position"]
        if "zyz_deg" in item:
            a, b, g = (math.radians(v) for v in item["zyz_deg"])
            rot = zyz.rot_from_zyz(a, b, g)
        elif "rotation" in item:
            rot = np.asarray(item["rotation"], dtype=float)
        else:
            raise ConfigError(f"target {i} needs 'zyz_deg' or 'rotation'")
        poses.append(zyz.Pose(np.asarray(position, dtype=float), rot))
    return poses


def cmd_zyz_sim(args) -> int:
    cfg = load_config(args.config)
    kin = cfg["kinematics"]
    model = zyz.KinematicModel(
        reach_mm=kin["reach_mm"],
        box_x_mm=tuple(kin["box_x_mm"]),
        box_y_mm=tuple(kin["box_y_mm"]),
        box_z_mm=tuple(kin["box_z_mm"]),
        margin_critical_deg=kin["margin_critical_deg"],
        margin_continuous_deg=kin["margin_continuous_deg"],
    )
    oracle = _ORACLES[args.oracle]
    if oracle is None:
        oracle = lambda pose: zyz.ik_feasible(pose, model)  # noqa: E731

    if args.targets:
        try:
            targets = _load_targets(args.targets)
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"cannot read targets: {e}") from e
    else:
        targets = zyz.near_singular_suite(args.n, seed=args.seed if args.seed is not None else 7)
    if not targets:
        raise ConfigError("no targets given")

    out = _out_dir(args)
    with open(out / "plans.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i, t in enumerate(targets):
            current = zyz.Pose(t.position, zyz.DEFAULT_HOME_ROTATION)
            plan = zyz.singularity_guard(t.rotation, current, model, oracle)
            rec = {
                "index": i,
                "beta_deg": math.degrees(plan.angles.beta),
                "outcome": plan.outcome.value,
                "direct_feasible": bool(oracle(t)),
                "steps": [
                    {
                        "kind": s.kind.value,
                        "note": s.note,
                        "position_mm": [round(float(v), 6) for v in s.pose.position],
                    }
                    for s in plan.steps
                ],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    bench = zyz.guard_benchmark(targets, model, oracle)
    with open(out / "benchmark.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["n_targets", "success_with_guard", "success_without_guard",
             "mean_steps_with_guard", "mean_steps_without_guard"]
        )
        w.writerow(
            [bench.n_targets, repr(bench.success_with_guard), repr(bench.success_without_guard),
             repr(bench.mean_steps_with_guard), repr(bench.mean_steps_without_guard)]
        )
    print(
        f"zyz-sim: guard {bench.success_with_guard:.2f} vs direct "
        f"{bench.success_without_guard:.2f} on {bench.n_targets} targets -> {out}"
    )
    return EXIT_OK


# --- report --------------------------------------------------------------------


def cmd_report(args) -> int:
    load_config(args.config)
    out = _out_dir(args)
    wrote = []
    if args.metrics:
        try:
            metrics = curriculum.read_metrics_jsonl(args.metrics)
        except OSError as e:
            print(f"error: cannot read metrics: {e}", file=sys.stderr)
            return EXIT_IO
        summary = curriculum.summarize(metrics)
        _write_json(out / "summary.json", summary, args.no_timestamps)
        wrote.append("summary.json")
        wrote += curriculum.export_plot_csvs(metrics, out)
    if args.orientations:
        table = orientation_table()
        with open(out / "orientations.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["orientation_id", "piece", "local_index", "cells"])
            for o in table.orientations:
                w.writerow([o.index, o.piece.name, o.local_index,
                            ";".join(f"{x},{y},{z}" for x, y, z in o.cells)])
        wrote.append("orientations.csv")
    if not wrote:
        raise ConfigError("report: nothing to do (pass --metrics and/or --orientations)")
    print(f"report: wrote {', '.join(wrote)} -> {out}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="somacube", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=out_required, default=None, help="output directory")
        sp.add_argument("--no-timestamps", action="store_true",
                        help="omit wall-clock fields for byte-stable outputs")

    sp = sub.add_parser("solve", help="enumerate assemblies with the exhaustive oracle")
    common(sp)
    sp.add_argument("--pieces", default="all", help="'all' or comma-separated piece names")
    sp.add_argument("--strategy", choices=["cell", "piece"], default="cell")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("train", help="train the masked DQN (curriculum or one level)")
    common(sp)
    sp.add_argument("--level", type=int, choices=[1, 2, 3], default=None,
                    help="train a single level instead of the full curriculum")
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--threshold", type=float, default=None,
                    help="promotion threshold for --level runs")
    sp.add_argument("--epsilon", choices=["exp", "linear"], default=None)
    sp.add_argument("--reward", choices=["shaped", "sparse"], default=None)
    sp.add_argument("--arch", choices=["hier", "flat"], default=None)
    sp.add_argument("--order", choices=["fixed", "shuffled"], default=None)
    sp.add_argument("--scale", choices=["desk", "reference"], default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="greedy rollouts from a checkpoint")
    common(sp, out_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--level", type=int, choices=[1, 2, 3], default=1)
    sp.add_argument("--episodes", type=int, default=10)
    sp.add_argument("--order", choices=["fixed", "shuffled"], default=None)
    sp.add_argument("--trace", action="store_true",
                    help="write per-step episode traces (needs --out)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("mask-audit", help="legal-action statistics over sampled states")
    common(sp)
    sp.add_argument("--samples", type=int, required=True)
    sp.add_argument("--level", type=int, choices=[1, 2, 3], default=3)
    sp.set_defaults(func=cmd_mask_audit)

    sp = sub.add_parser("zyz-sim", help="singularity-guard plans and benchmark")
    common(sp)
    sp.add_argument("--targets", default=None, help="JSON pose list")
    sp.add_argument("--n", type=int, default=100, help="size of the generated suite")
    sp.add_argument("--oracle", choices=sorted(_ORACLES), default="geometric")
    sp.set_defaults(func=cmd_zyz_sim)

    sp = sub.add_parser("report", help="summaries and plot-ready CSV exports")
    common(sp)
    sp.add_argument("--metrics", default=None, help="metrics.jsonl from a training run")
    sp.add_argument("--orientations", action="store_true",
                    help="export the orientation table as CSV")
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except dqn.NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except dqn.CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
