"""Command-line entry point.

Exit codes: 0 success, 2 invalid input (config, missing file, dimension
mismatch, empty world list), 3 a stage ran but failed (infeasible worlds, weak
teacher, failed reproduction verdict). Outputs go under ``$TADPO_OUTPUT_ROOT`` unless
``--out`` is given.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .. import approximator
from ..approximator import ActorCritic
from ..baselines import evaluate_policy
from ..planners import DemoCollectionError
from ..rollout import TeacherBuffer
from ..worlds import WorldGenerationError
from . import pipeline as P
from .config import ConfigError, ExperimentConfig, load_config, output_root, save_config
from .report import render_table, svg_line_chart
from .suites import SUITES, reproduce

log = logging.getLogger("tadpo")

EXIT_OK, EXIT_INPUT, EXIT_FAILED = 0, 2, 3
EVAL_COLUMNS = ("method", "world_family", "world_seed", "seed", "sr", "cp", "ms")


class StageFailed(RuntimeError):
    pass


def _out(args, cfg: ExperimentConfig | None, default: str) -> Path:
    if args.out:
        path = Path(args.out)
    elif cfg is not None and cfg.output_dir is not None:
        path = Path(cfg.output_dir)
    else:
        path = output_root() / default
    path.mkdir(parents=True, exist_ok=True)
    return path


def _jsonl(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, default=float) + "\n")


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what}: a path is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what}: no such file {p}")
    return p


def _worlds(cfg: ExperimentConfig, split: str):
    return P.build_worlds(cfg, split, output_root() / "worlds")


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    out = _out(args, cfg, f"teacher-{cfg.digest()}")
    seed = cfg.seeds[0] if args.seed is None else args.seed
    model, curve = P.train_teacher(cfg, _worlds(cfg, "train"), seed,
                                   on_iteration=lambda s: log.info("teacher iter %d sr=%s", s["iter"], s.get("sr")))
    model.save(out / "teacher.pvec", meta={"config": cfg.digest(), "seed": seed, "view": "teacher"})
    _jsonl(out / "teacher.jsonl", curve)
    save_config(cfg, out / "config.json")
    print(out / "teacher.pvec")
    return EXIT_OK


def _teacher(cfg: ExperimentConfig, path: str | None, seed: int):
    model = None
    if cfg.teacher.kind == "ppo":
        model = ActorCritic.load(_require(path, "--teacher"))
        if model.spec.obs_dim != cfg.env.teacher.dim:
            raise ConfigError(f"--teacher: checkpoint expects {model.spec.obs_dim} observation dims, "
                              f"the teacher view has {cfg.env.teacher.dim}")
    return P.make_teacher(cfg, model, seed)


def cmd_collect_demos(args) -> int:
    cfg = load_config(args.config)
    out = _out(args, cfg, f"demos-{cfg.digest()}")
    seed = cfg.seeds[0] if args.seed is None else args.seed
    teacher = _teacher(cfg, args.teacher, seed)
    worlds = _worlds(cfg, "demo")
    if not worlds:
        raise ConfigError("worlds.n_demo: the demonstration world list is empty")
    try:
        buf = P.collect_demos(cfg, teacher, worlds, seed)
    except DemoCollectionError as exc:
        raise StageFailed(str(exc)) from exc
    path = out / "demos.demo"
    buf.save(path)
    log.info("%d transitions, manifest %s", len(buf), buf.manifest)
    print(path)
    return EXIT_OK


def cmd_train_student(args) -> int:
    cfg = load_config(args.config)
    method = args.method or cfg.method
    if method not in P.STUDENT_METHODS:
        raise ConfigError(f"method: {method!r} is not a trainable student")
    cfg = cfg.replace(method=method)
    out = _out(args, cfg, f"{method}-{cfg.digest()}")
    buffer = teacher = None
    if method == "tadpo":
        buffer = TeacherBuffer.load(_require(args.demos, "--demos"))
        ds, dt, da = buffer.dims
        if (ds, dt, da) != (cfg.env.student.dim, cfg.env.teacher.dim, 2):
            raise ConfigError(f"--demos: demonstration dims (student {ds}, teacher {dt}, action {da}) do not match "
                              f"the configured views (student {cfg.env.student.dim}, teacher {cfg.env.teacher.dim}, action 2)")
    if method in ("dagger", "ppo_bc"):
        teacher = _teacher(cfg, args.teacher, cfg.seeds[0])
    worlds = _worlds(cfg, "train")
    for seed in cfg.seeds:
        model, curve = P.train_student(method, cfg, worlds, seed, teacher=teacher, buffer=buffer,
                                       on_iteration=lambda s: log.info("%s seed %d iter %d sr=%s", method, seed,
                                                                       s["iter"], s.get("sr")))
        model.save(out / f"{method}-seed{seed}.pvec", meta={"method": method, "seed": seed, "config": cfg.digest()})
        _jsonl(out / f"{method}-seed{seed}.jsonl", curve)
        xs = [s["iter"] + 1 for s in curve]
        (out / f"{method}-seed{seed}.svg").write_text(svg_line_chart(
            {"sr": (xs, [s.get("sr") for s in curve]), "cp": (xs, [s.get("cp") for s in curve])},
            title=f"{method} seed {seed}", xlabel="iteration", ylabel="rollout metric"))
    save_config(cfg, out / "config.json")
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    out = _out(args, cfg, f"eval-{cfg.digest()}")
    worlds = _worlds(cfg, "eval")
    if not worlds:
        raise ConfigError("worlds.n_eval: the evaluation world list is empty")
    if not args.checkpoint and not args.controller:
        raise ConfigError("evaluate: give at least one --checkpoint or --controller")
    family = cfg.worlds.family
    rows = []

    def add(method, seed, metrics):
        for ep in metrics["episodes"]:
            rows.append({"method": method, "world_family": family, "world_seed": ep["world_seed"], "seed": seed,
                         "sr": ep["sr"], "cp": ep["cp"], "ms": ep["ms"]})

    for path in args.checkpoint or []:
        p = _require(path, "--checkpoint")
        model = ActorCritic.load(p)
        meta = ActorCritic.load_meta(p)
        view = meta.get("view", "student")
        want = cfg.env.teacher.dim if view == "teacher" else cfg.env.student.dim
        if model.spec.obs_dim != want:
            raise ConfigError(f"--checkpoint {p}: expects {model.spec.obs_dim} observation dims, "
                              f"the {view} view has {want}")
        add(meta.get("method", "teacher_ppo" if view == "teacher" else p.stem), meta.get("seed", 0),
            evaluate_policy(model, worlds, cfg.env, cfg.eval_episodes_per_world, view=view))
    for name in args.controller or []:
        if name not in P.CONTROLLER_METHODS:
            raise ConfigError(f"--controller: {name!r} is not one of {P.CONTROLLER_METHODS}")
        for seed in cfg.seeds:
            add(name, seed, P.evaluate_controller(name, cfg, worlds, seed))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    table = render_table(rows, families=[family])
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    out = _out(args, None, f"reproduce-{args.suite}-{args.seed}")
    result = reproduce(args.suite, args.seed, out, families=args.families, workers=args.workers,
                       cache_dir=output_root() / "worlds")
    print((out / "table.txt").read_text())
    for name, ok in sorted(result.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    for f in result.failures:
        print(f"FAIL  {f['family']}/{f['stage']}: {f['error']}")
    print(f"verdict: {'PASS' if result.passed else 'FAIL'} ({out / 'verdict.json'})")
    return EXIT_OK if result.passed else EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tadpo", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="defaults to the first configured seed")

    p = sub.add_parser("train-teacher", help="train the PPO teacher on the dense-plan view")
    common(p)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("collect-demos", help="roll out the teacher and write a frozen .demo file")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint (.pvec) for a PPO teacher")
    p.set_defaults(fn=cmd_collect_demos)

    p = sub.add_parser("train-student", help="train a student for every configured seed")
    common(p, seed=False)
    p.add_argument("--demos", help=".demo file (TADPO)")
    p.add_argument("--teacher", help="teacher checkpoint (DAgger, PPO+BC)")
    p.add_argument("--method", choices=P.STUDENT_METHODS, help="overrides the config's method")
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("evaluate", help="evaluate checkpoints and controllers on the eval worlds")
    common(p, seed=False)
    p.add_argument("--checkpoint", action="append", help="student or teacher .pvec (repeatable)")
    p.add_argument("--controller", action="append", help=f"one of {P.CONTROLLER_METHODS} (repeatable)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("reproduce", help="run a reproduction suite and emit a verdict")
    p.add_argument("suite", choices=sorted(SUITES))
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--families", nargs="+", help="subset of world families")
    p.add_argument("--workers", type=int, default=1, help="worker processes for student runs")
    p.set_defaults(fn=cmd_reproduce)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, approximator.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (StageFailed, WorldGenerationError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
