"""Reproduction suites: teacher, demos, students and controllers across world families.

Budgets are desk-scale choices, tuned so that the trend suite finishes on one
CPU core; they are not the training budgets of the original experiments.

Seeding: every stage draws its seed from ``make_rng(master, family, stage, ...)``.
Students of one (family, seed) pair share a run seed, so PPO and TADPO start
from the same initialization and see the same environment streams.
"""
from __future__ import annotations

import hashlib
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import __version__
from ..approximator import ActorCritic
from ..baselines import DaggerConfig, PpoBcConfig, evaluate_teacher, write_report
from ..planners import DemoConfig
from ..ppo import PpoConfig, train_ppo
from ..rollout import TeacherBuffer
from ..seeding import make_rng
from ..tad import TadpoConfig, train_tadpo
from ..worlds import FAMILIES
from . import pipeline as P
from .config import ConfigError, ExperimentConfig, TeacherConfig, WorldSetConfig, save_config
from .report import render_table, svg_line_chart, write_jsonl

log = logging.getLogger(__name__)

STUDENTS = ("tadpo", "ppo", "dagger", "ppo_bc")
CONTROLLERS = ("mppi_direct", "mppi_realtime")
UNHASHED = ("hashes.json", "timing.json", "records.jsonl")


@dataclass(frozen=True)
class Suite:
    name: str
    families: tuple[str, ...]
    seeds: tuple[int, ...]
    build: Callable[[str], ExperimentConfig]
    students: tuple[str, ...] = STUDENTS
    controllers: tuple[str, ...] = CONTROLLERS
    checks: str = "invariants"  # invariants | thresholds


def _trend_config(family: str) -> ExperimentConfig:
    student = PpoConfig(iterations=30)
    return ExperimentConfig(
        worlds=WorldSetConfig(family=family, n_train=20, n_demo=20, n_eval=20),
        teacher=TeacherConfig(ppo=PpoConfig(iterations=100, epochs=10)),
        demo=DemoConfig(episodes_per_world=2),
        ppo=student, tadpo=TadpoConfig(ppo=student), ppo_bc=PpoBcConfig(ppo=student),
        dagger=DaggerConfig(rounds=10),
    )


def _smoke_config(family: str) -> ExperimentConfig:
    student = PpoConfig(iterations=2, n_steps=256, epochs=2, minibatch_size=64)
    return ExperimentConfig(
        worlds=WorldSetConfig(family=family, difficulty=0.5, n_train=2, n_demo=2, n_eval=2),
        n_envs=2, hidden=(32, 32),
        teacher=TeacherConfig(kind="pure_pursuit"),
        demo=DemoConfig(episodes_per_world=1),
        ppo=student, tadpo=TadpoConfig(ppo=student), ppo_bc=PpoBcConfig(ppo=student),
        dagger=DaggerConfig(rounds=2, steps_per_round=256, epochs=2, minibatch_size=64),
    )


SUITES = {
    "smoke": Suite("smoke", FAMILIES, (0, 1, 2), _smoke_config),
    "trend": Suite("trend", FAMILIES, (0, 1, 2), _trend_config, checks="thresholds"),
}


def stage_seed(master: int, *keys) -> int:
    return int(make_rng(master, *keys).integers(2**31))


def _jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, default=float) + "\n")


def _row(method: str, family: str, seed: int, metrics: dict) -> dict:
    return {"method": method, "world_family": family, "seed": seed,
            "sr": metrics["sr"], "cp": metrics["cp"], "ms": metrics["ms"]}


def _fan_out(fn, jobs: list, workers: int) -> list:
    """Map in job order; results come back in the same order whatever the pool does."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _student_job(method: str, cfg: ExperimentConfig, worlds, seed: int, teacher_path: str | None,
                 demo_path: str | None, run_dir: str) -> dict:
    """Train and evaluate one student; runs in a worker process, so inputs come from disk."""
    teacher_model = ActorCritic.load(teacher_path) if teacher_path else None
    teacher = P.make_teacher(cfg, teacher_model, seed)
    buffer = TeacherBuffer.load(demo_path) if demo_path else None
    with P.Timer() as t:
        model, curve = P.train_student(method, cfg, worlds.train, seed, teacher=teacher, buffer=buffer)
    metrics = P.evaluate_student(model, cfg, worlds.eval)
    stem = Path(run_dir) / f"{method}-seed{seed}"
    model.save(stem.with_suffix(".pvec"), meta={"method": method, "seed": seed, "config": cfg.digest()})
    _jsonl(stem.with_suffix(".jsonl"), curve)
    finite = model.params.is_finite()
    return {"curve": curve, "metrics": metrics, "elapsed": t.elapsed, "finite": finite}


@dataclass
class SuiteResult:
    rows: list[dict] = field(default_factory=list)
    records: list[P.RunRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures and all(self.checks.values())


def run_family(suite: Suite, family: str, master: int, out: Path, result: SuiteResult, workers: int = 1,
               cache_dir: Path | None = None) -> None:
    cfg = suite.build(family)
    fam_dir = out / family
    fam_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, fam_dir / "config.json")

    def stage(name, fn):
        try:
            with P.Timer() as t:
                value = fn()
            result.timing[f"{family}/{name}"] = t.elapsed
            return value
        except Exception as exc:  # a failed stage is recorded, the rest still runs
            log.error("%s/%s failed: %s", family, name, exc)
            result.failures.append({"family": family, "stage": name, "error": f"{type(exc).__name__}: {exc}",
                                    "trace": traceback.format_exc(limit=3)})
            return None

    worlds = stage("worlds", lambda: P.world_sets(cfg, cache_dir or out / "worlds"))
    if worlds is None:
        return
    log.info("%s: %d/%d/%d worlds", family, len(worlds.train), len(worlds.demo), len(worlds.eval))

    teacher_path = None
    if cfg.teacher.kind == "ppo":
        def teach():
            model, curve = P.train_teacher(cfg, worlds.train, stage_seed(master, family, "teacher"))
            model.save(fam_dir / "teacher.pvec", meta={"config": cfg.digest(), "view": "teacher"})
            _jsonl(fam_dir / "teacher.jsonl", curve)
            return model
        teacher_model = stage("teacher", teach)
        if teacher_model is None:
            return
        teacher_path = str(fam_dir / "teacher.pvec")
    else:
        teacher_model = None
    teacher = P.make_teacher(cfg, teacher_model, stage_seed(master, family, "teacher"))
    tm = stage("teacher-eval", lambda: evaluate_teacher(teacher, worlds.eval, cfg.env, cfg.eval_episodes_per_world))
    if tm is not None:
        result.rows.append(_row(f"teacher_{cfg.teacher.kind}", family, master, tm))

    def demos():
        buf = P.collect_demos(cfg, teacher, worlds.demo, stage_seed(master, family, "demo"))
        buf.save(fam_dir / "demos.demo")
        return buf
    buffer = stage("demos", demos)
    digest_before = buffer.digest() if buffer is not None else None

    run_dir = fam_dir / "runs"
    run_dir.mkdir(exist_ok=True)
    jobs, keys = [], []
    for method in suite.students:
        if method == "tadpo" and buffer is None:
            continue
        for s in suite.seeds:
            jobs.append((method, cfg, worlds, stage_seed(master, family, "run", s), teacher_path,
                         str(fam_dir / "demos.demo") if buffer is not None else None, str(run_dir)))
            keys.append((method, s))
    outputs = stage("students", lambda: _fan_out(_student_job, jobs, workers)) or []
    records: dict[str, P.RunRecord] = {}
    for (method, s), res in zip(keys, outputs):
        rec = records.setdefault(method, P.RunRecord(cfg.replace(method=method).digest(), method, family,
                                                     version=__version__))
        rec.curves[s] = res["curve"]
        rec.metrics[s] = res["metrics"]
        rec.wall_clock += res["elapsed"]
        result.rows.append(_row(method, family, s, res["metrics"]))
        if suite.checks == "invariants":
            result.checks[f"{family}/{method}/seed{s}/finite_params"] = res["finite"]
    result.records.extend(records.values())

    for name in suite.controllers:
        for s in suite.seeds:
            m = stage(f"{name}-seed{s}", lambda: P.evaluate_controller(name, cfg, worlds.eval,
                                                                       stage_seed(master, family, name, s)))
            if m is not None:
                result.rows.append(_row(name, family, s, m))

    if buffer is not None:
        reloaded = TeacherBuffer.load(fam_dir / "demos.demo")
        result.checks[f"{family}/demo_buffer_frozen"] = (buffer.digest() == digest_before == reloaded.digest())
    series = {}
    for rec in records.values():
        curves = [c for c in rec.curves.values() if c]
        if not curves:
            continue
        n = min(len(c) for c in curves)
        ys = [_mean_defined([_curve_value(c[i]) for c in curves]) for i in range(n)]
        series[rec.method] = (list(range(1, n + 1)), ys)
    if series:
        (out / f"curves-{family}.svg").write_text(svg_line_chart(
            series, title=f"{family}: rollout success rate", xlabel="iteration", ylabel="sr"))

    if suite.checks == "invariants":
        _invariants(cfg, worlds, family, master, result, suite)


def _mean_defined(vals: list[float]) -> float:
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _curve_value(stats: dict) -> float:
    v = stats.get("sr")
    return float("nan") if v is None else float(v)


def _invariants(cfg: ExperimentConfig, worlds, family: str, master: int, result: SuiteResult, suite: Suite) -> None:
    fam_rows = [r for r in result.rows if r["world_family"] == family]
    ok = all(0.0 <= r["cp"] <= 1.0 and 0.0 <= r["ms"] <= cfg.env.vehicle.v_max + 1e-9 and 0.0 <= r["sr"] <= 1.0
             for r in fam_rows)
    result.checks[f"{family}/metric_bounds"] = ok
    expected = len(suite.seeds) * (len(suite.students) + len(suite.controllers)) + 1
    result.checks[f"{family}/row_count"] = len(fam_rows) == expected
    seeds = ([w.seed for w in worlds.train], [w.seed for w in worlds.demo], [w.seed for w in worlds.eval])
    result.checks[f"{family}/seed_partition"] = not (set(seeds[0]) & set(seeds[1]) or set(seeds[0]) & set(seeds[2])
                                                     or set(seeds[1]) & set(seeds[2]))
    if family == suite.families[0]:
        # p = 0 must reproduce PPO exactly
        seed = stage_seed(master, family, "reduction")
        envs = lambda: P.make_envs(worlds.train, cfg.env, cfg.n_envs, seed)
        spec = P.policy_spec(cfg, "student")
        a, _ = train_ppo(envs(), cfg.ppo, seed, spec=spec)
        dummy = _dummy_buffer(spec.obs_dim, cfg.env.teacher.dim)
        b, _ = train_tadpo(envs(), dummy, TadpoConfig(teacher_prob=0.0, ppo=cfg.ppo), seed, spec=spec)
        result.checks["ppo_reduction"] = bool(a.params.digest() == b.params.digest())


def _dummy_buffer(obs_dim: int, teacher_dim: int) -> TeacherBuffer:
    n = 4
    z = np.zeros
    return TeacherBuffer(z((n, obs_dim)), z((n, teacher_dim)), z((n, 2)), z(n), z(n), z(n), z(n), z(n), z(n)).freeze()


def thresholds(rows: Sequence[dict], family: str = "obstacles") -> dict[str, bool]:
    """Trend checks on one family, over seed means."""
    def mean(method, key):
        vals = [r[key] for r in rows if r["method"] == method and r["world_family"] == family]
        return float(np.mean(vals)) if vals else float("nan")

    tadpo_sr, tadpo_ms = mean("tadpo", "sr"), mean("tadpo", "ms")
    out = {
        "tadpo_sr>=0.7": tadpo_sr >= 0.7,
        "ppo_sr<=0.2": mean("ppo", "sr") <= 0.2,
        "dagger_sr<tadpo_sr": mean("dagger", "sr") < tadpo_sr,
        "dagger_ms<tadpo_ms": mean("dagger", "ms") < tadpo_ms,
        "mppi_direct_sr>=0.9": mean("mppi_direct", "sr") >= 0.9,
        "mppi_realtime_loses>=0.3": mean("mppi_direct", "sr") - mean("mppi_realtime", "sr") >= 0.3,
    }
    return {f"{family}/{k}": bool(v) for k, v in out.items()}


def file_hashes(out: Path) -> dict[str, str]:
    hashes = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name not in UNHASHED:
            hashes[str(p.relative_to(out))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return hashes


def reproduce(suite_name: str, master: int, out: Path, families: Sequence[str] | None = None,
              workers: int = 1, cache_dir: Path | None = None) -> SuiteResult:
    """Run a suite and write report.csv, table.txt, verdict.json, SVG curves and hashes.json to ``out``."""
    if suite_name not in SUITES:
        raise ConfigError(f"suite: {suite_name!r} is not one of {sorted(SUITES)}")
    suite = SUITES[suite_name]
    fams = tuple(families or suite.families)
    for fam in fams:
        if fam not in FAMILIES:
            raise ConfigError(f"families: {fam!r} is not one of {FAMILIES}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = SuiteResult()
    for fam in fams:
        log.info("suite %s: family %s", suite_name, fam)
        run_family(suite, fam, master, out, result, workers=workers, cache_dir=cache_dir)
        _write(out, suite, fams, master, result)
    if suite.checks == "thresholds" and "obstacles" in fams:
        result.checks.update(thresholds(result.rows, "obstacles"))
    _write(out, suite, fams, master, result)
    return result


def _write(out: Path, suite: Suite, fams, master: int, result: SuiteResult) -> None:
    """Written after every family so that partial results survive a later failure."""
    write_report(out / "report.csv", result.rows)
    table = render_table(result.rows, families=list(fams))
    (out / "table.txt").write_text(table + "\n")
    verdict = {"suite": suite.name, "master_seed": master, "families": list(fams), "passed": result.passed,
               "checks": result.checks, "failures": [{k: f[k] for k in ("family", "stage", "error")}
                                                     for f in result.failures]}
    (out / "verdict.json").write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
    write_jsonl(out / "records.jsonl", [r.to_dict() for r in result.records])
    (out / "timing.json").write_text(json.dumps(result.timing, indent=2, sort_keys=True) + "\n")
    (out / "hashes.json").write_text(json.dumps(file_hashes(out), indent=2, sort_keys=True) + "\n")
