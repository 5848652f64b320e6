import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from tadpo.approximator import ActorCritic
from tadpo.harness import pipeline as P
from tadpo.harness.cli import main
from tadpo.harness.config import (
    ConfigError, ExperimentConfig, SEED_RANGES, assert_partition, config_from_dict, load_config, save_config,
    split_of, world_seeds,
)
from tadpo.harness.report import render_table, svg_line_chart, svg_world
from tadpo.harness.suites import SUITES, file_hashes, stage_seed, thresholds
from tadpo.rollout import TeacherBuffer
from tadpo.tad import TadpoConfig

TINY = Path(__file__).resolve().parents[1] / "configs" / "tiny.json"


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    """Output root shared by the CLI tests so the generated worlds are cached once."""
    path = tmp_path_factory.mktemp("root")
    mp = pytest.MonkeyPatch()
    mp.setenv("TADPO_OUTPUT_ROOT", str(path))
    yield path
    mp.undo()


def write_cfg(path: Path, **overrides) -> Path:
    data = json.loads(TINY.read_text())
    for key, value in overrides.items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    path.write_text(json.dumps(data))
    return path


# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize("cfg", [ExperimentConfig(), load_config(TINY), SUITES["smoke"].build("hybrid"),
                                 SUITES["trend"].build("slow_zones")])
def test_config_round_trip(cfg, tmp_path):
    assert config_from_dict(cfg.to_dict()) == cfg
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_default_config_has_table_values():
    cfg = ExperimentConfig()
    assert cfg.tadpo == TadpoConfig()
    assert (cfg.ppo.n_steps, cfg.ppo.epochs, cfg.ppo.minibatch_size, cfg.ppo.learning_rate, cfg.ppo.gamma) == \
        (2048, 20, 256, 3e-4, 0.99)
    assert (cfg.tadpo.teacher_prob, cfg.tadpo.epsilon_mu) == (0.5, 0.5)
    assert cfg.demo.max_transitions == 100_000


@pytest.mark.parametrize("data,field", [
    ({"ppo": {"bogus": 1}}, "ppo.bogus"),
    ({"tadpo": {"ppo": {"lr": 1}}}, "tadpo.ppo.lr"),
    ({"worlds": {"family": "lava"}}, "worlds.family"),
    ({"seeds": []}, "seeds"),
    ({"method": "sac"}, "method"),
])
def test_config_errors_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(data)


def test_config_type_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"n_envs": "four"})
    with pytest.raises(ConfigError):
        config_from_dict({"tadpo": {"teacher_prob": 2.0}})
    with pytest.raises(ConfigError):
        config_from_dict([1, 2])


def test_digest_tracks_content_not_output_dir():
    a = ExperimentConfig()
    assert a.digest() == ExperimentConfig().digest()
    assert a.digest() == a.replace(output_dir="/elsewhere").digest()
    assert a.digest() != a.replace(seeds=(0, 1)).digest()


def test_seed_partition():
    ranges = sorted(SEED_RANGES.values())
    assert all(a[1] <= b[0] for a, b in zip(ranges, ranges[1:]))
    train, demo, ev = world_seeds("train", 20), world_seeds("demo", 20), world_seeds("eval", 20)
    assert_partition(train, demo, ev)
    assert not set(train) & set(demo) | set(train) & set(ev) | set(demo) & set(ev)
    assert [split_of(s[0]) for s in (train, demo, ev)] == ["train", "demo", "eval"]
    with pytest.raises(ConfigError):
        assert_partition(train, [ev[0]], ev)
    with pytest.raises(ConfigError):
        world_seeds("eval", 2_000_000)


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(0, "obstacles", "run", 1) == stage_seed(0, "obstacles", "run", 1)
    seeds = {stage_seed(m, f, "run", s) for m in (0, 1) for f in ("obstacles", "hybrid") for s in range(3)}
    assert len(seeds) == 12


# -- reports ----------------------------------------------------------------


ROWS = [{"method": m, "world_family": f, "seed": s, "sr": sr, "cp": 0.5, "ms": 2.0}
        for m, sr in (("tadpo", 1.0), ("ppo", 0.0)) for f in ("obstacles", "hybrid") for s in range(3)]


def test_render_table_layout():
    table = render_table(ROWS)
    lines = table.splitlines()
    assert "obstacles" in lines[0] and "hybrid" in lines[0]
    assert lines[1].split("|")[1].split() == ["sr", "cp", "ms"]
    assert lines[3].startswith("TADPO") and "1.00" in lines[3]
    assert lines[4].startswith("PPO") and "0.00" in lines[4]
    assert "-" in render_table(ROWS, families=["obstacles", "slow_zones"]).splitlines()[3]


def test_svg_outputs_are_wellformed():
    import xml.etree.ElementTree as ET

    svg = svg_line_chart({"a": ([1, 2, 3], [0.1, None, 0.3]), "b": ([1, 2], [float("nan"), 1.0])}, title="x<y")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg") and len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2
    from conftest import straight_world

    ET.fromstring(svg_world(straight_world(obstacles=[(50.0, 0.0, 2.0)]), {"run": [(0, 0), (10, 1)]}))


def test_thresholds_on_synthetic_rows():
    rows = [{"method": m, "world_family": "obstacles", "seed": s, "sr": sr, "cp": 1.0, "ms": ms}
            for m, sr, ms in (("tadpo", 0.8, 4.0), ("ppo", 0.1, 1.0), ("dagger", 0.3, 2.0),
                              ("mppi_direct", 1.0, 3.0), ("mppi_realtime", 0.5, 2.0)) for s in range(3)]
    assert all(thresholds(rows).values())
    rows[0] = rows[0] | {"sr": 0.0}  # one bad seed drags the TADPO mean below 0.7
    assert not thresholds(rows)["obstacles/tadpo_sr>=0.7"]


def test_file_hashes_skip_volatile_files(tmp_path):
    (tmp_path / "a.csv").write_text("x")
    (tmp_path / "timing.json").write_text("1")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "b.pvec").write_bytes(b"\0")
    assert set(file_hashes(tmp_path)) == {"a.csv", "sub/b.pvec"}


# -- CLI --------------------------------------------------------------------


def test_budget_zero_teacher_is_initialization_and_rerun_is_identical(root, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", **{"teacher.ppo.iterations": 0})
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert sha(tmp_path / "a" / "teacher.pvec") == sha(tmp_path / "b" / "teacher.pvec")
    model = ActorCritic.load(tmp_path / "a" / "teacher.pvec")
    c = load_config(cfg)
    init = P.make_envs(P.build_worlds(c, "train", root / "worlds"), P.teacher_env_config(c), 1, 0, view="teacher")
    from tadpo.ppo import make_policy

    assert np.array_equal(model.params.values, make_policy(init, P.policy_spec(c, "teacher"), 0).params.values)
    assert (tmp_path / "a" / "teacher.jsonl").read_text() == ""


def test_trained_teacher_run_is_deterministic(root, tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    for d in ("a", "b"):
        assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for name in ("teacher.pvec", "teacher.jsonl"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)


def test_collect_demos_and_train_students(root, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["collect-demos", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    demos = tmp_path / "d" / "demos.demo"
    buf = TeacherBuffer.load(demos)
    assert buf.frozen and buf.manifest["teacher"] == "pure_pursuit" and buf.manifest["successes"] == 1
    for method in ("tadpo", "dagger", "ppo_bc", "ppo"):
        out = tmp_path / method
        assert main(["train-student", "--config", str(cfg), "--demos", str(demos), "--method", method,
                     "--out", str(out)]) == 0
        for seed in (0, 1):
            assert (out / f"{method}-seed{seed}.pvec").is_file() and (out / f"{method}-seed{seed}.svg").is_file()
    stats = [json.loads(line) for line in (tmp_path / "tadpo" / "tadpo-seed0.jsonl").read_text().splitlines()]
    assert len(stats) == 2 and {"gated_frac", "clipped_frac", "tad_steps"} <= set(stats[0])
    assert TeacherBuffer.load(demos).digest() == buf.digest()


def test_p_zero_student_matches_ppo(root, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", **{"tadpo.teacher_prob": 0.0, "seeds": [3]})
    assert main(["collect-demos", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    demos = str(tmp_path / "d" / "demos.demo")
    assert main(["train-student", "--config", str(cfg), "--demos", demos, "--out", str(tmp_path / "t")]) == 0
    assert main(["train-student", "--config", str(cfg), "--method", "ppo", "--out", str(tmp_path / "p")]) == 0
    assert load_config(cfg).ppo == load_config(cfg).tadpo.ppo
    a = ActorCritic.load(tmp_path / "t" / "tadpo-seed3.pvec")
    b = ActorCritic.load(tmp_path / "p" / "ppo-seed3.pvec")
    assert np.array_equal(a.params.values, b.params.values)
    ta = [json.loads(x) for x in (tmp_path / "t" / "tadpo-seed3.jsonl").read_text().splitlines()]
    tb = [json.loads(x) for x in (tmp_path / "p" / "ppo-seed3.jsonl").read_text().splitlines()]
    assert [{k: r[k] for k in b_} for r, b_ in zip(ta, tb)] == tb


def test_missing_demo_file_exits_2_with_path(root, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    missing = tmp_path / "nowhere.demo"
    assert main(["train-student", "--config", str(cfg), "--demos", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_demo_dimension_mismatch_exits_2(root, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["collect-demos", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    other = write_cfg(tmp_path / "o.json", **{"env.student.raycast_count": 8})
    assert main(["train-student", "--config", str(other), "--demos", str(tmp_path / "d" / "demos.demo")]) == 2
    assert "dims" in capsys.readouterr().err


def test_invalid_config_exits_2(root, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", **{"ppo.bogus": 1})
    assert main(["train-teacher", "--config", str(cfg)]) == 2
    assert "ppo.bogus" in capsys.readouterr().err
    assert main(["train-teacher", "--config", str(tmp_path / "absent.json")]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["evaluate", "--config", str(tmp_path / "bad.json"), "--controller", "mppi_direct"]) == 2


def test_weak_teacher_exits_3(root, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", **{"teacher.kind": "ppo", "teacher.ppo.iterations": 0})
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    assert main(["collect-demos", "--config", str(cfg), "--teacher", str(tmp_path / "t" / "teacher.pvec"),
                 "--out", str(tmp_path / "d")]) == 3
    assert "success rate" in capsys.readouterr().err


def test_evaluate_rows_and_table(root, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", **{"worlds.n_eval": 2})
    assert main(["train-student", "--config", str(cfg), "--method", "ppo", "--out", str(tmp_path / "s")]) == 0
    assert main(["evaluate", "--config", str(cfg), "--controller", "pure_pursuit",
                 "--checkpoint", str(tmp_path / "s" / "ppo-seed0.pvec"),
                 "--checkpoint", str(tmp_path / "s" / "ppo-seed1.pvec"), "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "report.csv").read_text().splitlines()
    assert lines[0] == "method,world_family,world_seed,seed,sr,cp,ms"
    # two methods, two eval worlds, two seeds each
    assert len(lines) - 1 == 2 * 2 * 2
    pp = [line.split(",") for line in lines[1:] if line.startswith("pure_pursuit")]
    assert all(float(r[4]) == 1.0 for r in pp)
    assert "Pure pursuit" in (tmp_path / "e" / "table.txt").read_text()


def test_infeasible_worlds_exit_3(root, tmp_path, capsys):
    # densify gets twice the step cap, far too few steps to cross a 60-unit world
    cfg = write_cfg(tmp_path / "c.json", **{"env.max_steps": 10, "worlds.gen": {"retries": 2}})
    assert main(["train-teacher", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 3
    assert "no feasible" in capsys.readouterr().err


def test_empty_eval_worlds_exit_2(root, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", **{"worlds.n_eval": 0})
    assert main(["evaluate", "--config", str(cfg), "--controller", "pure_pursuit"]) == 2


def test_unknown_controller_and_suite(root, tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    assert main(["evaluate", "--config", str(cfg), "--controller", "cem"]) == 2
    with pytest.raises(SystemExit):
        main(["reproduce", "nightly"])
