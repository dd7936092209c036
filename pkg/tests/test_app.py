import json
import logging
import os

import pytest

from MisretApp import App
from MisretCommon import LoudDict
from MisretPool import WorkerPool
from artifacts import read_json, write_json
from mrCore.envsim import WorldSpec
from mrCore.losses import NumericalError
from mrCore.model import load_model
from mrCore.trajectory import load_dataset

WORLD = ["--set", "world.n_users=10", "--set", "world.n_items=6", "--set", "world.d_f=2",
         "--set", "world.episodes=6", "--set", "world.max_steps=5"]
MODEL = ["--set", "model.d_model=16", "--set", "model.d_ff=32", "--set", "model.T_max=4",
         "--set", "train.batch=8", "--set", "train.log_every=0"]
PATHS = ["--set", "paths.dataset=d.jsonl", "--set", "paths.checkpoint=m.ckpt",
         "--set", "paths.metrics=m.jsonl", "--set", "paths.report=r.json"]


@pytest.fixture
def app(workspace):
    return App()


def _command(app, name):
    return app.commands[name]['fcn'].__self__


def test_usage_and_unknown_command(app, capsys):
    assert app.exec_command([]) == 1
    assert app.exec_command(["--help"]) == 0
    assert "usage: misret" in capsys.readouterr().out
    assert app.exec_command(["frobnicate"]) == 1


def test_registered_commands(app):
    for name in ("gen-data", "pretrain-lm", "train", "eval", "stitch-demo", "help", "version"):
        assert name in app.commands
    assert app.commands["gen_data"]['alias'] == "gen-data"


def test_version(app, capsys):
    assert app.exec_command(["version"]) == 0
    assert "misret " + App.version_string() in capsys.readouterr().out


def test_help(app, capsys):
    assert app.exec_command(["help", "train"]) == 0
    out = capsys.readouterr().out
    assert "> misret train" in out
    assert "--ablate-max" in out and "--steps <int>" in out and "--sweep <str>" in out
    assert app.exec_command(["help", "nope"]) == 1
    assert app.exec_command(["help"]) == 0
    assert "> misret stitch-demo" in capsys.readouterr().out


def test_argument_parsing(app):
    cmd = _command(app, "train")
    args, unnamed = cmd.check_args(["--steps", "5", "--ablate-max", "--set", "a.b=1", "--set=c=2", "extra"])
    assert args == {"steps": 5, "ablate_max": True, "set": ["a.b=1", "c=2"]}
    assert unnamed == ["extra"]
    assert cmd.check_args(["--ablate-lm=false"])[0] == {"ablate_lm": False}
    with pytest.raises(App.CommandErrorException, match="expects a value"):
        cmd.check_args(["--steps"])
    with pytest.raises(App.CommandErrorException, match="Unknown parameter: --depth"):
        cmd.check_args(["--depth", "3"])
    with pytest.raises(App.CommandErrorException, match="Cannot cast"):
        cmd.check_args(["--steps", "many"])
    with pytest.raises(App.CommandErrorException, match="Unknown parameter: --sweep"):
        _command(app, "gen-data").check_args(["--sweep", "seed=1,2"])


def test_parse_assignment():
    cmd_cls = type(_command(App(), "train"))
    assert cmd_cls.parse_assignment("model.T_max=10") == ("model.T_max", 10)
    assert cmd_cls.parse_assignment("world.eps_mix=[[0.1, 1.0]]") == ("world.eps_mix", [[0.1, 1.0]])
    with pytest.raises(App.CommandErrorException):
        cmd_cls.parse_assignment("model.T_max")


def test_config_overrides_are_logged(app, caplog):
    with caplog.at_level(logging.INFO, logger="base"):
        cfg = app.load_config(None, [("train.steps", 5), ("T_max", 8), ("seed", 3)])
    assert cfg["train"]["steps"] == 5
    assert cfg["model"]["T_max"] == 8
    assert cfg["seed"] == 3
    assert "Override train.steps: 20000 -> 5" in caplog.text
    assert "Override seed: 0 -> 3" in caplog.text
    digest = app.digest
    app.set_option("train.steps", 6)
    app.propagate_options()
    assert app.digest != digest


def test_bad_override_exit_code(app):
    assert app.exec_command(["gen-data", "--set", "world.colour=blue"]) == 1
    assert app.exec_command(["gen-data", "--set", "world.d_f"]) == 1
    assert app.exec_command(["gen-data", "--config", "missing.json"]) == 1


def test_exit_codes():
    assert App.exit_code(NumericalError("boom")) == 2
    assert App.exit_code(App.AcceptanceError("no")) == 3
    assert App.exit_code(App.CommandErrorException("usage")) == 1
    assert App.exit_code(ValueError("other")) == 1


def test_gen_data_toy_and_force(app, workspace):
    argv = ["gen-data", "--toy", "--set", "paths.dataset=out/toy.jsonl"]
    assert app.exec_command(argv) == 0
    ds = load_dataset("out/toy.jsonl")
    assert len(ds) == 2
    prov = read_json("out/toy.jsonl.provenance.json")
    assert prov["toy"] is True
    assert prov["config_digest"] == app.digest
    assert app.exec_command(argv) == 1
    assert app.exec_command(argv + ["--force"]) == 0


def test_gen_data_world(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    ds = load_dataset("d.jsonl")
    assert len(ds) == 6
    assert ds.catalog_size == 6 and ds.state_dim == 4
    prov = read_json("d.jsonl.provenance.json")
    assert isinstance(prov["world_spec"], WorldSpec)
    assert prov["world_spec"].n_items == 6


def test_train_and_eval(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    assert app.exec_command(["train", "--ablate-lm", "--steps", "3"] + WORLD + MODEL + PATHS) == 0
    model = load_model("m.ckpt")
    assert model.extra["variant"] == "no-lm"
    assert model.extra["config_digest"]
    assert len(open("m.jsonl").read().splitlines()) == 3

    argv = ["eval", "--episodes", "1", "--set", "search.n_envs=2"] + WORLD + MODEL + PATHS
    assert app.exec_command(argv) == 0
    report = json.load(open("r.json"))
    assert report["episodes"] == 2
    assert report["variant"] == "no-lm"
    assert set(report) >= {"R_cumu", "R_avg", "Length", "config_digest", "per_episode"}
    assert report["config"]["search"]["n_envs"] == 2
    assert report["config"]["world"]["n_items"] == 6

    assert app.exec_command(["eval", "--episodes", "0"] + WORLD + MODEL + PATHS) == 1


def test_eval_rejects_foreign_world(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    assert app.exec_command(["train", "--ablate-lm", "--steps", "1"] + WORLD + MODEL + PATHS) == 0
    assert app.exec_command(["eval", "--set", "world.n_items=7"] + MODEL + PATHS) == 1


def test_ablate_max_checkpoint_skips_search(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    assert app.exec_command(["train", "--ablate-lm", "--ablate-max", "--steps", "1"] + WORLD + MODEL + PATHS) == 0
    assert load_model("m.ckpt").extra["max_head"] is False
    assert app.exec_command(["eval", "--episodes", "1", "--set", "search.n_envs=1"] + WORLD + MODEL + PATHS) == 0
    report = json.load(open("r.json"))
    assert report["search"]["max_head"] is False
    assert all(rec["forward_calls"] == [2] * rec["Length"] for rec in report["per_episode"])


def test_contradictory_flags(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    assert app.exec_command(["train", "--ablate-lm", "--freeze", "lora"] + WORLD + MODEL + PATHS) == 1


def test_train_needs_prior(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    assert app.exec_command(["train", "--steps", "1", "--set", "paths.prior=none.ckpt"] + WORLD + MODEL + PATHS) == 1


def test_train_sweep(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    argv = ["train", "--ablate-lm", "--steps", "1", "--sweep", "train.lr=0.001,0.01"] + WORLD + MODEL + PATHS
    assert app.exec_command(argv) == 0
    assert os.path.exists("m_lr-0.001.ckpt") and os.path.exists("m_lr-0.01.ckpt")
    summary = read_json("m_sweep.json")
    assert [row["value"] for row in summary["rows"]] == [0.001, 0.01]
    assert os.path.exists("m_sweep.png")


def test_process_container(app):
    with app.proc_container.new("unit of work") as proc:
        assert app.proc_container.running() == ["unit of work [Active]"]
    assert proc.status == "Done"
    assert app.proc_container.running() == []
    with pytest.raises(RuntimeError):
        with app.proc_container.new("failing") as proc:
            raise RuntimeError("x")
    assert proc.status == "Failed"


def test_loud_dict():
    seen = []
    d = LoudDict(a=1)
    d.set_change_callback(lambda key, old, new: seen.append((key, old, new)))
    d["a"] = 1
    d["a"] = 2
    d.update(b=3)
    assert seen == [("a", 1, 2), ("b", None, 3)]
    assert d.plain() == {"a": 2, "b": 3}


def test_json_artifacts(tmp_path):
    path = str(tmp_path / "x.json")
    write_json(path, {"spec": WorldSpec(n_items=7), "values": [1, 2]})
    back = read_json(path)
    assert back["spec"] == WorldSpec(n_items=7)
    with pytest.raises(TypeError):
        write_json(path, {"bad": object()})


def test_worker_pool():
    with WorkerPool(2) as pool:
        assert pool.map(lambda x, y: x * y, [(1, 2), (3, 4), (5, 6)]) == [2, 12, 30]


def test_cli_runs_are_byte_identical(app, workspace):
    assert app.exec_command(["gen-data"] + WORLD + PATHS) == 0
    outputs = []
    for _ in range(2):
        assert app.exec_command(["train", "--ablate-lm", "--steps", "4"] + WORLD + MODEL + PATHS) == 0
        assert app.exec_command(["eval", "--episodes", "1", "--set", "search.n_envs=2"] + WORLD + MODEL + PATHS) == 0
        outputs.append((open("m.jsonl", "rb").read(), open("r.json", "rb").read()))
    assert outputs[0] == outputs[1]


def test_loss_spread():
    cmd_cls = type(_command(App(), "train"))
    metrics = [{"step": s, "L_total": float(s % 2)} for s in range(1, 6001)]
    assert cmd_cls.loss_spread(metrics) == pytest.approx(0.5)
    short = [{"step": s, "L_total": v} for s, v in enumerate([9.0, 9.0, 1.0, 3.0], 1)]
    assert cmd_cls.loss_spread(short) == pytest.approx(1.0)
    assert cmd_cls.loss_spread([]) == 0.0


def test_make_pool(app):
    with app.make_pool(0) as pool:
        assert pool is None
    with app.make_pool(1) as pool:
        assert isinstance(pool, WorkerPool)
        assert pool.map(lambda x: x + 1, [(1,), (2,)]) == [2, 3]


@pytest.mark.slow
def test_stitch_demo_report(app, workspace):
    assert app.exec_command(["stitch-demo", "--seeds", "1", "--set", "paths.report=s.json"]) in (0, 3)
    report = read_json("s.json")
    assert report["seeds"] == 1
    assert report["config"]["paths"]["report"] == "s.json"
    assert report["config_digest"] == app.digest
