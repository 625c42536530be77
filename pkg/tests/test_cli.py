import csv
import os
import subprocess
import sys

import pytest

from mclatent import cli, config
from mclatent.checkpoint import describe, parameter_inventory

TINY = [
    "data.kind='two_mode'",
    "data.n_clips=8",
    "data.clip_seconds=1.0",
    "data.crop_seconds=1.0",
    "data.batch_size=4",
    "model.d=16",
    "model.encoder_depth=1",
    "model.predictor_depth=1",
    "model.K=8",
    "train.total_steps=2",
    "probe.n_train=16",
    "probe.n_val=8",
    "probe.n_test=8",
    "probe.max_epochs=2",
    "probe.seeds=[0]",
    "analysis.sample_limit=40",
]


def _args(out, *extra):
    argv = ["--out", str(out)]
    for s in TINY + list(extra):
        argv += ["--set", s]
    return argv


class TestConfigHandling:
    def test_alias_override_resolves(self, tmp_path):
        assert cli.main(["pretrain"] + _args(tmp_path, "train.r=3")) == 0
        cfg = config.load(os.path.join(tmp_path, "resolved.toml"))
        assert cfg.model.r == 3

    def test_unknown_flag_exits_1(self, tmp_path, capsys):
        assert cli.main(["pretrain", "--bogus"]) == 1

    def test_unknown_key_exits_1(self, tmp_path, capsys):
        assert cli.main(["pretrain"] + _args(tmp_path, "model.nope=1")) == 1
        assert "nope" in capsys.readouterr().err

    def test_validation_error_exits_1(self, tmp_path, capsys):
        assert cli.main(["pretrain"] + _args(tmp_path, "loss.alpha=2.0")) == 1
        assert "alpha" in capsys.readouterr().err

    def test_missing_checkpoint_exits_1(self, tmp_path):
        assert cli.main(["inspect-ckpt", str(tmp_path / "none.bin")]) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["pretrain"] + _args(out, "model.r=2")) == 0
    return out


class TestPipeline:
    def test_inspect_matches_inventory(self, trained, capsys):
        from mclatent.checkpoint import load_checkpoint

        path = os.path.join(trained, "ckpt_final.bin")
        capsys.readouterr()
        assert cli.main(["inspect-ckpt", path]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [l.split("\t")[0] for l in lines] == [n for n, _, _ in describe(path)]
        inv = parameter_inventory(load_checkpoint(path))
        listed = {l.split("\t")[0]: l.split("\t")[2] for l in lines}
        for name, shape in inv.items():
            assert listed[name] == ("x".join(map(str, shape)) or "scalar")

    def test_analyze_outputs(self, trained):
        assert cli.main(["analyze"] + _args(trained, "model.r=2", "analysis.k=2")) == 0
        with open(os.path.join(trained, "utilisation.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 and abs(sum(float(r["frequency"]) for r in rows) - 1) <= 1e-12
        assert os.path.exists(os.path.join(trained, "winners.csv"))

    def test_probe_outputs(self, trained):
        argv = _args(trained, "model.r=2", "probe.task='events4'")
        assert cli.main(["probe"] + argv) == 0
        assert cli.main(["probe", "--random-init"] + argv) == 0
        for tag in ("ckpt", "random"):
            with open(os.path.join(trained, f"probe_events4_{tag}.csv")) as fh:
                rows = list(csv.DictReader(fh))
            assert [r["task"] for r in rows] == ["events4[seed=0]", "events4"]
            assert 0.0 <= float(rows[-1]["value"]) <= 1.0


class TestGradCheck:
    def test_passes_and_fault_fails(self):
        assert cli.main(["grad-check", "--seeds", "2"]) == 0
        assert cli.main(["grad-check", "--seeds", "2", "--inject-fault"]) == 2


def test_synth_data(tmp_path):
    assert cli.main(["synth-data", "--n", "2"] + _args(tmp_path)) == 0
    with open(tmp_path / "manifest.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and {r["split"] for r in rows} == {"train", "val", "test"}
    assert all((tmp_path / r["path"]).exists() for r in rows)


def test_sweep_csv(tmp_path):
    argv = ["sweep", "--strategies", "annealed,greedy", "--rs", "1,2"] + _args(tmp_path, "train.total_steps=1")
    assert cli.main(argv) == 0
    with open(tmp_path / "sweep.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == cli.SWEEP_HEADER
    assert [(r[0], r[1]) for r in rows[1:]] == [("annealed", "1"), ("annealed", "2"), ("greedy", "1"), ("greedy", "2")]
    assert [len(r[7].split()) for r in rows[1:]] == [1, 2, 1, 2]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mclatent", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "pretrain" in out.stdout
