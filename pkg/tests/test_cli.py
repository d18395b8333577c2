import numpy as np
import pytest

from nseg import checkpoint
from nseg.cli import RunConfig, defaults_text, read_config, run
from nseg.errors import ConfigurationError
from nseg.network import GraphConfig, build_graph, param_count, parameter_names

TINY = ["--depth", "3", "--base-channels", "2"]


def lines(capsys):
    return capsys.readouterr().out.strip().splitlines()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert run(["synth", "--out", str(root), "--count", "8", "--size", "16", "--seed", "7"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run(["train", "--data", str(dataset), "--out", str(out), *TINY,
                "--max-epochs", "3", "--early-stop", "none", "--threads", "1"])
    assert code == 0
    return out


class TestExitCodes:
    def test_unknown_flag(self, capsys):
        assert run(["params", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        assert run(["frobnicate"]) == 1

    def test_missing_command(self):
        assert run([]) == 1

    def test_bad_value(self):
        assert run(["params", "--depth", "four"]) == 1

    def test_missing_data(self, tmp_path):
        assert run(["eval", "--checkpoint", str(tmp_path / "x.nseg"), "--data", str(tmp_path)]) == 2

    def test_numeric_abort(self, dataset, tmp_path):
        assert run(["train", "--data", str(dataset), "--out", str(tmp_path), *TINY,
                    "--lr", "inf", "--max-epochs", "2"]) == 3


class TestConfig:
    def test_file_and_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\ndepth = 3\nbase-channels = 4  # inline\nearly_stop = none\n")
        assert read_config(cfg) == {"depth": 3, "base_channels": 4, "early_stop": None}

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("depht = 3\n")
        with pytest.raises(ConfigurationError, match="depht"):
            read_config(cfg)
        assert run(["--config", str(cfg), "params"]) == 1

    def test_flags_beat_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("depth = 5\nbase_channels = 4\n")
        assert run(["--config", str(cfg), "params", "--depth", "3"]) == 0
        rows = lines(capsys)
        assert len(rows) == 3
        assert rows[-1].split(",")[1] == str(param_count(GraphConfig(3, 4)))

    def test_explicit_none_overrides(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("early_stop = 1.0\n")
        # threshold 1.0 would stop at epoch 2; the flag must switch it off
        assert run(["--config", str(cfg), "train", "--data", str(dataset), "--out", str(tmp_path / "r"),
                    *TINY, "--max-epochs", "4", "--early-stop", "none"]) == 0
        assert len((tmp_path / "r" / "history.csv").read_text().splitlines()) == 5

    def test_defaults_round_trip(self, tmp_path):
        cfg = tmp_path / "defaults.cfg"
        cfg.write_text(defaults_text())
        values = read_config(cfg)
        assert RunConfig(**values) == RunConfig()


def test_params_table(capsys):
    assert run(["params", "--depth", "4", "--base", "8"]) == 0
    rows = lines(capsys)
    assert rows[0] == "d,params,reduction_vs_full,reduction_vs_next"
    counts = [int(r.split(",")[1]) for r in rows[1:]]
    assert [int(r.split(",")[0]) for r in rows[1:]] == [1, 2, 3]
    cfg = GraphConfig(4, 8)
    model = build_graph(cfg, 0)
    for d, count in zip((1, 2, 3), counts):
        names = parameter_names(cfg, d)
        assert count == sum(model.params[n].size for n in names)
    assert counts == sorted(counts) and len(set(counts)) == 3


def test_synth_then_crossval(tmp_path, capsys):
    data = tmp_path / "ds"
    assert run(["synth", "--out", str(data), "--count", "10", "--size", "8", "--seed", "7"]) == 0
    capsys.readouterr()
    report = tmp_path / "report.csv"
    assert run(["crossval", "--data", str(data), "--k", "5", "--depth", "2", "--base-channels", "2",
                "--max-epochs", "1", "--out", str(report)]) == 0
    text = report.read_text(encoding="utf-8").splitlines()
    assert text[0] == "K,fold,accuracy,dice"
    assert [r.split(",")[1] for r in text[1:6]] == ["0", "1", "2", "3", "4"]
    assert text[6].startswith("5,mean±std,")


def test_k_sweep(dataset, capsys):
    assert run(["crossval", "--data", str(dataset), "--k-sweep", "2,3", "--depth", "2",
                "--base-channels", "2", "--max-epochs", "1"]) == 0
    rows = lines(capsys)
    assert [r for r in rows if "mean±std" in r][0].startswith("2,")
    assert sum("mean±std" in r for r in rows) == 2


def test_augment_doubles(dataset, tmp_path, capsys):
    assert run(["augment", "--data", str(dataset), "--out", str(tmp_path / "aug")]) == 0
    assert len(list((tmp_path / "aug").glob("*_mask.pgm"))) == 16


class TestCheckpointCommands:
    def test_train_outputs(self, trained):
        assert (trained / "history.csv").read_text().startswith("epoch,train_loss,train_acc,val_acc,lr\n")
        assert checkpoint.load(trained / "best.nseg").config == GraphConfig(3, 2)

    def test_train_deterministic(self, dataset, trained, tmp_path):
        assert run(["train", "--data", str(dataset), "--out", str(tmp_path), *TINY,
                    "--max-epochs", "3", "--early-stop", "none", "--threads", "1"]) == 0
        for name in ("best.nseg", "history.csv"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()

    @pytest.mark.parametrize("d", [1, 2])
    def test_prune_then_eval_matches_head(self, dataset, trained, tmp_path, capsys, d):
        pruned = tmp_path / f"p{d}.nseg"
        assert run(["prune", "--checkpoint", str(trained / "best.nseg"), "--out", str(pruned),
                    "--prune-level", str(d)]) == 0
        report = lines(capsys)
        before, after = (int(r.split(":")[1]) for r in report[:2])
        assert (before, after) == (param_count(GraphConfig(3, 2)), param_count(GraphConfig(3, 2), d))
        assert report[2].startswith("reduction:")
        assert run(["eval", "--checkpoint", str(pruned), "--data", str(dataset)]) == 0
        via_prune = lines(capsys)
        assert run(["eval", "--checkpoint", str(trained / "best.nseg"), "--data", str(dataset),
                    "--head", str(d)]) == 0
        assert lines(capsys) == via_prune

    def test_prune_requires_level(self, trained, tmp_path):
        assert run(["prune", "--checkpoint", str(trained / "best.nseg"), "--out", str(tmp_path / "x")]) == 1

    def test_bad_head(self, dataset, trained):
        assert run(["eval", "--checkpoint", str(trained / "best.nseg"), "--data", str(dataset),
                    "--head", "7"]) == 2

    def test_predict(self, dataset, trained, tmp_path):
        out = tmp_path / "pred"
        assert run(["predict", "--checkpoint", str(trained / "best.nseg"), "--data", str(dataset),
                    "--out", str(out)]) == 0
        masks = sorted(p.name for p in out.iterdir())
        assert masks == [f"synth{i:04d}_mask.pgm" for i in range(8)]
        from nseg.pgm import read_pgm
        assert set(np.unique(read_pgm(out / masks[0]))) <= {0, 255}
