import json

import numpy as np
import pytest
import yaml

from qmpc import cli
from qmpc import training as tr
from qmpc.config import ConfigError, config_from_dict, load_config


TINY_CONFIG = {
    "master_seed": 3,
    "data": {"n_samples": 800},
    "forecaster": {"window": 4, "horizon": 5, "hidden_size": 24,
                   "decoder_hidden": 12, "decoder_output_dim": 6,
                   "dropout": 0.1},
    "training": {"epochs": 12, "batch_size": 64},
    "mpc": {"horizon": 5},
    "campaign": {"replicates": 2, "episode_length": 16,
                 "reference": {"kind": "steps", "high": 2.0, "low": -1.5,
                               "dwell": 8}},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared pipeline artifacts: config, dataset, trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY_CONFIG))
    data = root / "data.csv"
    assert cli.main(["gen-data", "--config", str(cfg_path),
                     "--out", str(data)]) == 0
    model = root / "model.qmpc"
    assert cli.main(["train", "--config", str(cfg_path), str(data),
                     "--out", str(model)]) == 0
    return root, cfg_path, data, model


class TestConfig:
    def test_defaults_match_benchmark(self):
        cfg = load_config(None)
        assert cfg.training.learning_rate == 0.001
        assert cfg.training.weight_decay == 0.002
        assert cfg.training.lr_step_size == 10
        assert cfg.training.lr_decay == 0.95
        assert cfg.training.epochs == 200
        assert cfg.training.batch_size == 64
        assert cfg.forecaster.hidden_size == 128
        assert cfg.forecaster.decoder_hidden == 32
        assert cfg.forecaster.decoder_output_dim == 16
        assert cfg.forecaster.dropout == 0.2
        assert cfg.forecaster.layer_norm is True
        assert cfg.mpc.state_lower == [-2.0, -3.5]
        assert cfg.mpc.state_upper == [2.5, 3.5]
        assert cfg.mpc.input_bounds == [-5.0, 5.0]
        assert cfg.mpc.ancillary_gain == [-0.0621, -0.2027]
        assert cfg.plant.sigma_eps == 0.1

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown top-level"):
            config_from_dict({"plannt": {}})

    def test_unknown_section_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key.*training"):
            config_from_dict({"training": {"lr": 0.1}})

    def test_reference_builder_steps(self):
        cfg = config_from_dict(
            {"campaign": {"reference": {"kind": "steps", "high": 1.0,
                                        "low": -1.0, "dwell": 2}}})
        ref = cfg.campaign.reference.build(6)
        np.testing.assert_array_equal(ref, [1, 1, -1, -1, 1, 1])


class TestGenData:
    def test_schema_and_length(self, workdir):
        _, _, data, _ = workdir
        lines = data.read_text().splitlines()
        assert lines[0] == "time,u,x1,x2"
        assert len(lines) == 1 + TINY_CONFIG["data"]["n_samples"]

    def test_deterministic_given_seed(self, workdir, tmp_path):
        _, cfg_path, data, _ = workdir
        again = tmp_path / "again.csv"
        assert cli.main(["gen-data", "--config", str(cfg_path),
                         "--out", str(again)]) == 0
        assert again.read_bytes() == data.read_bytes()

    def test_noiseless_flag(self, workdir, tmp_path):
        _, cfg_path, _, _ = workdir
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        for path in (a, b):
            assert cli.main(["gen-data", "--config", str(cfg_path),
                             "--noiseless", "--out", str(path)]) == 0
        assert a.read_bytes() == b.read_bytes()
        targets, covs = tr.read_dataset_csv(a)
        # oracle dataset: states must match a clean re-simulation
        from qmpc import plant as pl
        clean = pl.simulate_noiseless(pl.LtiPlant(), [0.0, 0.0], covs[:, 0])
        np.testing.assert_allclose(targets, clean, atol=1e-12)

    def test_unwritable_path_fails(self, workdir):
        _, cfg_path, _, _ = workdir
        rc = cli.main(["gen-data", "--config", str(cfg_path),
                       "--out", "/nonexistent-dir/data.csv"])
        assert rc == 1


class TestTrain:
    def test_emits_loss_curves(self, workdir):
        root, _, _, model = workdir
        loss_csv = root / "model_loss.csv"
        lines = loss_csv.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss"
        assert len(lines) == 1 + TINY_CONFIG["training"]["epochs"]

    def test_epochs_override(self, workdir, tmp_path):
        _, cfg_path, data, _ = workdir
        out = tmp_path / "m.qmpc"
        assert cli.main(["train", "--config", str(cfg_path), str(data),
                         "--out", str(out), "--epochs", "2"]) == 0
        lines = (tmp_path / "m_loss.csv").read_text().splitlines()
        assert len(lines) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_exits_2(self, workdir, tmp_path):
        _, cfg_path, _, _ = workdir
        bad = tmp_path / "bad.csv"
        targets = np.full((40, 2), 1e308)
        covs = np.full((40, 1), 1e308)
        tr.write_dataset_csv(bad, targets, covs)
        rc = cli.main(["train", "--config", str(cfg_path), str(bad),
                       "--out", str(tmp_path / "m.qmpc"), "--epochs", "1"])
        assert rc == 2

    def test_checkpoint_loads_and_roundtrips(self, workdir):
        from qmpc import forecaster as fc
        _, _, _, model_path = workdir
        model = fc.load(model_path)
        assert model.config.window_w == 4


class TestRun:
    def test_episode_csvs_per_controller(self, workdir, tmp_path):
        _, cfg_path, _, model = workdir
        out = tmp_path / "episodes"
        assert cli.main(["run", "--config", str(cfg_path), "--model",
                         str(model), "--out", str(out)]) == 0
        for kind in ("nominal", "robust", "tube"):
            assert (out / f"episode_{kind}.csv").exists()
            assert (out / f"solve_log_{kind}.csv").exists()

    def test_single_controller_flag_and_plan_dump(self, workdir, tmp_path):
        _, cfg_path, _, model = workdir
        out = tmp_path / "episodes"
        assert cli.main(["run", "--config", str(cfg_path), "--model",
                         str(model), "--out", str(out), "--controller",
                         "robust", "--plan-dump"]) == 0
        assert not (out / "episode_nominal.csv").exists()
        plans = json.loads((out / "plans_robust.json").read_text())
        controlled = [p for p in plans if p["step"] >= 4]
        assert controlled
        first = controlled[0]
        assert len(first["v"]) == 5
        assert np.asarray(first["median"]).shape == (5, 2)


class TestCampaign:
    def test_reports_and_aggregates(self, workdir, tmp_path):
        _, cfg_path, _, model = workdir
        out = tmp_path / "campaign"
        assert cli.main(["campaign", "--config", str(cfg_path), "--model",
                         str(model), "--out", str(out),
                         "--controller", "tube"]) == 0
        report = json.loads((out / "report_tube.json").read_text())
        assert report["results"]["n_replicates"] == 2
        assert (out / "aggregates_tube.csv").exists()

    def test_replicates_override(self, workdir, tmp_path):
        _, cfg_path, _, model = workdir
        out = tmp_path / "campaign"
        assert cli.main(["campaign", "--config", str(cfg_path), "--model",
                         str(model), "--out", str(out), "--controller",
                         "tube", "--replicates", "3"]) == 0
        report = json.loads((out / "report_tube.json").read_text())
        assert report["results"]["n_replicates"] == 3


class TestCompare:
    def make_reports(self, workdir, tmp_path, kinds=("tube",)):
        _, cfg_path, _, model = workdir
        out = tmp_path / "campaign"
        for kind in kinds:
            assert cli.main(["campaign", "--config", str(cfg_path), "--model",
                             str(model), "--out", str(out), "--controller",
                             kind]) == 0
        return [out / f"report_{k}.json" for k in kinds]

    def test_table_and_json(self, workdir, tmp_path, capsys):
        paths = self.make_reports(workdir, tmp_path)
        out_json = tmp_path / "summary.json"
        assert cli.main(["compare", str(paths[0]), "--out",
                         str(out_json)]) == 0
        text = capsys.readouterr().out
        assert "fail%" in text and "tube" in text
        summary = json.loads(out_json.read_text())
        assert summary["controllers"][0]["kind"] == "tube"

    def test_missing_file_exits_1(self):
        assert cli.main(["compare", "/no/such/report.json"]) == 1

    def test_mismatched_lengths_warn(self, workdir, tmp_path, capsys):
        (path,) = self.make_reports(workdir, tmp_path)
        other = json.loads(path.read_text())
        other["results"]["episode_length"] = 99
        other_path = tmp_path / "other.json"
        other_path.write_text(json.dumps(other))
        assert cli.main(["compare", str(path), str(other_path)]) == 0
        assert "mismatched episode lengths" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_subcommand_is_usage_error(self):
        assert cli.main(["frobnicate"]) == 1

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("training: {lr: 1}\n")
        assert cli.main(["gen-data", "--config", str(bad)]) == 1

    def test_missing_dataset_file(self, tmp_path):
        assert cli.main(["train", str(tmp_path / "nope.csv"),
                         "--out", str(tmp_path / "m.qmpc")]) == 1


def test_master_seed_pipeline_reproducible(workdir, tmp_path):
    """gen-data -> train with the same master seed is bit-reproducible."""
    _, cfg_path, data, model = workdir
    d2 = tmp_path / "d2.csv"
    m2 = tmp_path / "m2.qmpc"
    assert cli.main(["gen-data", "--config", str(cfg_path),
                     "--out", str(d2)]) == 0
    assert cli.main(["train", "--config", str(cfg_path), str(d2),
                     "--out", str(m2)]) == 0
    assert d2.read_bytes() == data.read_bytes()
    assert m2.read_bytes() == model.read_bytes()
