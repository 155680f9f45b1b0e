"""Tests for config resolution, task assembly, the seed loop, report
emission, and the command-line interface."""

import json
import struct

import numpy as np
import pytest

from etproc import cli, harness
from etproc.distributions import SeededRng
from etproc.harness import (
    ConfigError,
    DataError,
    ExperimentConfig,
    aggregate_rows,
    build_task_data,
    emit_report,
    parse_config_file,
    reaggregate,
    resolve_config,
    run_decomposition,
    run_experiment,
)
from etproc.models import load_checkpoint, make_model


def write_config(path, text):
    path.write_text(text)
    return str(path)


FAST = dict(epochs=3, batch_size=40, test_size=200, ood_size=50,
            seeds=(7,), include_runtime=False, n_predict_samples=4,
            n_predict_z_samples=2, decomposition_samples=64)


class TestConfig:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_parse_file_types_and_comments(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", """
# comment line
task = iris2d
hidden = 16,8   # trailing comment
lr = 0.01
simplified = true
seeds = 3,4,5
""")
        values = parse_config_file(path)
        assert values == {"task": "iris2d", "hidden": (16, 8), "lr": 0.01,
                          "simplified": True, "seeds": (3, 4, 5)}

    def test_precedence_defaults_file_overrides(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", "epochs = 7\nlr = 0.01\n")
        cfg = resolve_config(path, {"lr": 0.5})
        assert cfg.epochs == 7      # from file
        assert cfg.lr == 0.5        # override wins
        assert cfg.batch_size == 64  # default survives

    def test_unknown_key_in_file(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", "learning_rate = 0.1\n")
        with pytest.raises(ConfigError, match="unknown configuration key"):
            parse_config_file(path)

    def test_unknown_key_in_overrides(self):
        with pytest.raises(ConfigError, match="unknown configuration key"):
            resolve_config(None, {"momentum": 0.9})

    def test_malformed_line(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", "epochs 7\n")
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_config_file(path)

    def test_unparsable_value(self, tmp_path):
        path = write_config(tmp_path / "c.cfg", "epochs = seven\n")
        with pytest.raises(ConfigError, match="cannot parse"):
            parse_config_file(path)

    def test_string_overrides_are_coerced(self):
        cfg = resolve_config(None, {"seeds": "1,2", "epochs": "9"})
        assert cfg.seeds == (1, 2)
        assert cfg.epochs == 9

    @pytest.mark.parametrize("key,value,pattern", [
        ("task", "cifar", "task"),
        ("model", "gp", "model"),
        ("gamma", 1.5, "gamma"),
        ("kappa2", 0.0, "kappa2"),
        ("context_fraction", 0.0, "context_fraction"),
        ("ece_bins", 0, "ece_bins"),
        ("ood_score", "energy", "ood_score"),
        ("seeds", (), "seeds"),
        ("combiner", "mlp", "combiner"),
        ("workers", 0, "workers"),
    ])
    def test_validation_rejects(self, key, value, pattern):
        with pytest.raises(ConfigError, match=pattern):
            resolve_config(None, {key: value})


class TestTaskData:
    def test_two_gaussians_shapes(self):
        cfg = resolve_config(None, {"n_per_class": 15, "test_size": 300,
                                    "ood_size": 40})
        train, test, ood, oracle = build_task_data(cfg, seed=3)
        assert train.features.shape == (30, 1)
        assert test.features.shape == (300, 1)
        assert ood.features.shape == (40, 1)
        assert ood.provenance == "ood"
        assert np.all(np.abs(ood.features) >= 4.0)
        assert np.all(np.abs(ood.features) <= 8.0)
        assert oracle is not None

    def test_two_gaussians_seed_determinism(self):
        cfg = resolve_config(None, {"test_size": 100, "ood_size": 20})
        a = build_task_data(cfg, seed=5)
        b = build_task_data(cfg, seed=5)
        c = build_task_data(cfg, seed=6)
        assert np.array_equal(a[0].features, b[0].features)
        assert not np.array_equal(a[0].features, c[0].features)

    def test_iris_test_is_train(self):
        cfg = resolve_config(None, {"task": "iris2d", "ood_size": 30})
        train, test, ood, oracle = build_task_data(cfg, seed=0)
        assert test is train
        assert train.features.shape == (150, 2)
        assert train.num_classes == 3
        assert np.all(np.max(np.abs(ood.features), axis=1) >= 5.0)
        assert oracle is None

    def test_missing_idx_files(self, tmp_path):
        cfg = resolve_config(None, {"task": "fmnist-vs-mnist",
                                    "data_dir": str(tmp_path)})
        with pytest.raises(DataError, match="missing IDX files"):
            build_task_data(cfg, seed=0)

    def test_idx_task_end_to_end(self, tmp_path):
        rng = np.random.default_rng(0)
        paths = harness.fmnist_mnist_paths(str(tmp_path))
        (tmp_path / "fmnist").mkdir()
        (tmp_path / "mnist").mkdir()
        for img_key, lbl_key, n in [
            ("fmnist_train_images", "fmnist_train_labels", 12),
            ("fmnist_test_images", "fmnist_test_labels", 8),
            ("mnist_test_images", "mnist_test_labels", 8),
        ]:
            pixels = rng.integers(0, 256, size=(n, 2, 2), dtype=np.uint8)
            with open(paths[img_key], "wb") as f:
                f.write(struct.pack(">IIII", 0x803, n, 2, 2))
                f.write(pixels.tobytes())
            with open(paths[lbl_key], "wb") as f:
                f.write(struct.pack(">II", 0x801, n))
                f.write(rng.integers(0, 10, size=n, dtype=np.uint8).tobytes())
        cfg = resolve_config(None, {"task": "fmnist-vs-mnist",
                                    "data_dir": str(tmp_path),
                                    "n_train_points": 8})
        train, test, ood, _ = build_task_data(cfg, seed=0)
        assert train.features.shape == (8, 4)
        assert test.features.shape == (8, 4)
        assert ood.provenance == "ood"
        # features are standardized with the training statistics
        np.testing.assert_allclose(train.features.mean(axis=0), 0.0, atol=1e-12)


class TestSeedLoop:
    def test_report_bytes_deterministic(self, tmp_path):
        cfg = resolve_config(None, dict(FAST, model="edl"))
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        emit_report(run_experiment(cfg), "json", p1)
        emit_report(run_experiment(cfg), "json", p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_report_structure(self):
        cfg = resolve_config(None, dict(FAST, model="edl", seeds=(1, 2)))
        report = run_experiment(cfg)
        assert report["schema_version"] == harness.SCHEMA_VERSION
        assert [r["seed"] for r in report["per_seed"]] == [1, 2]
        for key in harness.METRIC_KEYS:
            assert report["aggregate"][key]["mean"] is not None
        assert report["runtime_s_per_epoch"] is None  # include_runtime=False

    def test_keep_models(self):
        cfg = resolve_config(None, dict(FAST, model="bnn"))
        report, kept = run_experiment(cfg, keep_models=True)
        assert set(kept) == {7}
        assert kept[7].kind == "bnn"

    def test_workers_match_serial(self):
        base = dict(FAST, model="edl", seeds=(1, 2))
        serial = run_experiment(resolve_config(None, dict(base, workers=1)))
        parallel = run_experiment(resolve_config(None, dict(base, workers=2)))
        assert serial["per_seed"] == parallel["per_seed"]
        assert serial["aggregate"] == parallel["aggregate"]

    def test_aggregate_recomputation(self):
        rows = [
            {"seed": 0, "err_pct": 10.0, "ece_pct": 2.0, "nll": 0.5, "auroc_ood_pct": 90.0},
            {"seed": 1, "err_pct": 14.0, "ece_pct": 4.0, "nll": 0.7, "auroc_ood_pct": 80.0},
        ]
        agg = aggregate_rows(rows)
        assert agg["err_pct"]["mean"] == pytest.approx(12.0, abs=1e-12)
        assert agg["err_pct"]["sd"] == pytest.approx(np.std([10.0, 14.0], ddof=1), abs=1e-12)

    def test_aggregate_skips_failed_rows(self):
        rows = [
            {"seed": 0, "err_pct": 10.0, "ece_pct": 2.0, "nll": 0.5, "auroc_ood_pct": 90.0},
            {"seed": 1, "err_pct": None, "ece_pct": None, "nll": None, "auroc_ood_pct": None},
        ]
        agg = aggregate_rows(rows)
        assert agg["nll"]["mean"] == pytest.approx(0.5)
        assert agg["nll"]["sd"] == 0.0


class TestDecomposition:
    def probes(self):
        return [[-6.0], [0.0], [6.0]]

    def test_bnn_deterministic_weights_no_reducible(self):
        cfg = resolve_config(None, dict(FAST, model="bnn"))
        model = make_model("bnn", 1, 2, (8,), SeededRng(seed=0, stream=2))
        for name in model.net.logvars:
            model.net.logvars[name][...] = -60.0
        rows = run_decomposition(cfg, model, self.probes())
        for row in rows:
            assert np.max(np.abs(row["reducible"])) <= 1e-12
            np.testing.assert_allclose(
                np.asarray(row["reducible"]) + np.asarray(row["irreducible"])
                + np.asarray(row["data"]),
                row["total"], atol=1e-12)

    def test_trained_bnn_boundary_has_more_data_uncertainty(self):
        cfg = resolve_config(None, dict(FAST, model="bnn", epochs=100))
        _, kept = run_experiment(cfg, keep_models=True)
        rows = run_decomposition(cfg, kept[7], [[0.0], [-6.0], [6.0]])

        def data_share(row):
            return np.sum(row["data"]) / max(np.sum(row["total"]), 1e-30)

        assert data_share(rows[0]) > data_share(rows[1])
        assert data_share(rows[0]) > data_share(rows[2])

    def test_etp_rows_sum(self):
        cfg = resolve_config(None, dict(FAST, model="etp"))
        model = make_model("etp", 1, 2, (8,), SeededRng(seed=1, stream=2))
        rows = run_decomposition(cfg, model, self.probes())
        for row in rows:
            np.testing.assert_allclose(
                np.asarray(row["reducible"]) + np.asarray(row["irreducible"])
                + np.asarray(row["data"]),
                row["total"], atol=1e-12)
            assert len(row["input"]) == 1

    def test_single_term_models_rejected(self):
        cfg = resolve_config(None, dict(FAST, model="edl"))
        model = make_model("edl", 1, 2, (8,), SeededRng(seed=0, stream=2))
        with pytest.raises(ConfigError, match="decomposition"):
            run_decomposition(cfg, model, self.probes())


class TestEmission:
    def sample_report(self):
        return {
            "schema_version": 1,
            "config": {"model": "edl"},
            "per_seed": [
                {"seed": 0, "err_pct": 10.0, "ece_pct": 2.0, "nll": 0.5,
                 "auroc_ood_pct": 90.0},
                {"seed": 1, "err_pct": None, "ece_pct": None, "nll": float("nan"),
                 "auroc_ood_pct": None},
            ],
            "aggregate": aggregate_rows([
                {"seed": 0, "err_pct": 10.0, "ece_pct": 2.0, "nll": 0.5,
                 "auroc_ood_pct": 90.0}]),
            "runtime_s_per_epoch": None,
        }

    def test_csv_layout(self, tmp_path):
        path = tmp_path / "r.csv"
        emit_report(self.sample_report(), "csv", path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 4  # header + 2 seeds + aggregate
        assert lines[0] == "seed,err_pct,ece_pct,nll,auroc_ood_pct"
        assert lines[2] == "1,,,,"
        assert lines[3].startswith("aggregate,")

    def test_nan_serializes_as_null(self, tmp_path):
        path = tmp_path / "r.json"
        emit_report(self.sample_report(), "json", path)
        loaded = json.loads(path.read_text())
        assert loaded["per_seed"][1]["nll"] is None

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError, match="format"):
            emit_report(self.sample_report(), "yaml", tmp_path / "r.yaml")

    def test_reaggregate(self, tmp_path):
        cfg = resolve_config(None, dict(FAST, model="edl"))
        paths = []
        for seed in (1, 2):
            rep = run_experiment(resolve_config(None, dict(FAST, model="edl",
                                                           seeds=(seed,))))
            p = tmp_path / f"s{seed}.json"
            emit_report(rep, "json", p)
            paths.append(str(p))
        merged = reaggregate(paths)
        assert [r["seed"] for r in merged["per_seed"]] == [1, 2]
        direct = run_experiment(resolve_config(None, dict(FAST, model="edl",
                                                          seeds=(1, 2))))
        assert merged["aggregate"] == direct["aggregate"]


class TestCli:
    def fast_config(self, tmp_path):
        return write_config(tmp_path / "fast.cfg", """
model = edl
epochs = 3
batch_size = 40
test_size = 200
ood_size = 50
seeds = 7
include_runtime = false
n_predict_samples = 4
n_predict_z_samples = 2
decomposition_samples = 64
""")

    def test_train_eval_decompose_report(self, tmp_path, capsys):
        cfg = self.fast_config(tmp_path)
        ckpt = str(tmp_path / "m.npz")
        assert cli.main(["train", "--config", cfg, "--out", ckpt]) == 0
        model, meta = load_checkpoint(ckpt)
        assert meta["task"] == "two-gaussians"
        assert json.loads((tmp_path / "m.npz.trace.json").read_text())["seed"] == 7

        rep = str(tmp_path / "eval.json")
        assert cli.main(["eval", "--config", cfg, "--checkpoint", ckpt,
                         "--out", rep]) == 0
        loaded = json.loads((tmp_path / "eval.json").read_text())
        assert loaded["per_seed"][0]["seed"] == 7

        merged = str(tmp_path / "merged.json")
        assert cli.main(["report", "--inputs", rep, "--out", merged]) == 0
        assert json.loads((tmp_path / "merged.json").read_text())["per_seed"]

        # edl has no two-term decomposition: config error path
        assert cli.main(["decompose", "--config", cfg, "--checkpoint", ckpt,
                         "--out", str(tmp_path / "d.json")]) == 1
        assert "config error" in capsys.readouterr().err

    def test_decompose_with_bnn(self, tmp_path):
        cfg = self.fast_config(tmp_path)
        ckpt = str(tmp_path / "bnn.npz")
        assert cli.main(["train", "--config", cfg, "--model", "bnn",
                         "--out", ckpt]) == 0
        out = str(tmp_path / "d.json")
        assert cli.main(["decompose", "--config", cfg, "--model", "bnn",
                         "--checkpoint", ckpt, "--out", out]) == 0
        rows = json.loads((tmp_path / "d.json").read_text())["rows"]
        assert [r["input"] for r in rows] == cli.DEFAULT_PROBES["two-gaussians"]

    def test_run_csv(self, tmp_path):
        cfg = self.fast_config(tmp_path)
        out = str(tmp_path / "run.csv")
        assert cli.main(["run", "--config", cfg, "--format", "csv",
                         "--out", out]) == 0
        lines = (tmp_path / "run.csv").read_text().strip().splitlines()
        assert len(lines) == 3  # header + seed 7 + aggregate

    def test_config_error_exit_code(self, tmp_path, capsys):
        bad = write_config(tmp_path / "bad.cfg", "gamma = 1.5\n")
        assert cli.main(["run", "--config", bad,
                         "--out", str(tmp_path / "r.json")]) == 1
        assert "config error" in capsys.readouterr().err

    def test_data_error_exit_code(self, tmp_path, capsys):
        cfg = self.fast_config(tmp_path)
        assert cli.main(["run", "--config", cfg, "--task", "fmnist-vs-mnist",
                         "--data-dir", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "r.json")]) == 2
        assert "data error" in capsys.readouterr().err

    def test_training_failure_exit_code(self, tmp_path, capsys, monkeypatch):
        from etproc import models as models_mod

        def boom(*args, **kwargs):
            raise models_mod.TrainingDiverged(0, 0, float("nan"))

        monkeypatch.setattr(harness.models_mod, "train", boom)
        cfg = self.fast_config(tmp_path)
        assert cli.main(["run", "--config", cfg,
                         "--out", str(tmp_path / "r.json")]) == 3
        assert "training failed" in capsys.readouterr().err
