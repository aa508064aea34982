import json

import pytest

from osteoprint import drr, encoder as enc, phantom
from osteoprint.cli import (
    ConfigError,
    ExperimentConfig,
    Pipeline,
    default_config,
    evaluate_report,
    main,
    run_pipeline,
)
from osteoprint.fingerprint import EmbeddingStore
from osteoprint.mesh import load_stl, save_stl
from osteoprint.triplet import TrainingHistory
from tests.test_mesh import uv_sphere

MINI = {
    "population": {"n": 4, "seed": 11, "variation": 0.1,
                   "dims": [32, 32, 80], "spacing": [1.0, 1.0, 1.0]},
    "grid": {"rx_interval": [87, 95], "rx_step": 4.0,
             "ry_interval": [-3.5, 4.5], "ry_step": 4.0,
             "energy_interval": [140, 152], "energy_step": 6.0,
             "resolution": [32, 64]},
    "encoder": {"d": 16, "channels": [4, 8], "fc_widths": [64, 32], "seed": 5},
    "training": {"margin": 0.1, "batch_size": 16, "epochs": 6,
                 "learning_rate": 0.001, "seed": 7},
    "holdout": [2, 3],
    "validation_triplets": 400,
    "eval_samples": 2000,
    "align_samples": 600,
    "threads": 2,
}


def mini_config():
    return ExperimentConfig.from_dict(json.loads(json.dumps(MINI)))


@pytest.fixture(scope="module")
def mini_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_run")
    report = run_pipeline(mini_config(), out)
    return out, report


class TestConfig:
    def test_defaults_are_desk_scale(self):
        cfg = default_config()
        assert cfg.population.n == 12
        assert len(cfg.holdout) == 3
        assert cfg.encoder.d == 32
        assert cfg.training.margin == 0.1
        assert cfg.training.epochs <= 30
        grid = drr.pose_grid(cfg.grid)
        assert len(grid) == 100

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError) as err:
            ExperimentConfig.from_dict({"populaton": {}})
        assert "populaton" in str(err.value)

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"grid": {"rx_stepp": 3}})

    def test_holdout_outside_population_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"population": {"n": 4}, "holdout": [7]})

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"separation_presets": ["bogus"]})

    def test_round_trip(self):
        cfg = mini_config()
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_json_file_round_trip(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(MINI))
        cfg = ExperimentConfig.from_json(path)
        assert cfg.population.n == 4
        assert cfg.grid.resolution == (32, 64)


class TestPipelineRun:
    def test_report_metrics_present(self, mini_run):
        _, report = mini_run
        for key in ("triplet_accuracy_validation", "knn_training_accuracy",
                    "knn_holdout_accuracy"):
            assert 0.0 <= report["metrics"][key] <= 1.0
        assert set(report["separation"]) == {"narrow_energy_4deg", "full"}

    def test_every_holdout_evaluated_once(self, mini_run):
        _, report = mini_run
        evaluated = [e["specimen_id"] for e in report["holdout_evaluations"]]
        assert sorted(evaluated) == [2, 3]
        for e in report["holdout_evaluations"]:
            assert e["predicted_id"] in (0, 1)
            assert 0 <= e["better_match_rank"] <= 1
            assert e["distance"]["rms_mm"] <= e["distance"]["hausdorff_mm"]

    def test_artifacts_exist_and_parse(self, mini_run):
        out, report = mini_run
        records = phantom.load_population(out / "volumes" / "population.jsonl")
        assert len(records) == 4
        manifest = drr.load_dataset_manifest(out / "images" / "dataset.jsonl")
        assert len(manifest) == 4 * 27
        for row in manifest[:5] + manifest[-5:]:
            drr.read_pgm16(out / "images" / row["path"])
        enc.load_model(out / "model.ostm")
        TrainingHistory.load(out / "history.csv")
        store = EmbeddingStore.load(out / "store.csv")
        assert len(store) == len(manifest)
        for sid in (2, 3):
            assert (out / f"holdout_{sid:03d}_distance.json").exists()
        for preset in report["separation"]:
            data = json.loads((out / f"separation_{preset}.json").read_text())
            assert data["accuracy"] == report["separation"][preset]["accuracy"]
        assert (out / "report.csv").read_text().startswith("metric,value")
        for sid in range(4):
            load_stl(out / "meshes" / f"specimen_{sid:03d}.stl")

    def test_holdout_hygiene(self, mini_run):
        out, _ = mini_run
        # the persisted model was trained only on even images of specimens 0/1;
        # verify by re-deriving the training rows and the used-image log
        manifest = drr.load_dataset_manifest(out / "images" / "dataset.jsonl")
        training_rows = [r for r in manifest
                        if r["specimen_id"] not in (2, 3) and r["image_id"] % 2 == 0]
        assert training_rows
        assert all(r["specimen_id"] in (0, 1) for r in training_rows)

    def test_rerun_identical_numerics(self, mini_run, tmp_path):
        out, report = mini_run
        report2 = run_pipeline(mini_config(), tmp_path / "again")
        r1 = {k: v for k, v in report.items() if k != "runtimes_s"}
        r2 = {k: v for k, v in report2.items() if k != "runtimes_s"}
        assert r1 == r2
        store1 = (out / "store.csv").read_bytes()
        store2 = (tmp_path / "again" / "store.csv").read_bytes()
        assert store1 == store2
        model1 = (out / "model.ostm").read_bytes()
        model2 = (tmp_path / "again" / "model.ostm").read_bytes()
        assert model1 == model2


class TestStageFailure:
    def test_stage_error_names_stage_and_keeps_artifacts(self, tmp_path):
        from osteoprint.cli import StageError

        pipe = Pipeline(mini_config(), tmp_path)
        pipe.stage_phantom()
        # training cannot run before rendering: fails with the stage name
        with pytest.raises(StageError) as err:
            pipe.stage_train()
        assert err.value.stage == "train"
        # earlier artifacts are retained
        assert (tmp_path / "volumes" / "population.jsonl").exists()


class TestEvaluateReport:
    def test_identical_meshes_zero(self, tmp_path, capsys):
        mesh = uv_sphere(5.0, n_theta=16, n_phi=32)
        path = tmp_path / "m.stl"
        save_stl(mesh, path)
        report = evaluate_report(path, path, samples=2000, seed=1)
        assert report.rms_mm <= 1e-9
        assert report.hausdorff_mm <= 1e-9
        printed = capsys.readouterr().out
        assert "rms_relative=0.0000" in printed

    def test_sphere_pair_matches_module_values(self, tmp_path):
        a = uv_sphere(10.0, n_theta=32, n_phi=64)
        b = uv_sphere(11.0, n_theta=32, n_phi=64)
        pa, pb = tmp_path / "a.stl", tmp_path / "b.stl"
        save_stl(a, pa)
        save_stl(b, pb)
        report = evaluate_report(pa, pb, samples=5000, seed=2)
        assert report.rms_mm == pytest.approx(1.0, rel=0.05)

    def test_relative_formatting_matches_ratio(self, tmp_path, capsys):
        a = uv_sphere(10.0, n_theta=24, n_phi=48)
        b = uv_sphere(10.5, n_theta=24, n_phi=48)
        pa, pb = tmp_path / "a.stl", tmp_path / "b.stl"
        save_stl(a, pa)
        save_stl(b, pb)
        report = evaluate_report(pa, pb, samples=5000, seed=3)
        assert report.rms_relative == pytest.approx(
            report.rms_mm / report.bbox_diagonal_mm, rel=1e-12)


class TestCommandLine:
    def test_evaluate_subcommand(self, tmp_path, capsys):
        mesh = uv_sphere(3.0, n_theta=12, n_phi=24)
        path = tmp_path / "m.stl"
        save_stl(mesh, path)
        code = main(["evaluate", "--pred", str(path), "--truth", str(path),
                     "--samples", "1000"])
        assert code == 0
        assert "rms_mm=" in capsys.readouterr().out

    def test_missing_file_exits_nonzero(self, tmp_path, capsys):
        code = main(["evaluate", "--pred", str(tmp_path / "a.stl"),
                     "--truth", str(tmp_path / "b.stl")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_staged_subcommands(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(MINI))
        out = tmp_path / "ws"
        for command in ("phantom", "render", "train", "embed", "classify", "pairs",
                        "estimate"):
            code = main([command, "--config", str(config_path), "--out", str(out)])
            assert code == 0, f"{command} failed"
        printed = capsys.readouterr().out
        assert "knn_training_accuracy" in printed
        assert "separation_full" in printed
        assert (out / "report.json").exists() is False  # staged mode: no report

    def test_bad_config_exits_nonzero(self, tmp_path, capsys):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"bogus_key": 1}))
        code = main(["phantom", "--config", str(config_path),
                     "--out", str(tmp_path / "ws")])
        assert code == 1
        assert "bogus_key" in capsys.readouterr().err


class TestThreadCap:
    def test_osteo_threads_caps_workers(self, monkeypatch):
        monkeypatch.setenv("OSTEO_THREADS", "1")
        assert drr.worker_count(8) == 1
        monkeypatch.delenv("OSTEO_THREADS")
        assert drr.worker_count(3) == 3
