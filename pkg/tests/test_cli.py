import hashlib

import pytest

from shiftlab import cli
from shiftlab.errors import NumericError


def run(*argv):
    return cli.main(list(argv))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def moons_file(tmp_path):
    path = tmp_path / "src.csv"
    assert run("gen", "two-moons", "--n", "120", "--seed", "1",
               "--domain", "src", "--out", str(path)) == 0
    return path


@pytest.fixture
def target_file(tmp_path):
    path = tmp_path / "tgt.csv"
    assert run("gen", "two-moons", "--n", "120", "--rotation", "30",
               "--seed", "2", "--domain", "tgt", "--out", str(path)) == 0
    return path


@pytest.fixture
def model_file(tmp_path, moons_file):
    path = tmp_path / "src.model"
    assert run("train-source", "--data", str(moons_file), "--out", str(path),
               "--iterations", "80") == 0
    return path


class TestGen:
    def test_prints_digest_and_is_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run("gen", "two-moons", "--seed", "5", "--out", str(a))
        run("gen", "two-moons", "--seed", "5", "--out", str(b))
        out = capsys.readouterr().out
        assert "sha256=" in out
        assert digest(a) == digest(b)

    def test_blobs(self, tmp_path):
        path = tmp_path / "blobs.csv"
        assert run("gen", "blobs", "--n", "60", "--classes", "3",
                   "--priors", "0.3,0.3,0.4", "--out", str(path)) == 0
        assert run("verify", "dataset", str(path)) == 0

    def test_bad_rotation_is_usage_error(self, tmp_path):
        assert run("gen", "two-moons", "--rotation", "400",
                   "--out", str(tmp_path / "x.csv")) == 2


class TestTrainSource:
    def test_writes_model_and_trajectory(self, tmp_path, moons_file):
        model = tmp_path / "m.model"
        traj = tmp_path / "t.csv"
        assert run("train-source", "--data", str(moons_file), "--out", str(model),
                   "--iterations", "50", "--trajectory", str(traj)) == 0
        assert run("verify", "model", str(model)) == 0
        lines = traj.read_text().splitlines()
        assert lines[0].startswith("iteration,loss_total")
        assert len(lines) == 51

    def test_unlabeled_data_rejected(self, tmp_path, target_file):
        from shiftlab.datagen import load_dataset, save_dataset

        unlabeled = tmp_path / "u.csv"
        save_dataset(load_dataset(target_file).unlabeled(), unlabeled)
        assert run("train-source", "--data", str(unlabeled),
                   "--out", str(tmp_path / "m.model")) == 2

    def test_missing_file_is_usage_error(self, tmp_path):
        assert run("train-source", "--data", str(tmp_path / "nope.csv"),
                   "--out", str(tmp_path / "m.model")) == 2


class TestAdapt:
    def test_sfda_rejects_source_data(self, tmp_path, model_file, target_file,
                                      moons_file, capsys):
        code = run("adapt", "--paradigm", "sfda", "--target", str(target_file),
                   "--model", str(model_file), "--source-data", str(moons_file))
        assert code == 2
        assert "source-free paradigm accepts no source data" in capsys.readouterr().err

    def test_msfda_rejects_source_data(self, tmp_path, model_file, target_file, moons_file):
        assert run("adapt", "--paradigm", "msfda", "--target", str(target_file),
                   "--model", str(model_file), "--source-data", str(moons_file)) == 2

    def test_uda_requires_source_data(self, target_file):
        assert run("adapt", "--paradigm", "uda", "--target", str(target_file)) == 2

    def test_sfda_runs_after_source_data_deleted(self, tmp_path, model_file,
                                                 target_file, moons_file):
        moons_file.unlink()  # source data is gone; only the model remains
        out = tmp_path / "adapted.model"
        assert run("adapt", "--paradigm", "sfda", "--target", str(target_file),
                   "--model", str(model_file), "--iterations", "40",
                   "--out", str(out)) == 0
        assert run("verify", "model", str(out)) == 0

    def test_sfda_deterministic_output_bytes(self, tmp_path, model_file, target_file):
        outs = []
        for name in ("a.model", "b.model"):
            out = tmp_path / name
            assert run("adapt", "--paradigm", "sfda", "--target", str(target_file),
                       "--model", str(model_file), "--iterations", "30",
                       "--out", str(out)) == 0
            outs.append(digest(out))
        assert outs[0] == outs[1]

    def test_msfda_with_mea_weights(self, tmp_path, model_file, target_file, moons_file):
        # second source domain and model
        src2 = tmp_path / "src2.csv"
        run("gen", "two-moons", "--n", "120", "--rotation", "10", "--seed", "3",
            "--domain", "src2", "--out", str(src2))
        model2 = tmp_path / "src2.model"
        run("train-source", "--data", str(src2), "--out", str(model2),
            "--iterations", "80")
        assert run("adapt", "--paradigm", "msfda", "--target", str(target_file),
                   "--model", str(model_file), "--model", str(model2),
                   "--weights", "mea",
                   "--visible", f"src={moons_file}", "--visible", f"src2={src2}",
                   "--iterations", "30", "--out", str(tmp_path / "ens.model")) == 0
        assert (tmp_path / "ens-0.model").exists()
        assert (tmp_path / "ens-1.model").exists()

    def test_expanded_requires_source_data(self, model_file, target_file):
        assert run("adapt", "--paradigm", "expanded", "--target", str(target_file),
                   "--model", str(model_file)) == 2


class TestEstimate:
    def test_writes_weights_and_provenance(self, tmp_path, model_file, target_file,
                                           moons_file):
        src2 = tmp_path / "src2.csv"
        run("gen", "two-moons", "--n", "120", "--rotation", "10", "--seed", "3",
            "--domain", "src2", "--out", str(src2))
        model2 = tmp_path / "src2.model"
        run("train-source", "--data", str(src2), "--out", str(model2),
            "--iterations", "80")
        weights = tmp_path / "w.weights"
        log = tmp_path / "w.log"
        assert run("estimate", "--model", str(model_file), "--model", str(model2),
                   "--visible", f"src={moons_file}", "--visible", f"src2={src2}",
                   "--target", str(target_file), "--out", str(weights),
                   "--log", str(log)) == 0
        assert run("verify", "weights", str(weights)) == 0
        assert log.read_text().startswith("#shiftlab-provenance v1\n")

    def test_single_model_falls_back(self, tmp_path, model_file, target_file, capsys):
        weights = tmp_path / "w.weights"
        assert run("estimate", "--model", str(model_file),
                   "--target", str(target_file), "--out", str(weights)) == 0
        assert "fallback=True" in capsys.readouterr().out


class TestConfig:
    def test_config_file_applies(self, tmp_path, moons_file):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[adapt]\niterations = 7\nlearning_rate = 0.01\n")
        traj = tmp_path / "t.csv"
        assert run("train-source", "--data", str(moons_file),
                   "--out", str(tmp_path / "m.model"),
                   "--config", str(cfg), "--trajectory", str(traj)) == 0
        assert len(traj.read_text().splitlines()) == 8  # header + 7 rows

    def test_flag_overrides_config(self, tmp_path, moons_file):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[adapt]\niterations = 7\n")
        traj = tmp_path / "t.csv"
        assert run("train-source", "--data", str(moons_file),
                   "--out", str(tmp_path / "m.model"),
                   "--config", str(cfg), "--iterations", "3",
                   "--trajectory", str(traj)) == 0
        assert len(traj.read_text().splitlines()) == 4

    def test_unknown_key_rejected(self, tmp_path, moons_file):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[adapt]\nlearning_rat = 0.1\n")
        assert run("train-source", "--data", str(moons_file),
                   "--out", str(tmp_path / "m.model"), "--config", str(cfg)) == 2

    def test_unknown_section_rejected(self, tmp_path, moons_file):
        cfg = tmp_path / "cfg.ini"
        cfg.write_text("[optimizer]\nlr = 0.1\n")
        assert run("train-source", "--data", str(moons_file),
                   "--out", str(tmp_path / "m.model"), "--config", str(cfg)) == 2


class TestExitCodes:
    def test_unknown_bench_suite(self):
        assert run("bench", "no-such-suite") == 2

    def test_verify_bad_file(self, tmp_path):
        bad = tmp_path / "bad.model"
        bad.write_text("garbage\n")
        assert run("verify", "model", str(bad)) == 2

    def test_numeric_error_maps_to_exit_3(self, monkeypatch, tmp_path, moons_file):
        def boom(*a, **k):
            raise NumericError("diverged")

        monkeypatch.setattr(cli, "train_source", boom)
        assert run("train-source", "--data", str(moons_file),
                   "--out", str(tmp_path / "m.model")) == 3

    def test_help_enumerates_defaults(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run("--help")
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for needle in ("learning_rate=0.05", "momentum=0.9", "hidden=64",
                       "convergence_window=50", "SHIFTLAB_THREADS"):
            assert needle in out

    def test_defaults_prints_config(self, capsys):
        assert run("defaults") == 0
        out = capsys.readouterr().out
        assert "[adapt]" in out and "learning_rate = 0.05" in out
        assert "SHIFTLAB_THREADS" in out
