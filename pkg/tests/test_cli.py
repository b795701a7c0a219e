"""Command-line behavior, exercised in process through main(argv)."""

import json

import numpy as np
import pytest

from priorfit import models
from priorfit.cli import main

TINY_SETS = [
    "--set", "batch_size=16",
    "--set", "model_samples=8",
    "--set", "expert_samples=20",
]


@pytest.fixture(scope="module")
def expert_case2(tmp_path_factory):
    path = tmp_path_factory.mktemp("expert") / "case2.json"
    rc = main([
        "simulate-expert", "--model", "case2_binomial",
        "--s-e", "20", "--seed", "7", "--out", str(path),
    ])
    assert rc == 0
    return path


@pytest.fixture(scope="module")
def expert_case1(tmp_path_factory):
    path = tmp_path_factory.mktemp("expert") / "case1.json"
    rc = main([
        "simulate-expert", "--model", "case1_normal",
        "--s-e", "20", "--seed", "3", "--out", str(path),
    ])
    assert rc == 0
    return path


class TestSimulateExpert:
    def test_writes_file_and_lists_statistics(self, tmp_path, capsys):
        out = tmp_path / "expert.json"
        rc = main([
            "simulate-expert", "--model", "case1_normal",
            "--s-e", "25", "--out", str(out),
        ])
        assert rc == 0
        assert out.exists()
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 10
        assert any(ln.startswith("enc_shallow  quantiles  values 1x9") for ln in lines)
        assert any("histogram  values 25x1" in ln for ln in lines)

    def test_output_is_byte_stable(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        argv = ["simulate-expert", "--model", "case2", "--s-e", "15", "--seed", "4"]
        assert main(argv + ["--out", str(a)]) == 0
        assert main(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_model(self, capsys):
        assert main(["simulate-expert", "--model", "case9"]) == 2
        assert "error:" in capsys.readouterr().err

    def test_model_flags_are_exclusive(self, tmp_path, capsys):
        rc = main([
            "simulate-expert", "--model", "case2", "--model-file", "spec.json",
            "--out", str(tmp_path / "x.json"),
        ])
        assert rc == 2
        rc = main(["simulate-expert", "--out", str(tmp_path / "x.json")])
        assert rc == 2

    def test_inline_lambda_override(self, tmp_path):
        out = tmp_path / "expert.json"
        lam = '{"mu0": -0.4, "sigma0": 0.08, "mu1": 0.3, "sigma1": 0.05}'
        rc = main([
            "simulate-expert", "--model", "case2_binomial",
            "--lambda-star", lam, "--s-e", "10", "--out", str(out),
        ])
        assert rc == 0

    def test_lambda_from_file(self, tmp_path):
        lam_path = tmp_path / "lam.json"
        lam_path.write_text(json.dumps({"mu0": -0.4, "sigma0": 0.08, "mu1": 0.3, "sigma1": 0.05}))
        rc = main([
            "simulate-expert", "--model", "case2_binomial",
            "--lambda-star", str(lam_path), "--s-e", "10",
            "--out", str(tmp_path / "expert.json"),
        ])
        assert rc == 0

    def test_missing_lambda_file(self, tmp_path, capsys):
        rc = main([
            "simulate-expert", "--model", "case2", "--lambda-star", "nowhere.json",
            "--out", str(tmp_path / "x.json"),
        ])
        assert rc == 2
        assert "not found" in capsys.readouterr().err


class TestFit:
    def test_fit_writes_result_and_trace(self, expert_case2, tmp_path, capsys):
        out = tmp_path / "run"
        rc = main([
            "fit", "--model", "case2_binomial", "--expert", str(expert_case2),
            "--epochs", "2", *TINY_SETS, "--out", str(out),
        ])
        assert rc == 0
        captured = capsys.readouterr()
        assert "mu0 = " in captured.out
        assert "epoch 2/2" in captured.err

        doc = json.loads((out / "result.json").read_text())
        assert doc["model"] == "case2_binomial"
        assert doc["epochs"] == 2
        assert doc["expert_seed"] == 7
        assert set(doc["lambda_final"]) == {"mu0", "sigma0", "mu1", "sigma1"}
        assert doc["recovery_error"] is not None
        assert all(v >= 0 for v in doc["recovery_error"].values())
        assert doc["seconds_total"] > 0
        assert len((out / "trace.csv").read_text().splitlines()) == 3

    def test_mismatched_expert_file(self, expert_case2, tmp_path, capsys):
        rc = main([
            "fit", "--model", "case1_normal", "--expert", str(expert_case2),
            "--epochs", "1", *TINY_SETS, "--out", str(tmp_path),
        ])
        assert rc == 2
        err = capsys.readouterr().err
        assert "simulated for case2_binomial" in err
        assert "error:" in err

    def test_corrupted_expert_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        rc = main([
            "fit", "--model", "case2", "--expert", str(bad),
            "--epochs", "1", "--out", str(tmp_path),
        ])
        assert rc == 2

    def test_numerical_abort_exit_code(self, expert_case1, tmp_path, capsys):
        with np.errstate(over="ignore", invalid="ignore"):
            rc = main([
                "fit", "--model", "case1_normal", "--expert", str(expert_case1),
                "--epochs", "1", *TINY_SETS,
                "--set", 'init_lambda={"mu0": 1e300}',
                "--out", str(tmp_path),
            ])
        assert rc == 3
        assert "error: epoch 0" in capsys.readouterr().err

    def test_malformed_set_pair(self, expert_case2, tmp_path):
        rc = main([
            "fit", "--model", "case2", "--expert", str(expert_case2),
            "--set", "epochs", "--out", str(tmp_path),
        ])
        assert rc == 2

    def test_unknown_override_key(self, expert_case2, tmp_path, capsys):
        rc = main([
            "fit", "--model", "case2", "--expert", str(expert_case2),
            "--epochs", "1", "--set", "learning=fast", "--out", str(tmp_path),
        ])
        assert rc == 2
        assert "unknown training option" in capsys.readouterr().err

    def test_kernel_overrides(self, expert_case2, tmp_path, capsys):
        base = [
            "fit", "--model", "case2", "--expert", str(expert_case2),
            "--epochs", "1", *TINY_SETS, "--out", str(tmp_path / "k"),
        ]
        assert main(base + ["--set", "kernel.kind=energy"]) == 0
        assert main(base + [
            "--set", "kernel.kind=gaussian", "--set", "kernel.sigmas=[0.5,1.0]",
        ]) == 0
        assert main(base + ["--set", "kernel.bandwidth=2"]) == 2
        assert "unknown kernel option" in capsys.readouterr().err

    def test_model_file_flow(self, tmp_path, capsys):
        spec = tmp_path / "model.json"
        models.write_model_file(spec, models.builtin_models()["case2_binomial"])
        expert = tmp_path / "expert.json"
        rc = main([
            "simulate-expert", "--model-file", str(spec),
            "--s-e", "15", "--seed", "2", "--out", str(expert),
        ])
        assert rc == 0

        out = tmp_path / "fit"
        rc = main([
            "fit", "--model-file", str(spec), "--expert", str(expert),
            *TINY_SETS, "--out", str(out),
        ])
        assert rc == 2
        assert "need --epochs" in capsys.readouterr().err

        rc = main([
            "fit", "--model-file", str(spec), "--expert", str(expert),
            "--epochs", "1", *TINY_SETS, "--out", str(out),
        ])
        assert rc == 0
        doc = json.loads((out / "result.json").read_text())
        assert doc["recovery_error"] is not None


class TestStudy:
    def test_threshold_thresholds_flag(self, tmp_path, capsys):
        rc = main([
            "study", "threshold", "--t-u", "3,5",
            "--set", "epochs=2", *TINY_SETS, "--out", str(tmp_path),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "t_u=3" in out and "t_u=5" in out
        assert (tmp_path / "threshold" / "2023" / "summary.json").exists()

    def test_case_study_output(self, tmp_path, capsys):
        rc = main([
            "study", "case2", "--set", "epochs=2", *TINY_SETS, "--out", str(tmp_path),
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "mu0  true" in out
        assert (tmp_path / "case2" / "2023" / "report.json").exists()

    def test_inconsistency_scenario(self, tmp_path, capsys):
        rc = main([
            "study", "inconsistency", "--scenario", "halve-r2",
            "--set", "epochs=2", *TINY_SETS, "--out", str(tmp_path),
        ])
        assert rc == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 7
        assert all(ln.endswith("above") or ln.endswith("below") for ln in out)

    def test_unknown_study_name(self, capsys):
        assert main(["study", "case9", "--set", "epochs=1"]) == 2
        assert "unknown case study" in capsys.readouterr().err

    def test_invalid_override_value(self, tmp_path):
        rc = main([
            "study", "case2", "--set", "epochs=0", "--out", str(tmp_path),
        ])
        assert rc == 2
