import json

import pytest

from main import main
from ssf.checkpoint import Checkpoint
from ssf.handlers import commands
from ssf.services.gradcheck import GradCheckResult


def run(capsys, *argv):
    """Run the CLI with --json; returns (exit code, parsed stdout or None)"""
    code = main(list(argv) + ["--json"])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture
def workspace(tmp_path, capsys):
    """Upstream/downstream datasets and a briefly pretrained toy backbone"""
    up, down = str(tmp_path / "up"), str(tmp_path / "down")
    pre = str(tmp_path / "ckpt" / "pre.ssfckpt")
    assert run(capsys, "gen-data", "--task", "upstream_shapes", "--out", up, "--n-train", "32", "--n-val", "8")[0] == 0
    assert run(capsys, "gen-data", "--task", "downstream_shifted", "--out", down,
               "--n-train", "32", "--n-val", "8", "--seed", "1")[0] == 0
    code, payload = run(capsys, "pretrain", "--data", up, "--out", pre,
                        "--epochs", "1", "--warmup-epochs", "0", "--max-steps", "2", "--batch-size", "16")
    assert code == 0 and payload["steps"] == 2
    return {"root": tmp_path, "up": up, "down": down, "pre": pre}


class TestBudgetCommand:
    def test_ssf_on_vitb16(self, capsys):
        code, payload = run(capsys, "budget", "--method", "ssf", "--model", "vitb16", "--classes", "100")
        assert code == 0
        assert payload["schema_version"] == 1 and payload["status"] == "ok"
        (report,) = payload["reports"]
        assert report["trainable_params"] == 282_724
        assert report["extra_infer_params"] == 0 and report["extra_infer_flops"] == 0

    def test_variant_flags(self, capsys):
        _, payload = run(capsys, "budget", "--model", "vitb16", "--classes", "100",
                         "--ssf-variant", "norm_only")
        assert payload["reports"][0]["trainable_params"] == 115_300

    def test_table_for_all_methods(self, capsys):
        assert main(["budget", "--method", "all"]) == 0
        out = capsys.readouterr().out
        for method in ("full", "linear", "bias", "adapter", "vpt_shallow", "vpt_deep", "ssf"):
            assert method in out


class TestUsageErrors:
    def test_unknown_flag(self, capsys):
        assert main(["budget", "--bogus"]) == 1

    def test_missing_command(self, capsys):
        assert main([]) == 1

    def test_bad_site_policy(self, capsys):
        assert main(["budget", "--ssf-sites", "middle:3"]) == 1

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["fold", "--in", str(tmp_path / "none.ssfckpt"), "--out", str(tmp_path / "x")]) == 1


class TestWorkflow:
    def test_identity_fold_has_zero_deviation(self, workspace, capsys):
        ft = str(workspace["root"] / "ft.ssfckpt")
        folded = str(workspace["root"] / "folded.ssfckpt")
        code, payload = run(capsys, "finetune", "--in", workspace["pre"], "--data", workspace["down"], "--out", ft,
                            "--method", "ssf", "--ssf-init", "constant",
                            "--epochs", "1", "--warmup-epochs", "0", "--max-steps", "0")
        assert code == 0 and payload["method"] == "ssf"

        code, payload = run(capsys, "fold", "--in", ft, "--out", folded, "--verify", "50")
        assert code == 0
        assert payload["max_abs_deviation"] == 0.0
        assert payload["extra_infer_params"] == 0
        assert "weight_stats" in payload
        assert Checkpoint.load(folded).hashes() == Checkpoint.load(workspace["pre"]).hashes()

    def test_finetune_fold_eval(self, workspace, capsys):
        ft = str(workspace["root"] / "ft.ssfckpt")
        folded = str(workspace["root"] / "folded.ssfckpt")
        code, _ = run(capsys, "finetune", "--in", workspace["pre"], "--data", workspace["down"], "--out", ft,
                      "--epochs", "2", "--warmup-epochs", "1", "--batch-size", "16", "--lr", "0.01")
        assert code == 0
        assert (workspace["root"] / "ft.ssfckpt.summary.json").exists()

        code, payload = run(capsys, "fold", "--in", ft, "--out", folded, "--verify", "20")
        assert code == 0 and payload["max_abs_deviation"] <= payload["tolerance"]

        code, payload = run(capsys, "verify-fold", "--in", ft, "--folded", folded, "--samples", "10")
        assert code == 0 and payload["status"] == "ok"

        _, hooked = run(capsys, "eval", "--in", ft, "--data", workspace["down"])
        _, merged = run(capsys, "eval", "--in", folded, "--data", workspace["down"])
        assert hooked["correct"] == merged["correct"]
        assert hooked["method"] == "ssf" and merged["method"] == "full"

    def test_failed_verification_writes_nothing(self, workspace, capsys, monkeypatch):
        ft = str(workspace["root"] / "ft.ssfckpt")
        folded = workspace["root"] / "folded.ssfckpt"
        assert run(capsys, "finetune", "--in", workspace["pre"], "--data", workspace["down"], "--out", ft,
                   "--epochs", "1", "--warmup-epochs", "0", "--max-steps", "1")[0] == 0

        monkeypatch.setattr(commands, "verify_fold", lambda *args, **kwargs: 1.0)
        code, payload = run(capsys, "fold", "--in", ft, "--out", str(folded), "--verify", "5")
        assert code == 2
        assert payload["written"] is False
        assert not folded.exists()

    def test_baseline_finetune(self, workspace, capsys):
        ft = str(workspace["root"] / "adapter.ssfckpt")
        code, payload = run(capsys, "finetune", "--in", workspace["pre"], "--data", workspace["down"], "--out", ft,
                            "--method", "adapter", "--adapter-dim", "4", "--epochs", "1", "--warmup-epochs", "0")
        assert code == 0
        assert payload["trainable_params"] == 2 * 2 * 32 * 4 + 4 * 32 + 4
        # adapters stay in the inference graph and cannot be folded
        assert main(["fold", "--in", ft, "--out", str(workspace["root"] / "no.ssfckpt")]) == 1

    def test_fold_refuses_plain_backbone(self, workspace, capsys):
        assert main(["fold", "--in", workspace["pre"], "--out", str(workspace["root"] / "x.ssfckpt")]) == 1

    def test_run_config_file(self, workspace, capsys):
        config = workspace["root"] / "run.json"
        config.write_text(json.dumps({"epochs": 1, "warmup_epochs": 0, "max_steps": 1, "batch_size": 8}))
        code, payload = run(capsys, "pretrain", "--data", workspace["up"], "--out",
                            str(workspace["root"] / "cfg.ssfckpt"), "--config", str(config))
        assert code == 0 and payload["steps"] == 1

    def test_metrics_file(self, workspace, capsys):
        metrics = workspace["root"] / "metrics.prom"
        code = main(["eval", "--in", workspace["pre"], "--data", workspace["up"], "--metrics-file", str(metrics)])
        assert code == 0
        assert "ssf_train_steps_total" in metrics.read_text()


class TestGradCheckCommand:
    def test_passes_in_float64(self, capsys):
        code, payload = run(capsys, "grad-check", "--cases", "ssf_ada,linear", "--instances", "2")
        assert code == 0
        assert payload["dtype"] == "f64" and payload["max_rel_error"] < payload["tolerance"]

    def test_failure_exits_with_two(self, capsys, monkeypatch):
        monkeypatch.setattr(commands, "run_grad_checks",
                            lambda **kwargs: [GradCheckResult("linear", 1.0)])
        code, payload = run(capsys, "grad-check")
        assert code == 2
        assert payload["status"] == "verification_failed"

    def test_unknown_case(self, capsys):
        assert main(["grad-check", "--cases", "conv"]) == 1
