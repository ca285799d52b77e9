import json

import pandas as pd
import pytest

from cli.main import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main

TINY_TOML = """
[encoder]
n_layers = 2
hidden = 16
n_heads = 2
max_len = 24
vocab_size = 300

[clmsa]
channel_pyramid = [4, 2]
pool_out = [4, 4]
proj_dim = 16

[train]
batch_size = 8
epochs = 1
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "tiny.toml").write_text(TINY_TOML)
    assert main(["synth", "--out", str(tmp_path / "urls.csv"), "--n", "48", "--seed", "3", "--quiet"]) == EXIT_OK
    assert main(["train-vocab", "--data", str(tmp_path / "urls.csv"), "--out", str(tmp_path / "vocab.txt"),
                 "--vocab-size", "280", "--quiet"]) == EXIT_OK
    return tmp_path


def _finetune(ws, out, *extra):
    return main(["finetune", "--data", str(ws / "urls.csv"), "--vocab", str(ws / "vocab.txt"), "--from-scratch",
                 "--config", str(ws / "tiny.toml"), "--out", str(ws / out), "--quiet", *extra])


class TestUsage:
    def test_missing_data(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--checkpoint", "m.ckpt", "--out", str(tmp_path / "r.json")])
        assert exc.value.code == EXIT_VALIDATION

    def test_finetune_needs_a_start(self, workspace):
        with pytest.raises(SystemExit) as exc:
            main(["finetune", "--data", str(workspace / "urls.csv"), "--out", str(workspace / "m.ckpt")])
        assert exc.value.code == EXIT_VALIDATION

    def test_pretrain_without_vocab_file(self, workspace):
        code = main(["pretrain", "--data", str(workspace / "urls.csv"), "--vocab", str(workspace / "missing.txt"),
                     "--out", str(workspace / "enc.ckpt"), "--quiet"])
        assert code == EXIT_RUNTIME

    def test_bad_config_key(self, workspace):
        bad = workspace / "bad.toml"
        bad.write_text("[encoder]\nlayers = 2\n")
        code = main(["train-vocab", "--data", str(workspace / "urls.csv"), "--out", str(workspace / "v.txt"),
                     "--config", str(bad), "--quiet"])
        assert code == EXIT_VALIDATION

    @pytest.mark.parametrize("option", [["--fraction", "1.5"], ["--evasion-char", "."], ["--evasion-char", "ab"]])
    def test_attack_option_out_of_range(self, workspace, option):
        with pytest.raises(SystemExit) as exc:
            main(["attack", "--data", str(workspace / "urls.csv"), "--vocab", str(workspace / "vocab.txt"),
                  "--out", str(workspace / "a.csv"), "--quiet", *option])
        assert exc.value.code == EXIT_VALIDATION

    @pytest.mark.parametrize("option", [["--n", "0"], ["--malicious-fraction", "1.0"]])
    def test_synth_option_out_of_range(self, tmp_path, option):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out", str(tmp_path / "u.csv"), "--quiet", *option])
        assert exc.value.code == EXIT_VALIDATION

    def test_pretrain_tau_must_be_positive(self, workspace):
        with pytest.raises(SystemExit) as exc:
            main(["pretrain", "--data", str(workspace / "urls.csv"), "--vocab", str(workspace / "vocab.txt"),
                  "--out", str(workspace / "e.ckpt"), "--tau", "0", "--quiet"])
        assert exc.value.code == EXIT_VALIDATION

    def test_value_error_at_runtime_is_a_runtime_failure(self, tmp_path, monkeypatch):
        def broken(*args, **kwargs):
            raise ValueError("bad numbers")

        monkeypatch.setattr("cli.main.generate_corpus", broken)
        assert main(["synth", "--out", str(tmp_path / "u.csv"), "--quiet"]) == EXIT_RUNTIME

    def test_missing_dataset_file(self, tmp_path):
        code = main(["stats", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "s.json"), "--quiet"])
        assert code == EXIT_RUNTIME


class TestPipeline:
    def test_finetune_eval_predict(self, workspace):
        assert _finetune(workspace, "m.ckpt") == EXIT_OK
        report_path = workspace / "report.json"
        code = main(["eval", "--data", str(workspace / "urls.csv"), "--checkpoint", str(workspace / "m.ckpt"),
                     "--out", str(report_path), "--errors-out", str(workspace / "errors.csv"), "--quiet"])
        assert code == EXIT_OK
        report = json.loads(report_path.read_text())
        assert "auc" in report
        assert report["n"] == 48
        assert list(pd.read_csv(workspace / "report_roc.csv").columns) == ["fpr", "tpr"]
        assert (workspace / "m_loss.csv").exists()

        code = main(["predict", "--data", str(workspace / "urls.csv"), "--checkpoint", str(workspace / "m.ckpt"),
                     "--out", str(workspace / "preds.jsonl"), "--quiet"])
        assert code == EXIT_OK
        assert len((workspace / "preds.jsonl").read_text().splitlines()) == 48

    def test_same_seed_same_checkpoint(self, workspace):
        assert _finetune(workspace, "a.ckpt", "--seed", "7") == EXIT_OK
        assert _finetune(workspace, "b.ckpt", "--seed", "7") == EXIT_OK
        assert (workspace / "a.ckpt").read_bytes() == (workspace / "b.ckpt").read_bytes()

    def test_environment_seed_overrides_flag(self, workspace, monkeypatch):
        assert _finetune(workspace, "a.ckpt", "--seed", "7") == EXIT_OK
        monkeypatch.setenv("CURLIP_SEED", "7")
        assert _finetune(workspace, "b.ckpt", "--seed", "99") == EXIT_OK
        assert (workspace / "a.ckpt").read_bytes() == (workspace / "b.ckpt").read_bytes()

    def test_pretrain_then_finetune(self, workspace):
        code = main(["pretrain", "--data", str(workspace / "urls.csv"), "--vocab", str(workspace / "vocab.txt"),
                     "--config", str(workspace / "tiny.toml"), "--out", str(workspace / "enc.ckpt"),
                     "--max-steps", "2", "--quiet"])
        assert code == EXIT_OK
        assert list(pd.read_csv(workspace / "enc_loss.csv").columns) == ["step", "mlm", "tacl", "total"]
        code = main(["finetune", "--data", str(workspace / "urls.csv"), "--pretrained", str(workspace / "enc.ckpt"),
                     "--out", str(workspace / "m.ckpt"), "--quiet"])
        assert code == EXIT_OK

    def test_attack_and_eval_by_origin(self, workspace):
        assert _finetune(workspace, "m.ckpt") == EXIT_OK
        code = main(["attack", "--data", str(workspace / "urls.csv"), "--vocab", str(workspace / "vocab.txt"),
                     "--out", str(workspace / "attacked.csv"), "--fraction", "0.5", "--quiet"])
        assert code == EXIT_OK
        attacked = pd.read_csv(workspace / "attacked.csv")
        assert "origin" in attacked.columns
        assert (attacked["origin"] == "adversarial").sum() > 0
        code = main(["eval", "--data", str(workspace / "attacked.csv"), "--checkpoint", str(workspace / "m.ckpt"),
                     "--out", str(workspace / "adv.json"), "--quiet"])
        assert code == EXIT_OK
        assert set(json.loads((workspace / "adv.json").read_text())["by_origin"]) == {"clean", "adversarial"}


class TestDataCommands:
    def test_split(self, workspace):
        code = main(["split", "--data", str(workspace / "urls.csv"), "--out", str(workspace / "parts"),
                     "--ratios", "0.5,0.25,0.25", "--quiet"])
        assert code == EXIT_OK
        sizes = [len(pd.read_csv(workspace / "parts" / f"{name}.csv")) for name in ("train", "val", "test")]
        assert sizes == [24, 12, 12]

    def test_bad_ratios(self, workspace):
        code = main(["split", "--data", str(workspace / "urls.csv"), "--out", str(workspace / "parts"),
                     "--ratios", "0.5,0.5,0.5", "--quiet"])
        assert code != EXIT_OK

    def test_stats(self, workspace):
        assert main(["stats", "--data", str(workspace / "urls.csv"), "--out", str(workspace / "s.json"),
                     "--quiet"]) == EXIT_OK
        stats = json.loads((workspace / "s.json").read_text())
        assert stats["n_records"] == 48

    def test_gradcheck(self, tmp_path):
        (tmp_path / "tiny.toml").write_text(TINY_TOML)
        code = main(["gradcheck", "--config", str(tmp_path / "tiny.toml"), "--seeds", "1", "--max-coords", "2",
                     "--out", str(tmp_path / "gc.json"), "--quiet"])
        summary = json.loads((tmp_path / "gc.json").read_text())
        assert code == EXIT_OK
        assert summary["passed"]
