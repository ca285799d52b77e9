import json

import numpy as np
import pandas as pd
import pytest

from config.errors import CheckpointError, ConfigError, UsageError
from config.presets import get_preset
from data_processing.adversary import build_adversarial_set
from data_processing.synthetic import generate_corpus
from data_processing.tokenizer import Vocab, train_vocab
from data_processing.url_corpus import Label, split_dataset
from evaluation.metrics import evaluate_probs
from neural.checkpoint import load_checkpoint, save_checkpoint
from url_detection.finetune import Finetuner, finetune, holdout_split, start_state
from url_detection.integrity import end_to_end_grad_check
from url_detection.model import (
    class_targets,
    forward,
    init_encoder_state,
    init_model_state,
    iter_batches,
    label_to_class,
    make_batch,
    mean_loss,
    predict_proba,
    run_config_of,
    vocab_of,
)
from url_detection.predictor import UrlPredictor
from url_detection.pretrain import encoder_checksum, pretrain
from url_detection.run_logger import FINETUNE_COLUMNS, LossLogger
from url_detection.scale_study import nested_subsets, run_scale_study


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(40, seed=3)


def _trained(cfg, corpus, seed=0, epochs=1):
    vocab = Vocab([])
    train, val = corpus.subset(range(32)), corpus.subset(range(32, 40))
    state = finetune(train, start_state(cfg, vocab, seed), cfg, vocab, epochs=epochs, seed=seed, val=val)
    return state, vocab, val


class TestModel:
    def test_label_mapping(self):
        assert label_to_class(Label.BENIGN, 2) == 0
        assert label_to_class(Label.PHISHING, 2) == 1
        assert label_to_class(Label.MALICIOUS, 3) == 1
        assert label_to_class(Label.PHISHING, 3) == 2

    def test_batch_and_forward(self, tiny_cfg, corpus):
        state = init_model_state(tiny_cfg, 0, Vocab([]))
        batch = make_batch(corpus.records[:5], Vocab([]), tiny_cfg)
        assert batch.ids.shape == (5, 24)
        assert batch.ip_feats.shape == (5, 13)
        np.testing.assert_array_equal(batch.targets, class_targets(corpus.records[:5], 2))
        out = forward(state, batch, tiny_cfg)
        assert out.logits.shape == (5, 2)
        assert out.f_url.shape == out.f_ip.shape == (5, 16)
        np.testing.assert_allclose(predict_proba(state, batch, tiny_cfg).sum(axis=1), 1.0, atol=1e-6)

    def test_zero_ip(self, tiny_cfg, corpus):
        state = init_model_state(tiny_cfg, 0)
        batch = make_batch(corpus.records[:3], Vocab([]), tiny_cfg)
        assert np.all(forward(state, batch, tiny_cfg, zero_ip=True).f_ip.data == 0.0)

    def test_encoder_part_matches_pretraining_init(self, tiny_cfg):
        assert encoder_checksum(init_model_state(tiny_cfg, 5)) == encoder_checksum(init_encoder_state(tiny_cfg, 5))

    def test_ip_dim_checked(self, tiny_cfg, corpus):
        cfg = tiny_cfg.override("bmmc", ip_dim=8)
        with pytest.raises(ConfigError):
            make_batch(corpus.records[:2], Vocab([]), cfg)

    def test_vocab_must_fit(self, tiny_cfg):
        vocab = train_vocab([r.raw for r in generate_corpus(100, seed=0).records], vocab_size=320)
        with pytest.raises(ConfigError):
            init_model_state(tiny_cfg, 0, vocab)


class TestFinetune:
    def test_zero_epochs_is_identity(self, tiny_cfg, corpus):
        state = start_state(tiny_cfg, Vocab([]), 1)
        before = state.checksum()
        out = finetune(corpus, state, tiny_cfg, Vocab([]), epochs=0)
        assert out.checksum() == before

    def test_same_seed_same_val_curve(self, tiny_cfg, corpus):
        a, _, _ = _trained(tiny_cfg, corpus, seed=7, epochs=2)
        b, _, _ = _trained(tiny_cfg, corpus, seed=7, epochs=2)
        assert a.meta["val_curve"] == b.meta["val_curve"]
        assert len(a.meta["val_curve"]) == 2
        assert a.checksum() == b.checksum()

    def test_keeps_best_epoch(self, tiny_cfg, corpus):
        state, vocab, val = _trained(tiny_cfg, corpus, epochs=2)
        curve = state.meta["val_curve"]
        assert state.meta["best_epoch"] == int(np.argmin(curve)) + 1
        assert state.meta["val_loss"] == pytest.approx(min(curve))
        assert mean_loss(state, val.records, vocab, tiny_cfg, 8) == pytest.approx(state.meta["val_loss"], abs=1e-6)

    def test_single_trailing_example_joins_previous_batch(self, tiny_cfg, corpus):
        sizes = [len(b) for b in iter_batches(corpus.records[:9], 4, min_last=2)]
        assert sizes == [4, 5]
        assert [len(b) for b in iter_batches(corpus.records[:9], 4)] == [4, 4, 1]

        trainer = Finetuner(tiny_cfg, Vocab([]), start_state(tiny_cfg, Vocab([]), 0), progress=False)
        trainer.train_epoch(corpus.subset(range(9)), epoch=0, batch_size=4, lr=1e-3)
        assert trainer.state.step_count == 2
        assert np.all(trainer.state["bmmc.joint.bn.running_var"].data > 0.0)

    def test_holdout_when_no_val(self, tiny_cfg, corpus):
        train, val = holdout_split(corpus, 0.1, seed=0)
        assert (len(train), len(val)) == (36, 4)
        assert set(train.records).isdisjoint(val.records)
        trainer = Finetuner(tiny_cfg, Vocab([]), start_state(tiny_cfg, Vocab([]), 0), progress=False)
        trainer.run(corpus, epochs=1)
        assert len(trainer.val_curve) == 1

    def test_pretrained_encoder_is_loaded(self, tiny_cfg, corpus):
        encoder = pretrain(corpus, tiny_cfg, Vocab([]), batch_size=8, max_steps=2, seed=4)
        state = start_state(tiny_cfg, Vocab([]), 0, pretrained=encoder)
        assert encoder_checksum(state) == encoder_checksum(encoder)

    def test_loss_log(self, tiny_cfg, corpus, tmp_path):
        log = tmp_path / "detector_loss.csv"
        finetune(corpus.subset(range(16)), start_state(tiny_cfg, Vocab([]), 0), tiny_cfg, Vocab([]), epochs=1,
                 val=corpus.subset(range(16, 24)), log_file=str(log))
        df = pd.read_csv(log)
        assert list(df.columns) == FINETUNE_COLUMNS
        assert len(df) == 2
        assert "val_loss" in pd.read_csv(tmp_path / "detector_loss_epochs.csv").columns


class TestCheckpointReload:
    def test_validation_loss_reproduced(self, tiny_cfg, corpus, tmp_path):
        state, vocab, val = _trained(tiny_cfg, corpus)
        path = tmp_path / "m.ckpt"
        save_checkpoint(state, str(path))
        loaded = load_checkpoint(str(path))
        cfg = run_config_of(loaded)
        assert cfg.to_dict() == tiny_cfg.to_dict()
        assert vocab_of(loaded) == vocab
        assert mean_loss(loaded, val.records, vocab, cfg, 8) == pytest.approx(state.meta["val_loss"], abs=1e-6)

    def test_zero_ip_follows_checkpoint(self, tiny_cfg, corpus, tmp_path):
        vocab = Vocab([])
        state = finetune(corpus.subset(range(32)), start_state(tiny_cfg, vocab, 0), tiny_cfg, vocab, epochs=1,
                         val=corpus.subset(range(32, 40)), zero_ip=True)
        path = tmp_path / "no_ip.ckpt"
        save_checkpoint(state, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.meta["zero_ip"] is True

        predictor = UrlPredictor(loaded, progress=False)
        assert predictor.zero_ip
        batch = make_batch(corpus.records[:6], vocab, tiny_cfg)
        assert np.all(forward(loaded, batch, tiny_cfg, zero_ip=predictor.zero_ip).f_ip.data == 0.0)
        np.testing.assert_allclose(predictor.predict_records(corpus.records[:6]),
                                   predict_proba(loaded, batch, tiny_cfg, zero_ip=True))

    def test_zero_ip_mismatch_warns(self, tiny_cfg, corpus, caplog):
        state, _, _ = _trained(tiny_cfg, corpus)
        with caplog.at_level("WARNING", logger="url_detection.predictor"):
            predictor = UrlPredictor(state, zero_ip=True, progress=False)
        assert predictor.zero_ip
        assert "fine-tuned with zero_ip=False" in caplog.text


class TestPredictor:
    @pytest.fixture(scope="class")
    def trained(self):
        cfg = get_preset("desk")
        cfg = cfg.override("encoder", n_layers=2, hidden=16, n_heads=2, max_len=24, vocab_size=300)
        cfg = cfg.override("clmsa", channel_pyramid=(4, 2), pool_out=(4, 4), proj_dim=16)
        ds = generate_corpus(40, seed=3)
        state, vocab, _ = _trained(cfg, ds)
        return state, vocab

    def test_jsonl_predictions(self, trained, corpus, tmp_path):
        state, _ = trained
        predictor = UrlPredictor(state, progress=False)
        out = tmp_path / "preds.jsonl"
        df = predictor.predict_dataset(corpus, str(out))
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(rows) == len(corpus) == len(df)
        assert set(rows[0]) == {"url", "p_benign", "p_malicious", "pred"}
        assert rows[0]["url"] == corpus.records[0].raw
        assert abs(rows[0]["p_benign"] + rows[0]["p_malicious"] - 1.0) < 1e-6
        summary = predictor.get_session_summary()
        assert summary["completed"] == summary["total"] == len(corpus)

    def test_evaluate_by_origin(self, trained, corpus):
        state, vocab = trained
        mixed = build_adversarial_set(corpus, train_vocab([r.raw for r in corpus.records], 280), 0.5, seed=0)
        result = UrlPredictor(state, vocab, progress=False).evaluate(mixed)
        assert set(result.by_origin) == {"clean", "adversarial"}
        assert result.report.n == len(mixed)
        assert "by_origin" in result.to_dict()
        np.testing.assert_allclose(result.report.auc,
                                   evaluate_probs(result.probs, result.targets, ["benign", "malicious"]).auc)

    def test_misclassified_rows(self, trained, corpus):
        state, _ = trained
        predictor = UrlPredictor(state, progress=False)
        result = predictor.evaluate(corpus, threshold=0.0)
        errors = UrlPredictor.misclassified(corpus, result)
        assert len(errors) == corpus.class_counts[Label.BENIGN]
        assert list(errors.columns) == ["url", "label", "p_malicious"]

    def test_encoder_only_checkpoint_rejected(self, tiny_cfg):
        with pytest.raises(CheckpointError):
            UrlPredictor(init_encoder_state(tiny_cfg, 0, Vocab([])), progress=False)


class TestScaleStudy:
    def test_nested(self, corpus):
        small, mid, full = nested_subsets(corpus, [20, 5, 40], seed=1)
        assert [len(s) for s in (small, mid, full)] == [5, 20, 40]
        assert set(small.records) <= set(mid.records) <= set(full.records)
        positions = [corpus.records.index(r) for r in mid.records]
        assert positions == sorted(positions)

    @pytest.mark.parametrize("sizes", [[], [1, 5], [10, 41]])
    def test_bad_sizes(self, corpus, sizes):
        with pytest.raises(UsageError):
            nested_subsets(corpus, sizes, seed=0)

    def test_rows(self, tiny_cfg):
        train, _, test = split_dataset(generate_corpus(60, seed=2), (0.6, 0.1, 0.3), seed=0)
        table = run_scale_study(train, test, [12, 24], tiny_cfg, Vocab([]), epochs=1)
        assert table["size"].tolist() == [12, 24]
        assert {"auc", "f1", "tpr@0.01"} <= set(table.columns)


class TestLossLogger:
    def test_session_summary(self, tmp_path):
        logger = LossLogger(str(tmp_path / "loss.csv"))
        for step, total in enumerate([3.0, 2.0, 2.5], start=1):
            logger.log_step(step=step, mlm=total / 2, tacl=total / 2, total=total)
        summary = logger.get_session_summary()
        assert (summary["steps"], summary["first_loss"], summary["min_loss"]) == (3, 3.0, 2.0)
        assert LossLogger.load_log(str(tmp_path / "loss.csv"))["total"].tolist() == [3.0, 2.0, 2.5]


class TestIntegrity:
    def test_tiny_model(self, tiny_cfg):
        report = end_to_end_grad_check(seed=0, cfg=tiny_cfg, batch_size=4)
        assert report.passed(1e-4), report.to_dict()
        assert any(name.startswith("encoder.") for name in report.checks)
        assert any(name.startswith("bmmc.") for name in report.checks)

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_desk_model(self, seed):
        assert end_to_end_grad_check(seed=seed).passed(1e-4)


def _auc(state, ds, zero_ip=False):
    return UrlPredictor(state, zero_ip=zero_ip, progress=False).evaluate(ds, by_origin=False).report


@pytest.mark.slow
class TestDeskExperiments:
    def test_learns_synthetic_corpus(self):
        cfg = get_preset("desk")
        train, val, _ = split_dataset(generate_corpus(2000, seed=0), (0.8, 0.1, 0.1), seed=0)
        vocab = train_vocab([r.raw for r in train.records], cfg.encoder.vocab_size, seed=0)
        encoder = pretrain(train, cfg, vocab, epochs=2, max_steps=200, seed=0)
        state = finetune(train, start_state(cfg, vocab, 0, encoder), cfg, vocab, epochs=5, seed=0, val=val)
        report = _auc(state, val)
        assert report.auc >= 0.95
        assert report.tpr_at_fpr["0.01"] >= 0.5

    def test_ip_branch_ablation(self):
        cfg = get_preset("desk")
        train, val, test = split_dataset(generate_corpus(800, seed=1, ip_only=True), (0.7, 0.1, 0.2), seed=0)
        vocab = Vocab([])
        full = finetune(train, start_state(cfg, vocab, 0), cfg, vocab, epochs=3, seed=0, val=val)
        ablated = finetune(train, start_state(cfg, vocab, 0), cfg, vocab, epochs=3, seed=0, val=val, zero_ip=True)
        assert _auc(full, test).auc - _auc(ablated, test, zero_ip=True).auc >= 0.1
