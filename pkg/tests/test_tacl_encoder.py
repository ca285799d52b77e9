import numpy as np
import pytest

from config.errors import EmptyMaskSet, ShapeMismatch
from config.presets import get_preset
from data_processing.synthetic import generate_corpus
from data_processing.tokenizer import MaskedSeq, ReplacementKind, TokenSeq, Vocab, encode_batch
from neural.gradcheck import grad_check
from neural.tensor import Tensor
from url_detection.model import init_encoder_state
from url_detection.pretrain import Pretrainer, contrastive_separation, encoder_checksum, mask_batch, pretrain
from url_detection.tacl_encoder import (
    PREFIX,
    TeacherHandle,
    encoder_forward,
    mlm_logits,
    mlm_loss,
    tacl_loss,
    total_pretrain_loss,
)

F64 = np.float64


@pytest.fixture(scope="module")
def desk():
    return get_preset("desk")


@pytest.fixture(scope="module")
def encoder_state(desk):
    return init_encoder_state(desk, seed=0)


def _ids(urls, cfg, vocab=None):
    return encode_batch(urls, vocab or Vocab([]), cfg.encoder.max_len)


def _masked(ids, positions):
    ids = np.asarray(ids)
    positions = np.asarray(positions, dtype=np.int64)
    return MaskedSeq(ids, (ids != 0).astype(np.int64), positions, ids[positions].copy(),
                     tuple(ReplacementKind.KEEP for _ in positions))


class TestEncoderForward:
    def test_hidden_stack_shape(self, desk, encoder_state):
        hidden, final = encoder_forward(_ids(["http://a.com", "http://b.de/x"], desk), encoder_state, desk.encoder)
        assert hidden.layers.shape == (2, 4, 64, 64)
        assert hidden.n_layers == 4
        assert final.shape == (2, 64, 64)

    def test_batch_equivariance(self, desk, encoder_state):
        ids, mask = _ids(["http://a.com", "http://bb.de/x", "https://c.fr/q?z=1"], desk)
        _, out = encoder_forward((ids, mask), encoder_state, desk.encoder)
        order = [2, 0, 1]
        _, permuted = encoder_forward((ids[order], mask[order]), encoder_state, desk.encoder)
        np.testing.assert_allclose(permuted.data, out.data[order], atol=1e-5)

    def test_minimal_sequence_is_finite(self, desk, encoder_state):
        hidden, final = encoder_forward(_ids([""], desk), encoder_state, desk.encoder)
        assert np.all(np.isfinite(hidden.layers.data))
        assert np.all(np.isfinite(final.data))

    def test_invariant_to_ids_under_pad(self, desk, encoder_state):
        ids, mask = _ids(["http://a.com/path"], desk)
        noisy = ids.copy()
        noisy[mask == 0] = np.random.default_rng(0).integers(5, 300, size=int((mask == 0).sum()))
        a, _ = encoder_forward((ids, mask), encoder_state, desk.encoder)
        b, _ = encoder_forward((noisy, mask), encoder_state, desk.encoder)
        np.testing.assert_array_equal(a.layers.data, b.layers.data)

    def test_wrong_length(self, desk, encoder_state):
        ids, mask = encode_batch(["http://a.com"], Vocab([]), 32)
        with pytest.raises(ShapeMismatch):
            encoder_forward((ids, mask), encoder_state, desk.encoder)

    def test_inference_deterministic(self, desk, encoder_state):
        batch = _ids(["http://a.com"], desk)
        a, _ = encoder_forward(batch, encoder_state, desk.encoder)
        b, _ = encoder_forward(batch, encoder_state, desk.encoder)
        np.testing.assert_array_equal(a.layers.data, b.layers.data)


class TestTaclLoss:
    def test_uniform_similarities(self):
        teacher = np.tile([1.0, 2.0, 0.5], (1, 4, 1))
        student = np.random.default_rng(0).normal(size=(1, 4, 3))
        loss = tacl_loss(Tensor(student, dtype=F64), teacher, [np.array([2])], tau=0.1)
        assert loss.item() == pytest.approx(np.log(4), abs=1e-6)

    def test_sum_of_log_m_over_batch(self):
        teacher = np.tile([1.0, -1.0], (2, 4, 1))
        student = np.random.default_rng(1).normal(size=(2, 4, 2))
        attn = np.array([[1, 1, 1, 1], [1, 1, 1, 0]])
        loss = tacl_loss(Tensor(student, dtype=F64), teacher, [np.array([1, 2]), np.array([0])], 0.1, attn)
        assert loss.item() == pytest.approx((2 * np.log(4) + np.log(3)) / 2, abs=1e-6)

    def test_sharp_positive(self):
        teacher = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        student = np.array([[[1.0, 0.0], [0.3, 0.3]]])
        loss = tacl_loss(Tensor(student, dtype=F64), teacher, [np.array([0])], tau=0.05)
        assert loss.item() == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-6)
        assert loss.item() == pytest.approx(2.06e-9, rel=1e-2)

    def test_lower_tau_never_hurts_argmax_positive(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(300):
            student = rng.normal(size=(1, 5, 4))
            teacher = rng.normal(size=(1, 5, 4))
            s = student[0, 0] / np.linalg.norm(student[0, 0])
            sims = (teacher[0] / np.linalg.norm(teacher[0], axis=1, keepdims=True)) @ s
            if np.argmax(sims) != 0:
                continue
            hi = tacl_loss(Tensor(student, dtype=F64), teacher, [np.array([0])], tau=0.2).item()
            lo = tacl_loss(Tensor(student, dtype=F64), teacher, [np.array([0])], tau=0.1).item()
            assert lo <= hi + 1e-12
            checked += 1
        assert checked > 20

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            loss = tacl_loss(Tensor(rng.normal(size=(2, 6, 4)), dtype=F64), rng.normal(size=(2, 6, 4)),
                             [np.array([1]), np.array([0, 5])], tau=0.1)
            assert loss.item() >= 0.0

    def test_no_gradient_into_teacher(self):
        rng = np.random.default_rng(4)
        student = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True, dtype=F64)
        teacher = Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True, dtype=F64)
        tacl_loss(student, teacher, [np.array([1])], tau=0.1).backward()
        assert student.grad is not None
        assert teacher.grad is None

    def test_empty_mask_set(self):
        with pytest.raises(EmptyMaskSet):
            tacl_loss(Tensor(np.ones((1, 3, 2))), np.ones((1, 3, 2)), [np.array([], dtype=np.int64)], tau=0.1)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            tacl_loss(Tensor(np.ones((1, 3, 2))), np.ones((1, 3, 2)), [np.array([0])], tau=0.0)


class TestMlmLoss:
    def test_uniform_logits(self):
        masked = _masked([2, 10, 11, 3], [1])
        loss = mlm_loss(Tensor(np.zeros((1, 4, 50))), masked)
        assert loss.item() == pytest.approx(np.log(50), abs=1e-5)

    def test_saturated_true_logit(self):
        masked = _masked([2, 10, 11, 3], [2])
        logits = np.zeros((1, 4, 50))
        logits[0, 2, 11] = 100.0
        assert mlm_loss(Tensor(logits, dtype=F64), masked).item() == pytest.approx(0.0, abs=1e-12)

    def test_average_over_positions(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(1, 5, 20))
        masked = _masked([2, 6, 7, 8, 3], [1, 3])
        a = mlm_loss(Tensor(logits, dtype=F64), _masked([2, 6, 7, 8, 3], [1])).item()
        b = mlm_loss(Tensor(logits, dtype=F64), _masked([2, 6, 7, 8, 3], [3])).item()
        assert mlm_loss(Tensor(logits, dtype=F64), masked).item() == pytest.approx((a + b) / 2, abs=1e-12)

    def test_empty(self):
        with pytest.raises(EmptyMaskSet):
            mlm_loss(Tensor(np.zeros((1, 4, 10))), _masked([2, 5, 6, 3], []))


class TestTotalLoss:
    @pytest.mark.parametrize("mlm,tacl,lam,expected", [(0.7, 1.3, 0.0, 0.7), (0.7, 1.3, 1.0, 2.0), (0.0, 2.0, 0.5, 1.0)])
    def test_weighting(self, mlm, tacl, lam, expected):
        assert total_pretrain_loss(mlm, tacl, lam) == pytest.approx(expected)

    def test_lambda_zero_is_mlm_exactly(self):
        mlm = Tensor(np.array(0.25))
        assert total_pretrain_loss(mlm, Tensor(np.array(9.0)), 0.0) is mlm

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_pretrain_loss(1.0, 1.0, -0.1)

    def test_gradient_of_total_loss(self, desk):
        cfg = desk.override("encoder", dropout=0.0)
        vocab = Vocab([])
        state = init_encoder_state(cfg, seed=3).astype(F64)
        teacher = TeacherHandle(state)
        ids, mask = _ids(["http://login-secure.xyz/a", "https://garden.com"], cfg, vocab)
        masked = [_masked(ids[0], [3, 8]), _masked(ids[1], [5])]
        _, teacher_final = teacher.forward((ids, mask), cfg.encoder)

        def loss():
            _, student = encoder_forward(masked, state, cfg.encoder, training=True)
            mlm = mlm_loss(mlm_logits(student, state), masked)
            tacl = tacl_loss(student, teacher_final, [m.mask_positions for m in masked], 0.1, mask)
            return total_pretrain_loss(mlm, tacl, 1.0)

        report = grad_check(loss, state, seed=0, max_coords=4)
        assert report.passed(1e-4), report.to_dict()


class TestTeacherHandle:
    def test_frozen_snapshot(self, desk):
        student = init_encoder_state(desk, seed=0)
        teacher = TeacherHandle(student)
        student[PREFIX + "tok_emb"].data += 1.0
        teacher.update(student)
        assert teacher.unchanged()
        assert not any(p.trainable for p in teacher.state)

    def test_ema_blends(self, desk):
        student = init_encoder_state(desk, seed=0)
        teacher = TeacherHandle(student, ema=0.5)
        before = teacher.state[PREFIX + "pos_emb"].data.copy()
        student[PREFIX + "pos_emb"].data += 2.0
        teacher.update(student)
        np.testing.assert_allclose(teacher.state[PREFIX + "pos_emb"].data, before + 1.0, atol=1e-6)


class TestPretrain:
    def _corpus(self, n=48):
        return generate_corpus(n, seed=1)

    def test_zero_epochs_returns_init(self, desk):
        vocab = Vocab([])
        state = pretrain(self._corpus(), desk, vocab, epochs=0, seed=2)
        assert encoder_checksum(state) == encoder_checksum(init_encoder_state(desk, seed=2, vocab=vocab))

    def test_deterministic_and_teacher_frozen(self, desk):
        vocab = Vocab([])
        runs = []
        for _ in range(2):
            trainer = Pretrainer(desk, vocab, seed=4, progress=False)
            teacher_sum = trainer.teacher.checksum()
            trainer.run(self._corpus(), epochs=1, batch_size=8, max_steps=4)
            assert trainer.teacher.checksum() == teacher_sum
            runs.append([h["total"] for h in trainer.history])
        assert len(runs[0]) == 4
        assert runs[0] == runs[1]

    def test_loss_log(self, desk, tmp_path):
        log = tmp_path / "encoder_loss.csv"
        pretrain(self._corpus(), desk, Vocab([]), batch_size=8, max_steps=2, log_file=str(log))
        assert log.read_text().splitlines()[0] == "step,mlm,tacl,total"

    def test_mask_batch_drops_unmaskable(self, desk):
        ids, mask = _ids(["", "http://a.com"], desk)
        seqs = [TokenSeq(ids[i], mask[i]) for i in range(2)]
        assert len(mask_batch(seqs, 0.15, seed=0, vocab_size=300)) == 1


@pytest.mark.slow
class TestPretrainExperiments:
    def test_loss_decreases_and_teacher_frozen(self):
        cfg = get_preset("desk")
        corpus = generate_corpus(500, seed=0)
        trainer = Pretrainer(cfg, Vocab([]), seed=0, progress=False)
        before = trainer.teacher.checksum()
        trainer.run(corpus, epochs=10, batch_size=16, max_steps=200)
        totals = np.asarray([h["total"] for h in trainer.history])
        assert len(totals) == 200
        assert totals[-20:].mean() < totals[:20].mean()
        assert trainer.teacher.checksum() == before

    def test_contrastive_separation(self):
        cfg = get_preset("desk")
        corpus = generate_corpus(600, seed=0)
        train_urls, held_out = corpus.subset(range(500)), [r.raw for r in corpus.records[500:]]
        trainer = Pretrainer(cfg, Vocab([]), seed=0, progress=False)
        trainer.run(train_urls, epochs=10, batch_size=16, max_steps=200)
        result = contrastive_separation(trainer.state, trainer.teacher.state, held_out, Vocab([]), cfg, seed=5)
        assert result["margin"] >= 0.05
