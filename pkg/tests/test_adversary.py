from dataclasses import replace

import pytest

from config.errors import EmptyInput, NoDomain
from data_processing.adversary import build_adversarial_set, perturb_domain, remove_insertions
from data_processing.ip_featurizer import derive_ip_from_hash, parse_ipv4
from data_processing.synthetic import generate_corpus
from data_processing.tokenizer import train_vocab
from data_processing.url_corpus import Dataset, Label, Origin, parse_url


def _record(url: str, label: Label = Label.MALICIOUS, ip: str = "1.2.3.4"):
    return replace(parse_url(url), label=label, ip=parse_ipv4(ip))


class TestPerturbDomain:
    def test_subword_boundary(self, paypal_vocab):
        sample = perturb_domain(_record("http://paypal.com/login"), paypal_vocab)
        assert sample.perturbed_url == "http://pay-pal.com/login"
        assert sample.inserted_positions == (10,)
        assert sample.pseudo_ip == derive_ip_from_hash("http://pay-pal.com/login")
        assert not sample.flagged

    def test_single_piece_label_flagged(self, paypal_vocab):
        sample = perturb_domain(_record("http://a.com"), paypal_vocab)
        assert sample.perturbed_url == "http://a.com"
        assert sample.inserted_positions == ()
        assert sample.flagged

    def test_ip_literal(self, paypal_vocab):
        with pytest.raises(NoDomain):
            perturb_domain(_record("http://10.0.0.1/x"), paypal_vocab)

    def test_bare_tld(self, paypal_vocab):
        with pytest.raises(NoDomain):
            perturb_domain(_record("http://localhost/"), paypal_vocab)

    def test_only_second_level_label_changes(self, paypal_vocab):
        sample = perturb_domain(_record("https://www.paypal.co.uk.paypal.com/a?b=paypal"), paypal_vocab)
        assert sample.perturbed_url == "https://www.paypal.co.uk.pay-pal.com/a?b=paypal"

    def test_existing_hyphen_not_doubled(self):
        vocab = train_vocab(["secure-login secure login"], vocab_size=300)
        sample = perturb_domain(_record("http://secure-login.xyz"), vocab)
        assert "--" not in sample.perturbed_url
        assert parse_url(sample.perturbed_url).tld == "xyz"

    def test_max_insertions(self):
        vocab = train_vocab(["ab cd ef gh"], vocab_size=265)
        rec = _record("http://abcdefgh.net/")
        full = perturb_domain(rec, vocab)
        capped = perturb_domain(rec, vocab, max_insertions=1, seed=3)
        assert len(full.inserted_positions) == 3
        assert len(capped.inserted_positions) == 1
        assert remove_insertions(capped) == rec.raw

    def test_bad_evasion_char(self, paypal_vocab):
        with pytest.raises(ValueError):
            perturb_domain(_record("http://paypal.com"), paypal_vocab, evasion_char=".")

    def test_harness_integrity(self):
        ds = generate_corpus(2000, seed=9, malicious_fraction=0.7)
        vocab = train_vocab([r.raw for r in ds.records], vocab_size=400, seed=0)
        checked = 0
        for rec in ds.records:
            sample = perturb_domain(rec, vocab, evasion_char="_")
            if sample.flagged:
                continue
            assert parse_url(sample.perturbed_url).tld == rec.tld
            assert remove_insertions(sample, "_") == rec.raw
            assert sample.pseudo_ip == derive_ip_from_hash(sample.perturbed_url)
            checked += 1
            if checked == 1000:
                break
        assert checked == 1000


class TestBuildAdversarialSet:
    def _small(self):
        benign = [_record(f"http://news{i}.com/", Label.BENIGN) for i in range(4)]
        malicious = [_record("http://paypal.xyz/login"), _record("http://paypal.top/verify")]
        return Dataset(tuple(benign + malicious))

    def test_composition(self, paypal_vocab):
        out = build_adversarial_set(self._small(), paypal_vocab, 0.5, seed=1)
        assert len(out) == 7
        adversarial = [r for r in out if r.origin is Origin.ADVERSARIAL]
        assert len(adversarial) == 1
        assert adversarial[0].label is Label.MALICIOUS
        assert adversarial[0].ip == derive_ip_from_hash(adversarial[0].raw)
        assert "pay-pal" in adversarial[0].raw

    def test_fraction_zero_is_identity(self, paypal_vocab):
        ds = self._small()
        out = build_adversarial_set(ds, paypal_vocab, 0.0, seed=1)
        assert out.records == ds.records

    def test_ip_literal_hosts_skipped(self, paypal_vocab):
        ds = Dataset((_record("http://a.com/", Label.BENIGN), _record("http://10.0.0.1/"), _record("http://8.8.8.8/")))
        out = build_adversarial_set(ds, paypal_vocab, 1.0, seed=0)
        assert len(out) == 3
        assert out.skip_reasons["no_domain"] == 2
        assert out.skipped == 2

    def test_needs_malicious_records(self, paypal_vocab):
        with pytest.raises(EmptyInput):
            build_adversarial_set(Dataset((_record("http://a.com/", Label.BENIGN),)), paypal_vocab, 0.5)

    def test_deterministic(self):
        ds = generate_corpus(80, seed=4)
        vocab = train_vocab([r.raw for r in ds.records], vocab_size=330)
        a = build_adversarial_set(ds, vocab, 0.5, seed=6)
        b = build_adversarial_set(ds, vocab, 0.5, seed=6)
        assert a.records == b.records
