"""
Compound-attack adversarial URLs: evasion characters inserted at subword
boundaries of the registrable (second-level) label, with a pseudo-IP
derived from the perturbed URL's hash.
"""

import logging
from collections import Counter
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from config.errors import BadIp, EmptyInput, NoDomain
from data_processing.ip_featurizer import IPv4, derive_ip_from_hash, parse_ipv4
from data_processing.tokenizer import Vocab
from data_processing.url_corpus import Dataset, Label, Origin, UrlRecord, host_offset, parse_url

logger = logging.getLogger(__name__)

MALICIOUS_LABELS = (Label.MALICIOUS, Label.PHISHING)
_FORBIDDEN_EVASION = set("./?#@:%\\")


@dataclass(frozen=True)
class AdversarialSample:
    original: UrlRecord
    perturbed_url: str
    inserted_positions: Tuple[int, ...]
    pseudo_ip: IPv4
    perturbed: bool

    @property
    def flagged(self) -> bool:
        """True when the label was a single subword and nothing was inserted."""
        return not self.perturbed


def _label_byte_span(rec: UrlRecord) -> Tuple[int, int]:
    """UTF-8 byte span of the second-level label inside rec.raw."""
    try:
        parse_ipv4(rec.host)
    except BadIp:
        pass
    else:
        raise NoDomain(f"host {rec.host!r} is an IP literal")

    labels = rec.host.split(".")
    if len(labels) < 2 or not labels[-2]:
        raise NoDomain(f"host {rec.host!r} has no second-level label")
    sld = labels[-2]

    raw = rec.raw
    _, host_start, _ = host_offset(raw)
    sld_char_start = host_start + len(rec.host) - len(rec.tld) - 1 - len(sld)
    start = len(raw[:sld_char_start].encode("utf-8"))
    return start, start + len(sld.encode("utf-8"))


def check_evasion_char(evasion_char: str) -> str:
    if len(evasion_char) != 1 or evasion_char in _FORBIDDEN_EVASION or evasion_char.isspace():
        raise ValueError(f"evasion_char must be one character that keeps the host intact, got {evasion_char!r}")
    return evasion_char


def perturb_domain(rec: UrlRecord, v: Vocab, evasion_char: str = "-", seed: int = 0,
                   max_insertions: Optional[int] = None) -> AdversarialSample:
    check_evasion_char(evasion_char)

    start, end = _label_byte_span(rec)
    raw_bytes = rec.raw.encode("utf-8")
    label_bytes = raw_bytes[start:end]

    boundaries: List[int] = []
    offset = 0
    for token_id in v.encode_pieces(label_bytes.decode("utf-8")):
        offset += len(v.piece_bytes(token_id))
        if offset >= len(label_bytes):
            break
        before, after = label_bytes[offset - 1:offset], label_bytes[offset:offset + 1]
        if before in (b"-", b".") or after in (b"-", b"."):
            continue
        if after[0] & 0xC0 == 0x80:
            continue  # inside a multi-byte character
        boundaries.append(offset)

    if max_insertions is not None and len(boundaries) > max_insertions:
        rng = np.random.default_rng(seed)
        boundaries = sorted(int(b) for b in rng.choice(boundaries, size=max_insertions, replace=False))

    if not boundaries:
        return AdversarialSample(rec, rec.raw, (), derive_ip_from_hash(rec.raw), perturbed=False)

    evasion = evasion_char.encode("utf-8")
    pieces, positions, cursor = [], [], 0
    for k, boundary in enumerate(boundaries):
        pieces.append(label_bytes[cursor:boundary])
        pieces.append(evasion)
        positions.append(start + boundary + k * len(evasion))
        cursor = boundary
    pieces.append(label_bytes[cursor:])
    perturbed = (raw_bytes[:start] + b"".join(pieces) + raw_bytes[end:]).decode("utf-8")
    return AdversarialSample(rec, perturbed, tuple(positions), derive_ip_from_hash(perturbed), perturbed=True)


def remove_insertions(sample: AdversarialSample, evasion_char: str = "-") -> str:
    """Undo perturb_domain by deleting the evasion bytes at inserted_positions."""
    data = bytearray(sample.perturbed_url.encode("utf-8"))
    width = len(evasion_char.encode("utf-8"))
    for position in sorted(sample.inserted_positions, reverse=True):
        del data[position:position + width]
    return data.decode("utf-8")


def build_adversarial_set(ds: Dataset, v: Vocab, fraction_malicious: float, seed: int = 0,
                          evasion_char: str = "-", max_insertions: Optional[int] = None) -> Dataset:
    if not 0.0 <= fraction_malicious <= 1.0:
        raise ValueError(f"fraction_malicious must be in [0, 1], got {fraction_malicious}")
    pool = [i for i, r in enumerate(ds.records) if r.label in MALICIOUS_LABELS]
    if not pool:
        raise EmptyInput("dataset contains no malicious records to perturb")

    n_selected = int(np.floor(fraction_malicious * len(pool) + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = sorted(int(i) for i in rng.choice(pool, size=n_selected, replace=False)) if n_selected else []

    reasons: Counter = Counter(ds.skip_reasons)
    adversarial: List[UrlRecord] = []
    for idx in chosen:
        original = ds.records[idx]
        sample_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        try:
            sample = perturb_domain(original, v, evasion_char=evasion_char, seed=sample_seed,
                                    max_insertions=max_insertions)
        except NoDomain as e:
            logger.debug("record %d skipped: %s", idx, e)
            reasons["no_domain"] += 1
            continue
        if not sample.perturbed:
            reasons["unperturbed"] += 1
            continue
        adversarial.append(replace(parse_url(sample.perturbed_url), ip=sample.pseudo_ip,
                                   label=original.label, origin=Origin.ADVERSARIAL))

    new_skips = sum(reasons.values()) - sum(ds.skip_reasons.values())
    logger.info("Adversarial set: %d selected, %d generated, %d skipped", len(chosen), len(adversarial), new_skips)
    return Dataset(ds.records + tuple(adversarial), source_path=ds.source_path,
                   skipped=ds.skipped + new_skips, skip_reasons=dict(reasons))
