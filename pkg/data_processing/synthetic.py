"""
Deterministic toy corpus for desk-scale experiments.

Benign URLs are dictionary-word domains on .com or a ccTLD; malicious URLs
are hyphen-digit domains on rare gTLDs; the optional phishing class puts a
brand name in front of a lure domain. IPs are drawn from class-correlated
ranges. With `ip_only=True` the URL text comes from one distribution shared
by every class, so only the IP carries the label.
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Tuple

import numpy as np

from data_processing.ip_featurizer import IPv4
from data_processing.url_corpus import Dataset, Label, UrlRecord, parse_url

logger = logging.getLogger(__name__)

WORDS = [
    "river", "garden", "paper", "music", "travel", "kitchen", "library", "market", "school", "forest",
    "coffee", "bakery", "design", "studio", "health", "family", "planet", "window", "silver", "harbor",
    "museum", "weather", "recipe", "camera", "bicycle", "journal", "science", "theater", "village", "ocean",
    "mountain", "lantern", "orchard", "pencil", "violin", "meadow", "canyon", "island", "compass", "tailor",
]
BENIGN_TLDS = ["com", "com", "com", "de", "uk", "fr", "jp", "nl", "it", "ca"]
RARE_GTLDS = ["cfd", "xyz", "top", "icu", "buzz", "sbs", "click", "rest", "quest", "monster"]
LURES = ["login", "verify", "secure", "account", "update", "billing", "oferta", "bonus", "wallet", "support"]
BRANDS = ["paypal", "allegro", "netflix", "amazon", "apple", "microsoft", "dhl", "chase"]
PATH_WORDS = ["index", "about", "news", "blog", "shop", "contact", "help", "docs", "faq", "events"]

# first-octet ranges per label: class A / class C / class B
IP_RANGES: Dict[Label, Tuple[int, int]] = {
    Label.BENIGN: (13, 100),
    Label.MALICIOUS: (193, 223),
    Label.PHISHING: (130, 190),
}


def _pick(rng: np.random.Generator, items: List[str]) -> str:
    return items[int(rng.integers(len(items)))]


def benign_url(rng: np.random.Generator) -> str:
    host = _pick(rng, WORDS)
    if rng.random() < 0.4:
        host += _pick(rng, WORDS)
    if rng.random() < 0.5:
        host = "www." + host
    path = "" if rng.random() < 0.3 else "/" + _pick(rng, PATH_WORDS)
    if path and rng.random() < 0.3:
        path += "/" + _pick(rng, WORDS)
    scheme = "https" if rng.random() < 0.8 else "http"
    return f"{scheme}://{host}.{_pick(rng, BENIGN_TLDS)}{path}"


def malicious_url(rng: np.random.Generator) -> str:
    digits = str(int(rng.integers(100, 999999)))
    parts = [_pick(rng, LURES), _pick(rng, WORDS) + digits]
    if rng.random() < 0.5:
        parts.insert(1, _pick(rng, LURES))
    path = f"/{_pick(rng, LURES)}.php?id={int(rng.integers(1000, 99999))}" if rng.random() < 0.6 else ""
    return f"http://{'-'.join(parts)}.{_pick(rng, RARE_GTLDS)}{path}"


def phishing_url(rng: np.random.Generator) -> str:
    brand = _pick(rng, BRANDS)
    lure = f"{_pick(rng, LURES)}-{int(rng.integers(10, 9999))}"
    if rng.random() < 0.5:
        host = f"{brand}.{_pick(rng, BENIGN_TLDS[3:])}-{lure}.{_pick(rng, RARE_GTLDS)}"
    else:
        host = f"{brand}-{lure}.{_pick(rng, RARE_GTLDS)}"
    return f"https://{host}/{_pick(rng, ['signin', 'session', 'confirm'])}"


def shared_url(rng: np.random.Generator) -> str:
    """URL text independent of the label."""
    return benign_url(rng) if rng.random() < 0.5 else malicious_url(rng)


def synthetic_ip(rng: np.random.Generator, label: Label) -> IPv4:
    low, high = IP_RANGES[label]
    first = int(rng.integers(low, high + 1))
    return IPv4((first, *(int(o) for o in rng.integers(0, 256, size=3))))


URL_GENERATORS: Dict[Label, Callable[[np.random.Generator], str]] = {
    Label.BENIGN: benign_url,
    Label.MALICIOUS: malicious_url,
    Label.PHISHING: phishing_url,
}


def generate_corpus(n: int, seed: int = 0, n_classes: int = 2, malicious_fraction: float = 0.5,
                    ip_only: bool = False) -> Dataset:
    """
    `n` labelled records in random order. With three classes the
    non-benign share is split evenly between malicious and phishing.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n_classes not in (2, 3):
        raise ValueError(f"n_classes must be 2 or 3, got {n_classes}")
    if not 0.0 < malicious_fraction < 1.0:
        raise ValueError(f"malicious_fraction must be in (0, 1), got {malicious_fraction}")

    rng = np.random.default_rng(seed)
    n_bad = int(round(n * malicious_fraction))
    if n_classes == 3:
        labels = [Label.BENIGN] * (n - n_bad) + [Label.MALICIOUS] * (n_bad - n_bad // 2) + [Label.PHISHING] * (n_bad // 2)
    else:
        labels = [Label.BENIGN] * (n - n_bad) + [Label.MALICIOUS] * n_bad
    order = rng.permutation(n)

    records: List[UrlRecord] = []
    for idx in order:
        label = labels[idx]
        url = shared_url(rng) if ip_only else URL_GENERATORS[label](rng)
        records.append(replace(parse_url(url), ip=synthetic_ip(rng, label), label=label))

    ds = Dataset(tuple(records), source_path=f"synthetic(seed={seed})")
    logger.info("Generated %d synthetic records (%s)", n, {k.value: v for k, v in ds.class_counts.items()})
    return ds
