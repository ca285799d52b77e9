"""
Dataset ingestion, URL decomposition and corpus statistics.

CSV schema: url,ip,label[,origin]. Rows whose URL (or IP) cannot be parsed
are skipped and tallied; unknown labels abort the load.
"""

import ipaddress
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import product
from pathlib import Path
from string import ascii_lowercase
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.errors import BadIp, BadRatios, IoError, LabelError, MalformedUrl, SchemaError
from data_processing.ip_featurizer import IPv4, class_histogram, parse_ipv4

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["url", "ip", "label"]
ORIGIN_COLUMN = "origin"

COM_TLD = "com"
CC_TLDS = frozenset("".join(pair) for pair in product(ascii_lowercase, repeat=2))

_SCHEME_RE = re.compile(r"^([A-Za-z][A-Za-z0-9+.\-]*)://")
_PORT_RE = re.compile(r":[0-9]*$")


class Label(Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    PHISHING = "phishing"

    @classmethod
    def parse(cls, text: str) -> "Label":
        token = str(text).strip().lower()
        for label in cls:
            if label.value == token:
                return label
        raise LabelError(f"unknown label {text!r}; expected one of {[l.value for l in cls]}")


class TldKind(Enum):
    COM = "Com"
    CC_TLD = "CcTld"
    OTHER_GTLD = "OtherGtld"


class Origin(Enum):
    CLEAN = "clean"
    ADVERSARIAL = "adversarial"


def classify_tld(tld: str) -> TldKind:
    if tld == COM_TLD:
        return TldKind.COM
    if tld in CC_TLDS:
        return TldKind.CC_TLD
    return TldKind.OTHER_GTLD


@dataclass(frozen=True)
class UrlRecord:
    raw: str
    scheme: str
    host: str
    tld: str
    tld_kind: TldKind
    path_query: str
    ip: Optional[IPv4] = None
    label: Optional[Label] = None
    origin: Origin = Origin.CLEAN


def _illegal_host_char(ch: str) -> bool:
    return ch.isspace() or ord(ch) < 32 or ord(ch) == 127


def host_offset(raw: str) -> Tuple[str, int, int]:
    """(scheme, host start, authority end) as character offsets into raw."""
    match = _SCHEME_RE.match(raw)
    scheme, start = (match.group(1).lower(), match.end()) if match else ("http", 0)
    end = len(raw)
    for delimiter in "/?#":
        idx = raw.find(delimiter, start)
        if idx != -1:
            end = min(end, idx)
    at = raw.rfind("@", start, end)
    return scheme, (at + 1 if at != -1 else start), end


def parse_url(raw: str) -> UrlRecord:
    # hand-split: urllib silently drops tabs/newlines, which must surface as MalformedUrl
    if not raw:
        raise MalformedUrl("empty URL")
    scheme, host_start, authority_end = host_offset(raw)
    host, path_query = raw[host_start:authority_end], raw[authority_end:]
    if host.startswith("["):
        raise MalformedUrl(f"IPv6 literal hosts are not supported: {raw!r}")
    host = _PORT_RE.sub("", host).rstrip(".")
    if not host:
        raise MalformedUrl(f"no host in {raw!r}")
    if any(_illegal_host_char(ch) for ch in host) or ":" in host:
        raise MalformedUrl(f"illegal characters in host {host!r}")

    host = host.lower()
    tld = host.rsplit(".", 1)[-1]
    return UrlRecord(
        raw=raw,
        scheme=scheme,
        host=host,
        tld=tld,
        tld_kind=classify_tld(tld),
        path_query=path_query,
    )


@dataclass(frozen=True)
class Dataset:
    records: Tuple[UrlRecord, ...]
    source_path: str = ""
    skipped: int = 0
    skip_reasons: Dict[str, int] = field(default_factory=dict)
    class_counts: Dict[Label, int] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        counts = Counter(r.label for r in self.records)
        object.__setattr__(self, "class_counts", {label: counts.get(label, 0) for label in Label})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.records[i] for i in indices), source_path=self.source_path)


def load_dataset(path: str, format: str = "csv") -> Dataset:
    if format != "csv":
        raise SchemaError(f"unsupported dataset format {format!r}")
    csv_file = Path(path)
    if not csv_file.exists():
        raise IoError(f"dataset not found: {path}")

    try:
        df = pd.read_csv(csv_file, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"cannot read {path} as url,ip,label CSV: {e}") from e

    columns = list(df.columns)
    if columns not in (CSV_COLUMNS, CSV_COLUMNS + [ORIGIN_COLUMN]):
        raise SchemaError(f"expected header {','.join(CSV_COLUMNS)} in {path}, got {','.join(columns)}")
    has_origin = ORIGIN_COLUMN in columns

    records: List[UrlRecord] = []
    reasons: Counter = Counter()
    for row_number, row in enumerate(df.itertuples(index=False), start=2):
        label = Label.parse(row.label)
        origin = Origin.CLEAN
        if has_origin:
            try:
                origin = Origin(row.origin.strip().lower())
            except ValueError as e:
                raise SchemaError(f"row {row_number}: unknown origin {row.origin!r}") from e
        try:
            parsed = parse_url(row.url)
        except MalformedUrl as e:
            logger.debug("row %d skipped: %s", row_number, e)
            reasons["malformed_url"] += 1
            continue
        ip = None
        if row.ip.strip():
            try:
                ip = parse_ipv4(row.ip.strip())
            except BadIp as e:
                logger.debug("row %d skipped: %s", row_number, e)
                reasons["bad_ip"] += 1
                continue
        records.append(replace(parsed, ip=ip, label=label, origin=origin))

    skipped = sum(reasons.values())
    if skipped:
        logger.warning("Skipped %d of %d rows in %s (%s)", skipped, len(df), path, dict(reasons))
    logger.info("Loaded %d records from %s", len(records), path)
    return Dataset(tuple(records), source_path=str(path), skipped=skipped, skip_reasons=dict(reasons))


def write_dataset(ds: Dataset, path: str, include_origin: Optional[bool] = None) -> None:
    if include_origin is None:
        include_origin = any(r.origin is not Origin.CLEAN for r in ds.records)
    rows = []
    for r in ds.records:
        row = {"url": r.raw, "ip": "" if r.ip is None else str(r.ip), "label": r.label.value if r.label else ""}
        if include_origin:
            row[ORIGIN_COLUMN] = r.origin.value
        rows.append(row)
    columns = CSV_COLUMNS + ([ORIGIN_COLUMN] if include_origin else [])
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(out, index=False)


class AsnMap:
    """Longest-prefix CIDR -> ASN id lookup loaded from a "prefix,asn" CSV."""

    def __init__(self, entries: List[Tuple[ipaddress.IPv4Network, str]]):
        self.entries = sorted(entries, key=lambda e: e[0].prefixlen, reverse=True)

    @classmethod
    def from_csv(cls, path: str) -> "AsnMap":
        csv_file = Path(path)
        if not csv_file.exists():
            raise IoError(f"ASN mapping not found: {path}")
        df = pd.read_csv(csv_file, dtype=str, keep_default_na=False)
        if list(df.columns) != ["prefix", "asn"]:
            raise SchemaError(f"ASN mapping header must be prefix,asn in {path}")
        entries = []
        for prefix, asn in zip(df["prefix"], df["asn"]):
            try:
                entries.append((ipaddress.IPv4Network(prefix.strip(), strict=False), asn.strip()))
            except ValueError as e:
                raise SchemaError(f"bad CIDR prefix {prefix!r} in {path}") from e
        return cls(entries)

    def lookup(self, ip: IPv4) -> Optional[str]:
        address = ipaddress.IPv4Address(str(ip))
        for network, asn in self.entries:
            if address in network:
                return asn
        return None


@dataclass
class StatsReport:
    tld_shares: Dict[str, Dict[str, float]]
    ip_class_counts: Dict[str, Dict[str, int]]
    top_asn: Dict[str, List[Dict]]

    def to_dict(self) -> Dict:
        return {
            "tld_shares": self.tld_shares,
            "ip_class_counts": self.ip_class_counts,
            "top_asn": self.top_asn,
        }


def dataset_stats(ds: Dataset, asn_map: Optional[AsnMap] = None, top_k: int = 5) -> StatsReport:
    df = pd.DataFrame({
        "label": [r.label.value if r.label else "" for r in ds.records],
        "tld_kind": [r.tld_kind.value for r in ds.records],
        "ip": [r.ip for r in ds.records],
    })

    tld_shares, ip_class_counts, top_asn = {}, {}, {}
    for label in Label:
        group = df[df["label"] == label.value]
        shares = {kind.value: 0.0 for kind in TldKind}
        if len(group):
            normalized = group["tld_kind"].value_counts(normalize=True) * 100.0
            shares.update({kind: float(pct) for kind, pct in normalized.items()})
        tld_shares[label.value] = shares

        hist = class_histogram(group["ip"])
        ip_class_counts[label.value] = {
            "A": hist["A"], "B": hist["B"], "C": hist["C"], "D-E": hist["D"] + hist["E"],
        }

        buckets: List[Dict] = []
        if asn_map is not None and len(group):
            asns = pd.Series([asn_map.lookup(ip) for ip in group["ip"] if ip is not None], dtype=object)
            asns = asns.dropna()
            if len(asns):
                counts = asns.value_counts().reset_index()
                counts.columns = ["asn", "count"]
                counts = counts.sort_values(["count", "asn"], ascending=[False, True]).head(top_k)
                buckets = [{"asn": str(a), "count": int(c)} for a, c in zip(counts["asn"], counts["count"])]
        top_asn[label.value] = buckets

    return StatsReport(tld_shares=tld_shares, ip_class_counts=ip_class_counts, top_asn=top_asn)


def split_dataset(ds: Dataset, ratios: Tuple[float, float, float], seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be three positive values summing to 1, got {ratios}")

    n = len(ds)
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test

    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    # members keep file order inside each partition
    return tuple(ds.subset(sorted(int(i) for i in part)) for part in parts)
