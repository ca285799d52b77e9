"""
IPv4 parsing, classful ranges and the fixed 13-d IP feature vector fed to
the IP branch. Also derives deterministic pseudo-IPs for adversarial URLs.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from config.errors import BadIp, EmptyInput, IoError, SchemaError

logger = logging.getLogger(__name__)

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
FNV64_MASK = 0xFFFFFFFFFFFFFFFF

N_BUCKETS = 4
FEATURE_DIM = 4 + 5 + N_BUCKETS


class IpClass(Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"


CLASS_ORDER = [IpClass.A, IpClass.B, IpClass.C, IpClass.D, IpClass.E]


@dataclass(frozen=True)
class IPv4:
    octets: tuple

    def __str__(self) -> str:
        return ".".join(str(o) for o in self.octets)

    def prefix16(self) -> bytes:
        return bytes(self.octets[:2])


@dataclass(frozen=True)
class IpFeature:
    values: np.ndarray


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & FNV64_MASK
    return h


def parse_ipv4(text: str) -> IPv4:
    fields = str(text).split(".")
    if len(fields) != 4:
        raise BadIp(f"expected 4 dotted fields in {text!r}, got {len(fields)}")
    octets = []
    for part in fields:
        if not part or not (part.isascii() and part.isdigit()):
            raise BadIp(f"non-digit field {part!r} in {text!r}")
        value = int(part)
        if value > 255:
            raise BadIp(f"octet {value} out of range in {text!r}")
        octets.append(value)
    return IPv4(tuple(octets))


def ip_class(ip: IPv4) -> IpClass:
    first = ip.octets[0]
    if first <= 127:
        return IpClass.A
    if first <= 191:
        return IpClass.B
    if first <= 223:
        return IpClass.C
    if first <= 239:
        return IpClass.D
    return IpClass.E


def prefix_bucket(ip: IPv4) -> int:
    return fnv1a64(ip.prefix16()) % N_BUCKETS


def ip_embed_input(ip: IPv4) -> IpFeature:
    values = np.zeros(FEATURE_DIM, dtype=np.float64)
    values[:4] = np.asarray(ip.octets, dtype=np.float64) / 255.0
    values[4 + CLASS_ORDER.index(ip_class(ip))] = 1.0
    values[9 + prefix_bucket(ip)] = 1.0
    return IpFeature(values)


def derive_ip_from_hash(url: str) -> IPv4:
    if not url:
        raise EmptyInput("cannot derive a pseudo-IP from an empty URL")
    digest = fnv1a64(url.encode("utf-8")).to_bytes(8, "little")
    return IPv4(tuple(digest[:4]))


class IpEmbeddingTable:
    """External IP embeddings loaded from a CSV "ip,v1,...,vF"."""

    def __init__(self, vectors: Dict[IPv4, np.ndarray], dim: int):
        self.vectors = vectors
        self.dim = dim
        self.misses = 0

    @classmethod
    def from_csv(cls, path: str, expected_dim: int) -> "IpEmbeddingTable":
        csv_file = Path(path)
        if not csv_file.exists():
            raise IoError(f"IP embedding file not found: {path}")
        df = pd.read_csv(csv_file, dtype={"ip": str})
        columns = list(df.columns)
        expected = ["ip"] + [f"v{i}" for i in range(1, expected_dim + 1)]
        if columns != expected:
            raise SchemaError(
                f"IP embedding header must be ip,v1..v{expected_dim} (dimension {expected_dim}), "
                f"got {len(columns) - 1} value columns"
            )
        matrix = df[expected[1:]].to_numpy(dtype=np.float64)
        vectors = {parse_ipv4(ip): matrix[i] for i, ip in enumerate(df["ip"])}
        logger.info("Loaded %d external IP embeddings (dim=%d) from %s", len(vectors), expected_dim, path)
        return cls(vectors, expected_dim)

    def lookup(self, ip: IPv4) -> np.ndarray:
        if ip in self.vectors:
            return self.vectors[ip]
        self.misses += 1
        return np.zeros(self.dim, dtype=np.float64)


def featurize_ips(ips: Sequence[Optional[IPv4]], table: Optional[IpEmbeddingTable] = None) -> np.ndarray:
    """Stack per-record IP features; a missing IP contributes a zero row."""
    dim = table.dim if table is not None else FEATURE_DIM
    out = np.zeros((len(ips), dim), dtype=np.float64)
    for i, ip in enumerate(ips):
        if ip is None:
            continue
        out[i] = table.lookup(ip) if table is not None else ip_embed_input(ip).values
    return out


def class_histogram(ips: Iterable[Optional[IPv4]]) -> Dict[str, int]:
    counts = {c.value: 0 for c in CLASS_ORDER}
    for ip in ips:
        if ip is not None:
            counts[ip_class(ip).value] += 1
    return counts
