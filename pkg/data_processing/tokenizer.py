"""
Byte-level BPE vocabulary for URL text, fixed-length encoding and the
BERT-style masking used by the student encoder.

Ids: 0-4 specials, 5-260 the 256 raw bytes, 261+ learned merges in the
order they were learned.
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from config.errors import IoError, NoMaskablePositions, SchemaError, VocabTooSmall

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
N_SPECIALS = len(SPECIAL_TOKENS)
BYTE_OFFSET = N_SPECIALS
MIN_VOCAB_SIZE = N_SPECIALS + 256
MERGES_SENTINEL = "#MERGES"

# letters, digits and single punctuation bytes are segmented separately;
# merges never cross a "." "/" "-" boundary
_CHUNK_RE = re.compile(rb"[A-Za-z]+|[0-9]+|[^A-Za-z0-9]")


def _chunks(text: str) -> List[bytes]:
    return _CHUNK_RE.findall(text.encode("utf-8"))


class Vocab:
    def __init__(self, merges: Sequence[Tuple[int, int]]):
        self.merges: List[Tuple[int, int]] = [tuple(m) for m in merges]
        self.pieces: List[bytes] = [s.encode() for s in SPECIAL_TOKENS] + [bytes([b]) for b in range(256)]
        for rank, (left, right) in enumerate(self.merges):
            if not (N_SPECIALS <= left < len(self.pieces) and N_SPECIALS <= right < len(self.pieces)):
                raise SchemaError(f"merge {rank} refers to unknown ids ({left}, {right})")
            self.pieces.append(self.pieces[left] + self.pieces[right])
        # duplicate byte strings resolve to the lowest id
        self.id_of: Dict[bytes, int] = {}
        for idx in range(len(self.pieces) - 1, N_SPECIALS - 1, -1):
            self.id_of[self.pieces[idx]] = idx
        self.max_piece_len = max(len(p) for p in self.pieces[N_SPECIALS:])
        self._cache: Dict[bytes, Tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.pieces)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.merges == other.merges

    @property
    def size(self) -> int:
        return len(self.pieces)

    def segment_chunk(self, chunk: bytes) -> Tuple[int, ...]:
        """Greedy longest match: at each position take the longest known piece."""
        if chunk in self._cache:
            return self._cache[chunk]
        ids = []
        pos = 0
        while pos < len(chunk):
            # every single byte is a piece, so width 1 always matches
            for width in range(min(self.max_piece_len, len(chunk) - pos), 0, -1):
                piece_id = self.id_of.get(chunk[pos:pos + width])
                if piece_id is not None:
                    break
            ids.append(piece_id)
            pos += width
        result = tuple(ids)
        self._cache[chunk] = result
        return result

    def encode_pieces(self, text: str) -> List[int]:
        out: List[int] = []
        for chunk in _chunks(text):
            out.extend(self.segment_chunk(chunk))
        return out

    def piece_bytes(self, token_id: int) -> bytes:
        return self.pieces[token_id]

    def decode(self, ids: Iterable[int]) -> str:
        data = b"".join(self.pieces[i] for i in ids if i >= N_SPECIALS)
        return data.decode("utf-8", errors="replace")

    def to_dict(self) -> Dict:
        return {"merges": [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocab":
        return cls([tuple(m) for m in data["merges"]])

    def save(self, path: str) -> None:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        lines = list(SPECIAL_TOKENS)
        lines += [piece.hex() for piece in self.pieces[N_SPECIALS:]]
        lines.append(MERGES_SENTINEL)
        lines += [f"{left} {right}" for left, right in self.merges]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        vocab_file = Path(path)
        if not vocab_file.exists():
            raise IoError(f"vocab file not found: {path}")
        lines = vocab_file.read_text(encoding="utf-8").splitlines()
        if lines[:N_SPECIALS] != SPECIAL_TOKENS or MERGES_SENTINEL not in lines:
            raise SchemaError(f"{path} is not a vocab file")
        sentinel = lines.index(MERGES_SENTINEL)
        merges = [tuple(int(x) for x in line.split()) for line in lines[sentinel + 1:] if line.strip()]
        vocab = cls(merges)
        stored = [bytes.fromhex(line) for line in lines[N_SPECIALS:sentinel]]
        if stored != vocab.pieces[N_SPECIALS:]:
            raise SchemaError(f"pieces in {path} do not match its merge history")
        return vocab


def _merge(ids: List[int], pair: Tuple[int, int], new_id: int) -> List[int]:
    out = []
    i = 0
    while i < len(ids):
        if i < len(ids) - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_vocab(corpus: Iterable[str], vocab_size: int, seed: int = 0) -> Vocab:
    if vocab_size < MIN_VOCAB_SIZE:
        raise VocabTooSmall(f"vocab_size must be >= {MIN_VOCAB_SIZE}, got {vocab_size}")

    chunk_counts: Counter = Counter()
    for text in corpus:
        chunk_counts.update(_chunks(text))
    words = [[BYTE_OFFSET + b for b in chunk] for chunk in chunk_counts]
    freqs = list(chunk_counts.values())

    rng = np.random.default_rng(seed)
    merges: List[Tuple[int, int]] = []
    for step in range(vocab_size - MIN_VOCAB_SIZE):
        pair_counts: Counter = Counter()
        for word, freq in zip(words, freqs):
            for pair in zip(word, word[1:]):
                pair_counts[pair] += freq
        if not pair_counts:
            logger.info("Corpus exhausted after %d merges (requested %d)", step, vocab_size - MIN_VOCAB_SIZE)
            break
        best = max(pair_counts.values())
        tied = sorted(pair for pair, count in pair_counts.items() if count == best)
        pair = tied[int(rng.integers(len(tied)))] if len(tied) > 1 else tied[0]
        new_id = MIN_VOCAB_SIZE + step
        words = [_merge(word, pair, new_id) if len(word) > 1 else word for word in words]
        merges.append(pair)

    vocab = Vocab(merges)
    logger.info("Trained vocab: %d pieces (%d merges)", len(vocab), len(merges))
    return vocab


@dataclass(frozen=True)
class TokenSeq:
    ids: np.ndarray
    attn_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def encode(url: str, v: Vocab, max_len: int) -> TokenSeq:
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    payload = v.encode_pieces(url)[: max_len - 2]
    ids = [CLS] + payload + [SEP]
    n_real = len(ids)
    ids += [PAD] * (max_len - n_real)
    attn_mask = np.zeros(max_len, dtype=np.int64)
    attn_mask[:n_real] = 1
    return TokenSeq(np.asarray(ids, dtype=np.int64), attn_mask)


def encode_batch(urls: Sequence[str], v: Vocab, max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    seqs = [encode(url, v, max_len) for url in urls]
    if not seqs:
        return np.zeros((0, max_len), dtype=np.int64), np.zeros((0, max_len), dtype=np.int64)
    return np.stack([s.ids for s in seqs]), np.stack([s.attn_mask for s in seqs])


class ReplacementKind(Enum):
    MASK = "Mask"
    RANDOM = "Random"
    KEEP = "Keep"


@dataclass(frozen=True)
class MaskedSeq:
    ids: np.ndarray
    attn_mask: np.ndarray
    mask_positions: np.ndarray
    original_ids: np.ndarray
    replacement_kind: Tuple[ReplacementKind, ...]

    def restore(self) -> TokenSeq:
        ids = self.ids.copy()
        ids[self.mask_positions] = self.original_ids
        return TokenSeq(ids, self.attn_mask.copy())


def maskable_positions(s: TokenSeq) -> np.ndarray:
    return np.flatnonzero((s.attn_mask == 1) & (s.ids >= N_SPECIALS))


def mask_tokens(s: TokenSeq, rate: float = 0.15, seed: int = 0, *, vocab_size: int) -> MaskedSeq:
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must be in (0, 1), got {rate}")
    candidates = maskable_positions(s)
    if len(candidates) == 0:
        raise NoMaskablePositions("sequence has only CLS/SEP/PAD tokens")

    rng = np.random.default_rng(seed)
    selected = candidates[rng.random(len(candidates)) < rate]
    if len(selected) == 0:
        selected = candidates[[int(rng.integers(len(candidates)))]]

    ids = s.ids.copy()
    original = ids[selected].copy()
    draws = rng.random(len(selected))
    kinds = []
    for pos, draw in zip(selected, draws):
        if draw < 0.8:
            ids[pos] = MASK
            kinds.append(ReplacementKind.MASK)
        elif draw < 0.9:
            ids[pos] = int(rng.integers(N_SPECIALS, vocab_size))
            kinds.append(ReplacementKind.RANDOM)
        else:
            kinds.append(ReplacementKind.KEEP)
    return MaskedSeq(ids, s.attn_mask.copy(), selected, original, tuple(kinds))
