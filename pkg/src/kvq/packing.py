"""Low-bit code packing into 32-bit words.

Code ``j`` occupies bits ``[j*bits, (j+1)*bits)`` of a little-endian bit
stream (bit 0 is the LSB of word 0). 3-bit codes straddle word boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUPPORTED_BITS = (2, 3, 4)
_WORD = 32
_MASK32 = np.uint64(0xFFFFFFFF)


def n_words(count: int, bits: int) -> int:
    return -(-count * bits // _WORD)


def _check_bits(bits: int) -> None:
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")


def _check_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise ValueError(f"code out of range for {bits}-bit packing")
    return codes.astype(np.uint64)


def _scatter(words: np.ndarray, codes: np.ndarray, start: int, bits: int) -> None:
    """OR ``codes[..., j]`` into ``words`` at stream position ``start + j``.

    Works on the last axis, so a 2-D ``words`` packs one stream per row.
    ``words`` must be a contiguous array (it is modified through a reshape view).
    """
    n = codes.shape[-1]
    if n == 0:
        return
    flat = words.reshape(-1, words.shape[-1])
    c = codes.reshape(-1, n)
    bitpos = (start + np.arange(n, dtype=np.int64)) * bits
    w = np.broadcast_to(bitpos // _WORD, c.shape)
    off = (bitpos % _WORD).astype(np.uint64)
    r = np.broadcast_to(np.arange(c.shape[0])[:, None], c.shape)
    np.bitwise_or.at(flat, (r, w), ((c << off) & _MASK32).astype(np.uint32))
    straddle = off + np.uint64(bits) > np.uint64(_WORD)
    if straddle.any():
        hi = (c[:, straddle] >> (np.uint64(_WORD) - off[straddle])).astype(np.uint32)
        np.bitwise_or.at(flat, (r[:, straddle], w[:, straddle] + 1), hi)


def _gather(words: np.ndarray, idx: np.ndarray, bits: int) -> np.ndarray:
    """Extract codes at stream positions ``idx`` along the last axis of ``words``."""
    idx = np.asarray(idx, dtype=np.int64)
    bitpos = idx * bits
    w = bitpos // _WORD
    off = (bitpos % _WORD).astype(np.uint64)
    w64 = words.astype(np.uint64)
    # pad one zero word so the straddle read never runs off the end
    w64 = np.concatenate([w64, np.zeros(w64.shape[:-1] + (1,), dtype=np.uint64)], axis=-1)
    pair = w64[..., w] | (w64[..., w + 1] << np.uint64(_WORD))
    return ((pair >> off) & np.uint64((1 << bits) - 1)).astype(np.uint8)


@dataclass(frozen=True)
class PackedCodes:
    bits: int
    count: int
    words: np.ndarray  # uint32

    def __post_init__(self) -> None:
        _check_bits(self.bits)
        if len(self.words) != n_words(self.count, self.bits):
            raise ValueError("word count does not match count*bits")

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, j: int) -> int:
        return extract(self, j)


def pack(codes, bits: int) -> PackedCodes:
    _check_bits(bits)
    c = _check_codes(np.asarray(codes).reshape(-1), bits)
    words = np.zeros(n_words(len(c), bits), dtype=np.uint32)
    _scatter(words, c, 0, bits)
    return PackedCodes(bits, len(c), words)


def unpack(p: PackedCodes) -> np.ndarray:
    if p.count == 0:
        return np.zeros(0, dtype=np.uint8)
    return _gather(p.words, np.arange(p.count), p.bits)


def extract(p: PackedCodes, j: int) -> int:
    """Random access to code ``j`` touching at most two words."""
    if not 0 <= j < p.count:
        raise IndexError(j)
    start = j * p.bits
    w, off = divmod(start, _WORD)
    val = int(p.words[w]) >> off
    if off + p.bits > _WORD:
        val |= int(p.words[w + 1]) << (_WORD - off)
    return val & ((1 << p.bits) - 1)


class PackedStream:
    """Append-only packed code stream with amortized word-buffer growth."""

    def __init__(self, bits: int, capacity_words: int = 64):
        _check_bits(bits)
        self.bits = bits
        self.count = 0
        self._words = np.zeros(max(capacity_words, 1), dtype=np.uint32)

    def _reserve(self, total_words: int) -> None:
        if total_words > len(self._words):
            grown = np.zeros(max(total_words, 2 * len(self._words)), dtype=np.uint32)
            grown[: len(self._words)] = self._words
            self._words = grown

    def extend(self, codes) -> None:
        c = _check_codes(np.asarray(codes).reshape(-1), self.bits)
        self._reserve(n_words(self.count + len(c), self.bits))
        _scatter(self._words, c, self.count, self.bits)
        self.count += len(c)

    @property
    def words(self) -> np.ndarray:
        return self._words[: n_words(self.count, self.bits)]

    def snapshot(self) -> PackedCodes:
        return PackedCodes(self.bits, self.count, self.words.copy())

    def unpack(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(0, dtype=np.uint8)
        return _gather(self.words, np.arange(self.count), self.bits)


class PackedRows:
    """``rows`` independent packed streams that grow together, one column at a time.

    Used for channel-major Key codes: row ``c`` holds channel ``c``'s codes
    for every token, so appending a token adds one code to each row.
    """

    def __init__(self, rows: int, bits: int, capacity_words: int = 16):
        _check_bits(bits)
        self.rows = rows
        self.bits = bits
        self.count = 0
        self._words = np.zeros((rows, max(capacity_words, 1)), dtype=np.uint32)

    def _reserve(self, total_words: int) -> None:
        cap = self._words.shape[1]
        if total_words > cap:
            grown = np.zeros((self.rows, max(total_words, 2 * cap)), dtype=np.uint32)
            grown[:, :cap] = self._words
            self._words = grown

    def extend_columns(self, codes) -> None:
        """Append ``codes[rows, n]`` (n new columns)."""
        c = np.asarray(codes)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[0] != self.rows:
            raise ValueError(f"expected {self.rows} rows, got {c.shape[0]}")
        c = _check_codes(c, self.bits)
        self._reserve(n_words(self.count + c.shape[1], self.bits))
        _scatter(self._words, c, self.count, self.bits)
        self.count += c.shape[1]

    @property
    def words(self) -> np.ndarray:
        return self._words[:, : n_words(self.count, self.bits)]

    def row(self, r: int) -> PackedCodes:
        return PackedCodes(self.bits, self.count, self.words[r].copy())

    def unpack(self) -> np.ndarray:
        """All codes as ``[rows, count]``."""
        if self.count == 0:
            return np.zeros((self.rows, 0), dtype=np.uint8)
        return _gather(self.words, np.arange(self.count), self.bits)
