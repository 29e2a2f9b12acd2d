"""Bitrate accounting, codebook statistics, Huffman coding and the FSQB container.

Container layout (all integers little-endian)::

    "FSQB" | version u8 (=1) | mode u8 (0 raw, 1 huffman) | d u8 | n_stages u8
    per stage: n_dims u8, then n_dims x u32 level counts
    frame_rate numerator u32 | denominator u32 | frame count u64
    huffman only: symbol count u32, then symbol count x u8 code lengths
    payload: tokens frame by frame, stage by stage, MSB-first, zero padded
    crc32 u32 over every preceding byte

Raw mode writes each stage token with ``ceil(log2(codebook))`` bits. Huffman
mode uses one canonical code shared by all stages; a zero length marks a
symbol without a code.
"""

from __future__ import annotations

import heapq
import math
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CoverageError,
    InvalidCodebook,
    InvalidConfig,
    NoData,
    ParseError,
)

MAGIC = b"FSQB"
VERSION = 1
MODE_RAW = 0
MODE_HUFFMAN = 1
_MODES = {"raw": MODE_RAW, "huffman": MODE_HUFFMAN}
MAX_TOKEN_BITS = 63


def _as_fraction(x) -> Fraction:
    if isinstance(x, float):
        return Fraction(x).limit_denominator(1 << 32)
    return Fraction(x)


def token_bits(codebook_size: int) -> int:
    """Bits needed for one token: ``ceil(log2(k))`` computed on integers."""
    if codebook_size < 2:
        raise InvalidCodebook(f"codebook size must be >= 2, got {codebook_size}")
    return (int(codebook_size) - 1).bit_length()


def bps(frame_rate, codebook_sizes: Iterable[int]) -> Fraction:
    """Bits per second for one token per stage per frame.

    Exact: ``bps(12.5, [16384, 8192]) == Fraction(675, 2)``.
    """
    rate = _as_fraction(frame_rate)
    if rate <= 0:
        raise InvalidConfig(f"frame rate must be positive, got {frame_rate}")
    return rate * sum(token_bits(k) for k in codebook_sizes)


def bps_for_levels(frame_rate, levels: int, d: int, stages: int = 1) -> Fraction:
    return bps(frame_rate, [levels**d] * stages)


# -- histograms -------------------------------------------------------------


@dataclass(frozen=True)
class CodebookHistogram:
    """Sparse token counts over a codebook of size ``N``."""

    N: int
    symbols: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_tokens(cls, tokens, N: int) -> "CodebookHistogram":
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= N):
            raise InvalidCodebook(f"tokens outside codebook of size {N}")
        symbols, counts = np.unique(tokens, return_counts=True)
        return cls(N, symbols, counts.astype(np.int64))

    @classmethod
    def from_counts(cls, counts: Sequence[int], N: int | None = None) -> "CodebookHistogram":
        counts = np.asarray(counts, dtype=np.int64)
        if np.any(counts < 0):
            raise InvalidConfig("counts must be non-negative")
        nz = np.flatnonzero(counts)
        return cls(len(counts) if N is None else N, nz, counts[nz])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total

    def dense(self) -> np.ndarray:
        out = np.zeros(self.N, dtype=np.int64)
        out[self.symbols] = self.counts
        return out

    def merge(self, other: "CodebookHistogram") -> "CodebookHistogram":
        if other.N != self.N:
            raise InvalidConfig("cannot merge histograms over different codebooks")
        sym = np.concatenate([self.symbols, other.symbols])
        cnt = np.concatenate([self.counts, other.counts])
        uniq, inv = np.unique(sym, return_inverse=True)
        return CodebookHistogram(self.N, uniq, np.bincount(inv, weights=cnt).astype(np.int64))


def normalized_entropy(h: CodebookHistogram) -> float:
    """Shannon entropy in bits divided by ``log2(N)``; unseen codes count toward ``N``."""
    if h.total <= 0:
        raise NoData("histogram is empty")
    if h.N < 2:
        raise InvalidCodebook("codebook size must be >= 2")
    p = h.counts[h.counts > 0] / h.total
    return float(-(p * np.log2(p)).sum() / math.log2(h.N))


# -- Huffman ----------------------------------------------------------------


@dataclass(frozen=True)
class HuffmanTable:
    """Canonical prefix code given by per-symbol code lengths."""

    lengths: dict[int, int]
    codes: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "codes", canonical_codes(self.lengths))

    def kraft_sum(self) -> Fraction:
        return sum((Fraction(1, 2**l) for l in self.lengths.values()), Fraction(0))

    def codeword(self, symbol: int) -> str:
        return format(self.codes[symbol], f"0{self.lengths[symbol]}b")

    def average_length(self, h: CodebookHistogram) -> Fraction:
        bits = 0
        for s, c in zip(h.symbols.tolist(), h.counts.tolist()):
            if c == 0:
                continue
            if s not in self.lengths:
                raise CoverageError(f"symbol {s} has no code")
            bits += c * self.lengths[s]
        return Fraction(bits, h.total)


def canonical_codes(lengths: dict[int, int]) -> dict[int, int]:
    """Assign codewords in (length, symbol) order."""
    codes = {}
    code = 0
    prev = 0
    for sym, length in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        if length <= 0:
            raise InvalidConfig(f"code length for symbol {sym} must be positive")
        code <<= length - prev
        codes[sym] = code
        code += 1
        prev = length
    if lengths and code > 1 << prev:
        raise InvalidConfig("code lengths violate the Kraft inequality")
    return codes


def huffman_lengths(weights: dict[int, int]) -> dict[int, int]:
    """Optimal code lengths for symbols with positive weight.

    Ties are broken by insertion order so the result is deterministic. A
    lone symbol gets length 1 so every token occupies at least one bit.
    """
    items = [(w, s) for s, w in sorted(weights.items()) if w > 0]
    if not items:
        raise NoData("no symbol has a nonzero count")
    if len(items) == 1:
        return {items[0][1]: 1}
    heap = [(w, i, (s,)) for i, (w, s) in enumerate(items)]
    heapq.heapify(heap)
    depth = {s: 0 for _, s in items}
    tiebreak = len(heap)
    while len(heap) > 1:
        w1, _, a = heapq.heappop(heap)
        w2, _, b = heapq.heappop(heap)
        for s in a + b:
            depth[s] += 1
        heapq.heappush(heap, (w1 + w2, tiebreak, a + b))
        tiebreak += 1
    return depth


def huffman_build(h: CodebookHistogram) -> HuffmanTable:
    weights = dict(zip(h.symbols.tolist(), h.counts.tolist()))
    return HuffmanTable(huffman_lengths(weights))


def huffman_bitrate(h: CodebookHistogram, table: HuffmanTable, tokens_per_second) -> Fraction:
    """Average coded bits per token times the token rate."""
    if h.total <= 0:
        raise NoData("histogram is empty")
    return table.average_length(h) * _as_fraction(tokens_per_second)


def entropy_bits(h: CodebookHistogram) -> float:
    p = h.counts[h.counts > 0] / h.total
    return float(-(p * np.log2(p)).sum())


# -- token streams ----------------------------------------------------------


@dataclass(frozen=True)
class TokenStream:
    """Per-frame stage tokens plus the header needed to interpret them."""

    frame_rate: Fraction
    d: int
    stage_levels: tuple[tuple[int, ...], ...]
    tokens: np.ndarray  # (frames, stages) int64

    def __post_init__(self):
        rate = _as_fraction(self.frame_rate)
        levels = tuple(tuple(int(L) for L in stage) for stage in self.stage_levels)
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.ndim == 1 and tokens.size == 0:
            tokens = tokens.reshape(0, len(levels))
        object.__setattr__(self, "frame_rate", rate)
        object.__setattr__(self, "stage_levels", levels)
        object.__setattr__(self, "tokens", tokens)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.d <= 255:
            raise InvalidConfig(f"d must fit in u8 and be >= 1, got {self.d}")
        if not 1 <= len(self.stage_levels) <= 255:
            raise InvalidConfig("stage count must be in [1, 255]")
        if self.frame_rate <= 0:
            raise InvalidConfig("frame rate must be positive")
        if self.frame_rate.numerator >= 1 << 32 or self.frame_rate.denominator >= 1 << 32:
            raise InvalidConfig("frame rate must be representable as u32/u32")
        for stage in self.stage_levels:
            if not 1 <= len(stage) <= 255:
                raise InvalidConfig("each stage needs 1..255 dimensions")
            if any(not 2 <= L < 1 << 32 for L in stage):
                raise InvalidConfig("level counts must lie in [2, 2**32)")
        for k in self.codebook_sizes:
            if token_bits(k) > MAX_TOKEN_BITS:
                raise InvalidCodebook(f"codebook of size {k} exceeds {MAX_TOKEN_BITS} bits")
        if self.tokens.ndim != 2 or self.tokens.shape[1] != len(self.stage_levels):
            raise InvalidConfig(
                f"tokens must be shaped (frames, {len(self.stage_levels)}), got {self.tokens.shape}"
            )
        if self.tokens.size:
            sizes = np.array(self.codebook_sizes, dtype=object)
            if self.tokens.min() < 0 or any(
                int(self.tokens[:, s].max()) >= sizes[s] for s in range(self.n_stages)
            ):
                raise InvalidCodebook("token outside its stage codebook")

    @property
    def n_frames(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_stages(self) -> int:
        return len(self.stage_levels)

    @property
    def codebook_sizes(self) -> list[int]:
        return [math.prod(stage) for stage in self.stage_levels]

    def bps(self) -> Fraction:
        return bps(self.frame_rate, self.codebook_sizes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenStream):
            return NotImplemented
        return (
            self.frame_rate == other.frame_rate
            and self.d == other.d
            and self.stage_levels == other.stage_levels
            and np.array_equal(self.tokens, other.tokens)
        )


def stage_histograms(ts: TokenStream) -> list[CodebookHistogram]:
    return [
        CodebookHistogram.from_tokens(ts.tokens[:, s], k)
        for s, k in enumerate(ts.codebook_sizes)
    ]


def pooled_histogram(ts: TokenStream) -> CodebookHistogram:
    return CodebookHistogram.from_tokens(ts.tokens, max(ts.codebook_sizes))


# -- packing ----------------------------------------------------------------


def _header(ts: TokenStream, mode: int) -> bytearray:
    out = bytearray(MAGIC)
    out += struct.pack("<BBBB", VERSION, mode, ts.d, ts.n_stages)
    for stage in ts.stage_levels:
        out += struct.pack("<B", len(stage))
        out += struct.pack(f"<{len(stage)}I", *stage)
    out += struct.pack("<IIQ", ts.frame_rate.numerator, ts.frame_rate.denominator, ts.n_frames)
    return out


def _raw_payload(ts: TokenStream) -> bytes:
    widths = [token_bits(k) for k in ts.codebook_sizes]
    if ts.n_frames == 0:
        return b""
    cols = []
    for s, w in enumerate(widths):
        shifts = np.arange(w - 1, -1, -1, dtype=np.uint64)
        tok = ts.tokens[:, s].astype(np.uint64)
        cols.append(((tok[:, None] >> shifts) & np.uint64(1)).astype(np.uint8))
    bits = np.concatenate(cols, axis=1).reshape(-1)
    return np.packbits(bits).tobytes()


def _bits_to_bytes(bitstring: str) -> bytes:
    if not bitstring:
        return b""
    pad = -len(bitstring) % 8
    bitstring += "0" * pad
    return int(bitstring, 2).to_bytes(len(bitstring) // 8, "big")


def pack_stream(ts: TokenStream, mode: str = "raw") -> bytes:
    if mode not in _MODES:
        raise InvalidConfig(f"unknown mode {mode!r}; expected raw or huffman")
    ts.validate()
    out = _header(ts, _MODES[mode])
    if mode == "raw":
        out += _raw_payload(ts)
    else:
        flat = ts.tokens.reshape(-1)
        if flat.size:
            table = huffman_build(CodebookHistogram.from_tokens(flat, int(flat.max()) + 1))
            n_symbols = int(flat.max()) + 1
        else:
            table = None
            n_symbols = 0
        out += struct.pack("<I", n_symbols)
        lengths = bytearray(n_symbols)
        if table is not None:
            if max(table.lengths.values()) > 255:
                raise InvalidConfig("Huffman code length exceeds 255 bits")
            for s, l in table.lengths.items():
                lengths[s] = l
            words = {s: table.codeword(s) for s in table.lengths}
            out += lengths
            out += _bits_to_bytes("".join(words[t] for t in flat.tolist()))
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ParseError(f"truncated while reading {what}", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def _decode_huffman(bits: str, lengths: dict[int, int], n_tokens: int, base: int) -> list[int]:
    codes = canonical_codes(lengths)
    lookup = {(lengths[s], c): s for s, c in codes.items()}
    max_len = max(lengths.values())
    out = []
    pos = 0
    nbits = len(bits)
    for _ in range(n_tokens):
        start = pos
        code = 0
        length = 0
        while True:
            if pos >= nbits:
                raise ParseError("payload ends inside a codeword", base + start // 8)
            code = (code << 1) | (bits[pos] == "1")
            pos += 1
            length += 1
            sym = lookup.get((length, code))
            if sym is not None:
                out.append(sym)
                break
            if length >= max_len:
                raise ParseError("bit pattern matches no codeword", base + start // 8)
    if nbits - pos >= 8 or "1" in bits[pos:]:
        raise ParseError("unexpected trailing payload bits", base + pos // 8)
    return out


def unpack_stream(data: bytes) -> TokenStream:
    """Parse an FSQB container; any fault raises :class:`ParseError`."""
    data = bytes(data)
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise ParseError("bad magic", 0)
    r.pos = 4
    version, mode, d, n_stages = r.take("<BBBB", "header")
    if version != VERSION:
        raise ParseError(f"unsupported version {version}", 4)
    if mode not in (MODE_RAW, MODE_HUFFMAN):
        raise ParseError(f"unknown mode {mode}", 5)
    if d == 0:
        raise ParseError("d must be >= 1", 6)
    if n_stages == 0:
        raise ParseError("stream must have at least one stage", 7)
    stage_levels = []
    for _ in range(n_stages):
        at = r.pos
        (n_dims,) = r.take("<B", "stage dimension count")
        if n_dims == 0:
            raise ParseError("stage has no dimensions", at)
        at = r.pos
        levels = r.take(f"<{n_dims}I", "level counts")
        if any(L < 2 for L in levels):
            raise ParseError("level count below 2", at)
        if token_bits(math.prod(levels)) > MAX_TOKEN_BITS:
            raise ParseError("stage codebook too large", at)
        stage_levels.append(tuple(levels))
    at = r.pos
    num, den, n_frames = r.take("<IIQ", "frame rate and frame count")
    if num == 0 or den == 0:
        raise ParseError("frame rate must be a positive rational", at)
    sizes = [math.prod(s) for s in stage_levels]
    n_tokens = n_frames * n_stages
    body_end = len(data) - 4
    if body_end < r.pos:
        raise ParseError("truncated before checksum", len(data))

    if mode == MODE_RAW:
        widths = [token_bits(k) for k in sizes]
        nbytes = -(-n_frames * sum(widths) // 8)
        start = r.pos
        if start + nbytes != body_end:
            raise ParseError(
                f"payload holds {body_end - start} bytes, expected {nbytes}", start
            )
        _check_crc(data, body_end)
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=start))
        frame_bits = sum(widths)
        if np.any(bits[n_frames * frame_bits:]):
            raise ParseError("nonzero padding bits", body_end - 1)
        bits = bits[: n_frames * frame_bits].reshape(n_frames, frame_bits)
        tokens = np.zeros((n_frames, n_stages), dtype=np.int64)
        col = 0
        for s, w in enumerate(widths):
            weights = (np.uint64(1) << np.arange(w - 1, -1, -1, dtype=np.uint64))
            tokens[:, s] = (bits[:, col : col + w].astype(np.uint64) * weights).sum(axis=1).astype(np.int64)
            bad = np.flatnonzero(tokens[:, s] >= sizes[s])
            if bad.size:
                bit_pos = int(bad[0]) * frame_bits + col
                raise ParseError(f"stage {s} token out of range", start + bit_pos // 8)
            col += w
    else:
        at = r.pos
        (n_symbols,) = r.take("<I", "symbol count")
        if r.pos + n_symbols > body_end:
            raise ParseError("truncated code-length table", r.pos)
        raw_lengths = np.frombuffer(data, dtype=np.uint8, count=n_symbols, offset=r.pos)
        r.pos += n_symbols
        used = np.flatnonzero(raw_lengths)
        lengths = dict(zip(used.tolist(), raw_lengths[used].tolist()))
        if n_tokens and not lengths:
            raise ParseError("code table is empty but frames are present", at)
        if lengths:
            longest = max(lengths.values())
            if sum(1 << (longest - l) for l in lengths.values()) > 1 << longest:
                raise ParseError("code lengths violate the Kraft inequality", at + 4)
        start = r.pos
        avail_bits = (body_end - start) * 8
        if n_tokens > avail_bits:
            raise ParseError("payload too short for the frame count", start)
        _check_crc(data, body_end)
        nbytes = body_end - start
        bits = format(int.from_bytes(data[start:body_end], "big"), f"0{nbytes * 8}b") if nbytes else ""
        flat = _decode_huffman(bits, lengths, n_tokens, start) if n_tokens else []
        if not n_tokens and nbytes:
            raise ParseError("payload present for an empty stream", start)
        tokens = np.asarray(flat, dtype=np.int64).reshape(n_frames, n_stages)
        for s in range(n_stages):
            bad = np.flatnonzero(tokens[:, s] >= sizes[s]) if n_frames else []
            if len(bad):
                raise ParseError(f"stage {s} token out of range", start)
    return TokenStream(Fraction(num, den), d, tuple(stage_levels), tokens)


def _check_crc(data: bytes, body_end: int) -> None:
    (stored,) = struct.unpack_from("<I", data, body_end)
    if zlib.crc32(data[:body_end]) != stored:
        raise ParseError("checksum mismatch", body_end)


def payload_size(ts: TokenStream) -> int:
    """Raw-mode payload size in bytes."""
    return -(-ts.n_frames * sum(token_bits(k) for k in ts.codebook_sizes) // 8)


def header_size(ts: TokenStream, mode: str = "raw") -> int:
    return len(_header(ts, _MODES[mode]))
