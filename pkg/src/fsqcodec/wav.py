"""Minimal RIFF/WAVE reader and writer for PCM-16 and float-32 audio.

The standard library ``wave`` module only handles integer PCM and reports
no byte offsets, so the chunk walk is done here directly.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig, ParseError, ResampleRequired, UnsupportedFormat

CODEC_SAMPLE_RATE = 16000
_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE
_I16_SCALE = 32768.0


@dataclass(frozen=True)
class WavAudio:
    sample_rate: int
    samples: np.ndarray  # (frames,) mono or (frames, channels)

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    def to_mono(self) -> "WavAudio":
        """Average the channels, warning when there is more than one."""
        if self.samples.ndim == 1:
            return self
        if self.channels > 1:
            warnings.warn(f"downmixing {self.channels} channels to mono", stacklevel=2)
        return WavAudio(self.sample_rate, self.samples.mean(axis=1))

    def require_rate(self, rate: int = CODEC_SAMPLE_RATE) -> "WavAudio":
        if self.sample_rate != rate:
            raise ResampleRequired(
                f"audio is {self.sample_rate} Hz but {rate} Hz is required; resample it first"
            )
        return self


@dataclass(frozen=True)
class WriteReport:
    frames: int
    clipped: int


def parse_wav(data: bytes) -> WavAudio:
    if len(data) < 12:
        raise ParseError("file shorter than the RIFF header", len(data))
    if data[:4] != b"RIFF":
        raise ParseError("missing RIFF tag", 0)
    if data[8:12] != b"WAVE":
        raise ParseError("missing WAVE tag", 8)
    pos = 12
    fmt = None
    while pos < len(data):
        if pos + 8 > len(data):
            raise ParseError("truncated chunk header", pos)
        tag = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if body + size > len(data):
            raise ParseError(f"chunk {tag!r} runs past the end of the file", pos + 4)
        if tag == b"fmt ":
            fmt = _parse_fmt(data[body : body + size], body)
        elif tag == b"data":
            if fmt is None:
                raise ParseError("data chunk before fmt chunk", pos)
            return _decode_samples(data[body : body + size], fmt, body)
        pos = body + size + (size & 1)
    raise ParseError("no data chunk", len(data))


def _parse_fmt(chunk: bytes, offset: int) -> tuple[int, int, int, int]:
    if len(chunk) < 16:
        raise ParseError("fmt chunk shorter than 16 bytes", offset)
    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", chunk)
    if tag == _EXTENSIBLE:
        if len(chunk) < 26:
            raise ParseError("extensible fmt chunk too short", offset)
        (tag,) = struct.unpack_from("<H", chunk, 24)
    if (tag, bits) not in ((_PCM, 16), (_FLOAT, 32)):
        raise UnsupportedFormat(f"format tag {tag} with {bits} bits is not PCM-16 or float-32")
    if channels < 1:
        raise ParseError("channel count is zero", offset + 2)
    if rate < 1:
        raise ParseError("sample rate is zero", offset + 4)
    if block_align != channels * bits // 8:
        raise ParseError(f"block align {block_align} does not match {channels} x {bits} bits", offset + 12)
    return tag, channels, rate, block_align


def _decode_samples(body: bytes, fmt, offset: int) -> WavAudio:
    tag, channels, rate, block_align = fmt
    if len(body) % block_align:
        raise ParseError("data chunk is not a whole number of frames", offset + len(body))
    if tag == _PCM:
        raw = np.frombuffer(body, dtype="<i2").astype(np.float64) / _I16_SCALE
    else:
        raw = np.frombuffer(body, dtype="<f4").astype(np.float64)
        if not np.isfinite(raw).all():
            bad = int(np.flatnonzero(~np.isfinite(raw))[0])
            raise ParseError("non-finite float sample", offset + 4 * bad)
    samples = raw.reshape(-1, channels)
    return WavAudio(rate, samples[:, 0].copy() if channels == 1 else samples)


def wav_read(path) -> WavAudio:
    return parse_wav(Path(path).read_bytes())


def encode_wav(audio: WavAudio, fmt: str = "pcm16") -> tuple[bytes, WriteReport]:
    x = np.asarray(audio.samples, dtype=np.float64)
    frames = x.reshape(len(x), -1)
    channels = frames.shape[1]
    if fmt == "pcm16":
        scaled = np.round(frames * _I16_SCALE)
        clipped = int(np.count_nonzero((scaled < -32768) | (scaled > 32767)))
        payload = np.clip(scaled, -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif fmt == "float32":
        clipped = int(np.count_nonzero(np.abs(frames) > 1.0))
        payload = np.clip(frames, -1.0, 1.0).astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise InvalidConfig(f"unknown sample format {fmt!r}")
    block = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, channels, audio.sample_rate, audio.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload, WriteReport(len(frames), clipped)


def wav_write(path, audio: WavAudio, fmt: str = "pcm16") -> WriteReport:
    """Write ``audio``, saturating out-of-range samples and counting them."""
    data, report = encode_wav(audio, fmt)
    Path(path).write_bytes(data)
    return report
