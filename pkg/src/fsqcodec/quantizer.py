"""Symmetric tanh-bounded finite scalar quantization.

Each latent dimension is squashed with ``tanh`` and rounded onto ``L``
evenly spaced levels spanning ``[-1, 1]``. Because the levels are
symmetric around zero for any ``L`` (odd or even), the grid always
contains both end points and, for odd ``L``, the origin.

Level values are always produced as ``(2 * digit - (L - 1)) / (L - 1)``;
a single division of an integer numerator keeps every level bit-exact and
exactly symmetric, which the token bijection relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import (
    InvalidConfig,
    InvalidInput,
    InvalidLevelCount,
    InvalidNoise,
    OffLatticeError,
    OutOfRangeError,
    ShapeError,
)

# Level counts sampled during training of the reference model.
TRAINING_LEVELS = (17, 9, 5)
# Probability of using the noise proxy instead of straight-through rounding.
NOISE_MODE_PROBABILITY = 0.5

_LATTICE_TOL = 1e-9


def _check_levels(L: int) -> int:
    if isinstance(L, bool) or int(L) != L or L < 2:
        raise InvalidLevelCount(f"level count must be an integer >= 2, got {L!r}")
    return int(L)


@dataclass(frozen=True)
class LevelSet:
    L: int
    positions: tuple[float, ...]

    def __contains__(self, value: float) -> bool:
        return value in self.positions

    def __len__(self) -> int:
        return self.L

    @property
    def step(self) -> float:
        return 2.0 / (self.L - 1)


def level_positions(L: int) -> LevelSet:
    """Return the ``L`` quantization points ``2i/(L-1) - 1``."""
    L = _check_levels(L)
    return LevelSet(L, tuple((2 * i - (L - 1)) / (L - 1) for i in range(L)))


def _to_fraction(rate) -> Fraction:
    if isinstance(rate, Fraction):
        return rate
    if isinstance(rate, str):
        return Fraction(rate)
    if isinstance(rate, float):
        if not math.isfinite(rate):
            raise InvalidConfig(f"frame rate must be finite, got {rate}")
        return Fraction(rate).limit_denominator(1 << 32)
    return Fraction(rate)


@dataclass(frozen=True)
class QuantizerSpec:
    """Per-dimension level counts plus the latent frame rate."""

    levels: tuple[int, ...]
    frame_rate: Fraction = field(default=Fraction(25))

    def __post_init__(self):
        levels = tuple(_check_levels(L) for L in self.levels)
        if not levels:
            raise InvalidConfig("quantizer needs at least one dimension")
        rate = _to_fraction(self.frame_rate)
        if rate <= 0:
            raise InvalidConfig(f"frame rate must be positive, got {rate}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "frame_rate", rate)

    @classmethod
    def uniform(cls, L: int, d: int, frame_rate=25) -> "QuantizerSpec":
        if d < 1:
            raise InvalidConfig(f"dimension must be >= 1, got {d}")
        return cls((L,) * d, frame_rate)

    @property
    def d(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        # Python ints are arbitrary precision, so the product cannot overflow.
        return math.prod(self.levels)


@dataclass(frozen=True)
class QuantizedFrame:
    values: tuple[float, ...]
    index: int


def _digits_of(x: np.ndarray, L) -> np.ndarray:
    """Lattice digit of ``Q_L(x)``; works elementwise with broadcast ``L``."""
    Lm1 = np.asarray(L, dtype=np.float64) - 1
    digit = np.floor(Lm1 * (np.tanh(x) + 1.0) / 2.0 + 0.5)
    return np.clip(digit, 0, Lm1).astype(np.int64)


def _values_of(digits: np.ndarray, L) -> np.ndarray:
    Lm1 = np.asarray(L, dtype=np.int64) - 1
    return (2 * digits - Lm1) / Lm1.astype(np.float64)


def quantize_scalar(x: float, L: int) -> float:
    """Quantize ``tanh(x)`` onto the ``L``-level grid.

    Exact mid-point inputs round up, as a mathematical floor does.
    """
    L = _check_levels(L)
    if not math.isfinite(x):
        raise InvalidInput(f"input must be finite, got {x!r}")
    digit = math.floor((L - 1) * (math.tanh(x) + 1.0) / 2.0 + 0.5)
    digit = min(max(digit, 0), L - 1)
    return (2 * digit - (L - 1)) / (L - 1)


def quantize(x, L) -> np.ndarray:
    """Vectorized :func:`quantize_scalar`; ``L`` broadcasts against ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains non-finite values")
    L_arr = np.asarray(L)
    if np.any(L_arr < 2):
        raise InvalidLevelCount(f"level counts must be >= 2, got {L}")
    return _values_of(_digits_of(x, L_arr), L_arr)


def noisy_quantize(x: float, L: int, u: float) -> float:
    """Training-time proxy: ``tanh(x)`` plus a half-step uniform offset.

    ``u`` is the caller's draw from the continuous uniform law on ``[-1, 1]``.
    The result is not snapped to the lattice.
    """
    L = _check_levels(L)
    if not abs(u) <= 1:
        raise InvalidNoise(f"noise sample must lie in [-1, 1], got {u!r}")
    return math.tanh(x) + u / (L - 1)


def noisy_quantize_array(x, L, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    u = rng.uniform(-1.0, 1.0, size=x.shape)
    return np.tanh(x) + u / (np.asarray(L, dtype=np.float64) - 1)


def _digit_from_value(value: float, L: int) -> int:
    raw = (L - 1) * (value + 1.0) / 2.0
    digit = round(raw)
    if not (abs(raw - digit) <= _LATTICE_TOL * (L - 1)) or not 0 <= digit < L:
        raise OffLatticeError(f"value {value!r} is not on the {L}-level lattice")
    return int(digit)


def token_index(values: Sequence[float], spec: QuantizerSpec) -> int:
    """Mixed-radix index of a level tuple; dimension 0 is least significant."""
    if len(values) != spec.d:
        raise ShapeError(f"expected {spec.d} values, got {len(values)}")
    index = 0
    for value, L in zip(reversed(list(values)), reversed(spec.levels)):
        index = index * L + _digit_from_value(float(value), L)
    return index


def token_to_values(index: int, spec: QuantizerSpec) -> tuple[float, ...]:
    if not 0 <= index < spec.codebook_size:
        raise OutOfRangeError(
            f"token {index} outside codebook of size {spec.codebook_size}"
        )
    out = []
    for L in spec.levels:
        index, digit = divmod(index, L)
        out.append((2 * digit - (L - 1)) / (L - 1))
    return tuple(out)


def digits_to_index(digits: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    """Pack a ``(..., d)`` digit array into mixed-radix indices."""
    digits = np.asarray(digits, dtype=np.int64)
    index = np.zeros(digits.shape[:-1], dtype=np.int64)
    for j in range(len(levels) - 1, -1, -1):
        index = index * levels[j] + digits[..., j]
    return index


def index_to_digits(index: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if np.any(index < 0) or np.any(index >= math.prod(levels)):
        raise OutOfRangeError("token outside codebook range")
    out = np.empty(index.shape + (len(levels),), dtype=np.int64)
    for j, L in enumerate(levels):
        index, out[..., j] = np.divmod(index, L)
    return out


def quantize_vector(z: Sequence[float], spec: QuantizerSpec) -> QuantizedFrame:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (spec.d,):
        raise ShapeError(f"expected a vector of length {spec.d}, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInput("input contains non-finite values")
    values = tuple(quantize_scalar(float(v), L) for v, L in zip(z, spec.levels))
    return QuantizedFrame(values, token_index(values, spec))


def quantize_frames(z, spec: QuantizerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a ``(frames, d)`` latent matrix; returns ``(values, tokens)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != spec.d:
        raise ShapeError(f"expected shape (frames, {spec.d}), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInput("input contains non-finite values")
    levels = np.asarray(spec.levels)
    digits = _digits_of(z, levels)
    return _values_of(digits, levels), digits_to_index(digits, spec.levels)


def dequantize_tokens(tokens, spec: QuantizerSpec) -> np.ndarray:
    digits = index_to_digits(tokens, spec.levels)
    return _values_of(digits, np.asarray(spec.levels))


def sample_level_config(rng: np.random.Generator, choices) -> int:
    """Draw one level count uniformly from ``choices``.

    The draw granularity (per batch, example or frame) is left to callers.
    """
    options = sorted(set(choices))
    if not options:
        raise InvalidConfig("choices must be non-empty")
    for L in options:
        _check_levels(L)
    return options[int(rng.integers(len(options)))]


def sample_training_mode(rng: np.random.Generator) -> str:
    """Pick ``"noise"`` or ``"straight_through"`` with equal probability."""
    return "noise" if rng.random() < NOISE_MODE_PROBABILITY else "straight_through"
