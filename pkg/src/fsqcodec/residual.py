"""Post-hoc residual decomposition of a single FSQ code.

A bottleneck trained with ``L = 2**n + 1`` levels can be re-read as a
cascade of coarser quantizers. Stage ``k`` quantizes the running residual
after magnifying it by ``(2n)**k`` and shrinks the result back, so each
stage emits a token over the same ``L**d`` codebook. Summing the stage
outputs and clipping to ``[-1, 1]`` gives the reconstruction.

Stage quantizers apply the full tanh quantizer at every stage, exactly
as the single-stage quantizer does.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import (
    CapacityError,
    DecodeError,
    InvalidConfig,
    InvalidInput,
    OutOfRangeError,
    ResidualUnsupported,
)
from .quantizer import (
    _digits_of,
    _values_of,
    digits_to_index,
    index_to_digits,
    quantize,
)

MAX_ENUMERATION = 1 << 24


def validate_residual_levels(L: int) -> int:
    """Return ``n`` such that ``L == 2**n + 1``."""
    if isinstance(L, bool) or int(L) != L or L < 3:
        raise ResidualUnsupported(f"residual decomposition needs L >= 3, got {L!r}")
    m = int(L) - 1
    if m & (m - 1):
        raise ResidualUnsupported(f"L - 1 = {m} is not a power of two")
    return m.bit_length() - 1


@dataclass(frozen=True)
class ResidualSpec:
    L: int
    stages: int = 2

    def __post_init__(self):
        validate_residual_levels(self.L)
        if self.stages < 1:
            raise InvalidConfig(f"stages must be >= 1, got {self.stages}")

    @property
    def n(self) -> int:
        return validate_residual_levels(self.L)

    @property
    def scale(self) -> int:
        """Magnification applied per stage."""
        return 2 * self.n

    @property
    def fine_levels(self) -> int:
        """Level count of the lattice the clipped sums are meant to land on."""
        return (self.L - 1) ** self.stages + 1


@dataclass(frozen=True)
class ResidualFrame:
    stage_values: tuple[np.ndarray, ...]
    stage_tokens: tuple[int, ...]
    reconstruction: np.ndarray


def _decompose_digits(z: np.ndarray, spec: ResidualSpec) -> list[np.ndarray]:
    """Stage digits for an array ``z`` of any shape."""
    acc = np.zeros_like(z)
    digits = []
    for k in range(spec.stages):
        gain = float(spec.scale**k)
        dig = _digits_of(gain * (z - acc), spec.L)
        acc = acc + _values_of(dig, spec.L) / gain
        digits.append(dig)
    return digits


def _stage_values(digits: np.ndarray, spec: ResidualSpec, k: int) -> np.ndarray:
    return _values_of(digits, spec.L) / float(spec.scale**k)


def residual_decompose(z: Sequence[float], spec: ResidualSpec) -> ResidualFrame:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise InvalidInput(f"expected a latent vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInput("latent contains non-finite values")
    digits = _decompose_digits(z, spec)
    levels = (spec.L,) * z.size
    values = tuple(_stage_values(dig, spec, k) for k, dig in enumerate(digits))
    tokens = tuple(int(digits_to_index(dig, levels)) for dig in digits)
    recon = np.clip(np.sum(values, axis=0), -1.0, 1.0)
    return ResidualFrame(values, tokens, recon)


def residual_decompose_frames(z, spec: ResidualSpec) -> tuple[np.ndarray, np.ndarray]:
    """Decompose a ``(frames, d)`` matrix.

    Returns ``(tokens, reconstruction)`` with tokens shaped ``(frames, stages)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise InvalidInput(f"expected (frames, d), got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInput("latent contains non-finite values")
    digits = _decompose_digits(z, spec)
    levels = (spec.L,) * z.shape[1]
    tokens = np.stack([digits_to_index(dig, levels) for dig in digits], axis=-1)
    total = sum(_stage_values(dig, spec, k) for k, dig in enumerate(digits))
    return tokens, np.clip(total, -1.0, 1.0)


def residual_reconstruct(stage_tokens, spec: ResidualSpec, d: int) -> np.ndarray:
    """Rebuild the clipped latent from per-stage tokens.

    ``stage_tokens`` is either one token per stage, or an array shaped
    ``(frames, stages)``; the output follows the same leading shape.
    """
    tokens = np.asarray(stage_tokens, dtype=np.int64)
    if tokens.shape[-1] != spec.stages:
        raise DecodeError(
            f"expected {spec.stages} stage tokens, got {tokens.shape[-1]}"
        )
    levels = (spec.L,) * d
    total = 0.0
    for k in range(spec.stages):
        try:
            digits = index_to_digits(tokens[..., k], levels)
        except OutOfRangeError as exc:
            raise DecodeError(f"stage {k}: {exc}") from None
        total = total + _stage_values(digits, spec, k)
    return np.clip(total, -1.0, 1.0)


@dataclass(frozen=True)
class SupersetReport:
    L: int
    stages: int
    fine_levels: int
    combinations: int
    sums: tuple[Fraction, ...]
    violations: tuple[Fraction, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def superset_check(L: int, stages: int) -> SupersetReport:
    """Enumerate every per-dimension stage combination in exact arithmetic.

    Checks that each clipped sum lies on the ``(L-1)**stages + 1`` level
    lattice. Dimensions are independent, so one dimension suffices.
    """
    spec = ResidualSpec(L, stages)
    combos = L**stages
    if combos > MAX_ENUMERATION:
        raise CapacityError(f"{combos} combinations exceed the enumeration limit")
    per_stage = [
        [Fraction(2 * i - (L - 1), (L - 1) * spec.scale**k) for i in range(L)]
        for k in range(stages)
    ]
    fine = spec.fine_levels
    sums = set()
    violations = set()
    for combo in itertools.product(*per_stage):
        s = min(max(sum(combo), Fraction(-1)), Fraction(1))
        sums.add(s)
        # on-lattice iff (fine-1)(s+1)/2 is an integer
        if ((fine - 1) * (s + 1) / 2).denominator != 1:
            violations.add(s)
    return SupersetReport(
        L, stages, fine, combos, tuple(sorted(sums)), tuple(sorted(violations))
    )


@dataclass(frozen=True)
class GapStats:
    samples: int
    mismatch_fraction: float
    max_abs_gap: float
    mean_abs_gap: float


def decomposition_gap(z, spec: ResidualSpec) -> GapStats:
    """Compare residual reconstructions with direct fine-lattice quantization.

    The interior tanh at every stage means the cascade need not land on the
    fine-lattice point nearest ``tanh(z)``; this measures how often and how
    far it misses.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    _, recon = residual_decompose_frames(z[:, None], spec)
    direct = quantize(z, spec.fine_levels)
    gap = np.abs(recon[:, 0] - direct)
    return GapStats(
        samples=z.size,
        mismatch_fraction=float(np.mean(gap > 1e-12)),
        max_abs_gap=float(gap.max(initial=0.0)),
        mean_abs_gap=float(gap.mean()) if gap.size else 0.0,
    )


def partition_dimensions(values, groups: Sequence[Sequence[int]], levels: Sequence[int]):
    """Split one frame into parallel tokens over disjoint dimension groups.

    ``values`` holds lattice values for every dimension; each group yields a
    mixed-radix token over its own sub-codebook. No ordering between the
    resulting tokens is implied.
    """
    values = np.asarray(values, dtype=np.float64)
    flat = sorted(i for g in groups for i in g)
    if flat != list(range(len(levels))):
        raise InvalidConfig("groups must partition every dimension exactly once")
    tokens = []
    for g in groups:
        sub_levels = [levels[i] for i in g]
        digits = np.rint((np.asarray(sub_levels) - 1) * (values[list(g)] + 1) / 2)
        tokens.append(int(digits_to_index(digits.astype(np.int64), sub_levels)))
    return tuple(tokens)


def merge_partitions(tokens, groups: Sequence[Sequence[int]], levels: Sequence[int]) -> np.ndarray:
    out = np.empty(len(levels))
    for tok, g in zip(tokens, groups):
        sub_levels = [levels[i] for i in g]
        digits = index_to_digits(np.asarray(tok), sub_levels)
        out[list(g)] = _values_of(digits, np.asarray(sub_levels))
    return out


def stage_codebook_sizes(spec: ResidualSpec, d: int) -> list[int]:
    return [spec.L**d] * spec.stages


def theoretical_step(spec: ResidualSpec, k: int) -> float:
    """Grid spacing of stage ``k`` values."""
    return 2.0 / (spec.L - 1) / spec.scale**k

