"""Receptive field and latency arithmetic, FFT-plan design, loss sensitivity.

Receptive fields add up layer by layer: each layer can carry information
from one end of its own span to the other, so the network-level span is the
sum of per-layer spans measured in seconds.

Sensitivity maps are estimated with central finite differences in the bin
domain of a probe STFT rather than with autodiff. Because the probe is
invertible, perturbing one bin adds a fixed windowed atom to the waveform,
and only the loss frames overlapping that atom need re-evaluating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, InvalidConfig
from .filterbank import FilterbankSpec, get_window, stft_check

GOLDEN_RATIO = (1 + math.sqrt(5)) / 2
# FFT sizes of the reference discriminator ensemble.
REFERENCE_FFT_SIZES = (78, 126, 206, 334, 542, 876, 1418, 2296)
DEFAULT_POWER_ALPHA = 0.5
LAYER_KINDS = ("conv", "transposed-conv", "attention", "pointwise")


# -- receptive field --------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    length: int = 1
    rate: float = 1.0
    stride: int = 1
    dilation: int = 1
    causal: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidConfig(f"unknown layer kind {self.kind!r}")
        if self.length < 1 or self.stride < 1 or self.dilation < 1:
            raise InvalidConfig("lengths, strides and dilations must be positive")
        if not self.rate > 0:
            raise InvalidConfig(f"layer rate must be positive, got {self.rate}")

    def extent_steps(self) -> int:
        """Span of input steps one output can see (0 for pointwise layers)."""
        if self.kind == "pointwise":
            return 0
        if self.kind == "attention":
            return self.length
        return (self.length - 1) * self.dilation + 1

    def seconds(self) -> float:
        return self.extent_steps() / self.rate

    def past_future(self) -> tuple[float, float]:
        """Split of the span into look-back and look-ahead seconds."""
        total = self.seconds()
        if self.causal:
            return total, 0.0
        return total / 2, total / 2


@dataclass(frozen=True)
class ReceptiveField:
    per_layer_seconds: tuple[float, ...]
    max_per_layer: float
    total: float
    past: float
    future: float

    @property
    def causal(self) -> bool:
        return self.future == 0.0


def receptive_field(layers: Sequence[LayerSpec]) -> ReceptiveField:
    if not layers:
        raise InvalidConfig("layer list is empty")
    per = tuple(layer.seconds() for layer in layers)
    splits = [layer.past_future() for layer in layers]
    return ReceptiveField(
        per_layer_seconds=per,
        max_per_layer=max(per),
        total=math.fsum(per),
        past=math.fsum(p for p, _ in splits),
        future=math.fsum(f for _, f in splits),
    )


def taae_layers(
    window: int = 128,
    causal: bool = False,
    sample_rate: int = 16000,
    patch: int = 320,
    blocks: Sequence[tuple[int, int]] = ((8, 1), (20, 2)),
) -> list[LayerSpec]:
    """Layer list of the full-size encoder plus its mirrored decoder.

    ``blocks`` holds ``(transformer layers, downsample stride)`` pairs in
    encoder order; the decoder repeats them in reverse with transposed
    resampling.
    """
    layers = [LayerSpec("conv", patch, sample_rate, stride=patch, causal=causal, name="patch")]
    rate = sample_rate / patch
    enc = []
    for n_layers, stride in blocks:
        if stride > 1:
            enc.append(LayerSpec("conv", stride, rate, stride=stride, causal=causal, name="down"))
            rate /= stride
        enc += [LayerSpec("attention", window, rate, causal=causal, name="attn")] * n_layers
    layers += enc
    layers.append(LayerSpec("pointwise", 1, rate, name="bottleneck"))
    for n_layers, stride in reversed(blocks):
        layers += [LayerSpec("attention", window, rate, causal=causal, name="attn")] * n_layers
        if stride > 1:
            layers.append(
                LayerSpec("transposed-conv", stride, rate * stride, stride=stride, causal=causal, name="up")
            )
            rate *= stride
    layers.append(LayerSpec("transposed-conv", patch, sample_rate, stride=patch, causal=causal, name="unpatch"))
    return layers


@dataclass(frozen=True)
class Chunked:
    chunk_s: float
    overlap_s: float = 0.0


def latency(latent_rate: float, mode="causal") -> float:
    """Streaming delay: one latent frame when causal, two chunks when chunked."""
    if not latent_rate > 0:
        raise InvalidConfig("latent rate must be positive")
    if mode == "causal":
        return 1.0 / latent_rate
    if isinstance(mode, Chunked):
        return 2.0 * mode.chunk_s
    raise InvalidConfig(f"unknown latency mode {mode!r}")


# -- LayerNorm amplification ------------------------------------------------


def layernorm_gain_cap(eps: float) -> float:
    """Largest gain in dB when ``eps`` floors the normalizing deviation."""
    if not eps > 0:
        raise InvalidConfig("eps must be positive")
    return -20.0 * math.log10(eps)


# -- FFT plans --------------------------------------------------------------


@dataclass(frozen=True)
class FFTPlan:
    sizes: tuple[int, ...]
    window: str = "hann"

    def __post_init__(self):
        if any(s % 2 or s < 2 for s in self.sizes):
            raise InvalidConfig("FFT sizes must be even and positive")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise InvalidConfig("FFT sizes must be strictly increasing")

    @property
    def hops(self) -> tuple[int, ...]:
        return tuple(s // 2 for s in self.sizes)


def fft_plan(base_hop: float, ratio: float, count: int) -> FFTPlan:
    """Geometric hop ladder ``round(base_hop * ratio**i)``; sizes are twice the hops.

    ``base_hop`` may be fractional. Collisions after rounding are collapsed.
    """
    if not base_hop >= 1 or not ratio > 1 or count < 1:
        raise InvalidConfig("need base_hop >= 1, ratio > 1 and count >= 1")
    hops = []
    for i in range(count):
        try:
            h = round(base_hop * ratio**i)
        except OverflowError:
            raise CapacityError("hop ladder overflows") from None
        if h > 1 << 40:
            raise CapacityError("hop ladder overflows")
        if not hops or h > hops[-1]:
            hops.append(h)
    return FFTPlan(tuple(2 * h for h in hops))


def reference_plan() -> FFTPlan:
    return FFTPlan(REFERENCE_FFT_SIZES)


def _dist_to_int(r: float) -> float:
    return abs(r - round(r))


def inharmonicity_score(plan: FFTPlan) -> float:
    """Penalty for hop pairs whose ratio sits near an integer.

    Sums ``max(0, 1 - 2 * dist(r, Z))**2`` over pairs with ``r = hop_j / hop_i >= 1``.
    Zero means no pair is even halfway to harmonic; each exact integer ratio
    adds 1.
    """
    hops = plan.hops
    if len(hops) < 2:
        raise InvalidConfig("need at least two sizes to score a plan")
    total = 0.0
    for i, hi in enumerate(hops):
        for j, hj in enumerate(hops):
            if i == j or hj < hi:
                continue
            total += max(0.0, 1.0 - 2.0 * _dist_to_int(hj / hi)) ** 2
    return total


@dataclass(frozen=True)
class RatioSearch:
    ratios: np.ndarray
    scores: np.ndarray

    def best(self) -> float:
        return float(self.ratios[np.argmin(self.scores)])

    def rank_fraction(self, score: float) -> float:
        """Fraction of grid points scoring strictly better than ``score``."""
        finite = self.scores[np.isfinite(self.scores)]
        return float(np.mean(finite < score))


def search_ratio(base_hop: float, count: int, ratios=None) -> RatioSearch:
    """Score a grid of ratios in (1, 2]; plans that collapse hops score inf."""
    if ratios is None:
        ratios = np.linspace(1.001, 2.0, 1000)
    ratios = np.asarray(ratios, dtype=np.float64)
    scores = np.empty(len(ratios))
    for i, r in enumerate(ratios):
        plan = fft_plan(base_hop, float(r), count)
        scores[i] = inharmonicity_score(plan) if len(plan.sizes) == count else np.inf
    return RatioSearch(ratios, scores)


# -- magnitude scaling ------------------------------------------------------


def magnitude_power_scale(X, alpha: float = DEFAULT_POWER_ALPHA) -> np.ndarray:
    """Multiply each bin by ``|X|**alpha``; phase is untouched and 0 stays 0."""
    if alpha < 0:
        raise InvalidConfig("alpha must be nonnegative")
    X = np.asarray(X)
    return X * np.abs(X) ** alpha


# -- sensitivity probing ----------------------------------------------------


@dataclass(frozen=True)
class MultiResSTFTLoss:
    """Mean L1 distance of STFT magnitudes, summed over resolutions.

    Each resolution uses a periodic Hann window with hop ``size // 2``.
    """

    sizes: tuple[int, ...]
    reference: np.ndarray = field(repr=False)

    @classmethod
    def from_plan(cls, plan: FFTPlan, reference) -> "MultiResSTFTLoss":
        return cls(plan.sizes, np.asarray(reference, dtype=np.float64))

    def _frames(self, x: np.ndarray, size: int) -> np.ndarray:
        hop = size // 2
        padded = _pad_for(x, size, hop)
        n_frames = (len(padded) - size) // hop + 1
        idx = np.arange(n_frames)[:, None] * hop + np.arange(size)
        return padded[idx]

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        total = 0.0
        for size in self.sizes:
            w = get_window("hann", size)
            a = np.abs(np.fft.rfft(self._frames(x, size) * w, axis=-1))
            b = np.abs(np.fft.rfft(self._frames(self.reference, size) * w, axis=-1))
            total += np.mean(np.abs(a - b))
        return float(total)


def _pad_for(x: np.ndarray, size: int, hop: int) -> np.ndarray:
    lead = size - hop
    n = len(x)
    frames = max(1, -(-(n + lead) // hop) + 1)
    out = np.zeros((frames - 1) * hop + size)
    out[lead : lead + n] = x
    return out


@dataclass(frozen=True)
class SensitivityMap:
    values: np.ndarray  # (probe frames, probe bins)
    probe: FilterbankSpec

    def time_marginal(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def frequency_marginal(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def time_peak_to_mean(self) -> float:
        m = self.time_marginal()
        return float(m.max() / m.mean())

    def folded_time_marginal(self, period: int, skip: int = 0) -> np.ndarray:
        """Time marginal averaged over consecutive ``period``-frame segments.

        The first ``skip`` frames (and as many at the end) are dropped so edge
        padding does not leak in. Segments of one long input behave like
        independent example inputs that share the same frame alignment.
        """
        m = self.time_marginal()
        if period < 1 or skip < 0:
            raise InvalidConfig("period must be >= 1 and skip >= 0")
        usable = m[skip : len(m) - skip]
        count = len(usable) // period
        if count < 1:
            raise InvalidConfig("signal too short for one folded period")
        return usable[: count * period].reshape(count, period).mean(axis=0)

    def folded_peak_to_mean(self, period: int, skip: int = 0) -> float:
        f = self.folded_time_marginal(period, skip)
        return float(f.max() / f.mean())


class _LocalLoss:
    """Per-frame loss bookkeeping so a local perturbation is cheap to score."""

    def __init__(self, loss: MultiResSTFTLoss, x: np.ndarray):
        self.res = []
        ref = np.asarray(loss.reference, dtype=np.float64)
        if ref.shape != x.shape:
            raise InvalidConfig("reference and signal lengths differ")
        for size in loss.sizes:
            hop = size // 2
            w = get_window("hann", size)
            px = _pad_for(x, size, hop)
            pr = _pad_for(ref, size, hop)
            n_frames = (len(px) - size) // hop + 1
            idx = np.arange(n_frames)[:, None] * hop + np.arange(size)
            ref_mag = np.abs(np.fft.rfft(pr[idx] * w, axis=-1))
            base = np.fft.rfft(px[idx] * w, axis=-1)
            cur = np.abs(np.abs(base) - ref_mag).sum(axis=1)
            norm = 1.0 / (n_frames * ref_mag.shape[1])
            self.res.append((size, hop, size - hop, w, base, ref_mag, cur, norm))

    def delta(self, start: int, perts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Loss changes for ``+perts`` and ``-perts`` added at sample ``start``."""
        n, span = perts.shape
        plus = np.zeros(n)
        minus = np.zeros(n)
        for size, hop, lead, w, base, ref_mag, cur, norm in self.res:
            a = start + lead
            b = a + span
            j0 = max(0, -(-(a - size + 1) // hop))
            j1 = min(len(cur) - 1, (b - 1) // hop)
            if j1 < j0:
                continue
            lo = j0 * hop
            seg = np.zeros((n, j1 * hop + size - lo))
            seg[:, a - lo : b - lo] = perts
            js = np.arange(j0, j1 + 1)
            idx = (js - j0)[:, None] * hop + np.arange(size)
            P = np.fft.rfft(seg[:, idx] * w, axis=-1)
            old = cur[js].sum()
            B = base[js]
            R = ref_mag[js]
            plus += norm * (np.abs(np.abs(B + P) - R).sum(axis=(1, 2)) - old)
            minus += norm * (np.abs(np.abs(B - P) - R).sum(axis=(1, 2)) - old)
        return plus, minus


def sensitivity_map(
    signal,
    probe: FilterbankSpec,
    loss: MultiResSTFTLoss,
    fd_step: float = 1e-3,
) -> SensitivityMap:
    """Magnitude of the loss gradient with respect to each probe STFT bin.

    Real and imaginary parts of every bin are perturbed by ``+-fd_step``;
    the central differences give the two gradient components.
    """
    if probe.family != "stft":
        raise InvalidConfig("probe must be an STFT spec")
    c = stft_check(probe)
    x = np.asarray(signal, dtype=np.float64)
    size, hop = probe.size, probe.hop
    lead = size - hop
    w = get_window(probe.window, size)
    n_bins = size // 2 + 1
    eye = np.eye(n_bins)
    # waveform atoms for a unit change of the real / imaginary part of each bin
    atoms = np.concatenate(
        [np.fft.irfft(eye, n=size) * w / c, np.fft.irfft(1j * eye, n=size) * w / c]
    )
    local = _LocalLoss(loss, x)
    n_frames = max(1, -(-(len(x) + lead - size) // hop) + 1)
    n_frames = max(n_frames, -(-(len(x) + 2 * lead - size) // hop) + 1)
    values = np.zeros((n_frames, n_bins))
    for f in range(n_frames):
        start = f * hop - lead
        lo = max(0, start)
        hi = min(len(x), start + size)
        if hi <= lo:
            continue
        plus, minus = local.delta(lo, fd_step * atoms[:, lo - start : hi - start])
        grad = (plus - minus) / (2 * fd_step)
        values[f] = np.hypot(grad[:n_bins], grad[n_bins:])
    return SensitivityMap(values, probe)
