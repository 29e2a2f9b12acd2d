"""End-to-end acceptance checks, one test per numbered criterion.

Each test records PASS or FAIL with its runtime; ``conftest.py`` prints the
collected lines at the end of the session.
"""

import functools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from fsqcodec.analysis import (
    GOLDEN_RATIO,
    MultiResSTFTLoss,
    fft_plan,
    inharmonicity_score,
    latency,
    layernorm_gain_cap,
    receptive_field,
    sensitivity_map,
    taae_layers,
)
from fsqcodec.bitstream import (
    CodebookHistogram,
    TokenStream,
    bps,
    huffman_build,
    normalized_entropy,
    pack_stream,
    unpack_stream,
)
from fsqcodec.errors import ParseError
from fsqcodec.filterbank import FilterbankSpec, mdct_forward, mdct_inverse, patch_forward, patch_inverse
from fsqcodec.filterbank import roundtrip_report, stft_forward, stft_inverse
from fsqcodec.metrics import (
    feature_matching_loss,
    mel_distance,
    si_sdr,
    stft_distance,
)
from fsqcodec.quantizer import level_positions, quantize_scalar
from fsqcodec.residual import superset_check
from fsqcodec.toymodel import ModelSpec, build, check_causality, encode, measure_receptive_field, reconstruct

from test_bitstream import best_prefix_cost, random_stream, shannon
from test_metrics import (
    oracle_feature_matching,
    oracle_magnitudes,
    oracle_mel_bank,
    oracle_si_sdr,
    oracle_two_part,
    seeded_stacks,
)

RESULTS: dict[int, str] = {}


def criterion(number: int, title: str, limit_s: float | None = None):
    """Record a PASS/FAIL line for ``number`` and enforce its runtime limit."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - start
                if limit_s is not None:
                    assert elapsed < limit_s, f"took {elapsed:.2f} s, limit {limit_s} s"
            except BaseException as exc:
                elapsed = time.perf_counter() - start
                first = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
                RESULTS[number] = f"criterion {number:2d} FAIL  {title} ({elapsed:.2f} s): {first[:120]}"
                raise
            RESULTS[number] = f"criterion {number:2d} PASS  {title} ({elapsed:.2f} s)"

        return run

    return wrap


@criterion(1, "bitrate table", 1.0)
def test_01_bitrate_table():
    assert bps(25, [17**6]) == 625
    assert bps(25, [5**6, 5**6]) == 700
    assert bps(25, [6**6]) == 400
    assert bps(Fraction(25, 2), [16384, 8192]) == Fraction(675, 2)
    assert bps(Fraction(25, 2), [2048] * 8) == 1100
    assert bps(50, [1024] * 4) == 2000


@criterion(2, "level lattice and error bound", 10.0)
def test_02_level_lattice():
    rng = np.random.default_rng(2024)
    n = 10**6
    xs = rng.normal(0, 3, n).tolist()
    Ls = rng.choice([3, 5, 6, 9, 17], n).tolist()
    lattices = {L: frozenset(level_positions(L).positions) for L in (3, 5, 6, 9, 17)}
    off_lattice = bound = 0
    for x, L in zip(xs, Ls):
        q = quantize_scalar(x, L)
        off_lattice += q not in lattices[L]
        bound += abs(q - math.tanh(x)) > 1 / (L - 1) + 1e-15
    assert off_lattice == 0 and bound == 0, (off_lattice, bound)


@criterion(3, "residual superset", 1.0)
def test_03_residual_superset():
    three = superset_check(3, 2)
    five = superset_check(5, 2)
    assert three.ok and three.fine_levels == 5 and not three.violations
    assert five.ok and five.fine_levels == 17 and not five.violations


def _interior_rel(y, x, margin):
    a, b = y[margin:-margin], x[margin:-margin]
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@criterion(4, "filterbank perfect reconstruction", 30.0)
def test_04_filterbank_pr():
    x = np.random.default_rng(4).uniform(-1, 1, 1 << 16)
    assert np.max(np.abs(patch_inverse(patch_forward(x, 320)) - x)) == 0
    stft = FilterbankSpec("stft", 2048, 512, "hann")
    assert _interior_rel(stft_inverse(stft_forward(x, stft)), x, 2048) <= 1e-10
    assert _interior_rel(mdct_inverse(mdct_forward(x, 512)), x, 512) <= 1e-10
    assert roundtrip_report(x, FilterbankSpec("pqmf", 4)).relative_db <= -60


@criterion(5, "golden FFT plan sizes and inharmonicity", 1.0)
def test_05_fft_plan():
    reference = (78, 126, 206, 334, 542, 876, 1418, 2296)
    phi = fft_plan(39, GOLDEN_RATIO, 8)
    two = fft_plan(39, 2.0, 8)
    assert inharmonicity_score(phi) < inharmonicity_score(two)
    assert all(abs(a - b) <= 2 for a, b in zip(phi.sizes, reference)), f"sizes {phi.sizes} vs {reference}"


@criterion(6, "receptive field and latency", 1.0)
def test_06_receptive_field():
    full = receptive_field(taae_layers(128))
    causal = receptive_field(taae_layers(64, causal=True))
    assert full.max_per_layer == 5.12 and 150 <= full.total <= 260
    assert causal.max_per_layer == 2.56 and 75 <= causal.total <= 130
    assert latency(25) == 0.04


@criterion(7, "layer-norm gain cap")
def test_07_layernorm_cap():
    assert layernorm_gain_cap(1e-2) == 40.0
    assert layernorm_gain_cap(1e-5) == 100.0


@criterion(8, "entropy and Huffman optimality", 10.0)
def test_08_entropy_huffman():
    assert abs(normalized_entropy(CodebookHistogram.from_counts([5] * 256)) - 1) <= 1e-12
    assert normalized_entropy(CodebookHistogram.from_counts([0, 12, 0, 0])) == 0
    rng = np.random.default_rng(8)
    for _ in range(100):
        counts = rng.integers(0, 1000, size=int(rng.integers(2, 500)))
        counts[int(rng.integers(len(counts)))] += 1
        h = CodebookHistogram.from_counts(counts)
        H = shannon(counts)
        avg = float(huffman_build(h).average_length(h))
        assert H - 1e-12 <= avg < H + 1
    for _ in range(200):
        counts = [int(c) for c in rng.integers(1, 50, size=int(rng.integers(1, 6)))]
        h = CodebookHistogram.from_counts(counts)
        probs = [Fraction(c, sum(counts)) for c in counts]
        assert huffman_build(h).average_length(h) == best_prefix_cost(probs)


@criterion(9, "container round trip and fuzzing", 60.0)
def test_09_container():
    rng = np.random.default_rng(9)
    streams = [random_stream(rng, 0), random_stream(rng, 1)]
    streams += [random_stream(rng, int(rng.integers(0, 64))) for _ in range(998)]
    assert sum(ts.n_frames == 0 for ts in streams) >= 1 and sum(ts.n_frames == 1 for ts in streams) >= 1
    files = []
    for i, ts in enumerate(streams):
        data = pack_stream(ts, "huffman" if i % 2 else "raw")
        assert unpack_stream(data) == ts
        files.append(data)
    escaped = []
    for _ in range(10**4):
        data = bytearray(files[int(rng.integers(len(files)))])
        pos = int(rng.integers(len(data)))
        data[pos] ^= int(rng.integers(1, 256))
        try:
            unpack_stream(bytes(data))
        except ParseError:
            continue
        except Exception as exc:  # any other exception type is a failure
            escaped.append(f"{type(exc).__name__} at byte {pos}")
        else:
            escaped.append(f"accepted mutation at byte {pos}")
    assert not escaped, escaped[:5]


RF_SPECS = [
    dict(blocks=((1, 1),), window=1),
    dict(blocks=((1, 1), (1, 2)), window=2),
    dict(blocks=((1, 1), (1, 2)), window=4),
    dict(blocks=((1, 1), (1, 2)), window=8, causal=True),
    dict(blocks=((2, 2),), window=3),
]


@criterion(10, "toy model frames, stability, causality, receptive field", 120.0)
def test_10_toy_model():
    model = build(ModelSpec(patch=320, blocks=((2, 1), (4, 2))))
    latents, tokens = encode(model, np.random.default_rng(10).uniform(-1, 1, 81920))
    assert latents.values.shape[0] == tokens.n_frames == 128
    silent = reconstruct(model, np.zeros(81920))
    assert np.all(np.isfinite(silent)) and np.all(np.isfinite(encode(model, np.zeros(81920))[0].values))
    assert check_causality(build(ModelSpec(causal=True))).leakage == 0.0
    for kw in RF_SPECS:
        m = build(ModelSpec(patch=320, dim=16, head_dim=8, levels=(5, 5, 5), **kw))
        analytic = m.analytic_receptive_field().total
        rf = measure_receptive_field(m, int(2 * analytic * 16000) + 16000)
        assert rf.seconds <= analytic, (kw, rf.seconds, analytic)


@criterion(11, "sensitivity probe periodic bias", 120.0)
def test_11_sensitivity_probe():
    pow2 = fft_plan(16, 2.0, 5)
    phi = fft_plan(39, GOLDEN_RATIO, 5)
    probe = FilterbankSpec("stft", 32, 8)
    rng = np.random.default_rng(0)
    x = 0.1 * rng.standard_normal(1 << 14)
    ref = 0.1 * rng.standard_normal(1 << 14)
    # average the time marginal over the common period of the power-of-two grids
    period = pow2.hops[-1] // probe.hop
    skip = 2 * max(pow2.sizes[-1], phi.sizes[-1]) // probe.hop
    ratios = {}
    for name, plan in (("pow2", pow2), ("phi", phi)):
        smap = sensitivity_map(x, probe, MultiResSTFTLoss.from_plan(plan, ref))
        ratios[name] = smap.folded_peak_to_mean(period, skip)
    assert ratios["pow2"] > ratios["phi"], ratios


@criterion(12, "metrics invariances and oracles")
def test_12_metrics():
    rng = np.random.default_rng(12)
    x = rng.standard_normal(16000)
    est = x + 0.1 * rng.standard_normal(16000)
    for a in (0.25, 0.5, 2.0, 3.0, 0.7, 1e3):
        assert si_sdr(x, a * x) == si_sdr(x, x)
    for a in (0.125, 0.5, 2.0, 1024.0):
        assert si_sdr(x, a * est) == si_sdr(x, est)
    for a in (3.0, 0.7, 1e-3):
        assert abs(si_sdr(x, a * est) - si_sdr(x, est)) <= 1e-9
    assert abs(si_sdr(x, est) - oracle_si_sdr(list(x), list(est))) <= 1e-9

    sine = np.sin(2 * np.pi * 440 * np.arange(8000) / 16000)
    noise = 0.3 * np.random.default_rng(11).standard_normal(8000)
    assert mel_distance(sine, sine) == 0 and stft_distance(sine, sine) == 0
    fb = oracle_mel_bank(16000, 2048, 128)
    mel_oracle = oracle_two_part(oracle_magnitudes(sine, 2048, 256) @ fb.T, oracle_magnitudes(noise, 2048, 256) @ fb.T)
    assert abs(mel_distance(sine, noise) - mel_oracle) <= 1e-6
    stft_oracle = oracle_two_part(oracle_magnitudes(sine, 2048, 512), oracle_magnitudes(noise, 2048, 512))
    assert abs(stft_distance(sine, noise) - stft_oracle) <= 1e-6

    ref, other = seeded_stacks(1), seeded_stacks(2)
    assert feature_matching_loss(ref, ref) == 0
    base = feature_matching_loss(ref, other)
    assert abs(base - oracle_feature_matching(ref, other)) <= 1e-9
    ref[0][1] = ref[0][1] * 10
    other[0][1] = other[0][1] * 10
    assert feature_matching_loss(ref, other) == pytest.approx(base, rel=1e-12)
