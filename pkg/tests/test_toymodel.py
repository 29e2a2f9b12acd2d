from fractions import Fraction

import numpy as np
import pytest

from fsqcodec.analysis import layernorm_gain_cap
from fsqcodec.bitstream import TokenStream
from fsqcodec.errors import DecodeError, InvalidConfig, InvalidLevelCount, SaturatedMeasurement
from fsqcodec.quantizer import QuantizerSpec, token_index
from fsqcodec.toymodel import (
    ModelSpec,
    build,
    check_causality,
    decode,
    encode,
    frame_count,
    gain_report,
    layer_norm,
    measure_receptive_field,
    full_shape_spec,
    reconstruct,
    square_wave,
    window_offsets,
)

SMALL = dict(patch=40, dim=16, head_dim=8, levels=(5, 5, 5))


@pytest.fixture(scope="module")
def model():
    return build(ModelSpec())


@pytest.fixture(scope="module")
def causal_model():
    return build(ModelSpec(causal=True))


class TestBuild:
    def test_same_seed_is_bit_identical(self):
        a, b = build(ModelSpec(**SMALL)).parameters(), build(ModelSpec(**SMALL)).parameters()
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_seed_changes_parameters(self):
        a = build(ModelSpec(**SMALL, seed=0)).parameters()
        b = build(ModelSpec(**SMALL, seed=1)).parameters()
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    def test_full_shape_builds(self):
        spec = full_shape_spec()
        model = build(spec)
        assert spec.blocks == ((8, 1), (20, 2))
        assert len(model.params["enc_blocks"][0]["layers"]) == 8
        assert len(model.params["enc_blocks"][1]["layers"]) == 20
        assert spec.frame_rate == 25

    def test_unit_window_builds_and_runs(self):
        model = build(ModelSpec(**SMALL, window=1))
        out = reconstruct(model, np.random.default_rng(0).uniform(-1, 1, 800))
        assert np.all(np.isfinite(out))

    def test_window_offsets(self):
        assert window_offsets(128, False) == (-64, 63)
        assert window_offsets(64, True) == (-63, 0)
        assert window_offsets(1, False) == (0, 0)
        assert window_offsets(1, True) == (0, 0)

    @pytest.mark.parametrize(
        "bad",
        [
            dict(dim=60, head_dim=16),
            dict(head_dim=7, dim=63),
            dict(window=0),
            dict(eps=0.0),
            dict(blocks=()),
            dict(blocks=((1, 0),)),
        ],
    )
    def test_invalid_config(self, bad):
        with pytest.raises(InvalidConfig):
            ModelSpec(**bad)

    def test_bad_levels(self):
        with pytest.raises(InvalidLevelCount):
            ModelSpec(levels=(1, 5))

    def test_dict_round_trip(self):
        spec = ModelSpec(**SMALL, causal=True, seed=4)
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(InvalidConfig):
            ModelSpec.from_dict({**spec.to_dict(), "heads": 4})


class TestEncode:
    def test_frame_count_at_25_hz(self, model):
        x = np.random.default_rng(1).uniform(-1, 1, 81920)
        latents, tokens = encode(model, x)
        assert latents.values.shape == (128, 6)
        assert latents.frame_rate == Fraction(25) == tokens.frame_rate
        assert tokens.n_frames == 128
        assert np.all(np.abs(latents.values) < 1)

    def test_doubling_length_doubles_frames(self, model):
        x = np.random.default_rng(2).uniform(-1, 1, 16000)
        a = encode(model, x)[0].values
        b = encode(model, np.concatenate([x, x]))[0].values
        assert len(b) == 2 * len(a) == 2 * frame_count(model.spec, 16000)

    @pytest.mark.parametrize(
        "blocks, patch, rate",
        [(((1, 1),), 320, 50), (((1, 1), (1, 2)), 320, 25), (((1, 2), (1, 2)), 40, 100), (((0, 5),), 64, 50)],
    )
    def test_frame_rate_formula(self, blocks, patch, rate):
        spec = ModelSpec(blocks=blocks, patch=patch, dim=16, head_dim=8, levels=(3, 3))
        assert spec.frame_rate == rate
        latents, _ = encode(build(spec), np.zeros(spec.sample_rate))
        assert len(latents.values) == rate

    def test_silence_is_finite_and_small(self, model):
        latents, _ = encode(model, np.zeros(81920))
        out = reconstruct(model, np.zeros(81920))
        assert np.all(np.isfinite(out)) and np.all(np.isfinite(latents.values))
        assert np.max(np.abs(latents.values)) < 1e-6

    @pytest.mark.parametrize("period", [2, 64, 640])
    def test_square_wave_is_finite(self, model, period):
        out = reconstruct(model, square_wave(16000, period))
        assert np.all(np.isfinite(out))

    def test_layer_norm_floor(self):
        x = np.array([[1e-9, -1e-9, 2e-9, 0.0]])
        y = layer_norm(x, 1e-2)
        centered = x - x.mean()
        np.testing.assert_allclose(y, centered / (centered.std() + 1e-2))


class TestDecode:
    def test_length_matches_padded_input(self, model):
        for n in (640, 1000, 81920):
            out = decode(model, encode(model, np.random.default_rng(n).uniform(-1, 1, n))[1])
            assert len(out) == frame_count(model.spec, n) * model.spec.hop

    def test_center_tokens_are_deterministic(self, model):
        center = token_index((0.0,) * 6, QuantizerSpec((17,) * 6))
        ts = TokenStream(25, 6, ((17,) * 6,), np.full((10, 1), center))
        a, b = decode(model, ts), decode(model, ts)
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_output(self, model):
        other = build(ModelSpec(seed=1))
        ts = encode(model, np.random.default_rng(3).uniform(-1, 1, 6400))[1]
        assert not np.allclose(decode(model, ts), decode(other, ts))

    def test_mismatch(self, model):
        with pytest.raises(DecodeError):
            decode(model, TokenStream(25, 3, ((5, 5, 5),), np.zeros((4, 1), dtype=np.int64)))
        with pytest.raises(DecodeError):
            decode(model, TokenStream(50, 6, ((17,) * 6,), np.zeros((4, 1), dtype=np.int64)))


class TestCausality:
    def test_causal_has_zero_leakage(self, causal_model):
        rep = check_causality(causal_model)
        assert rep.causal and rep.ok and rep.leakage == 0.0
        assert rep.response > 0

    def test_causal_continuous_path(self, causal_model):
        assert check_causality(causal_model, quantized=False, delta=1e-3).leakage == 0.0

    def test_non_causal_leaks(self, model):
        rep = check_causality(model)
        assert not rep.ok and rep.leakage > 0

    def test_latency_is_one_frame(self, causal_model, model):
        assert causal_model.latency() == 0.04
        with pytest.raises(InvalidConfig):
            model.latency()


RF_SPECS = [
    dict(blocks=((1, 1),), window=1),
    dict(blocks=((1, 1), (1, 2)), window=1),
    dict(blocks=((1, 1), (1, 2)), window=4),
    dict(blocks=((1, 1), (1, 2)), window=8, causal=True),
    dict(blocks=((2, 2),), window=3),
]


def rf_model(**kw):
    return build(ModelSpec(**{**SMALL, "patch": 320, **kw}))


class TestReceptiveField:
    @pytest.mark.parametrize("kw", RF_SPECS, ids=lambda kw: f"{kw['blocks']}-W{kw['window']}")
    def test_empirical_within_analytic(self, kw):
        m = rf_model(**kw)
        analytic = m.analytic_receptive_field().total
        rf = measure_receptive_field(m, int(2 * analytic * 16000) + 16000)
        assert 0 < rf.seconds <= analytic

    def test_unit_window_single_block_near_conv_only(self):
        m = rf_model(blocks=((1, 1),), window=1)
        rf = measure_receptive_field(m, 16000)
        # patching alone spans one patch frame
        conv_only = 2 * 320 / 16000
        assert abs(rf.seconds - conv_only) <= 320 / 16000

    def test_monotone_in_window(self):
        widths = []
        for W in (1, 2, 4, 8):
            m = rf_model(blocks=((1, 1), (1, 2)), window=W)
            widths.append(measure_receptive_field(m, 48000).seconds)
        assert all(a < b for a, b in zip(widths, widths[1:])), widths

    def test_saturation(self):
        m = rf_model(blocks=((1, 1), (1, 2)), window=8)
        with pytest.raises(SaturatedMeasurement):
            measure_receptive_field(m, 1000)


class TestGain:
    def test_noise_floor_within_bounds(self, model):
        rng = np.random.default_rng(5)
        rms = 10 ** (-80 / 20)
        rep = gain_report(model, rms * rng.standard_normal(16000))
        assert rep.ok
        assert rep.layernorm_cap_db == layernorm_gain_cap(1e-2) == 40.0
        assert rep.max_layernorm_gain_db <= 40.0
        assert rep.peak_gain_db <= rep.bound_db

    def test_silence_is_rejected(self, model):
        with pytest.raises(InvalidConfig):
            gain_report(model, np.zeros(640))
