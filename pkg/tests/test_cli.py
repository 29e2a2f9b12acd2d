import json
from fractions import Fraction

import numpy as np
import pytest

from fsqcodec.bitstream import TokenStream, pack_stream, unpack_stream
from fsqcodec.cli import (
    RunConfig,
    latent_dumps,
    latent_loads,
    listing_dumps,
    listing_loads,
    render_report,
    run,
)
from fsqcodec.errors import InvalidConfig, ParseError
from fsqcodec.quantizer import QuantizerSpec, quantize_frames
from fsqcodec.residual import ResidualSpec, residual_decompose_frames
from fsqcodec.wav import WavAudio, encode_wav, wav_write


def report(capsys):
    return json.loads(capsys.readouterr().out)


@pytest.fixture
def speechish(tmp_path):
    rng = np.random.default_rng(0)
    t = np.arange(16000) / 16000
    x = 0.5 * np.sin(2 * np.pi * 220 * t) + 0.05 * rng.standard_normal(16000)
    path = tmp_path / "ref.wav"
    wav_write(path, WavAudio(16000, x))
    return path


class TestBps:
    @pytest.mark.parametrize(
        "argv, expected",
        [
            (["--rate", "25", "--codebooks", "46656"], "400"),
            (["--rate", "12.5", "--codebooks", "16384", "8192"], "337.5"),
            (["--rate", "1/3", "--codebooks", "4"], "2/3"),
        ],
    )
    def test_prints(self, capsys, argv, expected):
        assert run(["bps", *argv]) == 0
        assert capsys.readouterr().out == expected + "\n"

    def test_usage_errors(self, capsys):
        assert run(["bps", "--rate", "abc", "--codebooks", "4"]) == 1
        assert run(["bps", "--rate", "25"]) == 1
        assert run(["nonsense"]) == 1
        assert run([]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_tiny_codebook_is_a_data_error(self):
        assert run(["bps", "--rate", "25", "--codebooks", "1"]) == 2


class TestContainers:
    def test_pack_unpack_listing_is_byte_identical(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        ts = TokenStream(25, 6, ((6,) * 6,), rng.integers(0, 6**6, (200, 1)))
        listing = tmp_path / "tokens.json"
        listing.write_text(listing_dumps(ts))
        for mode in ("raw", "huffman"):
            fsqb = tmp_path / f"t.{mode}.fsqb"
            back = tmp_path / f"back.{mode}.json"
            assert run(["pack", str(listing), "-o", str(fsqb), "--mode", mode]) == 0
            assert run(["unpack", str(fsqb), "-o", str(back)]) == 0
            assert back.read_bytes() == listing.read_bytes()
            assert unpack_stream(fsqb.read_bytes()) == ts

    def test_output_is_byte_stable(self, tmp_path):
        ts = TokenStream(Fraction(25, 2), 2, ((5, 5), (5, 5)), np.arange(50).reshape(25, 2) % 25)
        listing = tmp_path / "tokens.json"
        listing.write_text(listing_dumps(ts))
        outs = []
        for i in range(2):
            out = tmp_path / f"{i}.fsqb"
            assert run(["pack", str(listing), "-o", str(out), "--mode", "huffman"]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1] == pack_stream(ts, "huffman")

    def test_truncated_container(self, tmp_path, capsys):
        ts = TokenStream(25, 1, ((3,),), np.array([[0], [1], [2]]))
        path = tmp_path / "t.fsqb"
        path.write_bytes(pack_stream(ts)[:-3])
        assert run(["unpack", str(path)]) == 2
        assert "data error" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert run(["unpack", str(tmp_path / "nope.fsqb")]) == 2

    def test_bad_listing(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"d": 1}')
        assert run(["pack", str(path), "-o", str(tmp_path / "x")]) == 2
        with pytest.raises(ParseError):
            listing_loads("not json")

    def test_stats(self, tmp_path, capsys):
        tokens = np.array([[0], [0], [0], [1]])
        path = tmp_path / "t.fsqb"
        path.write_bytes(pack_stream(TokenStream(50, 1, ((4,),), tokens)))
        assert run(["stats", str(path)]) == 0
        body = report(capsys)
        assert body["schema_version"] == 1 and body["report"] == "stats"
        stage = body["stages"][0]
        assert stage["huffman_bps"] == 50 and stage["raw_bps"] == 100
        h = -(0.75 * np.log2(0.75) + 0.25 * np.log2(0.25))
        assert stage["normalized_entropy"] == pytest.approx(h / 2, abs=1e-12)


class TestLatentPaths:
    def test_latent_format_round_trip(self):
        v = np.random.default_rng(2).uniform(-1, 1, (7, 3)).astype(np.float32).astype(np.float64)
        data = latent_dumps(v, Fraction(25, 2))
        assert data[:4] == b"FSQL" and len(data) == 19 + 4 * 21
        back, rate = latent_loads(data)
        np.testing.assert_array_equal(back, v)
        assert rate == Fraction(25, 2)
        with pytest.raises(ParseError):
            latent_loads(data[:-1])
        with pytest.raises(ParseError):
            latent_loads(b"XXXX" + data[4:])

    def test_quantize_then_dequantize(self, tmp_path, capsys):
        z = np.random.default_rng(3).normal(0, 1, (40, 4)).astype(np.float32).astype(np.float64)
        (tmp_path / "z.lat").write_bytes(latent_dumps(z, 25))
        assert run(["quantize", str(tmp_path / "z.lat"), "-o", str(tmp_path / "z.fsqb"), "--levels", "5"]) == 0
        assert report(capsys)["bps"] == 25 * 10  # ceil(log2 5^4) = 10 bits
        assert run(["dequantize", str(tmp_path / "z.fsqb"), "-o", str(tmp_path / "q.lat")]) == 0
        q, _ = latent_loads((tmp_path / "q.lat").read_bytes())
        expected, _ = quantize_frames(z, QuantizerSpec((5,) * 4))
        np.testing.assert_array_equal(q, expected)

    def test_level_count_mismatch(self, tmp_path):
        (tmp_path / "z.lat").write_bytes(latent_dumps(np.zeros((2, 4)), 25))
        assert run(["quantize", str(tmp_path / "z.lat"), "-o", str(tmp_path / "o"), "--levels", "5,5"]) == 1
        assert run(["quantize", str(tmp_path / "z.lat"), "-o", str(tmp_path / "o"), "--levels", "1"]) == 1

    def test_residual_round_trip(self, tmp_path, capsys):
        z = np.random.default_rng(4).uniform(-0.9, 0.9, (30, 2)).astype(np.float32).astype(np.float64)
        (tmp_path / "z.lat").write_bytes(latent_dumps(z, 25))
        argv = ["residual", "decompose", str(tmp_path / "z.lat"), "-o", str(tmp_path / "r.fsqb"), "--L", "3"]
        assert run(argv) == 0
        assert report(capsys)["stages"] == 2
        assert run(["residual", "reconstruct", str(tmp_path / "r.fsqb"), "-o", str(tmp_path / "r.lat")]) == 0
        r, _ = latent_loads((tmp_path / "r.lat").read_bytes())
        _, expected = residual_decompose_frames(z, ResidualSpec(3, 2))
        np.testing.assert_array_equal(r, expected)
        assert run(["residual", "decompose", str(tmp_path / "z.lat"), "-o", "x", "--L", "6"]) == 2


class TestAnalysisCommands:
    def test_rf_default(self, capsys):
        assert run(["rf", "--latent-rate", "25"]) == 0
        body = report(capsys)
        assert body["receptive_field"]["max_per_layer"] == 5.12
        assert body["latency_s"] == 0.04

    def test_rf_layer_file(self, tmp_path, capsys):
        path = tmp_path / "layers.json"
        path.write_text(json.dumps([{"kind": "conv", "length": 7, "rate": 100.0}]))
        assert run(["rf", str(path)]) == 0
        assert report(capsys)["receptive_field"]["total"] == 0.07
        path.write_text(json.dumps([{"kind": "conv", "length": 7, "rate": 100.0, "colour": 1}]))
        assert run(["rf", str(path)]) == 1

    def test_fftplan(self, capsys):
        assert run(["fftplan", "--base-hop", "64", "--ratio", "2", "--count", "4"]) == 0
        assert report(capsys)["sizes"] == [128, 256, 512, 1024]
        assert run(["fftplan", "--probe"]) == 1

    def test_fbank(self, capsys, speechish):
        assert run(["fbank", "--family", "stft", "--size", "512", "--hop", "128", "--wav", str(speechish)]) == 0
        assert report(capsys)["roundtrip"]["relative_l2"] <= 1e-10
        assert run(["fbank", "--family", "stft", "--size", "256", "--hop", "256"]) == 1


class TestToyModelCommands:
    def test_encode_decode(self, tmp_path, capsys, speechish):
        assert run(["toymodel", "encode", str(speechish), "-o", str(tmp_path / "t.fsqb")]) == 0
        assert report(capsys) == {"schema_version": 1, "report": "toymodel", "frames": 25, "bps": 625}
        assert run(["toymodel", "decode", str(tmp_path / "t.fsqb"), "-o", str(tmp_path / "y.wav")]) == 0
        assert report(capsys)["samples"] == 16000

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"params": {"dim": 32, "head_dim": 8}, "seed": 3}))
        assert run(["toymodel", "build", "--config", str(cfg)]) == 0
        body = report(capsys)
        assert body["spec"]["dim"] == 32 and body["spec"]["seed"] == 3
        cfg.write_text(json.dumps({"params": {"width": 32}}))
        assert run(["toymodel", "build", "--config", str(cfg)]) == 1
        cfg.write_text(json.dumps({"params": {}, "extra": 1}))
        assert run(["toymodel", "build", "--config", str(cfg)]) == 1

    def test_causality(self, capsys):
        assert run(["toymodel", "causality", "--causal"]) == 0
        assert report(capsys)["causality"]["leakage"] == 0.0

    def test_usage(self):
        assert run(["toymodel", "encode"]) == 1

    def test_deterministic_reports(self, capsys):
        outs = []
        for _ in range(2):
            assert run(["toymodel", "build", "--seed", "0"]) == 0
            outs.append(capsys.readouterr().out)
        assert outs[0] == outs[1]


class TestMetricsCommand:
    def test_self_comparison(self, capsys, speechish):
        assert run(["metrics", str(speechish), str(speechish)]) == 0
        body = report(capsys)
        assert body["mel_distance"] == 0 and body["stft_distance"] == 0
        assert body["si_sdr"] == 300.0

    def test_rate_policy(self, tmp_path, capsys, speechish):
        other = tmp_path / "44k.wav"
        wav_write(other, WavAudio(44100, np.zeros(44100)))
        assert run(["metrics", str(speechish), str(other)]) == 2
        assert "resample" in capsys.readouterr().err

    def test_truncated_wav(self, tmp_path, speechish):
        bad = tmp_path / "bad.wav"
        bad.write_bytes(speechish.read_bytes()[:-7])
        assert run(["metrics", str(speechish), str(bad)]) == 2

    def test_stereo_warns_on_stderr(self, tmp_path, capsys):
        x = np.random.default_rng(5).uniform(-0.5, 0.5, (8000, 2))
        path = tmp_path / "st.wav"
        path.write_bytes(encode_wav(WavAudio(16000, x))[0])
        assert run(["metrics", str(path), str(path)]) == 0
        assert "downmixing" in capsys.readouterr().err


def test_report_and_config_helpers():
    text = render_report("x", {"b": Fraction(1, 3), "a": float("inf")})
    assert json.loads(text) == {"schema_version": 1, "report": "x", "a": "inf", "b": "1/3"}
    assert RunConfig.from_dict({"seed": 2}, []).seed == 2
    with pytest.raises(InvalidConfig):
        RunConfig.from_dict({"seed": -1}, [])
