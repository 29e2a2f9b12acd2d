"""Command-line front end.

Exit codes: 0 success, 1 usage error (bad arguments or configuration),
2 data error (unreadable or inconsistent input files). Reports are JSON
objects with sorted keys and a ``schema_version`` field.
"""

from __future__ import annotations

import argparse
import decimal
import json
import math
import struct
import sys
import warnings
from dataclasses import asdict, dataclass, field, is_dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, bitstream, filterbank, metrics, toymodel
from .errors import FsqError, InvalidConfig, InvalidLevelCount, NoData, ParseError
from .quantizer import QuantizerSpec, dequantize_tokens, quantize_frames
from .residual import ResidualSpec, decomposition_gap, residual_decompose_frames, residual_reconstruct
from .wav import WavAudio, wav_read, wav_write

SCHEMA_VERSION = 1
LATENT_MAGIC = b"FSQL"
LATENT_VERSION = 1
_LATENT_HEADER = struct.Struct("<4sBHIII")  # magic, version, d, rate num, rate den, frames


class UsageError(Exception):
    pass


# -- latent files -----------------------------------------------------------


def latent_dumps(values: np.ndarray, frame_rate) -> bytes:
    """Header plus little-endian f32 frames."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or not 1 <= values.shape[1] <= 0xFFFF:
        raise InvalidConfig(f"latents must be (frames, d) with 1 <= d <= 65535, got {values.shape}")
    rate = Fraction(frame_rate)
    head = _LATENT_HEADER.pack(
        LATENT_MAGIC, LATENT_VERSION, values.shape[1], rate.numerator, rate.denominator, values.shape[0]
    )
    return head + values.astype("<f4").tobytes()


def latent_loads(data: bytes) -> tuple[np.ndarray, Fraction]:
    size = _LATENT_HEADER.size
    if len(data) < size:
        raise ParseError("latent file shorter than its header", len(data))
    magic, version, d, num, den, frames = _LATENT_HEADER.unpack_from(data)
    if magic != LATENT_MAGIC:
        raise ParseError("bad latent magic", 0)
    if version != LATENT_VERSION:
        raise ParseError(f"unsupported latent version {version}", 4)
    if d == 0:
        raise ParseError("latent dimension is zero", 5)
    if num == 0 or den == 0:
        raise ParseError("frame rate must be a positive ratio", 7)
    if len(data) != size + 4 * d * frames:
        raise ParseError(f"expected {4 * d * frames} payload bytes, found {len(data) - size}", size)
    values = np.frombuffer(data, dtype="<f4", offset=size).astype(np.float64).reshape(frames, d)
    if not np.isfinite(values).all():
        bad = int(np.flatnonzero(~np.isfinite(values.reshape(-1)))[0])
        raise ParseError("non-finite latent value", size + 4 * bad)
    return values, Fraction(num, den)


# -- token listings ---------------------------------------------------------


def listing_dumps(ts: bitstream.TokenStream) -> str:
    """Canonical JSON text for a token stream."""
    return json.dumps(
        {
            "d": ts.d,
            "frame_rate": str(ts.frame_rate),
            "stage_levels": [list(s) for s in ts.stage_levels],
            "tokens": ts.tokens.tolist(),
        },
        sort_keys=True,
    ) + "\n"


def listing_loads(text: str) -> bitstream.TokenStream:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"token listing is not JSON: {exc.msg}", exc.pos) from None
    keys = {"d", "frame_rate", "stage_levels", "tokens"}
    if not isinstance(data, dict) or set(data) != keys:
        raise ParseError(f"token listing needs exactly the keys {sorted(keys)}", 0)
    try:
        tokens = np.array(data["tokens"], dtype=np.int64).reshape(-1, len(data["stage_levels"]))
        return bitstream.TokenStream(Fraction(data["frame_rate"]), int(data["d"]), data["stage_levels"], tokens)
    except (TypeError, ValueError, ZeroDivisionError) as exc:
        raise ParseError(f"malformed token listing: {exc}", 0) from None


# -- reports ----------------------------------------------------------------


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Fraction):
        return int(obj) if obj.denominator == 1 else str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return obj


def render_report(kind: str, body: dict) -> str:
    payload = {"schema_version": SCHEMA_VERSION, "report": kind, **_jsonable(body)}
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


@dataclass(frozen=True)
class RunConfig:
    """Structured configuration file contents: parameters, seed and outputs."""

    params: dict = field(default_factory=dict)
    seed: int = 0
    outputs: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data, allowed_params) -> "RunConfig":
        if not isinstance(data, dict):
            raise InvalidConfig("config must be a JSON object")
        unknown = set(data) - {"params", "seed", "outputs"}
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        params = data.get("params", {})
        if not isinstance(params, dict):
            raise InvalidConfig("params must be an object")
        bad = set(params) - set(allowed_params)
        if bad:
            raise InvalidConfig(f"unknown parameters: {sorted(bad)}")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise InvalidConfig("seed must be a non-negative integer")
        outputs = data.get("outputs", {})
        if not isinstance(outputs, dict):
            raise InvalidConfig("outputs must be an object")
        return cls(params, seed, outputs)

    @classmethod
    def load(cls, path, allowed_params) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc.msg}") from None
        return cls.from_dict(data, allowed_params)


# -- helpers ----------------------------------------------------------------


def _levels_arg(text: str) -> tuple[int, ...]:
    try:
        levels = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}")
    if not levels:
        raise argparse.ArgumentTypeError("at least one level count is required")
    return levels


def _rate_arg(text: str) -> Fraction:
    try:
        rate = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rate: {text!r}")
    if rate <= 0:
        raise argparse.ArgumentTypeError("rate must be positive")
    return rate


def _format_number(value: Fraction) -> str:
    """Exact decimal text for terminating fractions, ``num/den`` otherwise."""
    den = value.denominator
    for p in (2, 5):
        while den % p == 0:
            den //= p
    if den != 1:
        return str(value)
    with decimal.localcontext() as ctx:
        ctx.prec = 200
        text = str(decimal.Decimal(value.numerator) / decimal.Decimal(value.denominator))
    return text


def _emit(args, text: str) -> None:
    if getattr(args, "report", None):
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)


def _read_stream(path) -> bitstream.TokenStream:
    return bitstream.unpack_stream(Path(path).read_bytes())


def _codec_audio(path) -> WavAudio:
    return wav_read(path).to_mono().require_rate()


# -- subcommands ------------------------------------------------------------


def cmd_quantize(args) -> None:
    values, rate = latent_loads(Path(args.latent).read_bytes())
    levels = args.levels if len(args.levels) > 1 else args.levels * values.shape[1]
    spec = QuantizerSpec(levels, rate)
    if spec.d != values.shape[1]:
        raise InvalidConfig(f"{spec.d} level counts given for {values.shape[1]}-dimensional latents")
    _, tokens = quantize_frames(values, spec)
    ts = bitstream.TokenStream(rate, spec.d, (spec.levels,), tokens.reshape(-1, 1))
    Path(args.output).write_bytes(bitstream.pack_stream(ts, args.mode))
    _emit(args, render_report("quantize", {"frames": ts.n_frames, "d": spec.d, "bps": ts.bps()}))


def _stream_values(ts: bitstream.TokenStream) -> np.ndarray:
    if ts.n_stages == 1:
        spec = QuantizerSpec(ts.stage_levels[0], ts.frame_rate)
        return dequantize_tokens(ts.tokens[:, 0], spec).reshape(-1, ts.d)
    first = ts.stage_levels[0]
    if len(set(first)) != 1 or any(stage != first for stage in ts.stage_levels):
        raise InvalidConfig("multi-stage streams need one uniform level count shared by all stages")
    spec = ResidualSpec(first[0], ts.n_stages)
    return residual_reconstruct(ts.tokens, spec, ts.d).reshape(-1, ts.d)


def cmd_dequantize(args) -> None:
    ts = _read_stream(args.container)
    values = _stream_values(ts)
    Path(args.output).write_bytes(latent_dumps(values, ts.frame_rate))
    _emit(args, render_report("dequantize", {"frames": ts.n_frames, "d": ts.d, "stages": ts.n_stages}))


def cmd_residual(args) -> None:
    if args.action == "decompose":
        values, rate = latent_loads(Path(args.input).read_bytes())
        spec = ResidualSpec(args.L, args.stages)
        tokens, _ = residual_decompose_frames(values, spec)
        d = values.shape[1]
        ts = bitstream.TokenStream(rate, d, ((args.L,) * d,) * args.stages, tokens)
        Path(args.output).write_bytes(bitstream.pack_stream(ts, args.mode))
        gap = decomposition_gap(values, spec)
        _emit(args, render_report("residual", {"frames": ts.n_frames, "stages": args.stages, "bps": ts.bps(), "gap": gap}))
    else:
        ts = _read_stream(args.input)
        values = _stream_values(ts)
        Path(args.output).write_bytes(latent_dumps(values, ts.frame_rate))
        _emit(args, render_report("residual", {"frames": ts.n_frames, "stages": ts.n_stages}))


def cmd_pack(args) -> None:
    ts = listing_loads(Path(args.listing).read_text())
    data = bitstream.pack_stream(ts, args.mode)
    Path(args.output).write_bytes(data)
    _emit(args, render_report("pack", {"bytes": len(data), "frames": ts.n_frames, "mode": args.mode}))


def cmd_unpack(args) -> None:
    text = listing_dumps(_read_stream(args.container))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_stats(args) -> None:
    ts = _read_stream(args.container)
    if ts.n_frames == 0:
        raise NoData("container holds no frames")
    stages = []
    for k, (h, size) in enumerate(zip(bitstream.stage_histograms(ts), ts.codebook_sizes)):
        table = bitstream.huffman_build(h)
        stages.append(
            {
                "stage": k,
                "codebook_size": size,
                "normalized_entropy": bitstream.normalized_entropy(h),
                "entropy_bits": bitstream.entropy_bits(h),
                "huffman_bps": bitstream.huffman_bitrate(h, table, ts.frame_rate),
                "raw_bps": ts.frame_rate * bitstream.token_bits(size),
            }
        )
    pooled = bitstream.pooled_histogram(ts)
    table = bitstream.huffman_build(pooled)
    body = {
        "frames": ts.n_frames,
        "frame_rate": ts.frame_rate,
        "raw_bps": ts.bps(),
        "pooled_huffman_bps": bitstream.huffman_bitrate(pooled, table, ts.frame_rate * ts.n_stages),
        "stages": stages,
    }
    _emit(args, render_report("stats", body))


def cmd_bps(args) -> None:
    sys.stdout.write(_format_number(bitstream.bps(args.rate, args.codebooks)) + "\n")


def cmd_rf(args) -> None:
    if args.layers:
        try:
            raw = json.loads(Path(args.layers).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"layer file is not JSON: {exc.msg}", exc.pos) from None
        if not isinstance(raw, list):
            raise InvalidConfig("layer file must hold a list of layer objects")
        allowed = {"kind", "length", "rate", "stride", "dilation", "causal", "name"}
        layers = []
        for item in raw:
            if not isinstance(item, dict) or set(item) - allowed:
                raise InvalidConfig(f"layer entries may only use the keys {sorted(allowed)}")
            layers.append(analysis.LayerSpec(**item))
    else:
        layers = analysis.taae_layers(args.window, args.causal)
    rf = analysis.receptive_field(layers)
    body = {"receptive_field": rf, "layers": len(layers)}
    if args.latent_rate is not None:
        mode = analysis.Chunked(args.chunk) if args.chunk else "causal"
        body["latency_s"] = analysis.latency(float(args.latent_rate), mode)
    _emit(args, render_report("rf", body))


def cmd_fftplan(args) -> None:
    plan = analysis.fft_plan(args.base_hop, args.ratio, args.count)
    body = {"sizes": plan.sizes, "hops": plan.hops}
    if len(plan.sizes) >= 2:
        body["inharmonicity"] = analysis.inharmonicity_score(plan)
    if args.compare_hop:
        ref = analysis.fft_plan(args.compare_hop, 2.0, args.count)
        body["power_of_two"] = {"sizes": ref.sizes, "inharmonicity": analysis.inharmonicity_score(ref)}
    if args.probe:
        if not args.compare_hop:
            raise InvalidConfig("--probe needs --compare-hop for the power-of-two reference")
        body["sensitivity"] = sensitivity_comparison(ref, plan, args.probe_samples, args.seed)
    _emit(args, render_report("fftplan", body))


def sensitivity_comparison(pow2: analysis.FFTPlan, other: analysis.FFTPlan, n: int, seed: int) -> dict:
    """Folded time-marginal peak-to-mean ratios for two plans on one noise signal.

    The time marginal is averaged over segments one largest power-of-two hop
    long, which lines up every frame grid of that plan.
    """
    probe = filterbank.FilterbankSpec("stft", 32, 8)
    rng = np.random.default_rng(seed)
    x = 0.1 * rng.standard_normal(n)
    ref = 0.1 * rng.standard_normal(n)
    period = pow2.hops[-1] // probe.hop
    skip = 2 * max(pow2.sizes[-1], other.sizes[-1]) // probe.hop
    out = {"period_frames": period}
    for name, plan in (("power_of_two", pow2), ("plan", other)):
        smap = analysis.sensitivity_map(x, probe, analysis.MultiResSTFTLoss.from_plan(plan, ref))
        out[name] = smap.folded_peak_to_mean(period, skip)
    return out


def cmd_fbank(args) -> None:
    spec = filterbank.FilterbankSpec(args.family, args.size, args.hop, args.window)
    if args.wav:
        x = wav_read(args.wav).to_mono().samples
    else:
        x = np.random.default_rng(args.seed).uniform(-1, 1, args.samples)
    report = filterbank.roundtrip_report(x, spec)
    _emit(args, render_report("fbank", {"family": args.family, "size": args.size, "roundtrip": report}))


def _model_from_args(args) -> toymodel.Model:
    names = [f for f in toymodel.ModelSpec.__dataclass_fields__]
    params = {}
    seed = 0
    if args.config:
        cfg = RunConfig.load(args.config, names)
        params, seed = dict(cfg.params), cfg.seed
    params.setdefault("seed", seed)
    if args.causal:
        params["causal"] = True
    return toymodel.build(toymodel.ModelSpec.from_dict(params))


def cmd_toymodel(args) -> None:
    model = _model_from_args(args)
    spec = model.spec
    if args.action == "build":
        params = model.parameters()
        body = {
            "spec": spec.to_dict(),
            "parameter_count": int(sum(p.size for p in params.values())),
            "frame_rate": spec.frame_rate,
            "gain_bound_db": model.gain_bound_db,
            "analytic_rf_s": model.analytic_receptive_field().total,
        }
    elif args.action == "encode":
        audio = _codec_audio(args.input)
        _, ts = toymodel.encode(model, audio.samples)
        Path(args.output).write_bytes(bitstream.pack_stream(ts, "raw"))
        body = {"frames": ts.n_frames, "bps": ts.bps()}
    elif args.action == "decode":
        ts = _read_stream(args.input)
        y = toymodel.decode(model, ts)
        written = wav_write(args.output, WavAudio(spec.sample_rate, y))
        body = {"samples": len(y), "clipped": written.clipped}
    elif args.action == "causality":
        body = {"causality": toymodel.check_causality(model)}
    else:
        T = args.T or int(2 * model.analytic_receptive_field().total * spec.sample_rate) + spec.hop
        body = {"receptive_field": toymodel.measure_receptive_field(model, T, seed=args.seed)}
    _emit(args, render_report("toymodel", body))


def cmd_metrics(args) -> None:
    ref = _codec_audio(args.ref).samples
    est = _codec_audio(args.est).samples
    _emit(args, render_report("metrics", metrics.compute_metrics(ref, est).to_dict()))


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fsqcodec", description="FSQ codec toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--report", help="write the JSON report here instead of stdout")
        return sp

    sp = add("quantize", cmd_quantize, "latent file -> FSQB container")
    sp.add_argument("latent")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--levels", type=_levels_arg, required=True, help="one count, or one per dimension")
    sp.add_argument("--mode", choices=("raw", "huffman"), default="raw")

    sp = add("dequantize", cmd_dequantize, "FSQB container -> latent file")
    sp.add_argument("container")
    sp.add_argument("-o", "--output", required=True)

    sp = add("residual", cmd_residual, "residual decompose / reconstruct")
    sp.add_argument("action", choices=("decompose", "reconstruct"))
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--L", type=int, default=5)
    sp.add_argument("--stages", type=int, default=2)
    sp.add_argument("--mode", choices=("raw", "huffman"), default="raw")

    sp = add("pack", cmd_pack, "token listing -> FSQB container")
    sp.add_argument("listing")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--mode", choices=("raw", "huffman"), default="raw")

    sp = sub.add_parser("unpack", help="FSQB container -> token listing")
    sp.set_defaults(func=cmd_unpack)
    sp.add_argument("container")
    sp.add_argument("-o", "--output")

    sp = add("stats", cmd_stats, "entropy and Huffman bitrate of a container")
    sp.add_argument("container")

    sp = sub.add_parser("bps", help="bitrate calculator")
    sp.set_defaults(func=cmd_bps)
    sp.add_argument("--rate", type=_rate_arg, required=True)
    sp.add_argument("--codebooks", type=int, nargs="+", required=True)

    sp = add("rf", cmd_rf, "receptive field and latency")
    sp.add_argument("layers", nargs="?", help="JSON list of layer specs (default: full-size model)")
    sp.add_argument("--window", type=int, default=128)
    sp.add_argument("--causal", action="store_true")
    sp.add_argument("--latent-rate", type=_rate_arg)
    sp.add_argument("--chunk", type=float, help="chunk length in seconds for chunked latency")

    sp = add("fftplan", cmd_fftplan, "inharmonic FFT plan")
    sp.add_argument("--base-hop", type=float, default=39)
    sp.add_argument("--ratio", type=float, default=analysis.GOLDEN_RATIO)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--compare-hop", type=int, help="base hop of a power-of-two reference plan")
    sp.add_argument("--probe", action="store_true", help="run the sensitivity comparison")
    sp.add_argument("--probe-samples", type=int, default=1 << 14)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("fbank", cmd_fbank, "filterbank round-trip report")
    sp.add_argument("--family", choices=("patch", "stft", "mdct", "pqmf"), required=True)
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--hop", type=int)
    sp.add_argument("--window", default="hann")
    sp.add_argument("--wav")
    sp.add_argument("--samples", type=int, default=1 << 15)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("toymodel", cmd_toymodel, "toy autoencoder probes")
    sp.add_argument("action", choices=("build", "encode", "decode", "causality", "rf"))
    sp.add_argument("input", nargs="?")
    sp.add_argument("-o", "--output")
    sp.add_argument("--config", help="JSON run config with model params and seed")
    sp.add_argument("--causal", action="store_true")
    sp.add_argument("--T", type=int, help="probe length in samples for rf")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("metrics", cmd_metrics, "objective metrics between two WAV files")
    sp.add_argument("ref")
    sp.add_argument("est")
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "toymodel" and args.action in ("encode", "decode") and not (args.input and args.output):
            raise UsageError("toymodel encode/decode need an input and -o output")
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _warn_to_stderr
            args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (InvalidConfig, InvalidLevelCount) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (FsqError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def _warn_to_stderr(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
