"""Forward-only, deterministic small transformer autoencoder with an FSQ bottleneck.

The graph follows the usual patched layout: the waveform is cut into
non-overlapping patches, projected to the embedding width, and passed
through encoder blocks. Each block starts with a strided convolution (when
its stride exceeds 1) followed by pre-norm transformer layers. A pointwise
projection and FSQ form the bottleneck. The decoder mirrors the encoder with
transposed convolutions placed at the end of each block.

All strided and transposed convolutions use kernel = stride, so frame
boundaries line up exactly and the causal variant only needs causal
attention. Everything runs in float64 with no training and no autodiff.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from .analysis import ReceptiveField, layernorm_gain_cap, receptive_field, taae_layers
from .bitstream import TokenStream
from .errors import DecodeError, InvalidConfig, SaturatedMeasurement
from .filterbank import patch_forward
from .quantizer import QuantizerSpec, dequantize_tokens, quantize_frames

ROPE_BASE = 10000.0
LAYERSCALE_INIT = 1e-2
QK_NORM_EPS = 1e-6
RF_THRESHOLD = 1e-7
_QUERY_BLOCK = 128


@dataclass(frozen=True)
class ModelSpec:
    patch: int = 320
    blocks: tuple[tuple[int, int], ...] = ((2, 1), (4, 2))  # (layers, stride)
    dim: int = 64
    head_dim: int = 16
    window: int = 128
    causal: bool = False
    eps: float = 1e-2
    ff_mult: int = 4
    levels: tuple[int, ...] = (17,) * 6
    seed: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        blocks = tuple((int(n), int(s)) for n, s in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "levels", tuple(int(L) for L in self.levels))
        if not blocks:
            raise InvalidConfig("need at least one encoder block")
        if any(n < 0 or s < 1 for n, s in blocks):
            raise InvalidConfig("block layer counts must be >= 0 and strides >= 1")
        for name in ("patch", "dim", "head_dim", "window", "ff_mult", "sample_rate"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.dim % self.head_dim:
            raise InvalidConfig(f"dim {self.dim} is not a multiple of head_dim {self.head_dim}")
        if self.head_dim % 2:
            raise InvalidConfig("head_dim must be even for rotary embeddings")
        if not self.eps > 0:
            raise InvalidConfig("layer-norm eps must be positive")
        self.quantizer  # validates the level counts

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, s in self.blocks)

    @property
    def hop(self) -> int:
        """Input samples per latent frame."""
        return self.patch * self.total_stride

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.sample_rate, self.hop)

    @property
    def quantizer(self) -> QuantizerSpec:
        return QuantizerSpec(self.levels, self.frame_rate)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["blocks"] = [list(b) for b in self.blocks]
        out["levels"] = list(self.levels)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc


@dataclass(frozen=True)
class LatentSequence:
    values: np.ndarray  # (frames, d), tanh-bounded
    frame_rate: Fraction


# -- parameters -------------------------------------------------------------


def _wn(rng: np.random.Generator, fan_in: int, fan_out: int) -> dict:
    """Weight-normalized matrix: direction ``v`` and per-output gain ``g``."""
    v = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
    return {"v": v, "g": np.linalg.norm(v, axis=0)}


def _wn_weight(p: dict) -> np.ndarray:
    return p["v"] * (p["g"] / np.linalg.norm(p["v"], axis=0))


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)


def _layer_params(rng: np.random.Generator, spec: ModelSpec) -> dict:
    D, F = spec.dim, spec.ff_mult * spec.dim
    return {
        "ln1": np.ones(D),
        "wq": _dense(rng, D, D),
        "wk": _dense(rng, D, D),
        "wv": _dense(rng, D, D),
        "wo": _dense(rng, D, D),
        "ls1": np.full(D, LAYERSCALE_INIT),
        "ln2": np.ones(D),
        "w_gate": _dense(rng, D, F),
        "w_up": _dense(rng, D, F),
        "w_down": _dense(rng, F, D),
        "ls2": np.full(D, LAYERSCALE_INIT),
    }


@dataclass(frozen=True)
class Model:
    spec: ModelSpec
    params: dict = field(repr=False)
    gain_bound_db: float

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view, in a fixed order."""
        out = {}

        def walk(prefix, node):
            if isinstance(node, dict):
                for key in node:
                    walk(f"{prefix}.{key}" if prefix else key, node[key])
            elif isinstance(node, list):
                for i, item in enumerate(node):
                    walk(f"{prefix}.{i}", item)
            else:
                out[prefix] = node

        walk("", self.params)
        return out

    def layer_specs(self):
        return taae_layers(self.spec.window, self.spec.causal, self.spec.sample_rate, self.spec.patch, self.spec.blocks)

    def analytic_receptive_field(self) -> ReceptiveField:
        return receptive_field(self.layer_specs())

    def latency(self) -> float:
        """Streaming delay of the causal build: one latent frame."""
        if not self.spec.causal:
            raise InvalidConfig("latency is only defined for the causal build")
        return float(1 / self.spec.frame_rate)


def build(spec: ModelSpec) -> Model:
    rng = np.random.default_rng(spec.seed)
    D = spec.dim
    enc_blocks, dec_blocks = [], []
    for n_layers, stride in spec.blocks:
        enc_blocks.append(
            {
                "down": _wn(rng, stride * D, D) if stride > 1 else None,
                "layers": [_layer_params(rng, spec) for _ in range(n_layers)],
            }
        )
    for n_layers, stride in reversed(spec.blocks):
        dec_blocks.append(
            {
                "layers": [_layer_params(rng, spec) for _ in range(n_layers)],
                "up": _wn(rng, D, stride * D) if stride > 1 else None,
            }
        )
    params = {
        "enc_in": _wn(rng, spec.patch, D),
        "enc_blocks": enc_blocks,
        "enc_ln": np.ones(D),
        "bottleneck": _wn(rng, D, len(spec.levels)),
        "dec_in": _wn(rng, len(spec.levels), D),
        "dec_blocks": dec_blocks,
        "dec_ln": np.ones(D),
        "dec_out": _wn(rng, D, spec.patch),
    }
    params = _drop_none(params)
    model = Model(spec, params, 0.0)
    object.__setattr__(model, "gain_bound_db", _encoder_gain_bound_db(model))
    return model


def _drop_none(node):
    if isinstance(node, dict):
        return {k: _drop_none(v) for k, v in node.items() if v is not None}
    if isinstance(node, list):
        return [_drop_none(v) for v in node]
    return node


# -- forward pieces ---------------------------------------------------------


def layer_norm(x: np.ndarray, eps: float, weight=None) -> np.ndarray:
    """Normalize each frame by ``std + eps`` so the gain never exceeds ``1/eps``."""
    centered = x - x.mean(axis=-1, keepdims=True)
    std = np.sqrt(np.mean(centered**2, axis=-1, keepdims=True))
    y = centered / (std + eps)
    return y if weight is None else y * weight


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate the two halves of each head by position-dependent angles."""
    half = x.shape[-1] // 2
    freqs = ROPE_BASE ** (-np.arange(half) / half)
    angle = positions[:, None, None] * freqs  # (N, 1, half)
    cos, sin = np.cos(angle), np.sin(angle)
    a, b = x[..., :half], x[..., half:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=-1)


def _qk_norm(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x**2, axis=-1, keepdims=True))
    return x / (rms + QK_NORM_EPS)


def window_offsets(window: int, causal: bool) -> tuple[int, int]:
    """Smallest and largest key offset (key - query) inside the window."""
    if causal:
        return -(window - 1), 0
    lo = -(window // 2)
    return lo, lo + window - 1


def attention(u: np.ndarray, p: dict, spec: ModelSpec) -> np.ndarray:
    N, D = u.shape
    H, hd = D // spec.head_dim, spec.head_dim
    pos = np.arange(N, dtype=np.float64)
    q = _rope(_qk_norm((u @ p["wq"]).reshape(N, H, hd)), pos)
    k = _rope(_qk_norm((u @ p["wk"]).reshape(N, H, hd)), pos)
    v = (u @ p["wv"]).reshape(N, H, hd)
    lo, hi = window_offsets(spec.window, spec.causal)
    out = np.empty((N, H, hd))
    scale = 1.0 / math.sqrt(hd)
    # banded attention, one block of queries at a time
    for a in range(0, N, _QUERY_BLOCK):
        b = min(N, a + _QUERY_BLOCK)
        ka, kb = max(0, a + lo), min(N, b + hi)
        scores = np.einsum("qhc,khc->hqk", q[a:b], k[ka:kb]) * scale
        rel = np.arange(ka, kb)[None, :] - np.arange(a, b)[:, None]
        scores = np.where((rel >= lo) & (rel <= hi), scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        out[a:b] = np.einsum("hqk,khc->qhc", w, v[ka:kb])
    return out.reshape(N, D) @ p["wo"]


def feedforward(u: np.ndarray, p: dict) -> np.ndarray:
    return (_silu(u @ p["w_gate"]) * (u @ p["w_up"])) @ p["w_down"]


def _transformer_layer(x: np.ndarray, p: dict, spec: ModelSpec, trace) -> np.ndarray:
    u = layer_norm(x, spec.eps, p["ln1"])
    _record(trace, "ln", u, x)
    x = x + p["ls1"] * attention(u, p, spec)
    _record(trace, "attn", x)
    u = layer_norm(x, spec.eps, p["ln2"])
    _record(trace, "ln", u, x)
    x = x + p["ls2"] * feedforward(u, p)
    _record(trace, "ff", x)
    return x


def _record(trace, name, value, source=None):
    if trace is not None:
        trace.append((name, value, source))


def _down(x: np.ndarray, p: dict, stride: int) -> np.ndarray:
    N, D = x.shape
    return x.reshape(N // stride, stride * D) @ _wn_weight(p)


def _up(x: np.ndarray, p: dict, stride: int) -> np.ndarray:
    N, D = x.shape
    return (x @ _wn_weight(p)).reshape(N * stride, -1)


# -- encode / decode --------------------------------------------------------


def _pad_input(x, hop: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidConfig("input must be a 1-D signal")
    frames = max(1, -(-len(x) // hop))
    out = np.zeros(frames * hop)
    out[: len(x)] = x
    return out


def encode_continuous(model: Model, x, trace=None) -> np.ndarray:
    """Encoder up to the bottleneck projection (pre-tanh), ``(frames, d)``."""
    spec, p = model.spec, model.params
    patches = patch_forward(_pad_input(x, spec.hop), spec.patch).data
    _record(trace, "input", patches)
    h = patches @ _wn_weight(p["enc_in"])
    _record(trace, "enc_in", h)
    for (n_layers, stride), block in zip(spec.blocks, p["enc_blocks"]):
        if stride > 1:
            h = _down(h, block["down"], stride)
            _record(trace, "down", h)
        for lp in block["layers"]:
            h = _transformer_layer(h, lp, spec, trace)
    u = layer_norm(h, spec.eps, p["enc_ln"])
    _record(trace, "ln", u, h)
    pre = u @ _wn_weight(p["bottleneck"])
    _record(trace, "bottleneck", pre)
    return pre


def decode_values(model: Model, values) -> np.ndarray:
    """Decoder from bounded latent values ``(frames, d)`` to samples."""
    spec, p = model.spec, model.params
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != len(spec.levels):
        raise DecodeError(f"latents must be shaped (frames, {len(spec.levels)}), got {values.shape}")
    h = values @ _wn_weight(p["dec_in"])
    for (n_layers, stride), block in zip(reversed(spec.blocks), p["dec_blocks"]):
        for lp in block["layers"]:
            h = _transformer_layer(h, lp, spec, None)
        if stride > 1:
            h = _up(h, block["up"], stride)
    h = layer_norm(h, spec.eps, p["dec_ln"]) @ _wn_weight(p["dec_out"])
    return h.reshape(-1)


def encode(model: Model, x) -> tuple[LatentSequence, TokenStream]:
    spec = model.spec
    pre = encode_continuous(model, x)
    _, tokens = quantize_frames(pre, spec.quantizer)
    latents = LatentSequence(np.tanh(pre), spec.frame_rate)
    stream = TokenStream(spec.frame_rate, len(spec.levels), (spec.levels,), tokens.reshape(-1, 1))
    return latents, stream


def decode(model: Model, tokens: TokenStream) -> np.ndarray:
    spec = model.spec
    if tokens.stage_levels != (spec.levels,):
        raise DecodeError(f"token levels {tokens.stage_levels} do not match the model's {spec.levels}")
    if tokens.frame_rate != spec.frame_rate:
        raise DecodeError(f"token frame rate {tokens.frame_rate} differs from {spec.frame_rate}")
    values = dequantize_tokens(tokens.tokens[:, 0], spec.quantizer)
    return decode_values(model, values.reshape(-1, len(spec.levels)))


def reconstruct(model: Model, x, quantized: bool = True) -> np.ndarray:
    """``decode(encode(x))``; with ``quantized=False`` the tanh latents skip FSQ."""
    if quantized:
        return decode(model, encode(model, x)[1])
    return decode_values(model, np.tanh(encode_continuous(model, x)))


# -- activation gain --------------------------------------------------------


def _spec_norm(w: np.ndarray) -> float:
    return float(np.linalg.norm(w, 2))


def _encoder_gain_bound_db(model: Model) -> float:
    """Upper bound on peak frame-norm growth from input patches to the bottleneck.

    Levels are the largest per-frame L2 norm of an activation. A layer norm
    can grow a frame by at most ``1/eps`` and its output norm never exceeds
    ``sqrt(dim)``; attention output frames are convex mixtures of value
    frames; ``|silu(a)| <= |a|``. Chaining these per layer gives the bound.
    """
    spec, p = model.spec, model.params
    inv_eps = 1.0 / spec.eps
    D = spec.dim
    heads = D // spec.head_dim
    gain = _spec_norm(_wn_weight(p["enc_in"]))
    for (n_layers, stride), block in zip(spec.blocks, p["enc_blocks"]):
        if stride > 1:
            gain *= _spec_norm(_wn_weight(block["down"])) * math.sqrt(stride)
        for lp in block["layers"]:
            attn = np.abs(lp["ls1"]).max() * _spec_norm(lp["wo"]) * math.sqrt(heads) * _spec_norm(lp["wv"])
            ff = (
                np.abs(lp["ls2"]).max()
                * _spec_norm(lp["w_down"])
                * _spec_norm(lp["w_gate"])
                * _spec_norm(lp["w_up"])
                * math.sqrt(D)
            )
            gain *= (1 + attn * inv_eps) * (1 + ff * inv_eps)
    gain *= inv_eps * _spec_norm(_wn_weight(p["bottleneck"]))
    return 20.0 * math.log10(gain)


@dataclass(frozen=True)
class GainReport:
    input_level: float
    peak_gain_db: float  # largest activation level relative to the input level
    bound_db: float
    max_layernorm_gain_db: float
    layernorm_cap_db: float

    @property
    def ok(self) -> bool:
        return self.peak_gain_db <= self.bound_db and self.max_layernorm_gain_db <= self.layernorm_cap_db


def _peak_frame_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, axis=-1).max())


def gain_report(model: Model, x) -> GainReport:
    """Trace every encoder activation for ``x`` and compare with the bounds."""
    trace: list = []
    encode_continuous(model, x, trace)
    level = _peak_frame_norm(trace[0][1])
    if level == 0:
        raise InvalidConfig("gain is undefined for an all-zero input")
    peak = max(_peak_frame_norm(a) for _, a, _ in trace[1:])
    ln_gain = 0.0
    for name, out, src in trace:
        if name != "ln":
            continue
        centered = src - src.mean(axis=-1, keepdims=True)
        norms = np.linalg.norm(centered, axis=-1)
        live = norms > 0
        if live.any():
            ratio = np.linalg.norm(out, axis=-1)[live] / norms[live]
            ln_gain = max(ln_gain, float(ratio.max()))
    return GainReport(
        input_level=level,
        peak_gain_db=20.0 * math.log10(peak / level) if peak > 0 else -math.inf,
        bound_db=model.gain_bound_db,
        max_layernorm_gain_db=20.0 * math.log10(ln_gain) if ln_gain > 0 else -math.inf,
        layernorm_cap_db=layernorm_gain_cap(model.spec.eps),
    )


# -- empirical probes -------------------------------------------------------


@dataclass(frozen=True)
class RFMeasurement:
    seconds: float
    first: int
    last: int
    perturbed_at: int
    analytic_seconds: float


def measure_receptive_field(
    model: Model,
    T: int,
    delta: float = 1e-3,
    threshold: float = RF_THRESHOLD,
    seed: int = 0,
    quantized: bool = False,
) -> RFMeasurement:
    """Support width of the output change caused by an impulse at the centre.

    FSQ rounding makes the response to a small impulse discontinuous, so by
    default the tanh latents go straight to the decoder.
    """
    spec = model.spec
    analytic = model.analytic_receptive_field().total
    if T < 2 * analytic * spec.sample_rate:
        raise SaturatedMeasurement(
            f"T={T} samples is below twice the analytic receptive field ({analytic:.3f} s)"
        )
    rng = np.random.default_rng(seed)
    x = _pad_input(0.1 * rng.standard_normal(T), spec.hop)
    t = len(x) // 2
    bumped = x.copy()
    bumped[t] += delta
    diff = np.abs(reconstruct(model, bumped, quantized) - reconstruct(model, x, quantized))
    hit = np.flatnonzero(diff > threshold)
    if hit.size == 0:
        return RFMeasurement(0.0, t, t - 1, t, analytic)
    first, last = int(hit[0]), int(hit[-1])
    if first == 0 or last == len(x) - 1:
        raise SaturatedMeasurement("output change reaches the signal edge")
    return RFMeasurement((last - first + 1) / spec.sample_rate, first, last, t, analytic)


@dataclass(frozen=True)
class CausalityReport:
    causal: bool
    perturbed_at: int
    leakage: float  # largest output change before the perturbation sample
    response: float  # largest output change from the perturbation onwards

    @property
    def ok(self) -> bool:
        return self.leakage == 0.0


def check_causality(
    model: Model, frames: int = 16, delta: float = 0.5, seed: int = 0, quantized: bool = True
) -> CausalityReport:
    """Perturb one sample at a latent-frame boundary and look for earlier changes."""
    spec = model.spec
    rng = np.random.default_rng(seed)
    x = 0.1 * rng.standard_normal(frames * spec.hop)
    t = (frames // 2) * spec.hop
    bumped = x.copy()
    bumped[t] += delta
    diff = np.abs(reconstruct(model, bumped, quantized) - reconstruct(model, x, quantized))
    return CausalityReport(spec.causal, t, float(diff[:t].max(initial=0.0)), float(diff[t:].max(initial=0.0)))


def frame_count(spec: ModelSpec, n_samples: int) -> int:
    return max(1, -(-n_samples // spec.hop))


def square_wave(n: int, period: int, amplitude: float = 1.0) -> np.ndarray:
    return amplitude * np.where((np.arange(n) // (period // 2)) % 2 == 0, 1.0, -1.0)


def full_shape_spec(**overrides) -> ModelSpec:
    """Full block layout at toy width: 8 layers at stride 1, then 20 at stride 2."""
    base = dict(blocks=((8, 1), (20, 2)), dim=64, head_dim=16, window=128)
    base.update(overrides)
    return ModelSpec(**base)

