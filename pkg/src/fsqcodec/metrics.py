"""Objective metrics and training-loss formulas as pure functions.

Spectrogram-based distances all use a periodic Hann window of 2048 samples
with a 2048-point FFT. The mel variant hops by 256 and pools into 128
triangular bands; the linear variant hops by 512. Both combine the mean L1
distance of log magnitudes with the spectral convergence of linear
magnitudes, weighted equally.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import InvalidConfig, ShapeError, UndefinedReference
from .filterbank import FilterbankSpec, stft_forward

SI_SDR_CAP_DB = 300.0
LOG_FLOOR = 1e-5
SAMPLE_RATE = 16000
N_FFT = 2048
MEL_HOP = 256
STFT_HOP = 512
N_MELS = 128


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, capped at ``SI_SDR_CAP_DB``."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0:
        raise UndefinedReference("reference is all zeros")
    target = (np.dot(est, ref) / ref_energy) * ref
    noise = est - target
    num = np.dot(target, target)
    den = np.dot(noise, noise)
    if den == 0:
        return SI_SDR_CAP_DB
    if num == 0:
        return -SI_SDR_CAP_DB
    return float(min(SI_SDR_CAP_DB, 10 * np.log10(num / den)))


def spectral_convergence(ref_mag, est_mag) -> float:
    ref_mag = np.asarray(ref_mag, dtype=np.float64)
    est_mag = np.asarray(est_mag, dtype=np.float64)
    if ref_mag.shape != est_mag.shape:
        raise ShapeError(f"shape mismatch: {ref_mag.shape} vs {est_mag.shape}")
    ref_norm = np.linalg.norm(ref_mag)
    if ref_norm == 0:
        raise UndefinedReference("reference magnitudes are all zero")
    return float(np.linalg.norm(ref_mag - est_mag) / ref_norm)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Area-normalized triangular filters from 0 Hz to Nyquist, ``(n_mels, bins)``."""
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    tri = np.maximum(0.0, np.minimum(up, down))
    return tri * (2.0 / (hi - lo))


def _magnitudes(x: np.ndarray, hop: int) -> np.ndarray:
    spec = FilterbankSpec("stft", N_FFT, hop, "hann")
    return np.abs(stft_forward(x, spec).data)


def _two_part_distance(ref_mag: np.ndarray, est_mag: np.ndarray) -> float:
    log_l1 = np.mean(
        np.abs(np.log(np.maximum(ref_mag, LOG_FLOOR)) - np.log(np.maximum(est_mag, LOG_FLOOR)))
    )
    return float(log_l1 + spectral_convergence(ref_mag, est_mag))


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ShapeError(f"need equal-length 1-D signals, got {ref.shape} and {est.shape}")
    return ref, est


def mel_distance(ref, est) -> float:
    ref, est = _pair(ref, est)
    fb = mel_filterbank()
    return _two_part_distance(
        _magnitudes(ref, MEL_HOP) @ fb.T, _magnitudes(est, MEL_HOP) @ fb.T
    )


def stft_distance(ref, est) -> float:
    ref, est = _pair(ref, est)
    return _two_part_distance(_magnitudes(ref, STFT_HOP), _magnitudes(est, STFT_HOP))


@dataclass(frozen=True)
class MetricReport:
    si_sdr: float
    mel_distance: float
    stft_distance: float

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(ref, est) -> MetricReport:
    return MetricReport(si_sdr(ref, est), mel_distance(ref, est), stft_distance(ref, est))


# -- loss formulas ----------------------------------------------------------

FeatureStack = Sequence[np.ndarray]


def _layer_term(ref: np.ndarray, est: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeError(f"feature shape mismatch: {ref.shape} vs {est.shape}")
    if ref.ndim == 3:
        # leading batch axis: per-example L1 norms, averaged over the batch
        num = np.abs(ref - est).reshape(len(ref), -1).sum(axis=1).mean()
        den = np.abs(ref).reshape(len(ref), -1).sum(axis=1).mean()
    else:
        num = np.abs(ref - est).sum()
        den = np.abs(ref).sum()
    if den == 0:
        raise UndefinedReference("reference features are all zero")
    return float(num / den)


def feature_matching_loss(ref_feats: Sequence[FeatureStack], est_feats: Sequence[FeatureStack]) -> float:
    """Normalized L1 feature matching averaged over discriminators and layers.

    Each layer's L1 error is divided by the batch-mean L1 norm of the
    reference features of that layer.
    """
    if len(ref_feats) != len(est_feats) or not ref_feats:
        raise ShapeError("need the same, non-zero number of feature stacks")
    terms = []
    for ref_stack, est_stack in zip(ref_feats, est_feats):
        if len(ref_stack) != len(est_stack) or not len(ref_stack):
            raise ShapeError("feature stacks must have the same, non-zero layer count")
        terms += [_layer_term(r, e) for r, e in zip(ref_stack, est_stack)]
    return float(np.mean(terms))


def perceptual_loss(ref_layers: FeatureStack, est_layers: FeatureStack) -> float:
    """Same normalized L1 over the layers of a single feature model."""
    return feature_matching_loss([ref_layers], [est_layers])


def l1_waveform(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.mean(np.abs(x - x_hat)))


def l1_stft(x, x_hat) -> float:
    x, x_hat = _pair(x, x_hat)
    return float(np.mean(np.abs(_magnitudes(x, STFT_HOP) - _magnitudes(x_hat, STFT_HOP))))


def pretrain_loss(x, x_hat, step: int, gamma: float, ref_feats, est_feats) -> float:
    """Feature matching plus exponentially decayed waveform and STFT L1 terms."""
    if not 0 < gamma <= 1:
        raise InvalidConfig(f"gamma must lie in (0, 1], got {gamma}")
    weight = gamma**step
    disc = feature_matching_loss(ref_feats, est_feats)
    if weight == 0.0:
        return disc
    return disc + weight * l1_waveform(x, x_hat) + weight * l1_stft(x, x_hat)


def finetune_loss(disc_ref, disc_est, perc_ref, perc_est) -> float:
    return feature_matching_loss(disc_ref, disc_est) + perceptual_loss(perc_ref, perc_est)
