"""Three-channel time-frequency features.

A 10-s, 16 kHz clip maps to a 3x1001x128 tensor: a standard log-mel
spectrogram (slaney mel scale, no pre-emphasis), a speech-style log-mel
(0.97 pre-emphasis, HTK mel scale), and the orthonormal DCT-II of the
standard log-mel. All three share the same centered STFT grid so they can
be stacked channel-wise.
"""

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.fft import dct, rfft
from sklearn.base import BaseEstimator, TransformerMixin

from .audio import AudioClip, TARGET_SAMPLE_RATE, load_wav
from .errors import ParameterError, ShapeError, StateError
from .validation import check_feature_tensor, check_samples

N_FFT = 2048
HOP = 160
N_MELS = 128
LOG_FLOOR = 1e-6
PREEMPHASIS = 0.97
STD_FLOOR = 1e-8

CHANNEL_NAMES = ("logmel-standard", "logmel-speechstyle", "mfcc")


@dataclass
class FeatureTensor:
    """channels x frames x bins feature stack plus its normalization state."""

    data: np.ndarray
    channel_names: tuple = CHANNEL_NAMES
    normalized: bool = False

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_frames(self):
        return self.data.shape[1]

    @property
    def n_bins(self):
        return self.data.shape[2]


@dataclass
class MelBank:
    """Triangular filterbank over the rfft bins of one STFT frame."""

    weights: np.ndarray  # (n_filters, n_fft_bins), all >= 0
    scale: str
    f_min: float
    f_max: float
    center_freqs: np.ndarray

    @property
    def n_filters(self):
        return self.weights.shape[0]


@dataclass
class NormStats:
    """Per-channel scalar mean/std over a feature corpus."""

    mean: np.ndarray  # float64[n_channels]
    std: np.ndarray   # float64[n_channels], floored at STD_FLOOR
    n_clips_observed: int = 0


def hz_to_mel(freq, scale):
    """Map frequency in Hz to mel; ``scale`` is 'slaney' or 'htk'."""
    f = np.asarray(freq, dtype=np.float64)
    if scale == "htk":
        return 2595.0 * np.log10(1.0 + f / 700.0)
    if scale != "slaney":
        raise ParameterError(f"unknown mel scale: {scale!r}")
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = math.log(6.4) / 27.0
    mel = f / f_sp
    above = f >= min_log_hz
    if np.any(above):
        mel = np.where(
            above,
            min_log_hz / f_sp + np.log(np.maximum(f, min_log_hz) / min_log_hz) / logstep,
            mel,
        )
    return mel


def mel_to_hz(mel, scale):
    """Inverse of :func:`hz_to_mel`."""
    m = np.asarray(mel, dtype=np.float64)
    if scale == "htk":
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    if scale != "slaney":
        raise ParameterError(f"unknown mel scale: {scale!r}")
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    freq = m * f_sp
    above = m >= min_log_mel
    if np.any(above):
        freq = np.where(
            above,
            min_log_hz * np.exp(logstep * (np.maximum(m, min_log_mel) - min_log_mel)),
            freq,
        )
    return freq


def build_mel_bank(scale="slaney", f_min=0.0, f_max=8000.0, n_filters=N_MELS,
                   n_fft=N_FFT, sample_rate=TARGET_SAMPLE_RATE):
    """Build triangular mel filters with centers equally spaced on ``scale``."""
    if not 0.0 <= f_min < f_max <= sample_rate / 2.0:
        raise ParameterError(
            f"need 0 <= f_min < f_max <= {sample_rate / 2:.0f}, "
            f"got f_min={f_min}, f_max={f_max}"
        )
    mel_pts = np.linspace(hz_to_mel(f_min, scale), hz_to_mel(f_max, scale),
                          n_filters + 2)
    hz_pts = mel_to_hz(mel_pts, scale)
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)

    lower = hz_pts[:-2, None]
    center = hz_pts[1:-1, None]
    upper = hz_pts[2:, None]
    rising = (fft_freqs[None, :] - lower) / np.maximum(center - lower, 1e-12)
    falling = (upper - fft_freqs[None, :]) / np.maximum(upper - center, 1e-12)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    empty = ~(weights > 0).any(axis=1)
    if empty.any():
        raise ParameterError(
            f"{int(empty.sum())} mel filters have no positive weight; "
            f"reduce n_filters or widen [f_min, f_max]"
        )
    return MelBank(weights=weights, scale=scale, f_min=float(f_min),
                   f_max=float(f_max), center_freqs=hz_pts[1:-1].copy())


@lru_cache(maxsize=8)
def _default_bank(scale):
    return build_mel_bank(scale=scale)


def _hann_periodic(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(samples, n_fft=N_FFT, hop=HOP):
    """Centered STFT: reflect padding, periodic Hann window, rfft.

    Returns a complex (frames, n_fft // 2 + 1) array with
    frames = 1 + len(samples) // hop.
    """
    x = check_samples(samples)
    pad = n_fft // 2
    if len(x) < pad + 1:
        raise ShapeError(
            f"need at least {pad + 1} samples for centered analysis, got {len(x)}"
        )
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(padded) - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return rfft(frames * _hann_periodic(n_fft), axis=1)


def preemphasis(samples, coeff=PREEMPHASIS):
    """First-order high-pass y[n] = x[n] - coeff * x[n-1] (length preserving)."""
    x = check_samples(samples)
    y = x.copy()
    y[1:] -= coeff * x[:-1]
    return y


def logmel(spectrogram, bank):
    """Power spectrum through the filterbank, then log with a 1e-6 floor."""
    spec = np.asarray(spectrogram)
    if spec.ndim != 2 or spec.shape[1] != bank.weights.shape[1]:
        raise ShapeError(
            f"spectrogram bins {spec.shape} do not match bank "
            f"({bank.weights.shape[1]} bins)"
        )
    power = np.abs(spec).astype(np.float64) ** 2
    return np.log(power @ bank.weights.T + LOG_FLOOR)


def mfcc(logmel_matrix):
    """Orthonormal DCT-II along the mel-bin axis, keeping every coefficient."""
    m = np.asarray(logmel_matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"logmel matrix must be 2-D, got shape {m.shape}")
    return dct(m, type=2, norm="ortho", axis=1)


def extract_multichannel(clip: AudioClip) -> FeatureTensor:
    """Stack standard log-mel, speech-style log-mel, and MFCC channels."""
    if clip.sample_rate != TARGET_SAMPLE_RATE:
        raise ParameterError(
            f"clip must be at {TARGET_SAMPLE_RATE} Hz, got {clip.sample_rate}"
        )
    standard = logmel(stft(clip.samples), _default_bank("slaney"))
    speech = logmel(stft(preemphasis(clip.samples)), _default_bank("htk"))
    coeffs = mfcc(standard)
    data = np.stack([standard, speech, coeffs]).astype(np.float32)
    return FeatureTensor(data=data, channel_names=CHANNEL_NAMES, normalized=False)


def compute_norm_stats(tensors) -> NormStats:
    """Per-channel mean/std over all entries of all tensors.

    Partial sums are combined with math.fsum, so the result is exactly
    independent of corpus order.
    """
    partial_s1 = None
    partial_s2 = None
    counts = None
    n_clips = 0
    for tensor in tensors:
        check_feature_tensor(tensor)
        n_ch = tensor.n_channels
        if partial_s1 is None:
            partial_s1 = [[] for _ in range(n_ch)]
            partial_s2 = [[] for _ in range(n_ch)]
            counts = [0] * n_ch
        elif n_ch != len(partial_s1):
            raise ShapeError("tensors in the stream have differing channel counts")
        data = tensor.data.astype(np.float64)
        for c in range(n_ch):
            partial_s1[c].append(float(np.sum(data[c])))
            partial_s2[c].append(float(np.sum(data[c] ** 2)))
            counts[c] += data[c].size
        n_clips += 1
    if n_clips == 0:
        raise ParameterError("empty feature stream")

    mean = np.array([math.fsum(p) / counts[c] for c, p in enumerate(partial_s1)])
    ex2 = np.array([math.fsum(p) / counts[c] for c, p in enumerate(partial_s2)])
    var = np.maximum(ex2 - mean ** 2, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return NormStats(mean=mean, std=std, n_clips_observed=n_clips)


def normalize(tensor: FeatureTensor, stats: NormStats) -> FeatureTensor:
    """Apply (x - mean) / std per channel; refuses double normalization."""
    check_feature_tensor(tensor, normalized=False)
    if tensor.n_channels != len(stats.mean):
        raise ShapeError(
            f"stats cover {len(stats.mean)} channels, tensor has {tensor.n_channels}"
        )
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]
    data = ((tensor.data.astype(np.float64) - mean) / std).astype(np.float32)
    return replace(tensor, data=data, normalized=True)


def denormalize(tensor: FeatureTensor, stats: NormStats) -> FeatureTensor:
    """Invert :func:`normalize` (up to float32 rounding)."""
    check_feature_tensor(tensor, normalized=True)
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]
    data = (tensor.data.astype(np.float64) * std + mean).astype(np.float32)
    return replace(tensor, data=data, normalized=False)


def _as_clip(item, pad_seconds):
    if isinstance(item, AudioClip):
        return item
    if isinstance(item, (str,)) or hasattr(item, "__fspath__"):
        return load_wav(item, pad_seconds=pad_seconds)
    return AudioClip(samples=np.asarray(item, dtype=np.float64))


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Corpus-normalized feature extraction with a fit/transform surface.

    ``fit`` scans the corpus once to estimate per-channel mean/std;
    ``transform`` maps WAV paths, AudioClips, or raw waveforms to normalized
    FeatureTensors. Set ``normalize=False`` to skip fitting entirely.
    """

    def __init__(self, pad_seconds=CLIP_SECONDS, normalize=True):
        self.pad_seconds = pad_seconds
        self.normalize = normalize
        self.stats_ = None

    def _extract(self, item):
        return extract_multichannel(_as_clip(item, self.pad_seconds))

    def fit(self, X, y=None):
        if self.normalize:
            self.stats_ = compute_norm_stats(self._extract(item) for item in X)
        else:
            self.stats_ = NormStats(mean=np.zeros(3), std=np.ones(3))
        return self

    def transform(self, X):
        if self.stats_ is None:
            if self.normalize:
                raise StateError("FeatureExtractor is not fitted; call fit() first")
            return [self._extract(item) for item in X]
        if not self.normalize:
            return [self._extract(item) for item in X]
        return [normalize(self._extract(item), self.stats_) for item in X]
