"""WAV ingest and sample-rate conversion.

All downstream processing assumes mono 16 kHz audio; this module owns the
conversion from arbitrary PCM WAV files to that canonical form, including
the fixed-length pad/truncate policy used for training tensors.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .errors import AudioFormatError, IngestError, ParameterError
from .validation import check_samples

TARGET_SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0

# Polyphase anti-alias filter: windowed sinc, 64 taps per phase, Kaiser
# beta 14 (stopband attenuation well past 90 dB).
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 14.0

_PCM_SCALES = {
    np.dtype(np.int16): 32768.0,
    np.dtype(np.int32): 2147483648.0,
}


@dataclass
class AudioClip:
    """Mono waveform pinned to the target sample rate."""

    samples: np.ndarray
    sample_rate: int = TARGET_SAMPLE_RATE
    source_path: str = ""

    def __post_init__(self):
        self.samples = check_samples(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / float(self.sample_rate)


def resample(x, sr_in, sr_out):
    """Rational polyphase resampling with a Kaiser-windowed sinc filter.

    Pass-through (copy) when the rates already match. Output length is
    ceil(len(x) * sr_out / sr_in).
    """
    x = check_samples(x)
    if sr_in <= 0 or sr_out <= 0:
        raise ParameterError("sample rates must be positive")
    if sr_in == sr_out:
        return x.copy()

    g = math.gcd(int(sr_in), int(sr_out))
    up, down = int(sr_out) // g, int(sr_in) // g

    numtaps = RESAMPLE_TAPS_PER_PHASE * up + 1
    cutoff = min(1.0 / up, 1.0 / down)  # relative to the upsampled Nyquist
    h = signal.firwin(numtaps, cutoff, window=("kaiser", RESAMPLE_KAISER_BETA))
    h = h * up

    # Prepend zeros so the filter delay is an integer number of output steps.
    half = numtaps // 2
    n_pre_pad = (down - half % down) % down
    n_pre_remove = (half + n_pre_pad) // down
    n_out = -((-len(x) * up) // down)  # ceil division

    y = signal.upfirdn(np.concatenate([np.zeros(n_pre_pad), h]), x, up=up, down=down)
    deficit = n_out + n_pre_remove - len(y)
    if deficit > 0:
        y = np.concatenate([y, np.zeros(deficit)])
    return y[n_pre_remove:n_pre_remove + n_out]


def pad_or_truncate(x, n_samples):
    """Right-pad with zeros or drop the tail to reach exactly ``n_samples``."""
    x = check_samples(x)
    if len(x) >= n_samples:
        return x[:n_samples].copy()
    out = np.zeros(n_samples, dtype=np.float64)
    out[:len(x)] = x
    return out


def load_wav(path, pad_seconds=CLIP_SECONDS):
    """Read a PCM WAV file into a canonical AudioClip.

    Stereo input is averaged to mono; any input rate is resampled to 16 kHz.
    With ``pad_seconds`` set (the default, 10 s) the waveform is zero-padded
    or truncated to that exact length; pass ``None`` to keep the natural
    length (used when cropping long recordings).
    """
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError as exc:
        raise IngestError(f"cannot read audio file: {path}") from exc
    except OSError as exc:
        raise IngestError(f"cannot read audio file: {path}") from exc
    except ValueError as exc:
        raise AudioFormatError(f"unsupported WAV encoding in {path}: {exc}") from exc

    if data.ndim == 2:
        if data.shape[1] > 2:
            raise AudioFormatError(
                f"{path}: expected 1 or 2 channels, got {data.shape[1]}"
            )
        data = data.astype(np.float64).mean(axis=1)
    elif data.ndim != 1:
        raise AudioFormatError(f"{path}: unsupported sample layout {data.shape}")

    if data.dtype in _PCM_SCALES:
        samples = data.astype(np.float64) / _PCM_SCALES[data.dtype]
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample dtype {data.dtype}")

    if len(samples) == 0:
        raise AudioFormatError(f"{path}: file contains no samples")

    samples = resample(samples, int(sr), TARGET_SAMPLE_RATE)
    if pad_seconds is not None:
        samples = pad_or_truncate(samples, int(round(pad_seconds * TARGET_SAMPLE_RATE)))
    return AudioClip(samples=samples, sample_rate=TARGET_SAMPLE_RATE, source_path=str(path))


def write_wav(path, samples, sample_rate=TARGET_SAMPLE_RATE):
    """Write a mono waveform as 16-bit PCM (values clipped to [-1, 1])."""
    samples = check_samples(samples)
    pcm = np.clip(samples, -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype(np.int16)
    wavfile.write(str(path), int(sample_rate), pcm)
