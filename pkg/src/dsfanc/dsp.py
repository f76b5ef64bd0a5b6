"""Shared DSP primitives: STFT features, Welch PSD, band-limited noise and
the windowed noise-reduction metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window, welch

FS = 16000
WIN_LEN = 1024
HOP = 64
FRAME_LEN = 8000  # 0.5 s at 16 kHz
NR_FLOOR_DB = 120.0


@dataclass
class Spectrogram:
    bins: np.ndarray  # complex, (n_freq, n_frames)
    fs: float
    win_len: int
    hop: int

    @property
    def n_freq(self) -> int:
        return self.bins.shape[0]

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


def n_stft_frames(n_samples: int, win_len: int = WIN_LEN, hop: int = HOP) -> int:
    return (n_samples - win_len) // hop + 1


def _frames(x: np.ndarray, win_len: int, hop: int) -> np.ndarray:
    # (..., n_frames, win_len) windowed views, no padding
    return sliding_window_view(x, win_len, axis=-1)[..., ::hop, :]


def stft(x, win_len: int = WIN_LEN, hop: int = HOP, fs: float = FS) -> Spectrogram:
    """One-sided Hann-windowed STFT, unnormalized DFT (numpy convention).

    Per frame, the two-sided sum of ``|X_k|**2`` equals
    ``win_len * sum(|w * x|**2)``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D signal")
    if x.size < win_len:
        raise ValueError(f"signal of {x.size} samples is shorter than one {win_len}-sample window")
    w = get_window("hann", win_len)
    X = np.fft.rfft(_frames(x, win_len, hop) * w, axis=-1)
    return Spectrogram(bins=X.T, fs=fs, win_len=win_len, hop=hop)


def features(frame, win_len: int = WIN_LEN, hop: int = HOP, n_channels: int = 4,
             frame_len: int = FRAME_LEN, log_magnitude: bool = False) -> np.ndarray:
    """Magnitude and phase spectrograms of a J-channel frame.

    Returns ``(2J, win_len//2 + 1, n_frames)``: channels ``0..J-1`` hold
    ``|X|`` (or ``log1p|X|``), channels ``J..2J-1`` the phase in radians.
    Phase of an exactly-zero bin is 0.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2 or frame.shape != (n_channels, frame_len):
        raise ValueError(f"expected a ({n_channels}, {frame_len}) frame, got {frame.shape}")
    w = get_window("hann", win_len)
    X = np.fft.rfft(_frames(frame, win_len, hop) * w, axis=-1)  # (J, T, F)
    X = np.swapaxes(X, 1, 2)
    mag = np.abs(X)
    phase = np.where(mag > 0, np.angle(X), 0.0)
    # angle() returns -pi for negative-real bins; move it to +pi
    phase = np.where(phase <= -np.pi, np.pi, phase)
    if log_magnitude:
        mag = np.log1p(mag)
    return np.concatenate([mag, phase], axis=0)


def standardize_magnitude(feat: np.ndarray, n_channels: int = 4, eps: float = 1e-12) -> np.ndarray:
    """Per-sample standardization of the magnitude channels, pooled over all
    J channels so interchannel level differences survive."""
    out = np.array(feat, dtype=float, copy=True)
    mag = out[:n_channels]
    mu, sd = mag.mean(), mag.std()
    out[:n_channels] = (mag - mu) / (sd + eps)
    return out


def relative_magnitude(feat: np.ndarray, n_channels: int = 4, eps: float = 1e-12) -> np.ndarray:
    """Magnitude channels as deviations from the per-bin mean over the J
    channels, scaled by their pooled standard deviation.

    Removes the source spectrum common to all microphones and leaves the
    interchannel level differences, which are a few percent of the
    magnitude for a 2.5 cm array and otherwise hard to learn.
    """
    out = np.array(feat, dtype=float, copy=True)
    dev = out[:n_channels] - out[:n_channels].mean(axis=0, keepdims=True)
    out[:n_channels] = dev / (dev.std() + eps)
    return out


NORMALIZATIONS = ("relative", "pooled", "none")


def normalize_magnitude(feat: np.ndarray, mode: str = "relative", n_channels: int = 4) -> np.ndarray:
    """Per-sample CNN input normalization of the magnitude channels; phase
    channels pass through unchanged."""
    if mode == "relative":
        return relative_magnitude(feat, n_channels)
    if mode == "pooled":
        return standardize_magnitude(feat, n_channels)
    if mode == "none":
        return np.asarray(feat, dtype=float)
    raise ValueError(f"unknown normalization {mode!r}; choose from {NORMALIZATIONS}")


def bandlimited_noise(lo_hz: float, hi_hz: float, duration_s: float, fs: float = FS,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Gaussian noise masked to ``[lo_hz, hi_hz]`` in the DFT domain, unit variance."""
    if not (0 <= lo_hz < hi_hz <= fs / 2):
        raise ValueError(f"invalid band [{lo_hz}, {hi_hz}] Hz for fs={fs}")
    if rng is None:
        raise ValueError("rng is required")
    n = int(round(duration_s * fs))
    X = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    X[(f < lo_hz) | (f > hi_hz)] = 0.0
    x = np.fft.irfft(X, n)
    x -= x.mean()
    return x / x.std()


def psd(x, fs: float = FS, seg_len: int = 4096, overlap: float = 0.5):
    """Welch PSD (Hann segments, one-sided, power per Hz).

    Returns ``(frequency_hz, power)``; the power integrates to the signal
    variance.
    """
    x = np.asarray(x, dtype=float)
    if x.size < seg_len:
        raise ValueError(f"signal of {x.size} samples is shorter than the {seg_len}-sample segment")
    return welch(x, fs=fs, window="hann", nperseg=seg_len, noverlap=int(seg_len * overlap),
                 detrend=False, scaling="density")


def noise_reduction_series(d, e, window_s: float = 0.5, fs: float = FS) -> np.ndarray:
    """NR per non-overlapping window, ``10 log10(sum d^2 / sum e^2)`` in dB,
    floored at 120 dB."""
    d = np.asarray(d, dtype=float)
    e = np.asarray(e, dtype=float)
    if d.shape != e.shape:
        raise ValueError(f"trace lengths differ: {d.shape} vs {e.shape}")
    n = int(round(window_s * fs))
    k = d.size // n
    if k < 1:
        raise ValueError("traces are shorter than one window")
    pd = np.sum(d[: k * n].reshape(k, n) ** 2, axis=1)
    pe = np.sum(e[: k * n].reshape(k, n) ** 2, axis=1)
    pe = np.maximum(pe, pd * 10.0 ** (-NR_FLOOR_DB / 10.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        nr = 10.0 * np.log10(pd / pe)
    return np.where(pd > 0, nr, 0.0)
