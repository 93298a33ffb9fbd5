"""DSP primitives shared by every other module.

Buffers are plain numpy arrays: a mono buffer is 1-D, a binaural buffer has
shape ``(2, n)`` with row 0 the left ear and row 1 the right ear. Everything
runs at a fixed 16 kHz; nothing in this package resamples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.io.wavfile
import scipy.signal

from .errors import (
    DelayOutOfRange,
    SignalTooShort,
    UndefinedCorrelation,
    UnsupportedLayout,
    UnsupportedRate,
)

SAMPLE_RATE = 16000
MAX_DELAY_S = 2e-3


def as_mono(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise UnsupportedLayout(f"expected a 1-D mono buffer, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("buffer contains NaN or Inf")
    return x


def as_binaural(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != 2:
        raise UnsupportedLayout(f"expected a (2, n) binaural buffer, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("buffer contains NaN or Inf")
    return x


def mean_square(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x)) if x.size else 0.0


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 760
    hop_len: int = 640
    fft_len: int = 1024
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_len <= self.window_len <= self.fft_len:
            raise ValueError("need 0 < hop_len <= window_len <= fft_len")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    def analysis_window(self) -> np.ndarray:
        # periodic window (fftbins=True)
        return scipy.signal.get_window(self.window, self.window_len)


DEFAULT_STFT = StftConfig()


def n_frames(n_samples: int, cfg: StftConfig = DEFAULT_STFT) -> int:
    return (n_samples - cfg.window_len) // cfg.hop_len + 1


def stft(signal, cfg: StftConfig = DEFAULT_STFT) -> np.ndarray:
    """Frame, window and FFT the last axis of ``signal``.

    No padding is applied, so the first frame starts at sample 0 and the
    frame count is ``floor((n - window_len) / hop_len) + 1``. Leading axes are
    kept, giving an array of shape ``(..., frames, fft_len // 2 + 1)``.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.shape[-1] < cfg.window_len:
        raise SignalTooShort(
            f"signal of {x.shape[-1]} samples is shorter than one window ({cfg.window_len})"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len, axis=-1)
    frames = frames[..., :: cfg.hop_len, :]
    return np.fft.rfft(frames * cfg.analysis_window(), n=cfg.fft_len, axis=-1)


def istft(spec, cfg: StftConfig = DEFAULT_STFT, length: int | None = None) -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft`.

    Samples that no window covers with non-zero weight (the very first one
    for a periodic Hann window) come back as zero.
    """
    spec = np.asarray(spec)
    frames = np.fft.irfft(spec, n=cfg.fft_len, axis=-1)[..., : cfg.window_len]
    win = cfg.analysis_window()
    n_fr = spec.shape[-2]
    total = (n_fr - 1) * cfg.hop_len + cfg.window_len
    out = np.zeros(spec.shape[:-2] + (total,))
    norm = np.zeros(total)
    for i in range(n_fr):
        sl = slice(i * cfg.hop_len, i * cfg.hop_len + cfg.window_len)
        out[..., sl] += frames[..., i, :] * win
        norm[sl] += win * win
    nz = norm > 1e-10
    out[..., nz] /= norm[nz]
    out[..., ~nz] = 0.0
    if length is not None:
        if length <= total:
            out = out[..., :length]
        else:
            pad = [(0, 0)] * (out.ndim - 1) + [(0, length - total)]
            out = np.pad(out, pad)
    return out


def convolve(signal, ir) -> np.ndarray:
    """Full linear convolution, ``len(signal) + len(ir) - 1`` samples long."""
    signal = as_mono(signal)
    ir = as_mono(ir)
    if signal.size == 0 or ir.size == 0:
        raise ValueError("convolve needs non-empty inputs")
    return scipy.signal.convolve(signal, ir, mode="full")


def shift(signal, n: int) -> np.ndarray:
    """Integer delay (``n > 0``) or advance along the last axis, zero filled."""
    x = np.asarray(signal, dtype=np.float64)
    out = np.zeros_like(x)
    m = x.shape[-1]
    if n >= 0:
        if n < m:
            out[..., n:] = x[..., : m - n]
    else:
        if -n < m:
            out[..., : m + n] = x[..., -n:]
    return out


def fractional_delay(signal, delay_s: float) -> np.ndarray:
    """Delay (positive) or advance (negative) a signal by ``delay_s`` seconds.

    Integer-sample delays are exact shifts. Fractional delays are applied as a
    linear phase in the frequency domain over an odd-length zero-padded FFT,
    which keeps the operation exactly invertible (no Nyquist bin) and keeps
    circular wrap-around outside the returned window.
    """
    if abs(delay_s) > MAX_DELAY_S + 1e-12:
        raise DelayOutOfRange(f"|delay| {abs(delay_s) * 1e3:.3f} ms exceeds 2 ms")
    x = np.asarray(signal, dtype=np.float64)
    d = delay_s * SAMPLE_RATE
    if abs(d - round(d)) < 1e-9:
        return shift(x, int(round(d)))
    n = x.shape[-1]
    m = scipy.fft.next_fast_len(n + 2 * (int(math.ceil(abs(d))) + 256), real=True)
    while m % 2 == 0:  # odd and still fast (3- and 5-smooth)
        m = scipy.fft.next_fast_len(m + 1, real=True)
    spec = np.fft.rfft(x, n=m, axis=-1)
    k = np.arange(spec.shape[-1])
    spec *= np.exp(-2j * np.pi * k * d / m)
    return np.fft.irfft(spec, n=m, axis=-1)[..., :n]


def xcorr_lag(left, right, max_lag_s: float = 1e-3) -> float:
    """Lag of ``right`` relative to ``left`` that maximises normalised correlation.

    Positive means the right channel is delayed. Only lags within
    ``+-max_lag_s`` are searched; ties go to the smaller absolute lag.
    """
    left = as_mono(left)
    right = as_mono(right)
    if left.shape != right.shape:
        raise ValueError("xcorr_lag needs equal-length inputs")
    scale = np.linalg.norm(left) * np.linalg.norm(right)
    if scale == 0.0:
        raise UndefinedCorrelation("cross-correlation of an all-zero signal")
    corr = lagged_correlation(left, right, int(math.floor(max_lag_s * SAMPLE_RATE + 1e-9)))
    corr = corr / scale
    max_lag = (corr.size - 1) // 2
    lags = np.arange(-max_lag, max_lag + 1)
    best = corr.max()
    tied = lags[corr >= best - 1e-12 * max(1.0, abs(best))]
    return float(tied[np.argmin(np.abs(tied))]) / SAMPLE_RATE


def lagged_correlation(a: np.ndarray, b: np.ndarray, max_lag: int) -> np.ndarray:
    """Raw correlation ``sum_n a[n] * b[n + k]`` for ``k`` in ``[-max_lag, max_lag]``."""
    n = a.shape[-1]
    max_lag = min(max_lag, n - 1)
    out = np.empty(2 * max_lag + 1)
    for i, k in enumerate(range(-max_lag, max_lag + 1)):
        if k >= 0:
            out[i] = np.dot(a[: n - k], b[k:])
        else:
            out[i] = np.dot(a[-k:], b[: n + k])
    return out


def wav_read(path) -> np.ndarray:
    """Read a 16 kHz PCM16 or float32 WAV as a mono or ``(2, n)`` float64 array."""
    rate, data = scipy.io.wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise UnsupportedRate(f"{path}: {rate} Hz, only {SAMPLE_RATE} Hz is supported")
    if data.ndim == 2 and data.shape[1] > 2:
        raise UnsupportedLayout(f"{path}: {data.shape[1]} channels, at most 2 are supported")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise UnsupportedLayout(f"{path}: sample type {data.dtype} is not PCM16 or float32")
    if data.ndim == 2:
        data = data.T.copy()
        if data.shape[0] == 1:
            data = data[0]
    return data


def wav_write(path, buffer, pcm16: bool = False) -> None:
    x = np.asarray(buffer, dtype=np.float64)
    if x.ndim == 2:
        x = as_binaural(x).T
    else:
        x = as_mono(x)
    if pcm16:
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(str(path), SAMPLE_RATE, data)
