"""Deterministic signal-processing primitives: windows, STFT, WAV I/O.

The STFT contract is the plain windowed DFT

    X[f, l] = sum_n x[n + H*l] * w[n] * exp(-2j*pi*f*n / W)

with a one-sided spectrum (F = W/2 + 1 for even W). ``numpy.fft.rfft`` is
used for speed; correctness is pinned to the naive double-sum oracle in
the tests. The inverse STFT is diagnostic only (weighted overlap-add).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import FormatError, InvalidArgument


@dataclass
class Waveform:
    """Mono signal, amplitude nominally in [-1, 1]."""
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise InvalidArgument("Waveform requires a non-empty 1-D signal")
        if self.sample_rate <= 0:
            raise InvalidArgument("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgument("Waveform samples must be finite")

    def __len__(self):
        return len(self.samples)


@dataclass
class ComplexSpectrogram:
    """One-sided complex spectrogram, bins [F, L]."""
    bins: np.ndarray
    window_len: int
    hop: int
    pad: int = 0


def hamming_window(length: int) -> np.ndarray:
    """Periodic (DFT-even) Hamming window: 0.54 - 0.46 cos(2 pi n / W)."""
    if length < 2:
        raise InvalidArgument(f"window length must be >= 2, got {length}")
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)


def rectangular_window(length: int) -> np.ndarray:
    if length < 1:
        raise InvalidArgument("window length must be >= 1")
    return np.ones(length)


def stft(x: Waveform, window: np.ndarray, hop: int, pad: int = 0) -> ComplexSpectrogram:
    """Windowed one-sided DFT with `pad` zeros on each side of the signal.

    L = floor((T + 2*pad - W) / hop) + 1 frames.
    """
    w = np.asarray(window, dtype=np.float64)
    win_len = len(w)
    if hop < 1:
        raise InvalidArgument("hop must be >= 1")
    sig = np.asarray(x.samples, dtype=np.float64)
    if pad:
        sig = np.pad(sig, (pad, pad))
    if len(sig) < win_len:
        raise InvalidArgument(
            f"padded signal length {len(sig)} shorter than window {win_len}")
    frames = np.lib.stride_tricks.sliding_window_view(sig, win_len)[::hop]
    bins = np.fft.rfft(frames * w, n=win_len, axis=1).T  # [F, L]
    return ComplexSpectrogram(bins=bins, window_len=win_len, hop=hop, pad=pad)


def magnitude(spec: ComplexSpectrogram) -> np.ndarray:
    """Elementwise modulus, [F, L]."""
    return np.abs(spec.bins)


def istft(spec: ComplexSpectrogram, window: np.ndarray,
          sample_rate: int = 8000) -> Waveform:
    """Weighted overlap-add inverse; removes the symmetric padding.

    Normalizes by the overlap-added squared window; raises if that sum
    vanishes anywhere in the reconstructed (unpadded) region.
    """
    w = np.asarray(window, dtype=np.float64)
    win_len = len(w)
    if win_len != spec.window_len:
        raise InvalidArgument("window length does not match the spectrogram")
    hop = spec.hop
    n_frames = spec.bins.shape[1]
    full = (n_frames - 1) * hop + win_len
    frames = np.fft.irfft(spec.bins.T, n=win_len, axis=1)  # [L, W]
    acc = np.zeros(full)
    wsum = np.zeros(full)
    w2 = w * w
    for l in range(n_frames):
        acc[l * hop:l * hop + win_len] += frames[l] * w
        wsum[l * hop:l * hop + win_len] += w2
    lo, hi = spec.pad, full - spec.pad
    if hi <= lo:
        raise InvalidArgument("padding exceeds reconstructed length")
    if np.any(wsum[lo:hi] <= 1e-12):
        raise InvalidArgument("degenerate window: zero overlap energy")
    return Waveform(acc[lo:hi] / wsum[lo:hi], sample_rate)


def wav_read(path) -> Waveform:
    """Read a mono PCM-16 or IEEE-float-32 RIFF/WAVE file."""
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises bare ValueError on bad headers
        raise FormatError(f"unreadable WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise FormatError(f"{path}: only mono WAV is supported "
                          f"({data.shape[1]} channels found)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def wav_write(path, wav: Waveform, fmt: str = "float32") -> None:
    """Write mono WAV; fmt is 'float32' (default, lossless) or 'pcm16'."""
    if fmt == "float32":
        wavfile.write(path, wav.sample_rate, wav.samples.astype(np.float32))
    elif fmt == "pcm16":
        scaled = np.clip(np.round(wav.samples * 32768.0), -32768, 32767)
        wavfile.write(path, wav.sample_rate, scaled.astype(np.int16))
    else:
        raise InvalidArgument(f"unknown WAV format {fmt!r}")


def stft_frame_count(n_samples: int, win_len: int, hop: int, pad: int) -> int:
    return (n_samples + 2 * pad - win_len) // hop + 1
