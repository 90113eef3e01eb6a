"""Signal cleaning: pupil blink repair and fNIRS channel pruning/filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from ..exceptions import AllBlink, AllChannelsFlat, TooShort

PUPIL_BAND = (0.01, 4.0)
FNIRS_BAND = (0.01, 0.2)
BLINK_THRESHOLD_SD = 2.5
BLINK_DILATION_S = 0.05
MAX_BLINK_FRACTION = 0.8
FLAT_CHANNEL_SD = 1e-10


@dataclass(frozen=True)
class BlinkEvent:
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


def bandpass(x, fs, lo, hi, order=2):
    """Zero-phase Butterworth band-pass; degrades to high-pass when ``hi`` is at or above Nyquist."""
    x = np.asarray(x, dtype=float)
    if hi >= fs / 2:
        sos = signal.butter(order, lo, btype="highpass", fs=fs, output="sos")
    else:
        sos = signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    return signal.sosfiltfilt(sos, x, axis=0, padlen=padlen)


def band_power(x, fs, bands):
    """Welch band powers (Hann, segment ``min(n, 256)``, 50 % overlap).

    ``bands`` is a sequence of ``(lo, hi)`` half-open intervals in Hz.
    """
    x = np.asarray(x, dtype=float)
    nperseg = min(len(x), 256)
    freqs, psd = signal.welch(
        x, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
        nfft=max(nperseg, 1024), detrend="constant", scaling="density",
    )
    df = freqs[1] - freqs[0]
    return [float(psd[(freqs >= lo) & (freqs < hi)].sum() * df) for lo, hi in bands]


def _runs(mask):
    """(start, stop) index pairs of the True runs in ``mask``; stop exclusive."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2]))


def detect_blinks(pupil, fs, threshold_sd=BLINK_THRESHOLD_SD, dilation_s=BLINK_DILATION_S):
    """Boolean blink mask: non-positive/non-finite samples plus dips below
    ``median - threshold_sd * std``, dilated by ``dilation_s`` on both sides."""
    x = np.asarray(pupil, dtype=float)
    bad = ~np.isfinite(x) | (x <= 0)
    good = x[~bad]
    if good.size:
        bad |= x < np.median(good) - threshold_sd * np.std(good)
    k = int(round(dilation_s * fs))
    if k > 0 and bad.any():
        bad = ndimage.binary_dilation(bad, structure=np.ones(2 * k + 1, dtype=bool))
    return bad


def preprocess_pupil(pupil, fs, t0=0.0, band=PUPIL_BAND):
    """Repair blinks and band-pass the pupil trace.

    Returns ``(clean, events)``. The series mean is restored after filtering
    so level statistics remain meaningful; everything else is DC-free.
    """
    x = np.asarray(pupil, dtype=float)
    n = len(x)
    if n < 2 * fs:
        raise TooShort(f"pupil series has {n} samples, need at least 2 s ({int(2 * fs)})")
    mask = detect_blinks(x, fs)
    if mask.mean() > MAX_BLINK_FRACTION:
        raise AllBlink(f"{mask.mean():.0%} of pupil samples flagged as blink")
    events = [BlinkEvent(t0 + a / fs, t0 + b / fs) for a, b in _runs(mask)]
    idx = np.arange(n)
    filled = np.interp(idx, idx[~mask], x[~mask]) if mask.any() else x.copy()
    level = filled.mean()
    clean = bandpass(filled - level, fs, *band) + level
    return clean, events


@dataclass(frozen=True)
class FilteredChannels:
    values: np.ndarray  # (n, 8); pruned channels are all-zero
    kept: np.ndarray  # (8,) bool

    @property
    def n_kept(self) -> int:
        return int(self.kept.sum())


def preprocess_fnirs(channels, fs, band=FNIRS_BAND):
    """Drop flat channels (std < 1e-10) and band-pass the survivors."""
    x = np.asarray(channels, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected a (samples, channels) array")
    kept = np.std(x, axis=0) >= FLAT_CHANNEL_SD
    if not kept.any():
        raise AllChannelsFlat("every fNIRS channel is flat")
    out = np.zeros_like(x)
    out[:, kept] = bandpass(x[:, kept] - x[:, kept].mean(axis=0), fs, *band)
    return FilteredChannels(out, kept)
