"""Pulse-by-pulse STFT/ISTFT, TF-image normalization, oracle masks and
masked subtraction.

The ISTFT uses overlap-add with window-squared normalization, which gives
perfect reconstruction for any window whose squared overlap sum stays
bounded away from zero (checked when an StftSpec is built).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ColaError(ValueError):
    """The (window, hop) pair cannot support perfect reconstruction."""


_WINDOWS = ("HANN", "HAMMING", "RECT")


def _make_window(kind: str, n: int) -> np.ndarray:
    i = np.arange(n)
    if kind == "HANN":
        return (0.5 - 0.5 * np.cos(2 * np.pi * i / n))  # periodic
    if kind == "HAMMING":
        return 0.54 - 0.46 * np.cos(2 * np.pi * i / n)
    if kind == "RECT":
        return np.ones(n)
    raise ValueError(f"unknown window kind {kind!r}")


@dataclass(frozen=True)
class StftSpec:
    win_len: int = 128
    hop: int = 64
    fft_len: int = 128
    window: str = "HANN"

    def __post_init__(self):
        if self.win_len < 1 or self.hop < 1:
            raise ValueError("StftSpec: win_len and hop must be positive")
        if self.hop > self.win_len:
            raise ValueError("StftSpec: hop must be <= win_len")
        if self.fft_len < self.win_len:
            raise ValueError("StftSpec: fft_len must be >= win_len")
        if self.window not in _WINDOWS:
            raise ValueError(f"StftSpec: window must be one of {_WINDOWS}")
        # Overlap-added squared window must never vanish in steady state,
        # otherwise the normalized overlap-add inverse cannot reconstruct.
        w2 = self.window_values() ** 2
        reps = max(8, 2 * (self.win_len // self.hop))
        norm = np.zeros(self.win_len + reps * self.hop)
        for f in range(reps + 1):
            norm[f * self.hop:f * self.hop + self.win_len] += w2
        steady = norm[self.win_len:reps * self.hop]
        if len(steady) and steady.min() < 1e-10 * max(steady.max(), 1e-30):
            raise ColaError(f"window {self.window} with hop {self.hop} leaves gaps; "
                            "perfect reconstruction impossible")

    def window_values(self) -> np.ndarray:
        return _make_window(self.window, self.win_len)


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT cells of one pulse, n_frames x fft_len."""

    cells: np.ndarray
    spec: StftSpec
    orig_len: int

    def __post_init__(self):
        if self.cells.ndim != 2 or self.cells.shape[1] != self.spec.fft_len:
            raise ValueError(f"Spectrogram cells shape {self.cells.shape} inconsistent "
                             f"with fft_len {self.spec.fft_len}")
        if not np.isfinite(self.cells).all():
            raise ValueError("Spectrogram contains non-finite cells")


@dataclass(frozen=True)
class TFImage:
    """Normalized log-magnitude image of a spectrogram, pixels in [0, 1]."""

    pixels: np.ndarray
    dyn_range_db: float

    def __post_init__(self):
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("TFImage pixels must lie in [0, 1]")


@dataclass(frozen=True)
class Mask:
    """Per-cell binary RFI label, same grid as the TF image."""

    cells: np.ndarray

    def __post_init__(self):
        vals = np.unique(self.cells)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("Mask cells must be 0/1")


def n_frames_for(length: int, spec: StftSpec) -> int:
    padded = length + spec.win_len  # win_len//2 of centering on each side
    return 1 + math.ceil(max(0, padded - spec.win_len) / spec.hop)


def stft(signal: np.ndarray, spec: StftSpec) -> Spectrogram:
    """Windowed FFT frames with center padding; edge frames zero-padded."""
    signal = np.asarray(signal)
    if len(signal) < spec.win_len:
        raise ValueError(f"signal length {len(signal)} shorter than window {spec.win_len}")
    half = spec.win_len // 2
    nf = n_frames_for(len(signal), spec)
    total = (nf - 1) * spec.hop + spec.win_len
    padded = np.zeros(total, dtype=np.complex128)
    padded[half:half + len(signal)] = signal
    idx = np.arange(spec.win_len)[None, :] + spec.hop * np.arange(nf)[:, None]
    frames = padded[idx] * spec.window_values()[None, :]
    cells = np.fft.fft(frames, n=spec.fft_len, axis=1)
    return Spectrogram(cells, spec, len(signal))


def istft(spec: Spectrogram) -> np.ndarray:
    """Overlap-add synthesis with window-squared normalization."""
    s = spec.spec
    nf = spec.cells.shape[0]
    win = s.window_values()
    total = (nf - 1) * s.hop + s.win_len
    acc = np.zeros(total, dtype=np.complex128)
    norm = np.zeros(total)
    frames = np.fft.ifft(spec.cells, n=s.fft_len, axis=1)[:, :s.win_len]
    for f in range(nf):
        start = f * s.hop
        acc[start:start + s.win_len] += frames[f] * win
        norm[start:start + s.win_len] += win * win
    half = s.win_len // 2
    out = acc[half:half + spec.orig_len]
    den = norm[half:half + spec.orig_len]
    den = np.where(den > 0, den, 1.0)
    return out / den


def to_image(spec: Spectrogram, dyn_range_db: float = 60.0) -> TFImage:
    """Log-magnitude image normalized to the peak cell over dyn_range_db."""
    if dyn_range_db <= 0:
        raise ValueError("dyn_range_db must be positive")
    mag = np.abs(spec.cells)
    peak = mag.max()
    if peak == 0:
        return TFImage(np.zeros(mag.shape, dtype=np.float32), dyn_range_db)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag / peak)
    pix = np.clip((db + dyn_range_db) / dyn_range_db, 0.0, 1.0)
    return TFImage(pix.astype(np.float32), dyn_range_db)


def oracle_mask(rfi_spec: Spectrogram, clean_spec: Spectrogram,
                margin: float = 1.0) -> Mask:
    """Ground-truth label: 1 where RFI power dominates clean power + noise floor."""
    if rfi_spec.cells.shape != clean_spec.cells.shape:
        raise ValueError(f"shape mismatch: rfi {rfi_spec.cells.shape} vs "
                         f"clean {clean_spec.cells.shape}")
    p_rfi = np.abs(rfi_spec.cells) ** 2
    p_clean = np.abs(clean_spec.cells) ** 2
    floor = float(p_clean.mean())
    cells = (p_rfi > margin * (p_clean + floor)).astype(np.uint8)
    return Mask(cells)


def subtract_masked(interfered: Spectrogram, mask: Mask) -> Spectrogram:
    """Zero the masked cells, copy the rest unchanged."""
    if interfered.cells.shape != mask.cells.shape:
        raise ValueError(f"shape mismatch: spectrogram {interfered.cells.shape} vs "
                         f"mask {mask.cells.shape}")
    cells = np.where(mask.cells.astype(bool), 0.0 + 0.0j, interfered.cells)
    return Spectrogram(cells, interfered.spec, interfered.orig_len)


def ridge_slope(spec: Spectrogram, sample_rate_hz: float) -> float:
    """Least-squares slope (Hz/s) of the per-frame spectral argmax ridge.

    Frequencies above fft_len/2 are unwrapped to their negative aliases so a
    baseband chirp crossing zero fits a single line.
    """
    s = spec.spec
    mag = np.abs(spec.cells)
    # skip edge frames where the window only partially covers the signal
    guard = max(1, s.win_len // s.hop // 2)
    rows = np.arange(guard, spec.cells.shape[0] - guard)
    if len(rows) < 2:
        rows = np.arange(spec.cells.shape[0])
    bins = mag[rows].argmax(axis=1).astype(float)
    bins = np.where(bins >= s.fft_len / 2, bins - s.fft_len, bins)
    freqs = bins * sample_rate_hz / s.fft_len
    times = rows * s.hop / sample_rate_hz
    a = np.polyfit(times, freqs, 1)
    return float(a[0])
