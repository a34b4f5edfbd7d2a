"""End-to-end suppression: detect interfered pulses, mask them on the TF
map (oracle labels or the trained network), subtract, resynthesize, and
re-form the range-doppler image.  Also houses the classical notch-filter
baseline the network is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import difnet, timefreq
from .signal_model import EchoMatrix, RadarParams, lfm_pulse
from .timefreq import Mask, Spectrogram, StftSpec


class PipelineConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftSpec = StftSpec()
    detector_threshold: float = 10.0
    notch_k_sigma: float = 3.0
    use_oracle_mask: bool = False
    oracle_margin: float = 1.0
    dyn_range_db: float = 60.0
    model: tuple | None = None          # (weights dict, NetConfig)

    def __post_init__(self):
        if self.use_oracle_mask and self.model is not None:
            raise PipelineConfigError("choose either the oracle mask or a model, not both")


@dataclass(frozen=True)
class SarImage:
    pixels: np.ndarray   # doppler x range, complex

    def __post_init__(self):
        if not np.isfinite(self.pixels).all():
            raise ValueError("SarImage contains non-finite pixels")


def detect_rfi(echo: EchoMatrix, threshold: float) -> np.ndarray:
    """Flag pulses whose spectral peak-to-mean power ratio exceeds threshold."""
    spectra = np.abs(np.fft.fft(echo.data, axis=1)) ** 2
    mean = spectra.mean(axis=1)
    peak = spectra.max(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(mean > 0, peak / np.maximum(mean, 1e-300), 0.0)
    return ratio > threshold


def notch_filter(pulse: np.ndarray, k_sigma: float) -> np.ndarray:
    """Zero FFT bins whose magnitude sticks out k_sigma sigmas above the mean."""
    pulse = np.asarray(pulse)
    if pulse.size == 0:
        raise ValueError("notch_filter: empty pulse")
    spec = np.fft.fft(pulse)
    mag = np.abs(spec)
    cut = mag.mean() + k_sigma * mag.std()
    hot = mag > cut
    if not hot.any():
        return pulse.copy()
    spec = np.where(hot, 0.0 + 0.0j, spec)
    return np.fft.ifft(spec).astype(pulse.dtype, copy=False)


def notch_filter_echo(echo: EchoMatrix, k_sigma: float,
                      flags: np.ndarray | None = None) -> EchoMatrix:
    """Per-pulse notch baseline over the flagged (default: all) pulses."""
    out = echo.data.copy()
    idx = np.arange(echo.params.n_pulses) if flags is None else np.flatnonzero(flags)
    for p in idx:
        out[p] = notch_filter(echo.data[p], k_sigma)
    return EchoMatrix(out, echo.params)


def notch_mask_tf(image: np.ndarray, k_sigma: float) -> np.ndarray:
    """Notch-style binary mask on a TF image: per frame, flag bins whose
    magnitude exceeds mean + k_sigma * std of that frame's profile."""
    mean = image.mean(axis=1, keepdims=True)
    std = image.std(axis=1, keepdims=True)
    return (image > mean + k_sigma * std).astype(np.uint8)


def _model_masks(specs: list, cfg: PipelineConfig) -> list:
    """Predict masks for a list of spectrograms with the trained network.

    Consecutive flagged-pulse maps are stacked along the frame axis in
    chunks near the training crop height, so inference sees the same kind
    of assembled TF image the network was trained on.
    """
    weights, net_cfg = cfg.model
    if not specs:
        return []
    rows = specs[0].cells.shape[0]
    per_chunk = max(1, int(round(128 / rows)))
    masks: list[np.ndarray] = []
    for s in range(0, len(specs), per_chunk):
        chunk = specs[s:s + per_chunk]
        img = np.concatenate(
            [timefreq.to_image(sp, cfg.dyn_range_db).pixels for sp in chunk], axis=0)
        pred = difnet.predict_mask(weights, img, net_cfg)
        ofs = 0
        for sp in chunk:
            masks.append(pred[ofs:ofs + sp.cells.shape[0]])
            ofs += sp.cells.shape[0]
    return masks


def suppress_pipeline(echo: EchoMatrix, cfg: PipelineConfig,
                      rfi_truth: EchoMatrix | None = None):
    """Full chain: detect, STFT, mask, subtract, ISTFT.

    Unflagged pulses pass through untouched.  Oracle masking needs the
    ground-truth RFI contribution (``rfi_truth``).  Returns
    (clean_echo, masks, flags) with one mask per flagged pulse.
    """
    if not cfg.use_oracle_mask and cfg.model is None:
        raise PipelineConfigError("pipeline needs either use_oracle_mask or a model")
    if cfg.use_oracle_mask and rfi_truth is None:
        raise PipelineConfigError("oracle masking requires the rfi_truth echo")
    flags = detect_rfi(echo, cfg.detector_threshold)
    out = echo.data.copy()
    flagged = np.flatnonzero(flags)
    specs = [timefreq.stft(echo.data[p], cfg.stft) for p in flagged]
    if cfg.use_oracle_mask:
        masks = []
        for p, sp in zip(flagged, specs):
            rfi_sp = timefreq.stft(rfi_truth.data[p], cfg.stft)
            clean_sp = Spectrogram(sp.cells - rfi_sp.cells, cfg.stft, sp.orig_len)
            masks.append(timefreq.oracle_mask(rfi_sp, clean_sp, cfg.oracle_margin))
    else:
        masks = [Mask(m) for m in _model_masks(specs, cfg)]
    for p, sp, mk in zip(flagged, specs, masks):
        cleaned = timefreq.subtract_masked(sp, mk)
        out[p] = timefreq.istft(cleaned).astype(out.dtype)
    return EchoMatrix(out, echo.params), masks, flags


def range_doppler_image(echo: EchoMatrix, params: RadarParams | None = None) -> SarImage:
    """Range compression (circular matched filter) then azimuth FFT."""
    params = params or echo.params
    if params.n_range != echo.data.shape[1] or params.n_pulses != echo.data.shape[0]:
        raise ValueError("range_doppler_image: params do not match the echo")
    pulse = lfm_pulse(params)
    ref = np.zeros(params.n_range, dtype=np.complex64)
    ref[:len(pulse)] = pulse
    pf = np.conj(np.fft.fft(ref))
    compressed = np.fft.ifft(np.fft.fft(echo.data, axis=1) * pf[None, :], axis=1)
    image = np.fft.fft(compressed, axis=0) / echo.data.shape[0]
    return SarImage(image)


def target_neighborhood_energy(image: SarImage, doppler_bin: int, range_bin: int,
                               radius: int = 1) -> float:
    """Total |pixel|^2 in the (2r+1)^2 box around a target peak (wrapping)."""
    h, w = image.pixels.shape
    rows = [(doppler_bin + d) % h for d in range(-radius, radius + 1)]
    cols = [(range_bin + d) % w for d in range(-radius, radius + 1)]
    patch = image.pixels[np.ix_(rows, cols)]
    return float(np.sum(np.abs(patch) ** 2))
