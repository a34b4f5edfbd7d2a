"""SAR scene echoes and the three RFI families, mixed at controlled SIR.

Everything works at complex baseband: the carrier phasor is dropped and the
carrier frequency only identifies the simulated sensor.  All randomness goes
through seeded generators, so every operation is bit-reproducible.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import jv


class KindMismatchError(ValueError):
    """An RFI generator was handed a component of the wrong kind."""


class RfiKind(enum.Enum):
    NBI = "NBI"                # narrowband tone(s)
    CHIRP_WBI = "CHIRP_WBI"    # linear-FM wideband
    SIN_WBI = "SIN_WBI"        # sinusoidally phase-modulated wideband
    UNIFIED = "UNIFIED"        # single chirp-rate model covering both regimes


@dataclass(frozen=True)
class RadarParams:
    """One sensor's waveform/timing parameters."""

    carrier_hz: float
    bandwidth_hz: float
    pulse_len_s: float
    sample_rate_hz: float
    prf_hz: float
    n_pulses: int
    n_range: int

    def __post_init__(self):
        for name in ("carrier_hz", "sample_rate_hz", "prf_hz"):
            if getattr(self, name) <= 0:
                raise ValueError(f"RadarParams.{name} must be strictly positive")
        if self.bandwidth_hz < 0 or self.pulse_len_s <= 0:
            raise ValueError("RadarParams: bandwidth must be >= 0 and pulse_len_s > 0")
        if self.sample_rate_hz < self.bandwidth_hz:
            raise ValueError("RadarParams: sample_rate_hz must cover bandwidth_hz "
                             "(complex baseband Nyquist)")
        if self.n_pulses < 1 or self.n_range < 1:
            raise ValueError("RadarParams: n_pulses and n_range must be positive")
        if self.n_range < self.pulse_samples:
            raise ValueError("RadarParams: n_range shorter than the transmitted pulse")

    @property
    def pulse_samples(self) -> int:
        return math.ceil(self.pulse_len_s * self.sample_rate_hz)

    @property
    def chirp_rate_hzps(self) -> float:
        return self.bandwidth_hz / self.pulse_len_s

    def fast_time(self) -> np.ndarray:
        """Fast-time grid over one full range line, centered on zero."""
        n = self.n_range
        return (np.arange(n) - n // 2) / self.sample_rate_hz


@dataclass(frozen=True)
class RfiComponent:
    """One interference emitter; fields irrelevant to ``kind`` are ignored."""

    kind: RfiKind
    amplitude: float = 1.0
    freq_offset_hz: float = 0.0     # NBI tone / SIN_WBI modulation frequency
    chirp_rate_hzps: float = 0.0    # CHIRP_WBI / UNIFIED sweep rate
    mod_coeff: float = 0.0          # SIN_WBI modulation index

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("RfiComponent.amplitude must be >= 0")


@dataclass(frozen=True)
class EchoMatrix:
    """Complex baseband samples, pulses x range samples."""

    data: np.ndarray
    params: RadarParams

    def __post_init__(self):
        if self.data.shape != (self.params.n_pulses, self.params.n_range):
            raise ValueError(f"EchoMatrix shape {self.data.shape} does not match params "
                             f"({self.params.n_pulses}, {self.params.n_range})")
        if not np.isfinite(self.data).all():
            raise ValueError("EchoMatrix contains non-finite samples")


@dataclass(frozen=True)
class Scene:
    """Point targets on the (doppler, range) grid plus a noise level."""

    targets: tuple = ()
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("Scene.noise_sigma must be >= 0")

    def validate_against(self, params: RadarParams):
        for t in self.targets:
            if not (0 <= t["range_bin"] < params.n_range):
                raise ValueError(f"target range_bin {t['range_bin']} outside grid")
            if not (0 <= t["doppler_bin"] < params.n_pulses):
                raise ValueError(f"target doppler_bin {t['doppler_bin']} outside grid")
            if t["reflectivity"] < 0:
                raise ValueError("target reflectivity must be >= 0")


def lfm_pulse(params: RadarParams) -> np.ndarray:
    """Unit-amplitude linear-FM transmit pulse, phase pi*k*t^2, t centered."""
    n = params.pulse_samples
    t = (np.arange(n) - (n - 1) / 2) / params.sample_rate_hz
    k = params.chirp_rate_hzps
    return np.exp(1j * np.pi * k * t * t).astype(np.complex64)


def _check_kinds(components, kind):
    for c in components:
        if c.kind is not kind:
            raise KindMismatchError(f"expected {kind.value} component, got {c.kind.value}")


def gen_nbi(components, t: np.ndarray) -> np.ndarray:
    """Sum of baseband tones A_n * exp(j 2 pi f_n t)."""
    _check_kinds(components, RfiKind.NBI)
    out = np.zeros(len(t), dtype=np.complex128)
    for c in components:
        out += c.amplitude * np.exp(2j * np.pi * c.freq_offset_hz * t)
    return out


def gen_chirp_wbi(components, t: np.ndarray) -> np.ndarray:
    """Sum of baseband chirps B_n * exp(j pi k_n t^2)."""
    _check_kinds(components, RfiKind.CHIRP_WBI)
    out = np.zeros(len(t), dtype=np.complex128)
    for c in components:
        out += c.amplitude * np.exp(1j * np.pi * c.chirp_rate_hzps * t * t)
    return out


def gen_sin_wbi(components, t: np.ndarray) -> np.ndarray:
    """Sum of sinusoidally phase-modulated carriers C_n * exp(j b sin(2 pi f t))."""
    _check_kinds(components, RfiKind.SIN_WBI)
    out = np.zeros(len(t), dtype=np.complex128)
    for c in components:
        out += c.amplitude * np.exp(1j * c.mod_coeff * np.sin(2 * np.pi * c.freq_offset_hz * t))
    return out


def sin_wbi_bessel_approx(component: RfiComponent, max_order: int, t: np.ndarray) -> np.ndarray:
    """Truncated harmonic expansion of one sinusoidally modulated component.

    exp(j b sin(theta)) = sum_m J_m(b) exp(j m theta), truncated to |m| <= max_order.
    """
    if component.kind is not RfiKind.SIN_WBI:
        raise KindMismatchError("sin_wbi_bessel_approx needs a SIN_WBI component")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    theta = 2 * np.pi * component.freq_offset_hz * t
    out = np.zeros(len(t), dtype=np.complex128)
    for m in range(-max_order, max_order + 1):
        out += jv(m, component.mod_coeff) * np.exp(1j * m * theta)
    return (component.amplitude * out)


def gen_unified_rfi(components, t: np.ndarray) -> np.ndarray:
    """Single-chirp-rate model: D_n * exp(j pi k t^2); small k = narrowband."""
    _check_kinds(components, RfiKind.UNIFIED)
    out = np.zeros(len(t), dtype=np.complex128)
    for c in components:
        out += c.amplitude * np.exp(1j * np.pi * c.chirp_rate_hzps * t * t)
    return out


def gen_rfi(components, t: np.ndarray) -> np.ndarray:
    """Dispatch a mixed list of components to the matching generators."""
    out = np.zeros(len(t), dtype=np.complex128)
    for c in components:
        gen = {RfiKind.NBI: gen_nbi, RfiKind.CHIRP_WBI: gen_chirp_wbi,
               RfiKind.SIN_WBI: gen_sin_wbi, RfiKind.UNIFIED: gen_unified_rfi}[c.kind]
        out = out + gen([c], t)
    return out


def simulate_echo(scene: Scene, params: RadarParams, seed: int) -> EchoMatrix:
    """Point-target echo matrix with additive circular complex Gaussian noise.

    Each target is a delayed copy of the transmit pulse starting at its
    range bin, scaled by reflectivity, with a per-pulse phase ramp that
    places it at its doppler bin after azimuth FFT.
    """
    scene.validate_against(params)
    rng = np.random.default_rng(seed)
    np_, nr = params.n_pulses, params.n_range
    data = np.zeros((np_, nr), dtype=np.complex64)
    pulse = lfm_pulse(params)
    p_idx = np.arange(np_)
    for tgt in scene.targets:
        r = tgt["range_bin"]
        seg = min(len(pulse), nr - r)
        ramp = np.exp(2j * np.pi * tgt["doppler_bin"] * p_idx / np_)
        data[:, r:r + seg] += tgt["reflectivity"] * ramp[:, None] * pulse[None, :seg]
    if scene.noise_sigma > 0:
        noise = rng.standard_normal((np_, nr)) + 1j * rng.standard_normal((np_, nr))
        data = data + (scene.noise_sigma / math.sqrt(2.0)) * noise.astype(np.complex64)
    return EchoMatrix(data.astype(np.complex64), params)


def mix_rfi(echo: EchoMatrix, rfi_components, sir_db: float,
            pulse_fraction: float, seed: int):
    """Add RFI to a contiguous random subset of pulses at a target SIR.

    SIR is defined over the affected pulses only, using mean power.  Returns
    (interfered, rfi_truth, pulse_flags); interfered - rfi_truth recovers
    the echo to within complex64 rounding of the addition.
    """
    if not (0.0 <= pulse_fraction <= 1.0):
        raise ValueError("pulse_fraction must lie in [0, 1]")
    params = echo.params
    np_, nr = params.n_pulses, params.n_range
    rng = np.random.default_rng(seed)
    flags = np.zeros(np_, dtype=bool)
    n_aff = int(round(pulse_fraction * np_))
    rfi_truth = np.zeros_like(echo.data)
    if n_aff > 0 and rfi_components:
        start = int(rng.integers(0, np_ - n_aff + 1))
        flags[start:start + n_aff] = True
        t = params.fast_time()
        base = gen_rfi(rfi_components, t).astype(np.complex64)
        # independent phase per pulse so the jammer is not pulse-coherent
        phases = np.exp(2j * np.pi * rng.random(n_aff)).astype(np.complex64)
        block = phases[:, None] * base[None, :]
        p_sig = float(np.mean(np.abs(echo.data[flags]) ** 2))
        p_rfi = float(np.mean(np.abs(block) ** 2))
        if p_rfi > 0:
            if p_sig == 0.0 and np.isfinite(sir_db):
                raise ValueError("mix_rfi: echo has zero power on affected pulses; "
                                 "SIR scaling undefined")
            scale = math.sqrt(p_sig / (p_rfi * 10.0 ** (sir_db / 10.0)))
            rfi_truth[flags] = (scale * block).astype(np.complex64)
    interfered = EchoMatrix(echo.data + rfi_truth, params)
    return interfered, EchoMatrix(rfi_truth, params), flags
