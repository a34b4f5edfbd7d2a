"""Simulated training/evaluation data: interfered TF images with oracle
binary labels, spanning the RFI families, a range of interference levels
and two sensor parameterizations for cross-domain experiments.

Each sample assembles the spectrograms of a few consecutive interfered
pulses along the frame axis into one fixed-size crop, so the label
geometry covers multi-pulse structure while staying desk-scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import timefreq
from .signal_model import (EchoMatrix, RadarParams, RfiComponent, RfiKind,
                           Scene, mix_rfi, simulate_echo)
from .timefreq import Spectrogram, StftSpec

SENSOR_A = RadarParams(carrier_hz=9.6e9, bandwidth_hz=80e6, pulse_len_s=2.56e-6,
                       sample_rate_hz=100e6, prf_hz=1000.0, n_pulses=64, n_range=1024)
SENSOR_B = RadarParams(carrier_hz=5.4e9, bandwidth_hz=40e6, pulse_len_s=3.0e-6,
                       sample_rate_hz=60e6, prf_hz=600.0, n_pulses=64, n_range=1024)

SENSORS = {"A": SENSOR_A, "B": SENSOR_B}

DEFAULT_KINDS = (RfiKind.NBI, RfiKind.CHIRP_WBI, RfiKind.SIN_WBI, RfiKind.UNIFIED)


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 200
    height: int = 128
    width: int = 128
    sensors: tuple = ("A",)
    kinds: tuple = DEFAULT_KINDS
    sir_db_min: float = -25.0
    sir_db_max: float = -5.0
    stft: StftSpec = StftSpec()
    dyn_range_db: float = 60.0
    oracle_margin: float = 1.0
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("DatasetSpec.count must be >= 0")
        if self.width != self.stft.fft_len:
            raise ValueError("DatasetSpec.width must equal the STFT fft_len")
        if self.sir_db_min > self.sir_db_max:
            raise ValueError("DatasetSpec: sir_db_min must be <= sir_db_max")
        for s in self.sensors:
            if s not in SENSORS:
                raise ValueError(f"unknown sensor {s!r}; available: {sorted(SENSORS)}")


def random_scene(rng, params: RadarParams, noise_sigma: float) -> Scene:
    n_targets = int(rng.integers(3, 8))
    targets = tuple(
        {"range_bin": int(rng.integers(0, params.n_range - params.pulse_samples)),
         "doppler_bin": int(rng.integers(0, params.n_pulses)),
         "reflectivity": float(rng.uniform(0.5, 2.0))}
        for _ in range(n_targets))
    return Scene(targets=targets, noise_sigma=noise_sigma)


def random_components(rng, kind: RfiKind, params: RadarParams) -> list:
    """Component draw with frequencies expressed as fractions of the sensor
    sample rate, so occupancy is comparable across sensors."""
    fs = params.sample_rate_hz
    record_s = params.n_range / fs
    if kind is RfiKind.NBI:
        n = int(rng.integers(2, 5))
        return [RfiComponent(kind, amplitude=float(rng.uniform(0.5, 1.0)),
                             freq_offset_hz=float(rng.uniform(-0.35, 0.35)) * fs)
                for _ in range(n)]
    if kind is RfiKind.CHIRP_WBI:
        n = int(rng.integers(1, 3))
        return [RfiComponent(kind, amplitude=float(rng.uniform(0.5, 1.0)),
                             chirp_rate_hzps=float(rng.choice([-1, 1]))
                             * float(rng.uniform(0.2, 0.8)) * fs / record_s)
                for _ in range(n)]
    if kind is RfiKind.SIN_WBI:
        return [RfiComponent(kind, amplitude=1.0,
                             freq_offset_hz=float(rng.uniform(0.02, 0.08)) * fs,
                             mod_coeff=float(rng.uniform(1.0, 4.0)))]
    if kind is RfiKind.UNIFIED:
        return [RfiComponent(kind, amplitude=1.0,
                             chirp_rate_hzps=float(rng.choice([-1, 1]))
                             * float(rng.uniform(0.05, 0.9)) * fs / record_s)]
    raise ValueError(f"unhandled kind {kind}")


def _pulses_per_sample(spec: DatasetSpec, params: RadarParams) -> int:
    nf = timefreq.n_frames_for(params.n_range, spec.stft)
    return -(-spec.height // nf)  # ceil


def make_sample(spec: DatasetSpec, index: int, seed: int):
    """One (TF image, oracle mask, meta) triple; deterministic in (seed, index)."""
    rng = np.random.default_rng((seed, index))
    sensor = spec.sensors[index % len(spec.sensors)]
    kind = spec.kinds[(index // len(spec.sensors)) % len(spec.kinds)]
    base = SENSORS[sensor]
    params = replace(base, n_pulses=_pulses_per_sample(spec, base))
    scene = random_scene(rng, params, spec.noise_sigma)
    sir_db = float(rng.uniform(spec.sir_db_min, spec.sir_db_max))
    comps = random_components(rng, kind, params)
    echo = simulate_echo(scene, params, seed=int(rng.integers(2 ** 31)))
    interfered, rfi_truth, _ = mix_rfi(echo, comps, sir_db, pulse_fraction=1.0,
                                       seed=int(rng.integers(2 ** 31)))
    cells, rfi_cells, clean_cells = [], [], []
    for p in range(params.n_pulses):
        sp = timefreq.stft(interfered.data[p], spec.stft)
        rp = timefreq.stft(rfi_truth.data[p], spec.stft)
        cells.append(sp.cells)
        rfi_cells.append(rp.cells)
        clean_cells.append(sp.cells - rp.cells)
    cells = np.concatenate(cells, axis=0)[:spec.height]
    rfi_cells = np.concatenate(rfi_cells, axis=0)[:spec.height]
    clean_cells = np.concatenate(clean_cells, axis=0)[:spec.height]
    sgram = Spectrogram(cells, spec.stft, params.n_range)
    image = timefreq.to_image(sgram, spec.dyn_range_db).pixels
    mask = timefreq.oracle_mask(Spectrogram(rfi_cells, spec.stft, params.n_range),
                                Spectrogram(clean_cells, spec.stft, params.n_range),
                                spec.oracle_margin).cells
    meta = {"index": index, "sensor": sensor, "kind": kind.value, "sir_db": sir_db}
    return image.astype(np.float32), mask.astype(np.uint8), meta


def make_dataset(spec: DatasetSpec, seed: int):
    """Full dataset: (images (N,H,W) f32, masks (N,H,W) u8, meta list)."""
    images = np.zeros((spec.count, spec.height, spec.width), dtype=np.float32)
    masks = np.zeros((spec.count, spec.height, spec.width), dtype=np.uint8)
    metas = []
    for i in range(spec.count):
        images[i], masks[i], meta = make_sample(spec, i, seed)
        metas.append(meta)
    return images, masks, metas


@dataclass(frozen=True)
class ScenarioSpec:
    """One interfered echo scenario for pipeline-level experiments."""

    sensor: str = "A"
    kind: RfiKind = RfiKind.NBI
    sir_db: float = -20.0
    pulse_fraction: float = 0.5
    noise_sigma: float = 0.05
    n_targets: int = 5


def make_scenario(spec: ScenarioSpec, seed: int):
    """Returns (clean_echo, interfered, rfi_truth, flags, scene)."""
    rng = np.random.default_rng((seed, 0xEC0))
    params = SENSORS[spec.sensor]
    targets = tuple(
        {"range_bin": int(rng.integers(0, params.n_range - params.pulse_samples)),
         "doppler_bin": int(rng.integers(0, params.n_pulses)),
         "reflectivity": float(rng.uniform(0.5, 2.0))}
        for _ in range(spec.n_targets))
    scene = Scene(targets=targets, noise_sigma=spec.noise_sigma)
    comps = random_components(rng, spec.kind, params)
    echo = simulate_echo(scene, params, seed=int(rng.integers(2 ** 31)))
    interfered, rfi_truth, flags = mix_rfi(echo, comps, spec.sir_db,
                                           spec.pulse_fraction,
                                           seed=int(rng.integers(2 ** 31)))
    return echo, interfered, rfi_truth, flags, scene
