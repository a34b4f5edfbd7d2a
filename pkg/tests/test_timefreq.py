"""Tests for the STFT/ISTFT stack, TF images, oracle masks and masked
subtraction."""

import numpy as np
import pytest

from rfi_forge import timefreq
from rfi_forge.signal_model import RfiComponent, RfiKind, gen_nbi, gen_unified_rfi
from rfi_forge.timefreq import ColaError, Mask, Spectrogram, StftSpec


def _noise(rng, n, sigma=1.0):
    return sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)


class TestStftSpec:
    def test_defaults(self):
        s = StftSpec()
        assert (s.win_len, s.hop, s.fft_len, s.window) == (128, 64, 128, "HANN")

    @pytest.mark.parametrize("kwargs", [
        dict(win_len=0), dict(hop=0), dict(hop=256),
        dict(fft_len=64), dict(window="KAISER"),
    ])
    def test_invalid_specs(self, kwargs):
        with pytest.raises(ValueError):
            StftSpec(**kwargs)

    def test_hann_full_hop_has_gaps(self):
        # periodic Hann is zero at its first sample, so hop == win_len
        # leaves unreconstructable samples
        with pytest.raises(ColaError):
            StftSpec(win_len=64, hop=64, fft_len=64, window="HANN")

    def test_rect_full_hop_is_fine(self):
        StftSpec(win_len=64, hop=64, fft_len=64, window="RECT")

    def test_window_values(self):
        w = StftSpec(win_len=8, hop=4, fft_len=8).window_values()
        assert w.shape == (8,)
        assert w[0] == pytest.approx(0.0)
        assert w[4] == pytest.approx(1.0)


class TestStft:
    def test_zero_signal(self):
        sg = timefreq.stft(np.zeros(512, dtype=complex), StftSpec())
        assert np.all(sg.cells == 0)
        assert sg.orig_len == 512

    def test_too_short_signal(self):
        with pytest.raises(ValueError):
            timefreq.stft(np.zeros(100, dtype=complex), StftSpec())

    def test_tone_concentrates_in_one_bin(self):
        spec = StftSpec(win_len=64, hop=64, fft_len=64, window="RECT")
        k = 10
        n = np.arange(640)
        x = np.exp(2j * np.pi * k * n / 64)
        sg = timefreq.stft(x, spec)
        # interior frames only; edge frames see the zero padding
        power = np.abs(sg.cells) ** 2
        for f in range(2, sg.cells.shape[0] - 2):
            frame = power[f]
            assert frame[k] / frame.sum() > 0.99

    def test_frame_count_matches_helper(self):
        spec = StftSpec()
        for n in (128, 500, 1024):
            sg = timefreq.stft(np.zeros(n, dtype=complex), spec)
            assert sg.cells.shape[0] == timefreq.n_frames_for(n, spec)

    def test_ridge_slope_tracks_chirp_rate(self):
        fs = 100e6
        n = 1024
        t = (np.arange(n) - n / 2) / fs
        spec = StftSpec()
        for frac in (0.2, 0.5, 0.9):
            k_rfi = frac * fs / (n / fs)     # sweep `frac` of the band
            comp = RfiComponent(RfiKind.UNIFIED, amplitude=1.0,
                                chirp_rate_hzps=k_rfi)
            sg = timefreq.stft(gen_unified_rfi([comp], t), spec)
            slope = timefreq.ridge_slope(sg, fs)
            assert abs(slope - k_rfi) / k_rfi < 0.05


class TestIstft:
    def test_round_trip_hann_half_overlap(self):
        rng = np.random.default_rng(0)
        x = _noise(rng, 1000)
        sg = timefreq.stft(x, StftSpec())
        y = timefreq.istft(sg)
        assert y.shape == x.shape
        assert np.abs(y - x).max() < 1e-6 * np.abs(x).max()

    @pytest.mark.parametrize("spec", [
        StftSpec(win_len=64, hop=16, fft_len=64, window="HANN"),
        StftSpec(win_len=64, hop=32, fft_len=128, window="HAMMING"),
        StftSpec(win_len=64, hop=64, fft_len=64, window="RECT"),
        StftSpec(win_len=100, hop=37, fft_len=128, window="HAMMING"),
    ])
    def test_round_trip_other_valid_specs(self, spec):
        rng = np.random.default_rng(1)
        x = _noise(rng, 777)
        y = timefreq.istft(timefreq.stft(x, spec))
        assert np.abs(y - x).max() < 1e-6 * np.abs(x).max()

    def test_zero_spectrogram(self):
        sg = timefreq.stft(np.zeros(256, dtype=complex), StftSpec())
        assert np.all(timefreq.istft(sg) == 0)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        spec = StftSpec()
        x, y = _noise(rng, 600), _noise(rng, 600)
        sx = timefreq.stft(x, spec)
        sy = timefreq.stft(y, spec)
        both = Spectrogram(sx.cells + sy.cells, spec, 600)
        out = timefreq.istft(both)
        ref = x + y
        assert np.abs(out - ref).max() < 1e-6 * np.abs(ref).max()

    def test_parseval_rect(self):
        rng = np.random.default_rng(3)
        spec = StftSpec(win_len=64, hop=64, fft_len=64, window="RECT")
        x = _noise(rng, 640)
        sg = timefreq.stft(x, spec)
        half = spec.win_len // 2
        padded = np.zeros((sg.cells.shape[0] - 1) * spec.hop + spec.win_len,
                          dtype=complex)
        padded[half:half + len(x)] = x
        time_energy = (np.abs(padded) ** 2).sum()
        freq_energy = (np.abs(sg.cells) ** 2).sum() / spec.fft_len
        assert freq_energy == pytest.approx(time_energy, rel=1e-6)


class TestToImage:
    def test_peak_maps_to_one(self):
        cells = np.zeros((4, 8), dtype=complex)
        cells[1, 3] = 5.0
        cells[2, 2] = 1.0
        img = timefreq.to_image(Spectrogram(cells, StftSpec(win_len=8, hop=4, fft_len=8), 32))
        assert img.pixels[1, 3] == pytest.approx(1.0)

    def test_dyn_range_floor_maps_to_zero(self):
        cells = np.zeros((2, 8), dtype=complex)
        cells[0, 0] = 1.0
        cells[1, 1] = 10 ** (-60.0 / 20.0)   # exactly 60 dB down
        img = timefreq.to_image(Spectrogram(cells, StftSpec(win_len=8, hop=4, fft_len=8), 16),
                                dyn_range_db=60.0)
        assert img.pixels[1, 1] == pytest.approx(0.0, abs=1e-7)

    def test_zero_spectrogram_gives_zero_image(self):
        cells = np.zeros((3, 8), dtype=complex)
        img = timefreq.to_image(Spectrogram(cells, StftSpec(win_len=8, hop=4, fft_len=8), 24))
        assert np.all(img.pixels == 0)

    def test_monotone_and_scale_invariant(self):
        rng = np.random.default_rng(4)
        cells = rng.standard_normal((6, 8)) + 1j * rng.standard_normal((6, 8))
        spec = StftSpec(win_len=8, hop=4, fft_len=8)
        img = timefreq.to_image(Spectrogram(cells, spec, 48))
        scaled = timefreq.to_image(Spectrogram(cells * (3.0 - 4.0j), spec, 48))
        np.testing.assert_allclose(img.pixels, scaled.pixels, atol=1e-6)
        mag = np.abs(cells).ravel()
        pix = img.pixels.ravel()
        order = np.argsort(mag)
        assert np.all(np.diff(pix[order]) >= -1e-7)

    def test_rejects_nonpositive_dyn_range(self):
        cells = np.zeros((2, 8), dtype=complex)
        sg = Spectrogram(cells, StftSpec(win_len=8, hop=4, fft_len=8), 16)
        with pytest.raises(ValueError):
            timefreq.to_image(sg, dyn_range_db=0.0)


class TestOracleMask:
    def _sg(self, cells):
        return Spectrogram(cells, StftSpec(win_len=8, hop=4, fft_len=8),
                           cells.shape[0] * 4)

    def test_zero_rfi_gives_empty_mask(self):
        rng = np.random.default_rng(5)
        clean = rng.standard_normal((4, 8)) + 0j
        mask = timefreq.oracle_mask(self._sg(np.zeros((4, 8), dtype=complex)),
                                    self._sg(clean))
        assert np.all(mask.cells == 0)

    def test_dominant_rfi_cell_is_labeled(self):
        rfi = np.zeros((4, 8), dtype=complex)
        rfi[2, 5] = 3.0
        mask = timefreq.oracle_mask(self._sg(rfi),
                                    self._sg(np.zeros((4, 8), dtype=complex)))
        assert mask.cells[2, 5] == 1
        assert mask.cells.sum() == 1

    def test_strong_target_without_rfi_stays_unlabeled(self):
        clean = np.zeros((4, 8), dtype=complex)
        clean[1, 1] = 100.0                  # strong scatterer
        rfi = np.zeros((4, 8), dtype=complex)
        rfi[3, 6] = 25.0                     # above the scene's mean power floor
        mask = timefreq.oracle_mask(self._sg(rfi), self._sg(clean))
        assert mask.cells[1, 1] == 0
        assert mask.cells[3, 6] == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            timefreq.oracle_mask(self._sg(np.zeros((4, 8), dtype=complex)),
                                 self._sg(np.zeros((5, 8), dtype=complex)))


class TestSubtractMasked:
    def _sg(self, cells):
        return Spectrogram(cells, StftSpec(win_len=8, hop=4, fft_len=8),
                           cells.shape[0] * 4)

    def test_zero_mask_is_identity(self):
        rng = np.random.default_rng(6)
        cells = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
        out = timefreq.subtract_masked(self._sg(cells),
                                       Mask(np.zeros((4, 8), dtype=np.uint8)))
        np.testing.assert_array_equal(out.cells, cells)

    def test_full_mask_zeroes_everything(self):
        rng = np.random.default_rng(7)
        cells = rng.standard_normal((4, 8)) + 0j
        out = timefreq.subtract_masked(self._sg(cells),
                                       Mask(np.ones((4, 8), dtype=np.uint8)))
        assert np.all(out.cells == 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            timefreq.subtract_masked(self._sg(np.zeros((4, 8), dtype=complex)),
                                     Mask(np.zeros((3, 8), dtype=np.uint8)))

    def test_power_accounting_on_simulated_nbi(self):
        """Oracle-masked subtraction removes nearly all RFI power while the
        clean-signal power lost stays below the mask occupancy fraction."""
        rng = np.random.default_rng(8)
        n = 1024
        fs = 100e6
        t = (np.arange(n) - n / 2) / fs
        clean = _noise(rng, n, sigma=0.1)
        comps = [RfiComponent(RfiKind.NBI, amplitude=2.0, freq_offset_hz=0.17 * fs),
                 RfiComponent(RfiKind.NBI, amplitude=1.5, freq_offset_hz=-0.28 * fs)]
        rfi = gen_nbi(comps, t)
        spec = StftSpec()
        s_clean = timefreq.stft(clean, spec)
        s_rfi = timefreq.stft(rfi, spec)
        s_mix = Spectrogram(s_clean.cells + s_rfi.cells, spec, n)
        mask = timefreq.oracle_mask(s_rfi, s_clean)

        keep = ~mask.cells.astype(bool)
        rfi_power = (np.abs(s_rfi.cells) ** 2).sum()
        residual = (np.abs(s_rfi.cells[keep]) ** 2).sum()
        assert residual <= 0.01 * rfi_power

        clean_power = (np.abs(s_clean.cells) ** 2).sum()
        lost = (np.abs(s_clean.cells[~keep]) ** 2).sum()
        occupancy = mask.cells.mean()
        assert lost / clean_power <= occupancy

        out = timefreq.subtract_masked(s_mix, mask)
        assert out.cells.shape == s_mix.cells.shape
        assert np.all(out.cells[~keep] == 0)
