"""Tests for audio I/O, resampling, STFT features, and augmentation."""

import struct

import numpy as np
import pytest

from seldkit import dsp
from seldkit.errors import (
    DegenerateInputError,
    FormatError,
    InputError,
    TruncatedFileError,
    UnsupportedError,
)


def tone(freq_hz, sr, dur_s, n_channels=1, amp=0.5):
    t = np.arange(int(dur_s * sr)) / sr
    x = amp * np.sin(2 * np.pi * freq_hz * t)
    return dsp.AudioClip(
        samples=np.tile(x, (n_channels, 1)).astype(np.float32), sample_rate_hz=sr
    )


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

class TestWavIO:
    def test_pcm16_shape_and_rate(self, tmp_path):
        clip = tone(440, 44100, 1.0, n_channels=4)
        path = tmp_path / "t.wav"
        dsp.write_wav(path, clip, encoding="pcm16")
        back = dsp.read_wav(path)
        assert back.samples.shape == (4, 44100)
        assert back.sample_rate_hz == 44100

    def test_int16_min_scales_to_minus_one(self, tmp_path):
        path = tmp_path / "m.wav"
        payload = struct.pack("<2h", -32768, 32767)
        _write_raw_wav(path, payload, audio_format=1, bits=16, channels=1, rate=8000)
        clip = dsp.read_wav(path)
        assert clip.samples[0, 0] == -1.0
        assert clip.samples[0, 1] == pytest.approx(32767 / 32768)

    @pytest.mark.parametrize("encoding", ["pcm16", "pcm24", "float32"])
    def test_roundtrip_tolerance(self, tmp_path, encoding):
        rng = np.random.default_rng(3)
        clip = dsp.AudioClip(
            samples=rng.uniform(-0.99, 0.99, (2, 2000)).astype(np.float32),
            sample_rate_hz=16000,
        )
        path = tmp_path / "r.wav"
        dsp.write_wav(path, clip, encoding=encoding)
        back = dsp.read_wav(path)
        tol = {"pcm16": 2 / 32768, "pcm24": 2 / (1 << 23), "float32": 0.0}[encoding]
        assert np.max(np.abs(back.samples - clip.samples)) <= tol

    def test_float32_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        clip = dsp.AudioClip(
            samples=rng.uniform(-1, 1, (3, 777)).astype(np.float32),
            sample_rate_hz=22050,
        )
        path = tmp_path / "f.wav"
        dsp.write_wav(path, clip, encoding="float32")
        assert np.array_equal(dsp.read_wav(path).samples, clip.samples)

    def test_8bit_rejected(self, tmp_path):
        path = tmp_path / "b.wav"
        _write_raw_wav(path, b"\x80" * 30, audio_format=1, bits=8, channels=3, rate=8000)
        with pytest.raises(FormatError):
            dsp.read_wav(path)

    def test_not_riff_rejected(self, tmp_path):
        path = tmp_path / "x.wav"
        path.write_bytes(b"OggS" + b"\x00" * 40)
        with pytest.raises(FormatError):
            dsp.read_wav(path)

    def test_truncated_data_chunk(self, tmp_path):
        clip = tone(440, 8000, 0.5)
        path = tmp_path / "t.wav"
        dsp.write_wav(path, clip, encoding="pcm16")
        whole = path.read_bytes()
        path.write_bytes(whole[: len(whole) - 101])
        with pytest.raises(TruncatedFileError):
            dsp.read_wav(path)

    def test_nine_channels_rejected(self, tmp_path):
        path = tmp_path / "n.wav"
        _write_raw_wav(path, b"\x00" * 36, audio_format=1, bits=16, channels=9, rate=8000)
        with pytest.raises(FormatError):
            dsp.read_wav(path)


def _write_raw_wav(path, payload, audio_format, bits, channels, rate):
    block_align = channels * bits // 8
    header = b"".join([
        b"RIFF",
        struct.pack("<I", 36 + len(payload)),
        b"WAVE",
        b"fmt ",
        struct.pack("<IHHIIHH", 16, audio_format, channels, rate,
                    rate * block_align, block_align, bits),
        b"data",
        struct.pack("<I", len(payload)),
    ])
    path.write_bytes(header + payload)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

class TestResample:
    def test_identity_is_bit_exact(self):
        clip = tone(997, 44100, 0.3)
        out = dsp.resample(clip, 44100)
        assert np.array_equal(out.samples, clip.samples)

    def test_upsampling_rejected(self):
        with pytest.raises(UnsupportedError):
            dsp.resample(tone(440, 16000, 0.2), 44100)

    def test_dc_preserved_in_interior(self):
        clip = dsp.AudioClip(
            samples=np.full((1, 44100), 0.5, dtype=np.float32), sample_rate_hz=44100
        )
        out = dsp.resample(clip, 16000)
        assert out.samples.shape == (1, 16000)
        interior = out.samples[0, 1000:-1000]
        assert np.max(np.abs(interior - 0.5)) < 1e-3

    def test_output_length_floor(self):
        clip = dsp.AudioClip(
            samples=np.zeros((1, 44101), dtype=np.float32), sample_rate_hz=44100
        )
        out = dsp.resample(clip, 16000)
        assert out.n_samples == 44101 * 16000 // 44100

    def test_output_length_formula_property(self):
        rng = np.random.default_rng(31)
        for _ in range(12):
            n = int(rng.integers(2000, 90000))
            src, dst = [int(v) for v in rng.choice([44100, 32000, 22050, 16000], 2)]
            if dst > src:
                src, dst = dst, src
            clip = dsp.AudioClip(rng.uniform(-0.5, 0.5, (2, n)).astype(np.float32), src)
            out = dsp.resample(clip, dst)
            assert out.n_samples == n * dst // src
            assert out.samples.shape[0] == 2
            assert np.all(np.isfinite(out.samples))

    def test_sine_lands_in_same_bin_as_direct_synthesis(self):
        # Oracle: synthesize the same sine directly at the target rate and
        # compare the dominant DFT bins.
        resampled = dsp.resample(tone(1000, 44100, 1.0), 16000)
        direct = tone(1000, 16000, 1.0)
        n = min(resampled.n_samples, direct.n_samples)
        bin_resampled = np.argmax(np.abs(np.fft.rfft(resampled.samples[0, :n])))
        bin_direct = np.argmax(np.abs(np.fft.rfft(direct.samples[0, :n])))
        assert abs(int(bin_resampled) - int(bin_direct)) <= 1
        assert bin_direct == pytest.approx(1000 * n / 16000, abs=1)

    @pytest.mark.parametrize("freq", [500, 2000, 6000])
    def test_bandlimited_rms_preserved(self, freq):
        # Property: tones below 0.9 * target Nyquist keep their RMS within 5%.
        clip = tone(freq, 44100, 1.0)
        out = dsp.resample(clip, 16000)
        rms_in = np.sqrt(np.mean(clip.samples[0] ** 2))
        rms_out = np.sqrt(np.mean(out.samples[0, 500:-500].astype(np.float64) ** 2))
        assert abs(rms_out - rms_in) / rms_in < 0.05


# ---------------------------------------------------------------------------
# STFT features
# ---------------------------------------------------------------------------

class TestStftFeatures:
    def test_frame_count_example(self):
        n = 512 + 255 * 256
        clip = dsp.AudioClip(np.zeros((1, n), np.float32), 44100)
        feats = dsp.stft_features(clip)
        assert feats.n_frames == 256
        assert feats.n_bins == 256
        assert feats.n_feature_channels == 2

    def test_frame_count_formula_property(self):
        rng = np.random.default_rng(11)
        for n in rng.integers(512, 50000, size=25):
            clip = dsp.AudioClip(np.zeros((1, int(n)), np.float32), 44100)
            assert dsp.stft_features(clip).n_frames == 1 + (int(n) - 512) // 256

    def test_too_short_rejected(self):
        clip = dsp.AudioClip(np.zeros((1, 511), np.float32), 44100)
        with pytest.raises(InputError):
            dsp.stft_features(clip)

    def test_zero_input_gives_zero_magnitude_and_phase(self):
        clip = dsp.AudioClip(np.zeros((2, 2048), np.float32), 44100)
        feats = dsp.stft_features(clip)
        assert np.all(feats.values == 0.0)

    def test_magnitude_nonneg_phase_range(self):
        rng = np.random.default_rng(12)
        clip = dsp.AudioClip(
            rng.uniform(-1, 1, (3, 4096)).astype(np.float32), 44100
        )
        feats = dsp.stft_features(clip)
        c = 3
        assert np.all(feats.values[:c] >= 0.0)
        assert np.all(feats.values[c:] > -np.pi - 1e-6)
        assert np.all(feats.values[c:] <= np.pi + 1e-6)

    @pytest.mark.parametrize("k", [3, 40, 170, 255])
    def test_sine_at_bin_center_peaks_at_that_bin(self, k):
        # Oracle: a direct DFT of one Hamming-windowed frame. Feature bin k
        # corresponds to FFT bin k+1 (the DC bin is dropped).
        sr = 44100
        freq = (k + 1) * sr / 512
        clip = tone(freq, sr, 0.2)
        feats = dsp.stft_features(clip)
        mags = feats.values[0]
        interior = mags[1:-1]
        assert np.all(np.argmax(interior, axis=1) == k)

        frame = clip.samples[0, 256:768].astype(np.float64) * np.hamming(512)
        bins = np.arange(512)
        dft = np.array([
            np.sum(frame * np.exp(-2j * np.pi * m * bins / 512)) for m in range(1, 257)
        ])
        assert np.argmax(np.abs(dft)) == k

    def test_channel_stacking_order(self):
        rng = np.random.default_rng(13)
        quiet = rng.uniform(-0.01, 0.01, 2048)
        loud = rng.uniform(-0.9, 0.9, 2048)
        clip = dsp.AudioClip(np.stack([quiet, loud]).astype(np.float32), 44100)
        feats = dsp.stft_features(clip)
        assert feats.values.shape[0] == 4
        assert feats.values[1].sum() > feats.values[0].sum()


# ---------------------------------------------------------------------------
# Noise injection
# ---------------------------------------------------------------------------

class TestAddNoise:
    def test_snr_zero_matches_power(self):
        clip = tone(800, 16000, 1.0, n_channels=2)
        spec = dsp.AugmentSpec(kind="awgn", snr_db=0.0, rng_seed=5)
        noisy = dsp.add_noise(clip, spec)
        noise = noisy.samples.astype(np.float64) - clip.samples
        p_sig = np.mean(clip.samples.astype(np.float64) ** 2)
        p_noise = np.mean(noise ** 2)
        assert p_noise == pytest.approx(p_sig, rel=1e-6)

    def test_snr_20_db(self):
        clip = tone(800, 16000, 1.0)
        noisy = dsp.add_noise(clip, dsp.AugmentSpec(kind="awgn", snr_db=20.0, rng_seed=5))
        noise = noisy.samples.astype(np.float64) - clip.samples
        p_sig = np.mean(clip.samples.astype(np.float64) ** 2)
        assert np.mean(noise ** 2) == pytest.approx(p_sig / 100.0, rel=1e-6)

    def test_deterministic_given_seed(self):
        clip = tone(440, 16000, 0.5)
        spec = dsp.AugmentSpec(kind="awgn", snr_db=10.0, rng_seed=99)
        a = dsp.add_noise(clip, spec)
        b = dsp.add_noise(clip, spec)
        assert np.array_equal(a.samples, b.samples)

    def test_empirical_snr_within_tenth_db(self):
        # Property: measured SNR of the injected noise hits the target
        # within 0.1 dB for clips of at least one second.
        for snr in (0.0, 10.0, 20.0):
            clip = tone(523, 44100, 1.2, n_channels=4)
            noisy = dsp.add_noise(clip, dsp.AugmentSpec(kind="awgn", snr_db=snr, rng_seed=8))
            noise = noisy.samples.astype(np.float64) - clip.samples
            measured = 10 * np.log10(
                np.mean(clip.samples.astype(np.float64) ** 2) / np.mean(noise ** 2)
            )
            assert abs(measured - snr) < 0.1

    def test_noise_file_kind_tiles(self):
        clip = tone(440, 8000, 1.0, n_channels=2)
        rng = np.random.default_rng(21)
        noise = dsp.AudioClip(
            rng.uniform(-0.5, 0.5, (2, 1000)).astype(np.float32), 8000
        )
        spec = dsp.AugmentSpec(kind="noise_file", snr_db=6.0, rng_seed=0)
        noisy = dsp.add_noise(clip, spec, noise=noise)
        added = noisy.samples.astype(np.float64) - clip.samples
        measured = 10 * np.log10(
            np.mean(clip.samples.astype(np.float64) ** 2) / np.mean(added ** 2)
        )
        assert measured == pytest.approx(6.0, abs=1e-6)
        # tiled noise repeats with period 1000
        assert np.allclose(added[:, :1000], added[:, 1000:2000], atol=1e-7)

    def test_channel_count_mismatch_rejected(self):
        clip = tone(440, 8000, 0.5, n_channels=2)
        noise = tone(100, 8000, 0.5, n_channels=1)
        with pytest.raises(InputError):
            dsp.add_noise(clip, dsp.AugmentSpec(kind="noise_file", snr_db=0.0), noise=noise)

    def test_silent_signal_rejected(self):
        clip = dsp.AudioClip(np.zeros((1, 8000), np.float32), 8000)
        with pytest.raises(DegenerateInputError):
            dsp.add_noise(clip, dsp.AugmentSpec(kind="awgn", snr_db=0.0))

    def test_wrong_kind_rejected(self):
        clip = tone(440, 8000, 0.5)
        with pytest.raises(InputError):
            dsp.add_noise(clip, dsp.AugmentSpec(kind="reverb", reverb_strength=50))


# ---------------------------------------------------------------------------
# Reverb
# ---------------------------------------------------------------------------

class TestReverb:
    def test_strength_zero_is_identity(self):
        clip = tone(440, 16000, 0.5, n_channels=4)
        out = dsp.apply_reverb(clip, dsp.AugmentSpec(kind="reverb", reverb_strength=0.0))
        assert np.max(np.abs(out.samples - clip.samples)) < 1e-6

    def test_unit_impulse_yields_ir(self):
        sr = 16000
        x = np.zeros((1, sr), np.float32)
        x[0, 0] = 1.0
        clip = dsp.AudioClip(x, sr)
        spec = dsp.AugmentSpec(kind="reverb", reverb_strength=60.0, rng_seed=7)
        out = dsp.apply_reverb(clip, spec)
        ir = dsp.make_reverb_ir(60.0, sr, rng_seed=7)
        assert out.samples[0, 0] == pytest.approx(1.0)
        assert np.allclose(out.samples[0, :len(ir)], ir, atol=1e-6)
        assert np.all(out.samples[0, len(ir):] == 0.0)

    def test_tail_energy_below_one_percent(self):
        # Oracle: for envelope exp(-t/tau) the energy fraction beyond
        # t0 = tau*ln(100)/2 is ~1/100; the IR is cut at 3*tau so the
        # realized tail fraction stays below 1%.
        sr = 44100
        for strength in (25.0, 50.0, 100.0):
            ir = dsp.make_reverb_ir(strength, sr, rng_seed=3)
            tau = strength / 100.0 * dsp.REVERB_MAX_DECAY_S
            cut = int(np.ceil(tau * np.log(100.0) / 2.0 * sr))
            total = np.sum(ir ** 2)
            tail = np.sum(ir[cut:] ** 2)
            assert tail / total < 0.01

    def test_peak_matches_input_peak(self):
        clip = tone(440, 16000, 0.5, amp=0.7)
        out = dsp.apply_reverb(
            clip, dsp.AugmentSpec(kind="reverb", reverb_strength=80.0, rng_seed=1)
        )
        assert np.max(np.abs(out.samples)) == pytest.approx(0.7, rel=1e-4)

    def test_strength_out_of_range_rejected(self):
        with pytest.raises(InputError):
            dsp.AugmentSpec(kind="reverb", reverb_strength=101.0)

    def test_deterministic(self):
        clip = tone(440, 16000, 0.4)
        spec = dsp.AugmentSpec(kind="reverb", reverb_strength=40.0, rng_seed=11)
        a = dsp.apply_reverb(clip, spec)
        b = dsp.apply_reverb(clip, spec)
        assert np.array_equal(a.samples, b.samples)
