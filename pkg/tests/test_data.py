"""Synthetic corpus invariants, seeding discipline, WAV round trips."""
import numpy as np
import pytest

from gmsep.data import (
    DatasetSpec,
    MixtureSample,
    WavFormatError,
    fundamental_band,
    load_sample,
    load_wav,
    make_sample,
    make_split,
    save_sample,
    synth_source,
    write_wav,
)


class TestSynthSource:
    def test_deterministic(self):
        a = synth_source(42, 1000, 0)
        b = synth_source(42, 1000, 0)
        assert np.array_equal(a, b)

    def test_peak_normalized(self):
        for sid in range(3):
            s = synth_source(7 + sid, 2000, sid)
            assert np.max(np.abs(s)) <= 0.9 + 1e-12

    def test_disjoint_fundamental_bands(self):
        for sid in range(3):
            lo, hi = fundamental_band(sid)
            nlo, _ = fundamental_band(sid + 1)
            assert hi <= nlo + 1e-9

    def test_spectral_peak_inside_band(self):
        sr, n = 8000, 4096
        for sid in range(2):
            for seed in range(5):
                s = synth_source(seed, n, sid, sr)
                mag = np.abs(np.fft.rfft(s))
                peak_hz = np.argmax(mag) * sr / n
                lo, hi = fundamental_band(sid)
                assert lo - sr / n <= peak_hz <= hi + sr / n

    def test_min_length(self):
        with pytest.raises(ValueError):
            synth_source(0, 100, 0)


class TestMakeSample:
    SPEC = DatasetSpec(length=1000, sources=2, seed=3)

    def test_clean_is_exact_source_sum(self):
        s = make_sample(self.SPEC, 11)
        assert np.array_equal(s.x_c, s.sources[0] + s.sources[1])

    def test_noisy_is_clean_plus_noise(self):
        s = make_sample(self.SPEC, 12)
        assert np.array_equal(s.x_n, s.x_c + s.noise)

    def test_realized_snr_matches_draw(self):
        for seed in range(8):
            s = make_sample(self.SPEC, seed)
            realized = 10 * np.log10(np.dot(s.x_c, s.x_c) / np.dot(s.noise, s.noise))
            assert realized == pytest.approx(s.snr_db, abs=1e-6)

    def test_zero_noise_scale_gives_clean(self):
        s = make_sample(self.SPEC, 13, noise_scale=0.0)
        assert np.array_equal(s.x_n, s.x_c)

    def test_lengths_equal(self):
        s = make_sample(self.SPEC, 14)
        assert len(s.x_n) == len(s.x_c) == len(s.sources[0]) == self.SPEC.length

    def test_lowpass_noise_variant(self):
        spec = DatasetSpec(length=1000, sources=2, seed=3, noise_kind="lowpass")
        s = make_sample(spec, 15)
        # low-passed noise concentrates energy below Nyquist/2
        mag = np.abs(np.fft.rfft(s.noise)) ** 2
        half = len(mag) // 2
        assert mag[:half].sum() > 2 * mag[half:].sum()


class TestSplits:
    def test_split_sizes_and_disjoint_streams(self):
        spec = DatasetSpec(num_train=4, num_valid=3, num_test=2, length=600, seed=9)
        train = make_split(spec, "train")
        valid = make_split(spec, "valid")
        test = make_split(spec, "test")
        assert (len(train), len(valid), len(test)) == (4, 3, 2)
        waves = [s.x_n.tobytes() for s in train + valid + test]
        assert len(set(waves)) == len(waves)

    def test_reproducible(self):
        spec = DatasetSpec(num_train=2, length=600, seed=5)
        a = make_split(spec, "train")
        b = make_split(spec, "train")
        for x, y in zip(a, b):
            assert np.array_equal(x.x_n, y.x_n)
            assert x.snr_db == y.snr_db

    def test_unknown_split(self):
        with pytest.raises(ValueError):
            make_split(DatasetSpec(), "dev")


class TestSampleCache:
    def test_round_trip(self, tmp_path):
        s = make_sample(DatasetSpec(length=600, sources=3, seed=1), 8)
        path = tmp_path / "sample.bin"
        save_sample(path, s)
        back = load_sample(path)
        assert np.array_equal(back.x_n, s.x_n)
        assert np.array_equal(back.x_c, s.x_c)
        assert len(back.sources) == 3
        assert np.array_equal(back.sources[2], s.sources[2])
        assert back.snr_db == s.snr_db
        assert back.sample_rate == s.sample_rate


class TestWav:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        ints = rng.integers(-32768, 32768, size=500, dtype=np.int16)
        x = ints.astype(np.float64) / 32768.0
        path = tmp_path / "a.wav"
        write_wav(path, x, 8000)
        back, rate = load_wav(path)
        assert rate == 8000
        assert np.array_equal(back, x)

    def test_full_scale_value(self, tmp_path):
        path = tmp_path / "b.wav"
        write_wav(path, np.array([32767 / 32768.0]), 8000)
        back, _ = load_wav(path)
        assert back[0] == pytest.approx(0.999969482421875, abs=1e-12)

    def test_stereo_rejected(self, tmp_path):
        import wave as wave_mod

        path = tmp_path / "stereo.wav"
        with wave_mod.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(8000)
            fh.writeframes(b"\x00\x00" * 64)
        with pytest.raises(WavFormatError, match="channel count"):
            load_wav(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"RIFFgarbage")
        with pytest.raises(WavFormatError, match="malformed"):
            load_wav(path)
