import numpy as np
import pytest

from nimos.corpus import AudioClip, Manifest, ManifestEntry, load_manifest, write_wav
from nimos.degrade import (DegradationCondition, DegradationError, apply_chop,
                           apply_clip, apply_echo, apply_noise,
                           default_condition_grid, synthesize_corpus)

SR = 16000


def _clip(samples):
    return AudioClip(np.asarray(samples, dtype=np.float64), SR)


class TestClip:
    def test_definitional(self):
        out = apply_clip(_clip([0.5, -0.9]), 0.6)
        assert np.allclose(out.samples, [0.5, -0.6])

    def test_threshold_one_is_identity(self):
        x = np.linspace(-1, 1, 101)
        out = apply_clip(_clip(x), 1.0)
        assert np.array_equal(out.samples, x)

    def test_idempotent_on_random_signals(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            x = rng.uniform(-1, 1, size=50)
            thr = rng.uniform(0.05, 1.0)
            once = apply_clip(_clip(x), thr)
            twice = apply_clip(once, thr)
            assert np.array_equal(once.samples, twice.samples)

    def test_bound_holds(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, size=4000)
        out = apply_clip(_clip(x), 0.3)
        assert np.max(np.abs(out.samples)) <= 0.3

    def test_threshold_range(self):
        with pytest.raises(DegradationError):
            apply_clip(_clip([0.0, 0.1]), 0.0)
        with pytest.raises(DegradationError):
            apply_clip(_clip([0.0, 0.1]), 1.2)


class TestChop:
    def test_definitional_pattern(self):
        # period 10 samples = 10/16 ms at 16 kHz
        period_ms = 10 * 1000.0 / SR
        out = apply_chop(_clip(np.ones(30)), period_ms, 0.5)
        expected = np.tile([1] * 5 + [0] * 5, 3).astype(float)
        assert np.array_equal(out.samples, expected)

    def test_small_fraction_zeroes_at_most_one_sample_per_period(self):
        period_ms = 20 * 1000.0 / SR
        out = apply_chop(_clip(np.ones(100)), period_ms, 0.03)
        zeros_per_period = (out.samples.reshape(5, 20) == 0).sum(axis=1)
        assert np.all(zeros_per_period <= 1)

    def test_untouched_samples_bit_identical(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, size=400)
        out = apply_chop(_clip(x), 10 * 1000.0 / SR, 0.5)
        mask = out.samples != 0
        assert np.array_equal(out.samples[mask], x[mask])

    def test_energy_ratio_statistical_oracle(self):
        # white noise: zeroing a fraction f of samples scales energy by ~(1-f)
        rng = np.random.default_rng(3)
        for _ in range(100):
            x = rng.standard_normal(SR)
            frac = rng.choice([0.1, 0.25, 0.4, 0.5])
            out = apply_chop(_clip(x / np.max(np.abs(x))), 10.0, frac)
            ratio = np.sum(out.samples ** 2) / np.sum((x / np.max(np.abs(x))) ** 2)
            assert abs(ratio - (1.0 - frac)) < 0.02

    def test_energy_never_increases(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, 1000)
        out = apply_chop(_clip(x), 5.0, 0.3)
        assert np.sum(out.samples ** 2) <= np.sum(x ** 2)

    def test_invalid_params(self):
        with pytest.raises(DegradationError):
            apply_chop(_clip(np.ones(100)), 10.0, 0.0)
        with pytest.raises(DegradationError):
            apply_chop(_clip(np.ones(100)), 10.0, 1.0)
        with pytest.raises(DegradationError):
            apply_chop(_clip(np.ones(10)), 1000.0, 0.5)  # period > clip


class TestEcho:
    def test_alpha_zero_identity(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, 2000)
        out = apply_echo(_clip(x), 50.0, 0.0)
        assert np.array_equal(out.samples, x)

    def test_impulse_response(self):
        x = np.zeros(500)
        x[0] = 1.0
        d = 160
        out = apply_echo(_clip(x), d * 1000.0 / SR, 0.5)
        assert out.samples[0] == pytest.approx(1 / 1.5)
        assert out.samples[d] == pytest.approx(0.5 / 1.5)
        others = np.delete(out.samples, [0, d])
        assert np.all(others == 0)

    def test_cross_correlation_peaks_at_zero_and_delay(self):
        # speech-like noise: low-passed white noise; smoothing spreads each
        # peak over a few lags, so compare against everything off the peaks
        rng = np.random.default_rng(6)
        w = rng.standard_normal(SR)
        x = np.convolve(w, np.ones(4) / 4, mode="same")
        x /= np.max(np.abs(x))
        d = 320
        out = apply_echo(_clip(x), d * 1000.0 / SR, 0.6)
        lags = np.arange(0, 1000)
        xc = np.array([np.dot(out.samples[l:], x[:len(x) - l]) for l in lags])
        near = np.zeros(len(lags), dtype=bool)
        near[:8] = True
        near[d - 8:d + 9] = True
        assert np.argmax(xc) == 0
        assert np.argmax(np.where(near & (lags > 100), xc, -np.inf)) == d
        assert xc[d] > np.max(xc[~near])

    def test_output_bounded(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-1, 1, 1000)
        out = apply_echo(_clip(x), 10.0, 0.9)
        assert np.max(np.abs(out.samples)) <= 1.0

    def test_delay_longer_than_clip(self):
        with pytest.raises(DegradationError):
            apply_echo(_clip(np.ones(100)), 1000.0, 0.5)


class TestNoise:
    def test_inf_snr_identity(self):
        x = np.sin(2 * np.pi * 440 * np.arange(SR) / SR) * 0.5
        out = apply_noise(_clip(x), np.inf, "white", seed=1)
        assert np.array_equal(out.samples, x)

    def test_zero_db_noise_power_equals_signal_power(self):
        # unit-power sine over 10 s; the mix may get peak-normalized, which
        # scales signal and noise equally, so measure relative to the scale
        t = np.arange(10 * SR) / SR
        x = np.sqrt(2) * np.sin(2 * np.pi * 997 * t)
        out, scale = apply_noise(_clip(x), 0.0, "white", seed=2, return_scale=True)
        noise = out.samples - scale * x
        p_x = np.mean((scale * x) ** 2)
        p_n = np.mean(noise ** 2)
        assert abs(10 * np.log10(p_x / p_n)) < 0.05

    @pytest.mark.parametrize("target", [0.0, 10.0, 20.0, 30.0])
    @pytest.mark.parametrize("kind", ["white", "pink"])
    def test_measured_snr_on_speechlike_signal(self, target, kind):
        from nimos.synthetic import speech_surrogate
        x = speech_surrogate(2.0, SR, 120.0, (500.0, 1500.0), seed=11, peak=0.4)
        out, scale = apply_noise(_clip(x), target, kind, seed=3, return_scale=True)
        noise = out.samples - scale * x
        measured = 10 * np.log10(np.mean((scale * x) ** 2) / np.mean(noise ** 2))
        assert abs(measured - target) < 0.05

    def test_deterministic_per_seed(self):
        x = 0.3 * np.sin(2 * np.pi * 200 * np.arange(SR) / SR)
        a = apply_noise(_clip(x), 10.0, "white", seed=9)
        b = apply_noise(_clip(x), 10.0, "white", seed=9)
        c = apply_noise(_clip(x), 10.0, "white", seed=10)
        assert np.array_equal(a.samples, b.samples)
        assert not np.array_equal(a.samples, c.samples)

    def test_silent_input_rejected(self):
        with pytest.raises(DegradationError, match="silent"):
            apply_noise(_clip(np.zeros(100)), 10.0, "white", seed=0)

    def test_peak_normalization_recorded(self):
        x = 0.99 * np.sin(2 * np.pi * 100 * np.arange(SR) / SR)
        out, scale = apply_noise(_clip(x), -3.0, "white", seed=4, return_scale=True)
        assert scale < 1.0
        assert np.max(np.abs(out.samples)) <= 1.0


class TestCondition:
    def test_params_validated(self):
        with pytest.raises(DegradationError):
            DegradationCondition("CLIP", {"threshold": 2.0})
        with pytest.raises(DegradationError):
            DegradationCondition("CHOP", {"period_ms": 20.0})
        with pytest.raises(DegradationError):
            DegradationCondition("REFERENCE", {"x": 1})
        with pytest.raises(DegradationError):
            DegradationCondition("FOO", {})

    def test_condition_id_format(self):
        c = DegradationCondition("NOISE", {"snr_db": 10.0, "noise_kind": "white"})
        assert c.condition_id == "NOISE_noise_kind=white_snr_db=10"

    def test_default_grid_covers_all_classes(self):
        grid = default_condition_grid()
        assert set(grid) == {"CHOP", "CLIP", "ECHO", "NOISE", "REFERENCE"}
        assert all(grid[c] for c in grid)


class TestSynthesizeCorpus:
    def _clean(self, tmp_path, n_speakers=4, n_sentences=2, n=8000):
        # 0.5 s clips: long enough for the largest default chop/echo params
        rng = np.random.default_rng(0)
        entries = []
        root = tmp_path / "clean"
        for s in range(n_speakers):
            for k in range(n_sentences):
                rel = f"wav/s{s}_u{k}.wav"
                x = 0.4 * rng.uniform(-1, 1, n)
                write_wav(AudioClip(x, SR), root / rel)
                entries.append(ManifestEntry(rel, "REFERENCE", "clean", f"spk{s}"))
        return Manifest(entries, root=root)

    def test_paper_scale_counts(self, tmp_path):
        # 20 speakers, per-class target 761 -> 3805 rows, 761 per class
        clean = self._clean(tmp_path, n_speakers=20, n_sentences=4)
        grid = default_condition_grid()
        manifest = synthesize_corpus(clean, grid, tmp_path / "out", seed=5,
                                     per_class=761)
        assert len(manifest) == 3805
        counts = {}
        for e in manifest.entries:
            counts[e.degradation_class] = counts.get(e.degradation_class, 0) + 1
        assert set(counts.values()) == {761}

    def test_reference_only_grid_passthrough_bit_identical(self, tmp_path):
        clean = self._clean(tmp_path, n_speakers=2, n_sentences=1)
        grid = {"REFERENCE": [DegradationCondition("REFERENCE", {})]}
        manifest = synthesize_corpus(clean, grid, tmp_path / "out", seed=1)
        assert len(manifest) == 2
        by_stem = {c.clip_path.rsplit("/", 1)[-1].removesuffix(".wav"): c
                   for c in clean.entries}
        for e in manifest.entries:
            # output name: <rowindex>_<CLASS>_<clean stem>.wav
            name = e.clip_path.rsplit("/", 1)[-1].removesuffix(".wav")
            src = by_stem[name.split("_", 2)[2]]
            assert manifest.resolve(e).read_bytes() == clean.resolve(src).read_bytes()

    def test_same_seed_byte_identical_manifests(self, tmp_path):
        clean = self._clean(tmp_path)
        grid = default_condition_grid()
        synthesize_corpus(clean, grid, tmp_path / "o1", seed=9, per_class=10)
        synthesize_corpus(clean, grid, tmp_path / "o2", seed=9, per_class=10)
        m1 = (tmp_path / "o1" / "manifest.csv").read_bytes()
        m2 = (tmp_path / "o2" / "manifest.csv").read_bytes()
        assert m1 == m2
        # and the audio itself matches
        man = load_manifest(tmp_path / "o1" / "manifest.csv")
        for e in man.entries[:10]:
            a = (tmp_path / "o1" / e.clip_path).read_bytes()
            b = (tmp_path / "o2" / e.clip_path).read_bytes()
            assert a == b

    def test_determinism_independent_of_jobs(self, tmp_path):
        clean = self._clean(tmp_path)
        grid = default_condition_grid()
        synthesize_corpus(clean, grid, tmp_path / "j1", seed=9, per_class=10, jobs=1)
        synthesize_corpus(clean, grid, tmp_path / "j4", seed=9, per_class=10, jobs=4)
        man = load_manifest(tmp_path / "j1" / "manifest.csv")
        for e in man.entries:
            assert (tmp_path / "j1" / e.clip_path).read_bytes() == \
                   (tmp_path / "j4" / e.clip_path).read_bytes()

    def test_held_out_speaker_overlap_rejected(self, tmp_path):
        clean = self._clean(tmp_path)
        grid = default_condition_grid()
        with pytest.raises(DegradationError, match="held-out"):
            synthesize_corpus(clean, grid, tmp_path / "out", seed=1,
                              exclude_speakers=["spk1"])

    def test_empty_grid_class_rejected(self, tmp_path):
        clean = self._clean(tmp_path)
        with pytest.raises(DegradationError, match="empty condition grid"):
            synthesize_corpus(clean, {"CHOP": []}, tmp_path / "out", seed=1)

    def test_generators_preserve_length_and_rate(self):
        rng = np.random.default_rng(12)
        x = 0.5 * rng.uniform(-1, 1, 3200)
        clip = _clip(x)
        for out in [apply_clip(clip, 0.4), apply_chop(clip, 10.0, 0.3),
                    apply_echo(clip, 20.0, 0.5), apply_noise(clip, 15.0, "white", 1)]:
            assert out.samples.size == x.size
            assert out.sample_rate == SR
