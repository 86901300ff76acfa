import numpy as np
import pytest
import torch

from affectkit.features import (
    FeatureSequence, FeatureSetSpec, SyntheticFeatureProvider, align_audio,
    combine, extract_vision, file_digest, load_features, params_digest,
    save_features, synthetic_audio_provider,
)
from affectkit.mae import MAEConfig, MAEEncoder


@pytest.fixture(scope="module")
def encoder():
    torch.manual_seed(17)
    return MAEEncoder(MAEConfig())


class TestFeatureSequence:
    def test_coerces_to_float32(self):
        seq = FeatureSequence("p", "v", np.ones((3, 4), dtype=np.float64))
        assert seq.features.dtype == np.float32
        assert seq.n_frames == 3
        assert seq.dim == 4

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            FeatureSequence("p", "v", np.ones(5))


class TestExtractVision:
    def test_batch_size_invariance(self, encoder):
        rng = np.random.default_rng(90)
        frames = rng.uniform(size=(11, 32, 32, 1)).astype(np.float32)
        full = extract_vision(encoder, frames, "v", batch_size=64)
        chunked = extract_vision(encoder, frames, "v", batch_size=3)
        np.testing.assert_array_equal(full.features, chunked.features)
        assert full.features.shape == (11, 64)

    def test_deterministic(self, encoder):
        rng = np.random.default_rng(91)
        frames = rng.uniform(size=(5, 32, 32, 1)).astype(np.float32)
        a = extract_vision(encoder, frames, "v")
        b = extract_vision(encoder, frames, "v")
        np.testing.assert_array_equal(a.features, b.features)

    def test_training_flag_restored(self, encoder):
        frames = np.zeros((2, 32, 32, 1), dtype=np.float32)
        encoder.train()
        extract_vision(encoder, frames, "v")
        assert encoder.training
        encoder.eval()
        extract_vision(encoder, frames, "v")
        assert not encoder.training

    def test_ids_attached(self, encoder):
        frames = np.zeros((1, 32, 32, 1), dtype=np.float32)
        seq = extract_vision(encoder, frames, "vid7", provider_id="enc")
        assert seq.video_id == "vid7"
        assert seq.provider_id == "enc"


class TestAlignAudio:
    def test_equal_rates_identity(self):
        rng = np.random.default_rng(92)
        audio = rng.normal(size=(10, 3)).astype(np.float32)
        seq = align_audio(audio, 25.0, 25.0, 10)
        np.testing.assert_array_equal(seq.features, audio)

    def test_downsample_known_indices(self):
        audio = np.arange(10, dtype=np.float32)[:, None]
        # 50 Hz audio on a 25 Hz frame clock: frame t sits at audio step 2t.
        seq = align_audio(audio, 50.0, 25.0, 5)
        np.testing.assert_array_equal(seq.features[:, 0], [0, 2, 4, 6, 8])

    def test_midpoint_resolves_earlier(self):
        audio = np.arange(4, dtype=np.float32)[:, None]
        # Ratio 0.5 puts odd frames exactly between two audio steps.
        seq = align_audio(audio, 1.0, 2.0, 4)
        np.testing.assert_array_equal(seq.features[:, 0], [0, 0, 1, 1])

    def test_matches_brute_force_nearest(self):
        rng = np.random.default_rng(93)
        for _ in range(100):
            m = int(rng.integers(1, 40))
            n = int(rng.integers(0, 60))
            ar = float(rng.uniform(0.5, 100.0))
            vr = float(rng.uniform(0.5, 100.0))
            audio = rng.normal(size=(m, 2)).astype(np.float32)
            seq = align_audio(audio, ar, vr, n)
            assert seq.n_frames == n
            for t in range(n):
                target = t * ar / vr
                dist = np.abs(np.arange(m) - target)
                best = int(np.argmin(dist))  # argmin keeps the earlier tie
                np.testing.assert_array_equal(seq.features[t], audio[best])

    def test_clamps_beyond_audio_span(self):
        audio = np.array([[1.0], [2.0]], dtype=np.float32)
        seq = align_audio(audio, 10.0, 25.0, 8)
        assert seq.features[-1, 0] == 2.0
        assert seq.features[0, 0] == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            align_audio(np.zeros((0, 2)), 1.0, 1.0, 3)
        with pytest.raises(ValueError):
            align_audio(np.zeros((2, 2)), 0.0, 1.0, 3)


class TestCombine:
    def seqs(self):
        rng = np.random.default_rng(94)
        a = FeatureSequence("vis", "v", rng.normal(size=(6, 4)))
        b = FeatureSequence("aud", "v", rng.normal(size=(6, 3)))
        return a, b

    def test_column_blocks_in_order(self):
        a, b = self.seqs()
        spec = FeatureSetSpec(vision_providers=("vis",),
                              audio_providers=("aud",))
        fused = combine([b, a], spec)
        assert fused.provider_id == "vis+aud"
        assert fused.features.shape == (6, 7)
        np.testing.assert_array_equal(fused.features[:, :4], a.features)
        np.testing.assert_array_equal(fused.features[:, 4:], b.features)

    def test_missing_and_extra_rejected(self):
        a, b = self.seqs()
        spec = FeatureSetSpec(vision_providers=("vis",),
                              audio_providers=("aud",))
        with pytest.raises(ValueError, match="missing"):
            combine([a], spec)
        c = FeatureSequence("other", "v", np.zeros((6, 2)))
        with pytest.raises(ValueError, match="unexpected"):
            combine([a, b, c], spec)

    def test_video_and_length_mismatch_rejected(self):
        a, _ = self.seqs()
        spec = FeatureSetSpec(vision_providers=("vis", "vis2"))
        other_video = FeatureSequence("vis2", "w", np.zeros((6, 2)))
        with pytest.raises(ValueError, match="different videos"):
            combine([a, other_video], spec)
        short = FeatureSequence("vis2", "v", np.zeros((5, 2)))
        with pytest.raises(ValueError, match="mismatch"):
            combine([a, short], spec)

    def test_duplicate_sequence_rejected(self):
        a, _ = self.seqs()
        spec = FeatureSetSpec(vision_providers=("vis",))
        with pytest.raises(ValueError, match="duplicate"):
            combine([a, a], spec)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            FeatureSetSpec(vision_providers=())
        with pytest.raises(ValueError):
            FeatureSetSpec(vision_providers=("a",), audio_providers=("a",))


class TestSyntheticProvider:
    def test_rows_independent_of_call_order(self):
        p = SyntheticFeatureProvider("aud", dim=4, seed=5)
        first = p.features_for("v1", 10)
        p.features_for("v2", 7)
        again = p.features_for("v1", 10)
        np.testing.assert_array_equal(first.features, again.features)

    def test_videos_differ_providers_differ(self):
        p = SyntheticFeatureProvider("aud", dim=4, seed=5)
        q = SyntheticFeatureProvider("aud2", dim=4, seed=5)
        a = p.features_for("v1", 10).features
        b = p.features_for("v2", 10).features
        c = q.features_for("v1", 10).features
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_label_correlated_tracks_planted_signal(self):
        rng = np.random.default_rng(95)
        planted = rng.normal(size=(1000, 2))
        p = SyntheticFeatureProvider("aud", dim=5, seed=6,
                                     profile="label_correlated",
                                     noise_scale=0.3)
        feats = p.features_for("v", 1000, planted=planted).features
        # Column j mixes planted column j mod 2 with scaled noise.
        for j in range(5):
            corr = np.corrcoef(feats[:, j], planted[:, j % 2])[0, 1]
            assert corr > 0.5

    def test_noise_scale_zero_reproduces_signal(self):
        planted = np.linspace(-1, 1, 20)
        p = SyntheticFeatureProvider("aud", dim=3, seed=0,
                                     profile="label-correlated",
                                     noise_scale=0.0)
        feats = p.features_for("v", 20, planted=planted).features
        for j in range(3):
            np.testing.assert_allclose(feats[:, j], planted, rtol=1e-6)

    def test_label_profile_requires_signal(self):
        p = SyntheticFeatureProvider("aud", dim=3, seed=0,
                                     profile="label_correlated")
        with pytest.raises(ValueError):
            p.features_for("v", 5)

    def test_factory_defaults(self):
        p = synthetic_audio_provider(seed=3)
        assert p.provider_id == "synthetic-audio"
        assert p.dim == 16
        assert p.params()["seed"] == 3

    def test_unknown_profile_rejected(self):
        with pytest.raises(ValueError):
            SyntheticFeatureProvider("aud", dim=3, seed=0, profile="sine")


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(96)
        seq = FeatureSequence("prov", "vid1", rng.normal(size=(9, 5)))
        save_features(tmp_path, seq, config_hash="abc123")
        loaded = load_features(tmp_path, "prov", "vid1", config_hash="abc123")
        assert loaded is not None
        assert loaded.provider_id == "prov"
        assert loaded.video_id == "vid1"
        np.testing.assert_array_equal(loaded.features, seq.features)

    def test_miss_returns_none(self, tmp_path):
        assert load_features(tmp_path, "prov", "vid1", "abc") is None

    def test_config_hash_keys_the_entry(self, tmp_path):
        seq = FeatureSequence("prov", "vid1", np.ones((2, 2)))
        save_features(tmp_path, seq, config_hash="old")
        assert load_features(tmp_path, "prov", "vid1", "new") is None
        assert load_features(tmp_path, "prov", "vid1", "old") is not None

    def test_awkward_ids_are_safe_filenames(self, tmp_path):
        seq = FeatureSequence("pro/vider:x", "vi deo/../y",
                              np.ones((2, 2)))
        save_features(tmp_path, seq, config_hash="h")
        loaded = load_features(tmp_path, "pro/vider:x", "vi deo/../y", "h")
        assert loaded is not None
        for p in tmp_path.iterdir():
            assert p.parent == tmp_path

    def test_corrupt_payload_raises(self, tmp_path):
        seq = FeatureSequence("prov", "vid1", np.ones((4, 3)))
        save_features(tmp_path, seq, config_hash="h")
        bins = list(tmp_path.glob("*.bin"))
        assert len(bins) == 1
        bins[0].write_bytes(bins[0].read_bytes()[:-2])
        with pytest.raises(ValueError):
            load_features(tmp_path, "prov", "vid1", "h")


class TestDigests:
    def test_file_digest_tracks_content(self, tmp_path):
        p = tmp_path / "blob"
        p.write_bytes(b"hello")
        d1 = file_digest(p)
        p.write_bytes(b"hellp")
        assert file_digest(p) != d1
        p.write_bytes(b"hello")
        assert file_digest(p) == d1

    def test_params_digest_order_independent(self):
        assert params_digest({"a": 1, "b": 2.5}) == \
            params_digest({"b": 2.5, "a": 1})
        assert params_digest({"a": 1}) != params_digest({"a": 2})
