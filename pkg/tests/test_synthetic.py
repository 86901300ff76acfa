import numpy as np
import pytest

from affectkit.datamodel import Task, load_labels
from affectkit.synthetic import (
    LabelRule, load_archives, make_videos, read_video_archive, video_records,
    write_dataset,
)


class TestMakeVideos:
    def test_deterministic_per_seed(self):
        a = make_videos(3, 20, seed=5)
        b = make_videos(3, 20, seed=5)
        c = make_videos(3, 20, seed=6)
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.frames, vb.frames)
            np.testing.assert_array_equal(va.au, vb.au)
            np.testing.assert_array_equal(va.expr, vb.expr)
        assert not np.array_equal(a[0].frames, c[0].frames)

    def test_shapes_and_ranges(self):
        videos = make_videos(2, 30, image_size=16, channels=3, seed=1)
        assert [v.video_id for v in videos] == ["vid000", "vid001"]
        for v in videos:
            assert v.frames.shape == (30, 16, 16, 3)
            assert v.frames.dtype == np.float32
            assert v.frames.min() >= 0.0 and v.frames.max() <= 1.0
            assert v.au.shape == (30, 12)
            assert set(np.unique(v.au)) <= {0, 1}
            assert v.expr.min() >= 0 and v.expr.max() <= 7
            assert np.abs(v.valence).max() <= 1.0
            assert np.abs(v.arousal).max() <= 1.0
            np.testing.assert_array_equal(v.frame_index, np.arange(30))

    def test_videos_differ_from_each_other(self):
        videos = make_videos(2, 20, seed=3)
        assert not np.array_equal(videos[0].frames, videos[1].frames)
        assert not np.array_equal(videos[0].latent, videos[1].latent)

    def test_labels_recomputable_from_latent(self):
        videos = make_videos(4, 25, seed=9)
        rule = LabelRule.from_seed(9)
        for v in videos:
            au, expr, valence, arousal = rule.labels_from_latent(v.latent)
            np.testing.assert_array_equal(au, v.au)
            np.testing.assert_array_equal(expr, v.expr)
            np.testing.assert_allclose(valence, v.valence)
            np.testing.assert_allclose(arousal, v.arousal)

    def test_gaps_thin_the_archive_but_keep_dense_length(self):
        videos = make_videos(3, 100, seed=2, gap_rate=0.4)
        for v in videos:
            assert v.n_frames == 100
            assert 0 < v.n_archived < 100
            assert v.frame_index[0] == 0
            assert np.all(np.diff(v.frame_index) > 0)
            assert v.au.shape[0] == v.n_archived

    def test_gap_rate_zero_keeps_everything(self):
        (v,) = make_videos(1, 15, seed=0, gap_rate=0.0)
        assert v.n_archived == 15

    def test_validation(self):
        with pytest.raises(ValueError):
            make_videos(0, 10)
        with pytest.raises(ValueError):
            make_videos(1, 1)
        with pytest.raises(ValueError):
            make_videos(1, 10, gap_rate=1.0)


class TestLabelRule:
    def test_deterministic(self):
        a = LabelRule.from_seed(4)
        b = LabelRule.from_seed(4)
        np.testing.assert_array_equal(a.au_vis, b.au_vis)
        np.testing.assert_array_equal(a.au_thresh, b.au_thresh)

    def test_loading_magnitudes(self):
        rule = LabelRule.from_seed(11)
        assert np.all(np.abs(rule.au_vis) >= 0.4)
        assert np.all(np.abs(rule.au_vis) <= 1.0)
        assert np.all(np.abs(rule.au_thresh) <= 0.25)

    def test_au_depends_on_both_latent_channels(self):
        rule = LabelRule.from_seed(13)
        rng = np.random.default_rng(14)
        latent = rng.uniform(-1, 1, size=(200, 2))
        au_base, *_ = rule.labels_from_latent(latent)
        flipped = latent.copy()
        flipped[:, 1] = -flipped[:, 1]
        au_flip, *_ = rule.labels_from_latent(flipped)
        assert not np.array_equal(au_base, au_flip)


class TestVideoRecords:
    def test_per_task_fields(self):
        (video,) = make_videos(1, 12, seed=8)
        for task in Task:
            records = video_records(video, task)
            assert len(records) == 12
            rec = records[3]
            assert rec.video_id == "vid000"
            assert rec.frame_index == 3
            if task is Task.AU:
                np.testing.assert_array_equal(rec.au, video.au[3])
            elif task is Task.EXPR:
                assert rec.expr == video.expr[3]
            else:
                assert rec.valence == pytest.approx(video.valence[3])

    def test_records_follow_archive_indices(self):
        (video,) = make_videos(1, 50, seed=8, gap_rate=0.3)
        records = video_records(video, Task.EXPR)
        assert [r.frame_index for r in records] == list(video.frame_index)


class TestDatasetIO:
    def test_write_then_load_round_trip(self, tmp_path):
        videos = make_videos(3, 20, seed=21, gap_rate=0.2)
        write_dataset(tmp_path, videos)
        archives = load_archives(tmp_path)
        assert sorted(archives) == ["vid000", "vid001", "vid002"]
        for v in videos:
            arc = archives[v.video_id]
            np.testing.assert_array_equal(arc.frames, v.frames)
            np.testing.assert_array_equal(arc.frame_index, v.frame_index)
            assert arc.n_frames == v.n_frames
        for task in Task:
            labels = load_labels(tmp_path / "labels" / f"{task.value}.csv",
                                 task)
            assert len(labels) == sum(v.n_archived for v in videos)

    def test_labels_survive_csv_round_trip_exactly(self, tmp_path):
        videos = make_videos(2, 15, seed=22)
        write_dataset(tmp_path, videos)
        records = load_labels(tmp_path / "labels" / "va.csv", Task.VA)
        by_key = {(r.video_id, r.frame_index): r for r in records}
        for v in videos:
            for i, t in enumerate(v.frame_index):
                rec = by_key[(v.video_id, int(t))]
                assert rec.valence == float(v.valence[i])
                assert rec.arousal == float(v.arousal[i])

    def test_archive_validation(self, tmp_path):
        np.savez(tmp_path / "bad.npz", frames=np.zeros((2, 8, 8, 1)))
        with pytest.raises(ValueError, match="missing"):
            read_video_archive(tmp_path / "bad.npz")
        np.savez(tmp_path / "bad2.npz", frames=np.zeros((2, 8, 8, 1)),
                 frame_index=np.array([0, 5]), n_frames=np.int64(3))
        with pytest.raises(ValueError, match="outside"):
            read_video_archive(tmp_path / "bad2.npz")

    def test_load_archives_requires_data(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_archives(tmp_path / "nowhere")
        (tmp_path / "frames").mkdir()
        with pytest.raises(FileNotFoundError):
            load_archives(tmp_path)
