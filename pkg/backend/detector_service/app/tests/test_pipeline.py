"""
Tests for frame selection, video-level splitting, centering and class frequencies
"""
import itertools
from pathlib import Path

import numpy as np
import pytest

from app.application.pipeline_service import (
    active_tool_indices,
    center,
    class_frequencies,
    compute_mean_image,
    filter_min_tools,
    plan_split,
    restrict_labels,
    select_training_frames,
    subsample_frames,
    subsample_per_video,
    undersample_empty,
)
from app.domain.entities import DatasetManifest, FrameEntry, LabelVector, MeanImage, VideoRecord
from app.domain.exceptions import InvalidArgumentError


def make_video(video_id, rows, masks=None):
    frames = [
        FrameEntry(video_id, index, Path(f"{video_id}/{index:06d}.png"),
                   LabelVector(tuple(row), tuple(masks[index]) if masks else ()))
        for index, row in enumerate(rows)
    ]
    return VideoRecord(video_id, frames)


def make_manifest(incidence, tool_names=None):
    """One frame per video whose labels are the video's incidence row."""
    incidence = np.asarray(incidence, dtype=int)
    names = tool_names or [f"t{i}" for i in range(incidence.shape[1])]
    videos = [make_video(f"v{v:02d}", [incidence[v]]) for v in range(incidence.shape[0])]
    return DatasetManifest(names, videos)


def covered_optimum(incidence, n_val):
    best = 0
    for combo in itertools.combinations(range(incidence.shape[0]), n_val):
        mask = np.zeros(incidence.shape[0], dtype=bool)
        mask[list(combo)] = True
        both = (incidence[~mask].sum(axis=0) > 0) & (incidence[mask].sum(axis=0) > 0)
        best = max(best, int(both.sum()))
    return best


class TestSubsampling:
    """Test stride subsampling"""

    def test_stride_six(self):
        video = make_video("v", [[0]] * 18)
        assert [f.frame_index for f in subsample_frames(video, 6)] == [0, 6, 12]

    def test_stride_one_is_identity(self):
        video = make_video("v", [[0]] * 5)
        assert subsample_frames(video, 1) == video.frames

    def test_invalid_stride(self):
        with pytest.raises(InvalidArgumentError):
            subsample_frames(make_video("v", [[0]]), 0)

    def test_per_video_positions(self):
        """Test each video is subsampled from its own first frame"""
        frames = make_video("a", [[0]] * 5).frames + make_video("b", [[0]] * 4).frames
        kept = [(f.video_id, f.frame_index) for f in subsample_per_video(frames, 3)]
        assert kept == [("a", 0), ("a", 3), ("b", 0), ("b", 3)]


class TestUndersampling:
    """Test empty-frame undersampling"""

    def frames(self, empty, positive):
        rows = [[0, 0]] * empty + [[1, 0]] * positive
        return make_video("v", rows).frames

    def test_ratio_keeps_rounded_share_of_empty_frames(self):
        frames = self.frames(10, 5)
        kept = undersample_empty(frames, 0.4, seed=3)
        assert sum(f.labels.is_empty for f in kept) == 4
        assert sum(not f.labels.is_empty for f in kept) == 5

    def test_round_half_up(self):
        kept = undersample_empty(self.frames(5, 0), 0.5, seed=0)
        assert len(kept) == 3

    def test_order_preserved(self):
        frames = self.frames(10, 5)
        indices = [f.frame_index for f in undersample_empty(frames, 0.4, seed=3)]
        assert indices == sorted(indices)

    def test_ratio_one_is_identity(self):
        frames = self.frames(6, 2)
        assert undersample_empty(frames, 1.0, seed=1) == frames

    def test_deterministic(self):
        frames = self.frames(20, 3)
        assert undersample_empty(frames, 0.4, seed=9) == undersample_empty(frames, 0.4, seed=9)

    def test_invalid_ratio(self):
        with pytest.raises(InvalidArgumentError):
            undersample_empty(self.frames(2, 2), 0.0, seed=0)


class TestTrainingFrameSelection:
    """Test selection order and filters"""

    def test_min_tools_filter(self):
        frames = make_video("v", [[0, 0], [1, 0], [1, 1], [1, 1]]).frames
        assert [f.frame_index for f in filter_min_tools(frames, 2)] == [2, 3]

    def test_select_applies_min_tools(self):
        frames = make_video("v", [[1, 1], [1, 0], [1, 1], [0, 0]]).frames
        selected = select_training_frames(frames, stride=1, ratio=1.0, seed=0, min_tools=2)
        assert [f.frame_index for f in selected] == [0, 2]

    def test_order_of_stride_and_undersampling(self):
        """Test both orders keep every positive frame at stride positions"""
        rows = [[1] if i % 4 == 0 else [0] for i in range(24)]
        frames = make_video("v", rows).frames
        after = select_training_frames(frames, 2, 0.5, seed=1, undersample_after_stride=True)
        before = select_training_frames(frames, 2, 0.5, seed=1, undersample_after_stride=False)
        assert all(not f.labels.is_empty for f in after if f.frame_index % 4 == 0)
        assert sum(f.labels.is_empty for f in after) == 3
        assert all(f.frame_index % 2 == 0 for f in after)
        assert len(before) <= len(frames)

    def test_restrict_labels(self):
        frames = make_video("v", [[1, 0, 1]], masks=[[1, 1, 0]]).frames
        restricted = restrict_labels(frames, [0, 2])[0]
        assert restricted.labels == LabelVector((1, 1), (1, 0))
        assert restricted.key == frames[0].key


class TestSplit:
    """Test the video-level split planner"""

    def test_two_videos_shared_tool(self):
        plan = plan_split(make_manifest([[1], [1]]), 1, seed=0)
        assert plan.excluded_tools == ()
        assert len(plan.train_video_ids) == len(plan.val_video_ids) == 1

    def test_single_video_tool_excluded(self):
        """Test a tool present in one video can only ever be on one side"""
        plan = plan_split(make_manifest([[1, 1], [1, 0]], ["A", "B"]), 1, seed=0)
        assert plan.excluded_tools == ("B",)
        assert active_tool_indices(make_manifest([[1, 1], [1, 0]], ["A", "B"]), plan) == [0]

    def test_matches_exhaustive_optimum(self):
        """Test coverage equals the brute-force optimum on 100 random 10-video/8-tool instances"""
        for seed in range(100):
            incidence = np.random.default_rng(seed).random((10, 8)) < 0.3
            manifest = make_manifest(incidence)
            plan = plan_split(manifest, 2, seed=seed)
            active = len(manifest.tool_names) - len(plan.excluded_tools)
            assert active == covered_optimum(incidence, 2), f"seed {seed}"

    def test_partition_invariants(self):
        incidence = np.random.default_rng(5).random((9, 6)) < 0.4
        manifest = make_manifest(incidence)
        for limit in (50_000, 1):
            plan = plan_split(manifest, 3, seed=2, exhaustive_limit=limit, restarts=8)
            assert len(plan.val_video_ids) == 3
            assert set(plan.train_video_ids) | set(plan.val_video_ids) == set(manifest.video_ids)
            assert not set(plan.train_video_ids) & set(plan.val_video_ids)

    def test_local_search_deterministic(self):
        manifest = make_manifest(np.random.default_rng(8).random((12, 6)) < 0.3)
        first = plan_split(manifest, 3, seed=4, exhaustive_limit=1, restarts=8)
        assert first == plan_split(manifest, 3, seed=4, exhaustive_limit=1, restarts=8)

    @pytest.mark.parametrize("n_val", [0, 3])
    def test_invalid_validation_size(self, n_val):
        with pytest.raises(InvalidArgumentError):
            plan_split(make_manifest([[1], [1], [0]]), n_val, seed=0)

    def test_masked_cells_do_not_count(self):
        """Test incidence ignores disagreement cells"""
        video = make_video("v", [[1]], masks=[[0]])
        manifest = DatasetManifest(["t"], [video])
        assert not manifest.tool_video_incidence().any()


class TestCentering:
    """Test mean image and centering"""

    def test_mean_and_center(self):
        images = [np.full((3, 2, 2), 0.2), np.full((3, 2, 2), 0.4)]
        mean = compute_mean_image(images)
        np.testing.assert_allclose(mean.pixels, 0.3)
        np.testing.assert_allclose(center(images[0], mean), -0.1)
        np.testing.assert_allclose(center(images[1], mean), 0.1)

    def test_centering_mean_gives_zeros(self, rng):
        mean = MeanImage(pixels=rng.random((3, 4, 5)))
        np.testing.assert_array_equal(center(mean.pixels, mean), np.zeros((3, 4, 5)))

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            center(np.zeros((3, 2, 2)), MeanImage(pixels=np.zeros((3, 4, 4))))

    def test_empty_training_set(self):
        with pytest.raises(InvalidArgumentError):
            compute_mean_image([])


class TestClassFrequencies:
    """Test positive counts"""

    def test_frames_and_videos(self):
        frames = (make_video("a", [[1, 0], [1, 1], [0, 0]]).frames
                  + make_video("b", [[1, 0]], masks=[[1, 1]]).frames
                  + make_video("c", [[0, 1]], masks=[[1, 0]]).frames)
        np.testing.assert_array_equal(class_frequencies(frames, "frames"), [3, 1])
        np.testing.assert_array_equal(class_frequencies(frames, "videos"), [2, 1])

    def test_unknown_source(self):
        with pytest.raises(InvalidArgumentError):
            class_frequencies(make_video("a", [[1]]).frames, "pixels")
