"""Sliding-window stitching, evaluation protocol, reconstruction dumps."""

import os

import numpy as np
import pytest

from vmim.inference import (
    SlidingWindowConfig,
    _window_starts,
    dice_over_dataset,
    evaluate,
    reconstruct_dump,
    sliding_window_infer,
    write_pgm,
)
from vmim.models import SegConfig, ViTConfig
from vmim.patches import MaskingConfig, PatchGrid, sample_mask
from vmim.rng import Rng
from vmim.train import TrainConfig, finetune, pretrain
from vmim.volume import LabelVolume, Volume, synth_generate


def identity_model(window):
    return window.copy()


class TestTiling:
    def test_stride_rule(self):
        assert SlidingWindowConfig(64, 0.5).stride == 32
        assert SlidingWindowConfig(96, 0.25).stride == 72
        assert SlidingWindowConfig(2, 0.9).stride == 1

    def test_window_starts_clamp_to_boundary(self):
        assert _window_starts(96, 64, 32) == [0, 32]
        assert _window_starts(100, 64, 32) == [0, 32, 36]
        assert _window_starts(64, 64, 32) == [0]

    def test_coverage_counts_for_96_64_half_overlap(self):
        counts = np.zeros((96, 96, 96))
        starts = _window_starts(96, 64, 32)
        for sd in starts:
            for sh in starts:
                for sw in starts:
                    counts[sd : sd + 64, sh : sh + 64, sw : sw + 64] += 1
        assert len(starts) == 2
        assert set(np.unique(counts).astype(int)) == {1, 2, 4, 8}
        assert counts.min() >= 1

    def test_identity_model_reproduces_input(self):
        rng = np.random.default_rng(0)
        v = Volume(rng.uniform(size=(1, 24, 20, 28)))
        out = sliding_window_infer(identity_model, v, SlidingWindowConfig(8, 0.5))
        assert np.abs(out - v.data).max() <= 1e-12

    def test_single_window_equals_direct_call(self):
        rng = np.random.default_rng(1)
        v = Volume(rng.uniform(size=(1, 8, 8, 8)))
        out = sliding_window_infer(identity_model, v, SlidingWindowConfig(8, 0.5))
        assert np.array_equal(out, identity_model(v.data))

    def test_small_volume_padded_and_cropped_back(self):
        rng = np.random.default_rng(2)
        v = Volume(rng.uniform(size=(1, 5, 8, 6)))
        out = sliding_window_infer(identity_model, v, SlidingWindowConfig(8, 0.5))
        assert out.shape == v.data.shape
        assert np.abs(out - v.data).max() <= 1e-12

    def test_multi_channel_output(self):
        def two_headed(window):
            return np.stack([window[0], -window[0]])

        v = Volume(np.random.default_rng(3).uniform(size=(1, 16, 16, 16)))
        out = sliding_window_infer(two_headed, v, SlidingWindowConfig(8, 0.25))
        assert out.shape == (2, 16, 16, 16)
        assert np.abs(out[0] + out[1]).max() <= 1e-12

    def test_invalid_overlap(self):
        with pytest.raises(ValueError, match="overlap"):
            SlidingWindowConfig(8, 1.0)


class TestEvaluationProtocol:
    def test_perfect_oracle_scores_one(self):
        dataset = synth_generate(3, 2, 16, 3)
        lookup = {id(v): l.data for v, l in dataset}
        report = dice_over_dataset(lambda v: lookup[id(v)], dataset, 3)
        assert report.per_class == {1: 1.0, 2: 1.0}
        assert report.average == 1.0

    def test_constant_background_scores_zero(self):
        dataset = synth_generate(4, 2, 16, 3)
        report = dice_over_dataset(
            lambda v: np.zeros(v.data.shape[1:], dtype=np.uint16), dataset, 3
        )
        assert report.per_class == {1: 0.0, 2: 0.0}

    def test_average_is_mean_of_entries(self):
        dataset = synth_generate(5, 1, 16, 4)
        rng = np.random.default_rng(0)
        report = dice_over_dataset(
            lambda v: rng.integers(0, 4, size=v.data.shape[1:]).astype(np.uint16),
            dataset,
            4,
        )
        values = [report.per_class[c] for c in sorted(report.per_class)]
        assert abs(report.average - sum(values) / len(values)) < 1e-12

    def test_class_count_mismatch_rejected(self):
        dataset = synth_generate(6, 1, 16, 3)
        with pytest.raises(ValueError, match="classes"):
            dice_over_dataset(lambda v: v.data[0].astype(np.uint16), dataset, 5)

    def test_evaluate_from_trained_checkpoint(self, tmp_path):
        vit = ViTConfig(32, 2, 4, 8)
        labeled = synth_generate(7, 3, 16, 3)
        cfg = TrainConfig(batch_size=2, warmup_epochs=0, total_epochs=1, window=16, seed=0)
        result = finetune(None, SegConfig(vit, 3, width=8), cfg, labeled[:2], [],
                          str(tmp_path / "ft"))
        report = evaluate(result.checkpoint_path, labeled[2:], SlidingWindowConfig(16, 0.5))
        assert set(report.per_class) == {1, 2}
        assert all(0.0 <= s <= 1.0 for s in report.per_class.values())

    def test_evaluate_rejects_non_seg_checkpoint(self, tmp_path):
        vit = ViTConfig(32, 2, 4, 8)
        vols = [v for v, _ in synth_generate(8, 2, 16, 3)]
        cfg = TrainConfig(batch_size=2, warmup_epochs=0, total_epochs=1, window=16, seed=0)
        pre = pretrain("simmim", vit, cfg, vols, str(tmp_path / "pre"),
                       mask_cfg=MaskingConfig(8, 0.5))
        with pytest.raises(ValueError, match="not a segmentation model"):
            evaluate(pre.checkpoint_path, synth_generate(8, 1, 16, 3),
                     SlidingWindowConfig(16, 0.5))


class TestPGM:
    def test_header_and_payload(self, tmp_path):
        path = str(tmp_path / "img.pgm")
        image = np.arange(6, dtype=np.uint8).reshape(2, 3)
        write_pgm(path, image)
        raw = open(path, "rb").read()
        assert raw == b"P5\n3 2\n255\n" + bytes(range(6))


@pytest.fixture(scope="module")
def simmim_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("rec")
    vit = ViTConfig(32, 2, 4, 8)
    vols = [v for v, _ in synth_generate(9, 2, 16, 3)]
    cfg = TrainConfig(batch_size=2, warmup_epochs=0, total_epochs=1, window=16, seed=0)
    result = pretrain("simmim", vit, cfg, vols, str(out), mask_cfg=MaskingConfig(8, 0.75))
    return result.checkpoint_path


class TestReconstructDump:
    def test_file_count_is_three_per_depth(self, simmim_checkpoint, tmp_path):
        v = Volume(np.random.default_rng(1).uniform(size=(1, 16, 16, 16)))
        paths = reconstruct_dump(
            simmim_checkpoint, v, MaskingConfig(8, 0.75), [2, 9, 13], str(tmp_path / "d")
        )
        assert len(paths) == 9
        assert all(os.path.exists(p) for p in paths)

    def test_zero_ratio_masked_equals_original(self, simmim_checkpoint, tmp_path):
        v = Volume(np.random.default_rng(2).uniform(size=(1, 16, 16, 16)))
        paths = reconstruct_dump(
            simmim_checkpoint, v, MaskingConfig(8, 0.0), [5], str(tmp_path / "z")
        )
        blobs = {os.path.basename(p): open(p, "rb").read() for p in paths}
        assert blobs["slice005_masked.pgm"] == blobs["slice005_original.pgm"]

    def test_mid_gray_pixel_count_matches_mask_geometry(self, simmim_checkpoint, tmp_path):
        # Volume of only 0s and 1s scales to bytes {0, 255}: 128 can only
        # come from masking.
        rng = np.random.default_rng(3)
        v = Volume((rng.uniform(size=(1, 16, 16, 16)) > 0.5).astype(np.float64))
        depth = 4
        paths = reconstruct_dump(
            simmim_checkpoint, v, MaskingConfig(8, 0.5), [depth], str(tmp_path / "g"), seed=7
        )
        masked_img = [p for p in paths if "masked" in p][0]
        raw = open(masked_img, "rb").read()
        pixels = np.frombuffer(raw.split(b"\n", 3)[3], dtype=np.uint8).reshape(16, 16)

        grid = PatchGrid.for_volume(v, 8)
        mask = sample_mask(grid, MaskingConfig(8, 0.5), Rng.derive(7, "reconstruct"))
        expected = np.zeros((16, 16, 16), dtype=bool)
        for token_id in mask.masked_token_ids:
            td, rem = divmod(int(token_id), 4)
            th, tw = divmod(rem, 2)
            expected[td * 8 : td * 8 + 8, th * 8 : th * 8 + 8, tw * 8 : tw * 8 + 8] = True
        assert (pixels == 128).sum() == expected[depth].sum()

    def test_depth_out_of_range(self, simmim_checkpoint, tmp_path):
        v = Volume(np.zeros((1, 16, 16, 16)))
        with pytest.raises(ValueError, match="depth index"):
            reconstruct_dump(simmim_checkpoint, v, MaskingConfig(8, 0.5), [16], str(tmp_path))
