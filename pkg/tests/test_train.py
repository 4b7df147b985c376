"""Training loops: sampling, subsetting, determinism, trace bookkeeping."""

import numpy as np
import pytest

from vmim.inference import SlidingWindowConfig
from vmim.models import SegConfig, ViTConfig, encoder_param_names, init_seg_params, mae_decoder_tiny
from vmim.patches import MaskingConfig
from vmim.rng import Rng
from vmim.train import (
    TrainConfig,
    TrainingDivergedError,
    crop_sampler,
    finetune,
    load_encoder_weights,
    pretrain,
    subset_labeled,
)
from vmim.volume import LabelVolume, Volume, synth_generate

TINY = ViTConfig(32, 2, 4, 8)


def quick_cfg(**kw):
    base = dict(
        batch_size=4,
        warmup_epochs=1,
        total_epochs=2,
        window=16,
        seed=0,
        base_lr=1e-3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def volumes():
    return [v for v, _ in synth_generate(5, 6, 24, 3)]


@pytest.fixture(scope="module")
def labeled():
    return synth_generate(6, 4, 24, 3)


class TestCropSampler:
    def test_full_window_returns_whole_volume(self):
        v = Volume(np.random.default_rng(0).uniform(size=(1, 16, 16, 16)))
        crop, _ = crop_sampler(v, None, 16, Rng(0))
        assert np.array_equal(crop.data, v.data)

    def test_labels_cropped_identically(self):
        rng = np.random.default_rng(1)
        v = Volume(rng.uniform(size=(1, 24, 24, 24)))
        labels = LabelVolume((v.data[0] > 0.5).astype(np.uint16), 2)
        crop, label_crop = crop_sampler(v, labels, 8, Rng(3))
        assert np.array_equal(label_crop.data, (crop.data[0] > 0.5).astype(np.uint16))

    def test_deterministic_in_seed(self):
        v = Volume(np.random.default_rng(2).uniform(size=(1, 20, 20, 20)))
        a, _ = crop_sampler(v, None, 8, Rng(9))
        b, _ = crop_sampler(v, None, 8, Rng(9))
        assert np.array_equal(a.data, b.data)

    def test_start_positions_uniform(self):
        # 1-D analogue: depth ramp makes the crop corner reveal the start.
        extent, window = 20, 8
        ramp = np.broadcast_to(
            np.arange(float(extent))[:, None, None], (extent, extent, extent)
        ).copy()
        v = Volume(ramp[None])
        rng = Rng(123)
        draws = 10_000
        n_starts = extent - window + 1
        counts = np.zeros(n_starts)
        for _ in range(draws):
            crop, _ = crop_sampler(v, None, window, rng)
            counts[int(crop.data[0, 0, 0, 0])] += 1
        expected = draws / n_starts
        sigma = np.sqrt(draws * (1 / n_starts) * (1 - 1 / n_starts))
        assert np.abs(counts - expected).max() <= 4 * sigma

    def test_window_too_large(self):
        v = Volume(np.zeros((1, 8, 8, 8)))
        with pytest.raises(ValueError, match="exceeds"):
            crop_sampler(v, None, 9, Rng(0))


class TestSubsetLabeled:
    def test_half_of_24_is_12(self):
        ids = list(range(24))
        picked = subset_labeled(ids, 0.5, seed=1)
        assert len(picked) == 12
        assert len(set(picked)) == 12

    def test_full_ratio_is_identity_in_order(self):
        ids = ["a", "b", "c"]
        assert subset_labeled(ids, 1.0, seed=9) == ids

    def test_deterministic(self):
        ids = list(range(100))
        assert subset_labeled(ids, 0.3, seed=4) == subset_labeled(ids, 0.3, seed=4)
        assert subset_labeled(ids, 0.3, seed=4) != subset_labeled(ids, 0.3, seed=5)

    def test_empty_selection_rejected(self):
        with pytest.raises(ValueError, match="selects nothing"):
            subset_labeled([1, 2, 3], 0.1, seed=0)
        with pytest.raises(ValueError, match="ratio"):
            subset_labeled([1], 0.0, seed=0)


class TestPretrain:
    @pytest.mark.parametrize("method", ["mae", "simmim", "simclr"])
    def test_runs_and_trace_bookkeeping(self, method, volumes, tmp_path):
        cfg = quick_cfg(batch_size=3)
        result = pretrain(
            method,
            TINY,
            cfg,
            volumes,
            str(tmp_path / method),
            mask_cfg=MaskingConfig(8, 0.75),
            dec_cfg=mae_decoder_tiny(),
        )
        steps_per_epoch = 2  # 6 volumes, batch 3
        assert len(result.losses) == steps_per_epoch * cfg.total_epochs
        rows = open(result.trace_path).read().splitlines()
        assert len(rows) == len(result.losses)
        first = rows[0].split("\t")
        assert first[0] == "0" and len(first) == 3

    def test_bitwise_deterministic(self, volumes, tmp_path):
        cfg = quick_cfg()
        a = pretrain("simmim", TINY, cfg, volumes, str(tmp_path / "a"),
                     mask_cfg=MaskingConfig(8, 0.75))
        b = pretrain("simmim", TINY, cfg, volumes, str(tmp_path / "b"),
                     mask_cfg=MaskingConfig(8, 0.75))
        assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()
        assert open(a.trace_path).read() == open(b.trace_path).read()

    def test_seed_changes_outcome(self, volumes, tmp_path):
        a = pretrain("simmim", TINY, quick_cfg(seed=0), volumes, str(tmp_path / "s0"),
                     mask_cfg=MaskingConfig(8, 0.75))
        b = pretrain("simmim", TINY, quick_cfg(seed=1), volumes, str(tmp_path / "s1"),
                     mask_cfg=MaskingConfig(8, 0.75))
        assert a.losses != b.losses

    def test_intermediate_checkpoints_written(self, volumes, tmp_path):
        out = tmp_path / "ck"
        pretrain("simmim", TINY, quick_cfg(total_epochs=4, checkpoint_every=2),
                 volumes, str(out), mask_cfg=MaskingConfig(8, 0.75))
        names = sorted(p.name for p in out.glob("*.vmim"))
        assert names == ["checkpoint.vmim", "checkpoint_ep0002.vmim"]

    def test_empty_dataset_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            pretrain("mae", TINY, quick_cfg(), [], str(tmp_path / "x"))

    def test_window_divisibility_enforced(self, volumes, tmp_path):
        with pytest.raises(ValueError, match="divisible"):
            pretrain("mae", TINY, quick_cfg(window=20), volumes, str(tmp_path / "w"))


class TestFinetune:
    def test_dice_trace_in_range_and_loss_decreases_early(self, labeled, tmp_path):
        seg = SegConfig(TINY, 3, width=8)
        cfg = quick_cfg(total_epochs=3, eval_every=1, batch_size=2)
        result = finetune(None, seg, cfg, labeled[:3], labeled[3:], str(tmp_path / "ft"))
        assert result.dice_trace
        for _, scores, avg in result.dice_trace:
            assert 0.0 <= avg <= 1.0
            assert all(0.0 <= s <= 1.0 for s in scores.values())
        assert len(result.losses) == 2 * 3  # ceil(3/2) batches x 3 epochs

    def test_checkpoint_init_differs_only_in_encoder(self, labeled, tmp_path, volumes):
        pre = pretrain("simmim", TINY, quick_cfg(), volumes, str(tmp_path / "pre"),
                       mask_cfg=MaskingConfig(8, 0.75))
        seg = SegConfig(TINY, 3, width=8)
        scratch = init_seg_params(seg, seed=42)
        warm = load_encoder_weights(scratch, pre.params, TINY.embed_dim)
        enc = set(encoder_param_names(scratch))
        for name in scratch:
            same = np.array_equal(scratch[name].data, warm[name].data)
            if name in enc:
                assert not same, name
            else:
                assert same, name

    def test_checkpoint_shape_mismatch_rejected(self, labeled):
        seg = SegConfig(TINY, 3, width=8)
        scratch = init_seg_params(seg, seed=0)
        other = init_seg_params(SegConfig(ViTConfig(16, 2, 4, 8), 3, width=8), seed=0)
        from vmim.train import CheckpointMismatchError

        with pytest.raises(CheckpointMismatchError, match="shape"):
            load_encoder_weights(scratch, other, TINY.embed_dim)

    def test_bitwise_deterministic(self, labeled, tmp_path):
        seg = SegConfig(TINY, 3, width=8)
        cfg = quick_cfg(total_epochs=2, batch_size=2)
        a = finetune(None, seg, cfg, labeled[:2], [], str(tmp_path / "da"))
        b = finetune(None, seg, cfg, labeled[:2], [], str(tmp_path / "db"))
        assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()

    def test_labeled_ratio_subsets(self, labeled, tmp_path):
        seg = SegConfig(TINY, 3, width=8)
        cfg = quick_cfg(total_epochs=1, batch_size=4)
        result = finetune(None, seg, cfg, labeled, [], str(tmp_path / "half"),
                          labeled_ratio=0.5)
        assert len(result.losses) == 1  # 2 volumes in one batch


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverged_loss_reports_step(volumes, tmp_path):
    # Absurd learning rate drives SimMIM into overflow within a few steps.
    cfg = quick_cfg(base_lr=1e18, total_epochs=30, warmup_epochs=0, batch_size=6)
    with pytest.raises(TrainingDivergedError, match=r"step \d+"):
        pretrain("simmim", TINY, cfg, volumes, str(tmp_path / "boom"),
                 mask_cfg=MaskingConfig(8, 0.75))
