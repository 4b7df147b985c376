"""Pretraining and fine-tuning loops: cropping, subsetting, stepping.

Both loops are bitwise reproducible given (seed, config, dataset): every
random draw comes from derived splitmix streams consumed in a fixed order,
and parameter updates are functional.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward
from .checkpoint import save_checkpoint
from .inference import SlidingWindowConfig, predict_labels
from .losses import ReconLossConfig, dice_ce_loss
from .metrics import dice
from .models import (
    MAEDecoderConfig,
    SegConfig,
    SimCLRConfig,
    ViTConfig,
    encoder_param_names,
    init_mae_params,
    init_seg_params,
    init_simclr_params,
    init_simmim_params,
    mae_forward,
    simclr_forward,
    simmim_forward,
    unetr_segment,
)
from .optim import AdamWConfig, OptState, adamw_step, clip_grad_norm, lr_at
from .patches import MaskingConfig, PatchGrid, sample_mask
from .rng import Rng
from .volume import LabelVolume, Volume

PRETRAIN_METHODS = ("mae", "simmim", "simclr")


class TrainingDivergedError(FloatingPointError):
    pass


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    warmup_epochs: int = 3
    total_epochs: int = 30
    window: int = 48
    seed: int = 0
    min_lr: float = 0.0
    grad_clip: float = 0.0
    checkpoint_every: int = 0  # 0 -> total_epochs // 10
    eval_every: int = 0  # 0 -> checkpoint cadence
    overfit_single_batch: bool = False

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup ({self.warmup_epochs}) <= total ({self.total_epochs})"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.weight_decay, self.beta1, self.beta2)

    def checkpoint_cadence(self) -> int:
        return self.checkpoint_every or max(1, self.total_epochs // 10)

    def eval_cadence(self) -> int:
        return self.eval_every or self.checkpoint_cadence()


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def crop_sampler(
    volume: Volume,
    labels: LabelVolume | None,
    window: int,
    rng: Rng,
) -> tuple[Volume, LabelVolume | None]:
    """Uniform random axis-aligned window crop, labels cropped identically."""
    extents = volume.extents
    if any(window > n for n in extents):
        raise ValueError(f"window {window} exceeds volume extents {extents}")
    starts = [rng.randbelow(n - window + 1) for n in extents]
    slices = tuple(slice(s, s + window) for s in starts)
    crop = Volume(
        volume.data[(slice(None),) + slices].copy(), volume.spacing, volume.modality
    )
    label_crop = None
    if labels is not None:
        label_crop = LabelVolume(labels.data[slices].copy(), labels.num_classes)
    return crop, label_crop


def subset_labeled(ids: list, ratio: float, seed: int) -> list:
    """floor(ratio * n) ids drawn without replacement; ratio 1.0 is identity."""
    if not 0 < ratio <= 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if ratio == 1.0:
        return list(ids)
    k = int(math.floor(ratio * len(ids)))
    if k == 0:
        raise ValueError(f"ratio {ratio} of {len(ids)} ids selects nothing")
    rng = Rng.derive(seed, "subset")
    picks = rng.sample_without_replacement(len(ids), k)
    return [ids[i] for i in picks]


def _make_batches(order: list[int], batch_size: int, min_size: int = 1) -> list[list[int]]:
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        batches[-2].extend(batches[-1])
        batches.pop()
    return batches


def _steps_per_epoch(n: int, batch_size: int, min_size: int = 1) -> int:
    return len(_make_batches(list(range(n)), batch_size, min_size))


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for term in losses[1:]:
        total = total + term
    return total.scale(1.0 / len(losses))


class _TraceWriter:
    """Line-oriented trace: step, lr, loss, then optional per-class dice."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")

    def row(self, step: int, lr: float, loss: float, dice_scores: dict[int, float] | None = None):
        cells = [str(step), repr(lr), repr(loss)]
        if dice_scores is not None:
            cells.extend(repr(dice_scores[c]) for c in sorted(dice_scores))
        self._fh.write("\t".join(cells) + "\n")

    def close(self):
        self._fh.close()


def _step(params, graph, loss, state, lr, cfg: TrainConfig, step: int):
    if not np.isfinite(loss.data).all():
        raise TrainingDivergedError(f"non-finite loss at step {step}")
    gradmap = backward(graph, loss)
    grads = {name: gradmap[p.node_id] for name, p in params.items()}
    grads = clip_grad_norm(grads, cfg.grad_clip)
    return adamw_step(params, grads, state, lr, cfg.adamw)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint_path: str
    trace_path: str
    losses: list[float]
    params: dict = field(repr=False, default_factory=dict)
    config: dict = field(default_factory=dict)


def _augment_view(volume: Volume, window: int, rng: Rng) -> Volume:
    crop, _ = crop_sampler(volume, None, window, rng)
    factor = rng.uniform_in(0.9, 1.1)
    return Volume(crop.data * factor, crop.spacing, crop.modality)


def pretrain(
    method: str,
    vit_cfg: ViTConfig,
    train_cfg: TrainConfig,
    dataset: list[Volume],
    out_dir: str,
    mask_cfg: MaskingConfig | None = None,
    dec_cfg: MAEDecoderConfig | None = None,
    recon_cfg: ReconLossConfig = ReconLossConfig(),
    simclr_cfg: SimCLRConfig | None = None,
) -> PretrainResult:
    """Self-supervised pretraining; emits checkpoints and a loss trace."""
    if method not in PRETRAIN_METHODS:
        raise ValueError(f"method must be one of {PRETRAIN_METHODS}, got {method!r}")
    if not dataset:
        raise ValueError("dataset is empty")
    if train_cfg.window % vit_cfg.token_patch:
        raise ValueError(
            f"window {train_cfg.window} not divisible by token patch {vit_cfg.token_patch}"
        )
    os.makedirs(out_dir, exist_ok=True)

    config = {
        "method": method,
        "model.embed_dim": vit_cfg.embed_dim,
        "model.depth": vit_cfg.depth,
        "model.num_heads": vit_cfg.num_heads,
        "model.token_patch": vit_cfg.token_patch,
        "model.mlp_ratio": vit_cfg.mlp_ratio,
        "model.channels": vit_cfg.channels,
        "train.window": train_cfg.window,
        "train.seed": train_cfg.seed,
    }
    if method == "mae":
        dec_cfg = dec_cfg or MAEDecoderConfig()
        params = init_mae_params(vit_cfg, dec_cfg, train_cfg.seed)
        config.update(
            {
                "dec.dim": dec_cfg.decoder_dim,
                "dec.depth": dec_cfg.decoder_depth,
                "dec.heads": dec_cfg.decoder_heads,
            }
        )
    elif method == "simmim":
        params = init_simmim_params(vit_cfg, train_cfg.seed)
    else:
        simclr_cfg = simclr_cfg or SimCLRConfig(vit_cfg.embed_dim, min(128, vit_cfg.embed_dim))
        params = init_simclr_params(vit_cfg, simclr_cfg, train_cfg.seed)
        config.update(
            {
                "simclr.hidden": simclr_cfg.proj_hidden,
                "simclr.dim": simclr_cfg.proj_dim,
                "simclr.temperature": simclr_cfg.temperature,
            }
        )
        if train_cfg.batch_size < 2 or len(dataset) < 2:
            raise ValueError("contrastive pretraining needs batch size >= 2 and >= 2 volumes")
    if method in ("mae", "simmim"):
        if mask_cfg is None:
            mask_cfg = MaskingConfig(vit_cfg.token_patch, 0.75)
        config.update(
            {"mask.patch": mask_cfg.masked_patch, "mask.ratio": mask_cfg.ratio,
             "recon.norm": recon_cfg.norm}
        )

    rng = Rng.derive(train_cfg.seed, "pretrain", method)
    state = OptState.init(params)
    n = len(dataset)
    min_batch = 2 if method == "simclr" else 1
    spe = _steps_per_epoch(n, train_cfg.batch_size, min_batch)
    total_steps = spe * train_cfg.total_epochs
    warmup_steps = spe * train_cfg.warmup_epochs

    trace_path = os.path.join(out_dir, "trace.tsv")
    trace = _TraceWriter(trace_path)
    cadence = train_cfg.checkpoint_cadence()
    losses: list[float] = []
    frozen_batch = None
    step = 0
    try:
        for epoch in range(train_cfg.total_epochs):
            order = rng.permutation(n)
            for batch_ids in _make_batches(order, train_cfg.batch_size, min_batch):
                lr = lr_at(step, warmup_steps, total_steps, train_cfg.base_lr, train_cfg.min_lr)
                with Graph() as graph:
                    graph.watch_all(params.values())
                    if method == "simclr":
                        if frozen_batch is None:
                            views1 = [_augment_view(dataset[i], train_cfg.window, rng) for i in batch_ids]
                            views2 = [_augment_view(dataset[i], train_cfg.window, rng) for i in batch_ids]
                            if train_cfg.overfit_single_batch:
                                frozen_batch = (views1, views2)
                        else:
                            views1, views2 = frozen_batch
                        loss = simclr_forward(
                            vit_cfg, params, views1, views2, simclr_cfg.temperature
                        )
                    else:
                        if frozen_batch is None:
                            samples = []
                            for i in batch_ids:
                                crop, _ = crop_sampler(dataset[i], None, train_cfg.window, rng)
                                grid = PatchGrid.for_volume(crop, vit_cfg.token_patch)
                                samples.append((crop, sample_mask(grid, mask_cfg, rng)))
                            if train_cfg.overfit_single_batch:
                                frozen_batch = samples
                        else:
                            samples = frozen_batch
                        terms = []
                        for crop, mask in samples:
                            if method == "mae":
                                _, term = mae_forward(vit_cfg, dec_cfg, params, crop, mask, recon_cfg)
                            else:
                                _, term = simmim_forward(vit_cfg, params, crop, mask, recon_cfg)
                            terms.append(term)
                        loss = _mean_loss(terms)
                params, state = _step(params, graph, loss, state, lr, train_cfg, step)
                loss_value = loss.item()
                losses.append(loss_value)
                trace.row(step, lr, loss_value)
                step += 1
            if (epoch + 1) % cadence == 0 and (epoch + 1) < train_cfg.total_epochs:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_ep{epoch + 1:04d}.vmim"), params, config
                )
    finally:
        trace.close()
    checkpoint_path = os.path.join(out_dir, "checkpoint.vmim")
    save_checkpoint(checkpoint_path, params, config)
    return PretrainResult(checkpoint_path, trace_path, losses, params, config)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    checkpoint_path: str
    trace_path: str
    losses: list[float]
    dice_trace: list[tuple[int, dict[int, float], float]]
    params: dict = field(repr=False, default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def final_dice(self) -> float:
        return self.dice_trace[-1][2] if self.dice_trace else 0.0


def load_encoder_weights(params: dict, checkpoint_params: dict, embed_dim: int) -> dict:
    """Copy encoder weights from a pretraining checkpoint into seg params."""
    updated = dict(params)
    for name in encoder_param_names(params):
        if name not in checkpoint_params:
            raise CheckpointMismatchError(f"checkpoint lacks encoder parameter {name!r}")
        source = checkpoint_params[name]
        if source.shape != params[name].shape:
            raise CheckpointMismatchError(
                f"encoder parameter {name!r} has shape {source.shape} in checkpoint, "
                f"expected {params[name].shape}"
            )
        updated[name] = Tensor(source.data, requires_grad=True)
    return updated


def validation_dice(
    seg_cfg: SegConfig,
    params: dict,
    val_set: list[tuple[Volume, LabelVolume]],
    swi_cfg: SlidingWindowConfig,
) -> dict[int, float]:
    """Per-foreground-class Dice averaged over validation volumes."""
    sums = {c: 0.0 for c in range(1, seg_cfg.num_classes)}
    for volume, labels in val_set:
        predicted = predict_labels(seg_cfg, params, volume, swi_cfg)
        for c in sums:
            sums[c] += dice(labels, predicted, c)
    return {c: s / len(val_set) for c, s in sums.items()}


def finetune(
    checkpoint_params: dict | None,
    seg_cfg: SegConfig,
    train_cfg: TrainConfig,
    train_set: list[tuple[Volume, LabelVolume]],
    val_set: list[tuple[Volume, LabelVolume]],
    out_dir: str,
    labeled_ratio: float = 1.0,
    swi_cfg: SlidingWindowConfig | None = None,
) -> FinetuneResult:
    """Supervised segmentation training, optionally from pretrained encoder.

    checkpoint_params None trains from scratch (the supervised baseline).
    Validation Dice is recorded every eval cadence and at the final epoch.
    """
    if not train_set:
        raise ValueError("labeled training set is empty")
    vit = seg_cfg.vit
    if train_cfg.window % vit.token_patch:
        raise ValueError(
            f"window {train_cfg.window} not divisible by token patch {vit.token_patch}"
        )
    os.makedirs(out_dir, exist_ok=True)
    swi_cfg = swi_cfg or SlidingWindowConfig(train_cfg.window, 0.5)

    params = init_seg_params(seg_cfg, train_cfg.seed)
    if checkpoint_params is not None:
        params = load_encoder_weights(params, checkpoint_params, vit.embed_dim)

    config = {
        "method": "seg",
        "model.embed_dim": vit.embed_dim,
        "model.depth": vit.depth,
        "model.num_heads": vit.num_heads,
        "model.token_patch": vit.token_patch,
        "model.mlp_ratio": vit.mlp_ratio,
        "model.channels": vit.channels,
        "seg.num_classes": seg_cfg.num_classes,
        "seg.width": seg_cfg.width,
        "train.window": train_cfg.window,
        "train.seed": train_cfg.seed,
        "train.labeled_ratio": labeled_ratio,
    }

    ids = subset_labeled(list(range(len(train_set))), labeled_ratio, train_cfg.seed)
    active = [train_set[i] for i in ids]
    rng = Rng.derive(train_cfg.seed, "finetune")
    state = OptState.init(params)
    n = len(active)
    spe = _steps_per_epoch(n, train_cfg.batch_size)
    total_steps = spe * train_cfg.total_epochs
    warmup_steps = spe * train_cfg.warmup_epochs

    trace_path = os.path.join(out_dir, "trace.tsv")
    trace = _TraceWriter(trace_path)
    eval_cadence = train_cfg.eval_cadence()
    losses: list[float] = []
    dice_trace: list[tuple[int, dict[int, float], float]] = []
    step = 0
    try:
        for epoch in range(train_cfg.total_epochs):
            order = rng.permutation(n)
            for batch_ids in _make_batches(order, train_cfg.batch_size):
                lr = lr_at(step, warmup_steps, total_steps, train_cfg.base_lr, train_cfg.min_lr)
                with Graph() as graph:
                    graph.watch_all(params.values())
                    terms = []
                    for i in batch_ids:
                        crop, label_crop = crop_sampler(
                            active[i][0], active[i][1], train_cfg.window, rng
                        )
                        logits = unetr_segment(seg_cfg, params, crop)
                        terms.append(dice_ce_loss(logits, label_crop.data))
                    loss = _mean_loss(terms)
                params, state = _step(params, graph, loss, state, lr, train_cfg, step)
                loss_value = loss.item()
                losses.append(loss_value)
                trace.row(step, lr, loss_value)
                step += 1
            last_epoch = epoch + 1 == train_cfg.total_epochs
            if val_set and ((epoch + 1) % eval_cadence == 0 or last_epoch):
                scores = validation_dice(seg_cfg, params, val_set, swi_cfg)
                avg = sum(scores.values()) / len(scores)
                dice_trace.append((step, scores, avg))
                trace.row(step, lr, loss_value, scores)
    finally:
        trace.close()
    checkpoint_path = os.path.join(out_dir, "checkpoint.vmim")
    save_checkpoint(checkpoint_path, params, config)
    return FinetuneResult(checkpoint_path, trace_path, losses, dice_trace, params, config)
