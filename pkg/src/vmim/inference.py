"""Sliding-window inference, Dice evaluation, and reconstruction dumps."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint
from .losses import ReconLossConfig
from .metrics import DiceReport, dice
from .models import (
    MAEDecoderConfig,
    SegConfig,
    ViTConfig,
    mae_forward,
    simmim_forward,
    unetr_segment,
)
from .patches import MaskingConfig, PatchGrid, sample_mask
from .rng import Rng
from .volume import LabelVolume, Volume


@dataclass(frozen=True)
class SlidingWindowConfig:
    window: int
    overlap: float = 0.5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")

    @property
    def stride(self) -> int:
        return max(1, round(self.window * (1.0 - self.overlap)))


def _window_starts(extent: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, extent - window + 1, stride))
    if starts[-1] != extent - window:
        starts.append(extent - window)  # final window clamps to the boundary
    return starts


def sliding_window_infer(
    model: Callable[[np.ndarray], np.ndarray],
    volume: Volume,
    cfg: SlidingWindowConfig,
) -> np.ndarray:
    """Tile the volume, run the model per window, average overlaps.

    model maps a (C, w, w, w) array to (K, w, w, w) logits. Volumes smaller
    than the window are zero-padded for the model and cropped back. Sums
    are accumulated first and divided once, so the result is independent
    of window visit order.
    """
    data = volume.data
    extents = data.shape[1:]
    w = cfg.window
    pad = [max(0, w - n) for n in extents]
    if any(pad):
        data = np.pad(data, [(0, 0)] + [(0, p) for p in pad])
    padded_extents = data.shape[1:]

    starts = [_window_starts(n, w, cfg.stride) for n in padded_extents]
    accum = None
    counts = np.zeros(padded_extents)
    for sd in starts[0]:
        for sh in starts[1]:
            for sw in starts[2]:
                patch = data[:, sd : sd + w, sh : sh + w, sw : sw + w]
                logits = np.asarray(model(patch))
                if accum is None:
                    accum = np.zeros((logits.shape[0],) + padded_extents)
                accum[:, sd : sd + w, sh : sh + w, sw : sw + w] += logits
                counts[sd : sd + w, sh : sh + w, sw : sw + w] += 1.0
    assert counts.min() >= 1.0
    out = accum / counts[None]
    return out[:, : extents[0], : extents[1], : extents[2]]


def seg_model_fn(seg_cfg: SegConfig, params: dict) -> Callable[[np.ndarray], np.ndarray]:
    def run(window: np.ndarray) -> np.ndarray:
        return unetr_segment(seg_cfg, params, Volume(window)).data

    return run


def predict_labels(
    seg_cfg: SegConfig,
    params: dict,
    volume: Volume,
    swi_cfg: SlidingWindowConfig,
) -> np.ndarray:
    logits = sliding_window_infer(seg_model_fn(seg_cfg, params), volume, swi_cfg)
    return np.argmax(logits, axis=0).astype(np.uint16)


def _vit_from_config(config: dict) -> ViTConfig:
    return ViTConfig(
        int(config["model.embed_dim"]),
        int(config["model.depth"]),
        int(config["model.num_heads"]),
        int(config["model.token_patch"]),
        int(config["model.mlp_ratio"]),
        int(config["model.channels"]),
    )


def dice_over_dataset(
    predict: Callable[[Volume], np.ndarray],
    dataset: list[tuple[Volume, LabelVolume]],
    num_classes: int,
    class_names: dict[int, str] | None = None,
) -> DiceReport:
    """Per-foreground-class Dice of a predictor, averaged over volumes."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    for _, labels in dataset:
        if labels.num_classes != num_classes:
            raise ValueError(
                f"labels carry {labels.num_classes} classes, model predicts {num_classes}"
            )
    sums = {c: 0.0 for c in range(1, num_classes)}
    for volume, labels in dataset:
        predicted = predict(volume)
        for c in sums:
            sums[c] += dice(labels, predicted, c)
    return DiceReport({c: s / len(dataset) for c, s in sums.items()}, class_names)


def evaluate(
    checkpoint_path: str,
    dataset: list[tuple[Volume, LabelVolume]],
    swi_cfg: SlidingWindowConfig,
    class_names: dict[int, str] | None = None,
) -> DiceReport:
    """Sliding-window segmentation of every volume, Dice per foreground class.

    Per-class scores are averaged over volumes; the report average is the
    mean over foreground classes.
    """
    params, config = load_checkpoint(checkpoint_path)
    if config.get("method") != "seg":
        raise ValueError(f"checkpoint method {config.get('method')!r} is not a segmentation model")
    seg_cfg = SegConfig(
        _vit_from_config(config), int(config["seg.num_classes"]), int(config["seg.width"])
    )
    return dice_over_dataset(
        lambda v: predict_labels(seg_cfg, params, v, swi_cfg),
        dataset,
        seg_cfg.num_classes,
        class_names,
    )


# ---------------------------------------------------------------------------
# Reconstruction visualization
# ---------------------------------------------------------------------------

def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got {image.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _to_bytes(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros(data.shape, dtype=np.uint8)
    return np.clip(np.rint((data - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


MASK_GRAY = 128


def reconstruct_dump(
    checkpoint_path: str,
    volume: Volume,
    mask_cfg: MaskingConfig,
    depth_indices: list[int],
    out_dir: str,
    seed: int = 0,
) -> list[str]:
    """Original / masked / reconstructed slice triptychs as PGM files.

    Both the original and the reconstruction are min-max scaled over the
    whole volume; masked voxels render as mid-gray 128.
    """
    params, config = load_checkpoint(checkpoint_path)
    method = config.get("method")
    if method not in ("mae", "simmim"):
        raise ValueError(f"checkpoint method {method!r} cannot reconstruct volumes")
    vit = _vit_from_config(config)
    grid = PatchGrid.for_volume(volume, vit.token_patch)
    depth_extent = volume.data.shape[1]
    for d in depth_indices:
        if not 0 <= d < depth_extent:
            raise ValueError(f"depth index {d} out of range [0, {depth_extent})")

    rng = Rng.derive(seed, "reconstruct")
    mask = sample_mask(grid, mask_cfg, rng) if mask_cfg.ratio > 0 else None
    if mask is not None and mask.num_masked == 0:
        mask = None
    recon_cfg = ReconLossConfig(config.get("recon.norm", "l1"))
    if mask is None:
        recon = volume.data  # nothing masked: the target itself
    elif method == "mae":
        dec_cfg = MAEDecoderConfig(
            int(config["dec.dim"]), int(config["dec.depth"]), int(config["dec.heads"])
        )
        recon = mae_forward(vit, dec_cfg, params, volume, mask, recon_cfg)[0].data
    else:
        recon = simmim_forward(vit, params, volume, mask, recon_cfg)[0].data

    os.makedirs(out_dir, exist_ok=True)
    original_bytes = _to_bytes(volume.data[0])
    recon_bytes = _to_bytes(recon[0])
    masked_bytes = original_bytes.copy()
    if mask is not None:
        p = grid.token_patch
        _, gh, gw = grid.grid
        for token_id in mask.masked_token_ids:
            td, rem = divmod(int(token_id), gh * gw)
            th, tw = divmod(rem, gw)
            masked_bytes[
                td * p : (td + 1) * p, th * p : (th + 1) * p, tw * p : (tw + 1) * p
            ] = MASK_GRAY

    paths = []
    for d in depth_indices:
        for tag, stack in (
            ("original", original_bytes),
            ("masked", masked_bytes),
            ("reconstruction", recon_bytes),
        ):
            path = os.path.join(out_dir, f"slice{d:03d}_{tag}.pgm")
            write_pgm(path, stack[d])
            paths.append(path)
    return paths
