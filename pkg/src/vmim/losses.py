"""Training objectives: masked reconstruction, Dice+CE, and NT-Xent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply
from .patches import Mask


@dataclass(frozen=True)
class ReconLossConfig:
    norm: str = "l1"  # "l1" or "l2", per-masked-voxel mean either way

    def __post_init__(self):
        if self.norm not in ("l1", "l2"):
            raise ValueError(f"norm must be 'l1' or 'l2', got {self.norm!r}")


def masked_recon_loss(
    pred: Tensor,
    target: Tensor | np.ndarray,
    mask: Mask,
    cfg: ReconLossConfig = ReconLossConfig(),
) -> Tensor:
    """Mean |residual| (l1) or residual^2 (l2) over masked-token voxels only.

    Visible tokens never enter the computation, so the loss is bitwise
    invariant to their contents.
    """
    if mask.num_masked == 0:
        raise ValueError("no masked patches to reconstruct")
    if not isinstance(target, Tensor):
        target = Tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    ids = mask.masked_token_ids
    residual = apply("gather_rows", (pred,), {"indices": ids}) - apply(
        "gather_rows", (target,), {"indices": ids}
    )
    if cfg.norm == "l1":
        per_voxel = apply("abs", (residual,))
    else:
        per_voxel = residual * residual
    return per_voxel.mean()


def _log_softmax_rows(logits: Tensor) -> Tensor:
    # Stable log-softmax: the row max enters as a constant shift, which
    # leaves the gradient unchanged.
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - shift
    lse = apply("log", (apply("exp", (shifted,)).sum(axis=-1, keepdims=True),))
    return shifted - lse


def dice_ce_loss(
    logits: Tensor,
    labels: np.ndarray,
    weight_dice: float = 0.5,
    smooth: float = 1e-5,
) -> Tensor:
    """weight_dice * (1 - soft Dice) + (1 - weight_dice) * cross-entropy.

    logits: (num_classes, D, H, W); labels: (D, H, W) integer ids.
    Soft Dice is computed on softmax probabilities and averaged over all
    classes, with a small smoothing term so absent classes are neutral.
    """
    num_classes = logits.shape[0]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ValueError(f"labels shape {labels.shape} != logits spatial {logits.shape[1:]}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label ids must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )

    voxels = int(np.prod(logits.shape[1:]))
    flat = logits.reshape((num_classes, voxels)).permute((1, 0))  # (V, K)
    onehot = np.zeros((voxels, num_classes))
    onehot[np.arange(voxels), labels.reshape(-1).astype(np.int64)] = 1.0
    onehot_t = Tensor(onehot)

    log_probs = _log_softmax_rows(flat)
    ce = (log_probs * onehot_t).sum(axis=-1).mean().scale(-1.0)

    probs = apply("softmax", (flat,), {"axis": -1})
    intersect = (probs * onehot_t).sum(axis=0)  # (K,)
    denom = probs.sum(axis=0) + Tensor(onehot.sum(axis=0))
    smooth_t = Tensor(np.full(num_classes, smooth))
    dice_per_class = apply(
        "mul",
        (intersect.scale(2.0) + smooth_t, _reciprocal(denom + smooth_t)),
    )
    soft_dice = dice_per_class.mean()
    one = Tensor(1.0)
    return (one - soft_dice).scale(weight_dice) + ce.scale(1.0 - weight_dice)


def _reciprocal(t: Tensor) -> Tensor:
    return apply("exp", (apply("log", (t,)).scale(-1.0),))


def ntxent(embeddings: Tensor, temperature: float) -> Tensor:
    """NT-Xent over 2B row-normalized embeddings; rows i and i+B are positives."""
    n = embeddings.shape[0]
    if n % 2 or n < 4:
        raise ValueError(f"need an even number >= 4 of embeddings, got {n}")
    norms = np.sqrt((embeddings.data**2).sum(axis=-1))
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("embeddings must be L2-normalized rows")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")

    b = n // 2
    sim = apply("matmul", (embeddings, embeddings.permute((1, 0))))
    logits = sim.scale(1.0 / temperature)
    # Anchors never compare against themselves.
    logits = logits + Tensor(np.diag(np.full(n, -1e9)))
    log_probs = _log_softmax_rows(logits)
    pos = np.zeros((n, n))
    pos[np.arange(b), np.arange(b) + b] = 1.0
    pos[np.arange(b) + b, np.arange(b)] = 1.0
    return (log_probs * Tensor(pos)).sum(axis=-1).mean().scale(-1.0)
