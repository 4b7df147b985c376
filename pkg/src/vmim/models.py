"""ViT3D encoder and the method-specific heads built on top of it.

Forward passes operate on one volume at a time (training averages losses
over a batch). Parameter sets are flat name -> Tensor maps; the encoder
parameter names are shared by every method so pretrained weights drop
straight into the segmentation model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, apply
from .losses import ReconLossConfig, masked_recon_loss, ntxent
from .patches import Mask, PatchGrid, patchify, positional_table
from .rng import np_generator
from .volume import Volume

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ViTConfig:
    embed_dim: int
    depth: int
    num_heads: int
    token_patch: int
    mlp_ratio: int = 4
    channels: int = 1

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return self.embed_dim * self.mlp_ratio

    def token_dim(self) -> int:
        return self.channels * self.token_patch**3


@dataclass(frozen=True)
class MAEDecoderConfig:
    decoder_dim: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16

    def __post_init__(self):
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(
                f"decoder dim {self.decoder_dim} not divisible by "
                f"{self.decoder_heads} heads"
            )


@dataclass(frozen=True)
class SimCLRConfig:
    proj_hidden: int
    proj_dim: int
    temperature: float = 0.5


@dataclass(frozen=True)
class SegConfig:
    vit: ViTConfig
    num_classes: int
    width: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")
        p = self.vit.token_patch
        if p & (p - 1):
            raise ValueError(
                f"segmentation decoder needs a power-of-two token patch, got {p}"
            )


# ViT3D-B from the standard recipe; "tiny" is the desk-scale default that
# keeps the test suite in CPU minutes.
def vit3d_base(token_patch: int = 16, channels: int = 1) -> ViTConfig:
    return ViTConfig(768, 12, 12, token_patch, channels=channels)


def vit3d_tiny(token_patch: int = 8, channels: int = 1) -> ViTConfig:
    return ViTConfig(64, 4, 4, token_patch, channels=channels)


def mae_decoder_tiny() -> MAEDecoderConfig:
    return MAEDecoderConfig(32, 2, 4)


def simclr_default(cfg: ViTConfig, temperature: float = 0.5) -> SimCLRConfig:
    return SimCLRConfig(cfg.embed_dim, min(128, cfg.embed_dim), temperature)


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _trunc_normal(gen: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = gen.standard_normal(shape)
    while True:
        bad = np.abs(out) > 2.0
        n = int(bad.sum())
        if not n:
            break
        out[bad] = gen.standard_normal(n)
    return out * std


class _Init:
    def __init__(self, seed: int, label: str):
        self.gen = np_generator(seed, "init", label)
        self.params: Params = {}

    def weight(self, name: str, shape) -> None:
        self.params[name] = Tensor(_trunc_normal(self.gen, shape), requires_grad=True)

    def conv_weight(self, name: str, shape, fan_in: int) -> None:
        # He scaling; the 0.02 transformer convention starves stacked convs.
        std = math.sqrt(2.0 / fan_in)
        self.params[name] = Tensor(
            self.gen.standard_normal(shape) * std, requires_grad=True
        )

    def zeros(self, name: str, shape) -> None:
        self.params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(self, name: str, shape) -> None:
        self.params[name] = Tensor(np.ones(shape), requires_grad=True)

    def block(self, prefix: str, dim: int, mlp_dim: int) -> None:
        self.ones(f"{prefix}.ln1.g", (dim,))
        self.zeros(f"{prefix}.ln1.b", (dim,))
        for proj in ("q", "k", "v", "proj"):
            self.weight(f"{prefix}.{proj}.w", (dim, dim))
            self.zeros(f"{prefix}.{proj}.b", (dim,))
        self.ones(f"{prefix}.ln2.g", (dim,))
        self.zeros(f"{prefix}.ln2.b", (dim,))
        self.weight(f"{prefix}.mlp1.w", (dim, mlp_dim))
        self.zeros(f"{prefix}.mlp1.b", (mlp_dim,))
        self.weight(f"{prefix}.mlp2.w", (mlp_dim, dim))
        self.zeros(f"{prefix}.mlp2.b", (dim,))


def _init_encoder(init: _Init, cfg: ViTConfig) -> None:
    init.weight("patch_embed.w", (cfg.token_dim(), cfg.embed_dim))
    init.zeros("patch_embed.b", (cfg.embed_dim,))
    for i in range(cfg.depth):
        init.block(f"enc.{i}", cfg.embed_dim, cfg.mlp_dim)
    init.ones("enc_norm.g", (cfg.embed_dim,))
    init.zeros("enc_norm.b", (cfg.embed_dim,))


def init_mae_params(cfg: ViTConfig, dec_cfg: MAEDecoderConfig, seed: int) -> Params:
    init = _Init(seed, "mae")
    _init_encoder(init, cfg)
    init.weight("dec_embed.w", (cfg.embed_dim, dec_cfg.decoder_dim))
    init.zeros("dec_embed.b", (dec_cfg.decoder_dim,))
    init.params["mask_token"] = Tensor(
        _trunc_normal(init.gen, (1, dec_cfg.decoder_dim)), requires_grad=True
    )
    for i in range(dec_cfg.decoder_depth):
        init.block(f"dec.{i}", dec_cfg.decoder_dim, dec_cfg.decoder_dim * 4)
    init.ones("dec_norm.g", (dec_cfg.decoder_dim,))
    init.zeros("dec_norm.b", (dec_cfg.decoder_dim,))
    init.weight("dec_head.w", (dec_cfg.decoder_dim, cfg.token_dim()))
    init.zeros("dec_head.b", (cfg.token_dim(),))
    return init.params


def init_simmim_params(cfg: ViTConfig, seed: int) -> Params:
    init = _Init(seed, "simmim")
    _init_encoder(init, cfg)
    init.params["mask_token"] = Tensor(
        _trunc_normal(init.gen, (1, cfg.embed_dim)), requires_grad=True
    )
    init.weight("head.w", (cfg.embed_dim, cfg.token_dim()))
    init.zeros("head.b", (cfg.token_dim(),))
    return init.params


def init_simclr_params(cfg: ViTConfig, proj: SimCLRConfig, seed: int) -> Params:
    init = _Init(seed, "simclr")
    _init_encoder(init, cfg)
    init.weight("proj1.w", (cfg.embed_dim, proj.proj_hidden))
    init.zeros("proj1.b", (proj.proj_hidden,))
    init.weight("proj2.w", (proj.proj_hidden, proj.proj_dim))
    init.zeros("proj2.b", (proj.proj_dim,))
    return init.params


def init_seg_params(cfg: SegConfig, seed: int) -> Params:
    init = _Init(seed, "seg")
    _init_encoder(init, cfg.vit)
    vit = cfg.vit
    f = cfg.width
    stages = int(math.log2(vit.token_patch))
    if vit.depth < 1:
        raise ValueError("segmentation decoder needs depth >= 1 for its taps")
    init.conv_weight("seg.in.w", (vit.embed_dim, f), vit.embed_dim)
    init.zeros("seg.in.b", (f,))
    for s in range(1, stages + 1):
        init.conv_weight(f"seg.up{s}.w", (f, f, 2, 2, 2), f)
        fuse_width = f
        if 4 - s >= 1:
            init.conv_weight(f"seg.skip{s}.proj.w", (vit.embed_dim, f), vit.embed_dim)
            init.zeros(f"seg.skip{s}.proj.b", (f,))
            for j in range(s):
                init.conv_weight(f"seg.skip{s}.up{j}.w", (f, f, 2, 2, 2), f)
            fuse_width += f
        if s == stages:
            fuse_width += vit.channels  # raw-voxel skip at full resolution
        init.conv_weight(f"seg.fuse{s}.w", (fuse_width, f), fuse_width)
        init.zeros(f"seg.fuse{s}.b", (f,))
    init.conv_weight("seg.head.w", (f, cfg.num_classes), f)
    init.zeros("seg.head.b", (cfg.num_classes,))
    return init.params


ENCODER_PREFIXES = ("patch_embed.", "enc.", "enc_norm.")


def encoder_param_names(params: Params) -> list[str]:
    return [n for n in params if n.startswith(ENCODER_PREFIXES)]


def param_count(params: Params) -> int:
    return sum(t.size for t in params.values())


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _ln(x: Tensor, params: Params, prefix: str) -> Tensor:
    normed = apply("layernorm", (x,), {"eps": 1e-6})
    return normed * params[f"{prefix}.g"] + params[f"{prefix}.b"]


def _linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    return apply("linear", (x, params[f"{prefix}.w"], params[f"{prefix}.b"]))


def _attention(x: Tensor, params: Params, prefix: str, num_heads: int) -> Tensor:
    n, dim = x.shape
    head_dim = dim // num_heads

    def split(name: str) -> Tensor:
        proj = _linear(x, params, f"{prefix}.{name}")
        return proj.reshape((n, num_heads, head_dim)).permute((1, 0, 2))

    q, k, v = split("q"), split("k"), split("v")
    scores = apply("matmul", (q, k.permute((0, 2, 1)))).scale(1.0 / math.sqrt(head_dim))
    weights = apply("softmax", (scores,), {"axis": -1})
    mixed = apply("matmul", (weights, v))
    merged = mixed.permute((1, 0, 2)).reshape((n, dim))
    return _linear(merged, params, f"{prefix}.proj")


def _mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    hidden = apply("gelu", (_linear(x, params, f"{prefix}.mlp1"),))
    return _linear(hidden, params, f"{prefix}.mlp2")


def _block(x: Tensor, params: Params, prefix: str, num_heads: int) -> Tensor:
    x = x + _attention(_ln(x, params, f"{prefix}.ln1"), params, prefix, num_heads)
    return x + _mlp(_ln(x, params, f"{prefix}.ln2"), params, prefix)


def _run_blocks(x: Tensor, params: Params, stem: str, depth: int, num_heads: int) -> Tensor:
    for i in range(depth):
        x = _block(x, params, f"{stem}.{i}", num_heads)
    return x


def encode(cfg: ViTConfig, params: Params, tokens, positions) -> Tensor:
    """Patch-embed raw tokens, add positions, run the transformer stack.

    tokens may be restricted to the visible rows; positions must be
    row-aligned with tokens.
    """
    x = _as_tensor(tokens)
    pos = _as_tensor(positions)
    if x.shape[-1] != cfg.token_dim():
        raise ValueError(f"token dim {x.shape[-1]} != expected {cfg.token_dim()}")
    if pos.shape != (x.shape[0], cfg.embed_dim):
        raise ValueError(f"positions shape {pos.shape} misaligned with tokens {x.shape}")
    h = _linear(x, params, "patch_embed")
    h = apply("embed_add", (h, pos))
    h = _run_blocks(h, params, "enc", cfg.depth, cfg.num_heads)
    return _ln(h, params, "enc_norm")


def _unpatchify_tensor(tokens: Tensor, grid: PatchGrid) -> Tensor:
    c, p = grid.channels, grid.token_patch
    gd, gh, gw = grid.grid
    blocks = tokens.reshape((gd, gh, gw, c, p, p, p))
    return blocks.permute((3, 0, 4, 1, 5, 2, 6)).reshape((c, gd * p, gh * p, gw * p))


def _broadcast_token(token: Tensor, rows: int) -> Tensor:
    return apply("embed_add", (Tensor(np.zeros((rows, token.shape[1]))), token))


def _scatter(rows: Tensor, indices: np.ndarray, total: int) -> Tensor:
    return apply("scatter_rows", (rows,), {"indices": indices, "total": total})


def mae_forward(
    cfg: ViTConfig,
    dec_cfg: MAEDecoderConfig,
    params: Params,
    volume: Volume,
    mask: Mask,
    recon_cfg: ReconLossConfig = ReconLossConfig(),
) -> tuple[Tensor, Tensor]:
    """Autoencoder pass: encoder sees visible tokens only, the decoder sees
    the full sequence with a shared learnable token at masked slots.

    Returns (reconstructed volume tensor, masked reconstruction loss).
    """
    if mask.num_masked == 0:
        raise ValueError("no masked patches to reconstruct")
    batch = patchify(volume, cfg.token_patch)
    grid = batch.grid
    if mask.total_tokens != grid.num_tokens:
        raise ValueError(f"mask covers {mask.total_tokens} tokens, volume has {grid.num_tokens}")

    visible = mask.visible_token_ids()
    enc_pos = positional_table(grid, cfg.embed_dim)
    latents = encode(cfg, params, batch.tokens[visible], enc_pos[visible])

    projected = _linear(latents, params, "dec_embed")
    mask_rows = _broadcast_token(params["mask_token"], mask.num_masked)
    full = _scatter(projected, visible, grid.num_tokens) + _scatter(
        mask_rows, mask.masked_token_ids, grid.num_tokens
    )
    dec_pos = Tensor(positional_table(grid, dec_cfg.decoder_dim))
    full = apply("embed_add", (full, dec_pos))
    decoded = _run_blocks(full, params, "dec", dec_cfg.decoder_depth, dec_cfg.decoder_heads)
    decoded = _ln(decoded, params, "dec_norm")
    pred = _linear(decoded, params, "dec_head")

    loss = masked_recon_loss(pred, batch.tokens, mask, recon_cfg)
    return _unpatchify_tensor(pred, grid), loss


def simmim_forward(
    cfg: ViTConfig,
    params: Params,
    volume: Volume,
    mask: Mask,
    recon_cfg: ReconLossConfig = ReconLossConfig(),
) -> tuple[Tensor, Tensor]:
    """Full-sequence pass with mask-token substitution in embedding space
    and a single linear projection back to voxels.
    """
    if mask.num_masked == 0:
        raise ValueError("no masked patches to reconstruct")
    batch = patchify(volume, cfg.token_patch)
    grid = batch.grid
    if mask.total_tokens != grid.num_tokens:
        raise ValueError(f"mask covers {mask.total_tokens} tokens, volume has {grid.num_tokens}")

    embedded = _linear(Tensor(batch.tokens), params, "patch_embed")
    visible = mask.visible_token_ids()
    kept = apply("gather_rows", (embedded,), {"indices": visible})
    mask_rows = _broadcast_token(params["mask_token"], mask.num_masked)
    mixed = _scatter(kept, visible, grid.num_tokens) + _scatter(
        mask_rows, mask.masked_token_ids, grid.num_tokens
    )
    pos = Tensor(positional_table(grid, cfg.embed_dim))
    h = apply("embed_add", (mixed, pos))
    h = _run_blocks(h, params, "enc", cfg.depth, cfg.num_heads)
    h = _ln(h, params, "enc_norm")
    pred = _linear(h, params, "head")

    loss = masked_recon_loss(pred, batch.tokens, mask, recon_cfg)
    return _unpatchify_tensor(pred, grid), loss


def _pooled_embedding(cfg: ViTConfig, params: Params, volume: Volume) -> Tensor:
    batch = patchify(volume, cfg.token_patch)
    pos = positional_table(batch.grid, cfg.embed_dim)
    latents = encode(cfg, params, batch.tokens, pos)
    return latents.mean(axis=0, keepdims=True)  # (1, E)


def simclr_forward(
    cfg: ViTConfig,
    params: Params,
    view1: list[Volume],
    view2: list[Volume],
    temperature: float = 0.5,
) -> Tensor:
    """NT-Xent loss over mean-pooled, projected embeddings of two views."""
    if len(view1) != len(view2):
        raise ValueError(f"views differ in batch size: {len(view1)} vs {len(view2)}")
    if len(view1) < 2:
        raise ValueError("contrastive loss needs batch size >= 2 for negatives")
    pooled = [_pooled_embedding(cfg, params, v) for v in view1 + view2]
    stacked = apply("concat", tuple(pooled), {"axis": 0})  # (2B, E)
    hidden = apply("gelu", (_linear(stacked, params, "proj1"),))
    projected = _linear(hidden, params, "proj2")
    normalized = apply("rownorm", (projected,))
    return ntxent(normalized, temperature)


def _pointwise_conv(x: Tensor, params: Params, prefix: str) -> Tensor:
    channels = x.shape[0]
    spatial = x.shape[1:]
    voxels = int(np.prod(spatial))
    flat = x.reshape((channels, voxels)).permute((1, 0))
    out = _linear(flat, params, prefix)
    out_channels = params[f"{prefix}.w"].shape[1]
    return out.permute((1, 0)).reshape((out_channels,) + tuple(spatial))


def _tokens_to_volume(tokens: Tensor, grid: PatchGrid, dim: int) -> Tensor:
    gd, gh, gw = grid.grid
    return tokens.reshape((gd, gh, gw, dim)).permute((3, 0, 1, 2))


def tap_depths(depth: int) -> list[int]:
    """1-indexed block depths feeding the segmentation decoder."""
    if depth < 1:
        raise ValueError("need depth >= 1 to tap features")
    return sorted({max(1, math.ceil(depth * k / 4)) for k in range(1, 5)})


def unetr_segment(cfg: SegConfig, params: Params, volume: Volume) -> Tensor:
    """Full-sequence encoder plus a U-shaped transposed-convolution decoder.

    Taps at evenly spaced block depths are upsampled back to voxel
    resolution with stride-2 transposed convolutions and merged via skip
    connections; returns (num_classes, D, H, W) logits.
    """
    vit = cfg.vit
    batch = patchify(volume, vit.token_patch)
    grid = batch.grid
    taps = tap_depths(vit.depth)

    pos = positional_table(grid, vit.embed_dim)
    h = _linear(Tensor(batch.tokens), params, "patch_embed")
    h = apply("embed_add", (h, Tensor(pos)))
    tapped: dict[int, Tensor] = {}
    for i in range(vit.depth):
        h = _block(h, params, f"enc.{i}", vit.num_heads)
        if (i + 1) in taps:
            tapped[i + 1] = h
    tapped[taps[-1]] = _ln(tapped[taps[-1]], params, "enc_norm")

    # Deepest tap enters at grid resolution; shallower taps join one
    # upsampling stage at a time; the raw volume always joins at full
    # resolution so voxel detail does not have to squeeze through the
    # patch embedding.
    ordered = [tapped[d] for d in taps]  # shallow -> deep
    stages = int(math.log2(vit.token_patch))
    x = apply("gelu", (_pointwise_conv(_tokens_to_volume(ordered[-1], grid, vit.embed_dim), params, "seg.in"),))
    for s in range(1, stages + 1):
        x = apply("conv_transpose3", (x, params[f"seg.up{s}.w"]), {"stride": 2})
        parts = [x]
        tap_index = 4 - s
        if tap_index >= 1:
            source = min(tap_index, len(ordered)) - 1
            skip = _tokens_to_volume(ordered[source], grid, vit.embed_dim)
            skip = apply("gelu", (_pointwise_conv(skip, params, f"seg.skip{s}.proj"),))
            for j in range(s):
                skip = apply(
                    "conv_transpose3", (skip, params[f"seg.skip{s}.up{j}.w"]), {"stride": 2}
                )
            parts.append(skip)
        if s == stages:
            parts.append(Tensor(volume.data))
        x = apply("concat", tuple(parts), {"axis": 0})
        x = apply("gelu", (_pointwise_conv(x, params, f"seg.fuse{s}"),))
    return _pointwise_conv(x, params, "seg.head")
