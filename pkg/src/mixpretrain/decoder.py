"""Reconstruction decoder, target normalization, and the grouped pixel loss.

One lightweight global-attention transformer reconstructs every group: the K
unmixed token grids are stacked along the batch axis and decoded in a single
pass. Targets are raw pixels normalized per mask unit; the loss for group k
is averaged over exactly the units image k does not own, so visible units
contribute nothing, not even gradient noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import add_param, block_forward, linear, make_block, make_linear, make_norm, norm
from .tensor import Tensor

TARGET_EPS = 1e-6


@dataclass(frozen=True)
class DecoderConfig:
    width: int = 512
    blocks: int = 8
    heads: int = 16
    out_px: int = 32  # mask-unit edge: pixels predicted per token = out_px^2 * channels


_PRESETS = {
    "full": DecoderConfig(width=512, blocks=8, heads=16, out_px=32),
    "toy": DecoderConfig(width=64, blocks=2, heads=4, out_px=32),
}


def decoder_preset(name: str) -> DecoderConfig:
    try:
        return _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown decoder preset {name!r}; choose from {sorted(_PRESETS)}") from None


class Decoder:
    """Small ViT over the full final-stage grid; owns the placeholder token."""

    def __init__(
        self,
        config: DecoderConfig,
        grid_tokens: int,
        in_channels: int = 3,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        self.config = config
        self.grid_tokens = grid_tokens
        self.out_dim = config.out_px * config.out_px * in_channels
        rng = rng or np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        add_param(self.params, "mask_token", rng.normal(0, 0.02, config.width).astype(dtype))
        add_param(self.params, "pos_embed", rng.normal(0, 0.02, (grid_tokens, config.width)).astype(dtype))
        for i in range(config.blocks):
            make_block(self.params, f"block{i}", config.width, rng, dtype)
        make_norm(self.params, "final_norm", config.width, dtype)
        make_linear(self.params, "head", config.width, self.out_dim, rng, dtype)

    @property
    def mask_token(self) -> Tensor:
        return self.params["mask_token"]

    def forward(self, tokens: Tensor) -> Tensor:
        """Decode (rows, T, width) unmixed token grids to pixel vectors."""
        if tokens.shape[1] != self.grid_tokens or tokens.shape[2] != self.config.width:
            raise ValueError(
                f"decoder expects (*, {self.grid_tokens}, {self.config.width}) tokens, got {tokens.shape}"
            )
        x = T.add(tokens, self.params["pos_embed"])
        for i in range(self.config.blocks):
            x = block_forward(self.params, f"block{i}", x, self.config.heads)
        x = norm(self.params, "final_norm", x)
        return linear(self.params, "head", x)


def decoder_flops(config: DecoderConfig, grid_tokens: int, in_channels: int = 3) -> int:
    """Analytic MACs of decoding one token grid (blocks plus pixel head)."""
    t = grid_tokens
    c = config.width
    per_block = 4 * t * c * c + 2 * t * t * c + 8 * t * c * c
    return config.blocks * per_block + t * c * (config.out_px ** 2 * in_channels)


# ---------------------------------------------------------------------------
# Targets.


@dataclass
class ReconTarget:
    """Per-unit normalized pixels plus the statistics to undo it."""

    normalized: np.ndarray  # (T, D) with D = out_px^2 * channels
    unit_mean: np.ndarray  # (T, 1)
    unit_std: np.ndarray  # (T, 1), sqrt(var + eps)


def _to_units(images: np.ndarray, unit_px: int) -> np.ndarray:
    b, c, h, w = images.shape
    gh, gw = h // unit_px, w // unit_px
    if gh * unit_px != h or gw * unit_px != w:
        raise ValueError(f"image {h}x{w} not divisible by unit edge {unit_px}")
    u = images.reshape(b, c, gh, unit_px, gw, unit_px)
    u = u.transpose(0, 2, 4, 1, 3, 5)
    return u.reshape(b, gh * gw, c * unit_px * unit_px)


def _from_units(units: np.ndarray, unit_px: int, channels: int, edge: int) -> np.ndarray:
    b, t, d = units.shape
    g = edge // unit_px
    u = units.reshape(b, g, g, channels, unit_px, unit_px)
    u = u.transpose(0, 3, 1, 4, 2, 5)
    return u.reshape(b, channels, edge, edge)


def normalize_targets_batch(images: np.ndarray, unit_px: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-unit standardization of (B, C, H, W) images -> (B, T, D) targets."""
    units = _to_units(images, unit_px)
    mean = units.mean(axis=-1, keepdims=True)
    var = units.var(axis=-1, keepdims=True)
    std = np.sqrt(var + TARGET_EPS)
    return ((units - mean) / std).astype(images.dtype), mean, std


def normalize_targets(image: np.ndarray, unit_px: int) -> ReconTarget:
    normalized, mean, std = normalize_targets_batch(image[None], unit_px)
    return ReconTarget(normalized[0], mean[0], std[0])


def denormalize_units(units: np.ndarray, mean: np.ndarray, std: np.ndarray, unit_px: int, channels: int, edge: int) -> np.ndarray:
    """Invert per-unit standardization back to (B, C, H, W) pixels."""
    return _from_units(units * std + mean, unit_px, channels, edge)


# ---------------------------------------------------------------------------
# Loss.


def dual_loss(
    predictions: Tensor,
    targets: np.ndarray,
    group_maps: np.ndarray,
    group_ids,
) -> tuple[Tensor, np.ndarray]:
    """Masked reconstruction loss summed over the decoded groups.

    ``predictions`` is (G, B, T, D) stacked in ``group_ids`` order; ``targets``
    matches. For each decoded group k the squared error is averaged over the
    units image k does NOT own (times D), then the G terms are summed. Also
    returns the per-group terms as plain floats for metrics.
    """
    group_ids = list(group_ids)
    g = len(group_ids)
    if predictions.shape[0] != g or targets.shape[0] != g:
        raise ValueError(
            f"got {predictions.shape[0]} prediction grids, {targets.shape[0]} targets, "
            f"{g} group ids"
        )
    if predictions.shape != targets.shape:
        raise ValueError(f"prediction shape {predictions.shape} != target shape {targets.shape}")
    _, b, t, d = predictions.shape
    flat_maps = group_maps.reshape(-1, t)
    if flat_maps.shape[0] != b:
        raise ValueError(f"group maps cover {flat_maps.shape[0]} samples, predictions {b}")

    weights = np.zeros((g, b, t, 1), dtype=predictions.dtype)
    for i, k in enumerate(group_ids):
        masked = flat_maps != k
        n_masked = masked.sum(axis=-1, keepdims=True)  # per sample
        if (n_masked == 0).any():
            raise ValueError(f"group {k} owns every unit of some sample; nothing to reconstruct")
        weights[i] = (masked / (b * n_masked * d))[..., None]

    diff = T.sub(predictions, Tensor(targets))
    weighted = T.mul(T.mul(diff, diff), Tensor(weights))
    per_group = T.tsum(weighted, axis=(1, 2, 3))
    total = T.tsum(per_group)
    return total, per_group.data.copy()
