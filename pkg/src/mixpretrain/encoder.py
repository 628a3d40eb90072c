"""Hierarchical windowed-attention encoder.

Four stages of pre-norm transformer blocks over non-overlapping windows
(no window shifting), with 2x2 patch merging between stages. A window as
large as the token grid degenerates to global self-attention, which is how
the later stages behave at the reference resolutions.

Group handling: the per-sample unit mask lives at the final-stage token
resolution; nearest upsampling aligns it to every stage, and merging can
therefore never fuse tokens across groups. Difficulty reduction is either
per-group additive stage embeddings or masked self-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .blocks import add_param, block_forward, drop_path_masks, linear, make_block, make_linear, make_norm, norm, xavier_uniform
from .mixing import build_attention_mask, upsample_mask
from .tensor import Tensor

REDUCTIONS = ("none", "mix-embedding", "masked-attention")

ATTN_MASK_FILL = -1e9  # additive stand-in for -inf; keeps softmax NaN-free


class ConfigError(ValueError):
    """Inconsistent model configuration."""


@dataclass(frozen=True)
class EncoderConfig:
    """Per-stage widths/heads/depths/windows plus the patch size."""

    patch_px: int
    channels: tuple[int, int, int, int]
    heads: tuple[int, int, int, int]
    blocks: tuple[int, int, int, int]
    windows: tuple[int, int, int, int]
    drop_path_rate: float = 0.0

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def downsample_total(self) -> int:
        return self.patch_px * 2 ** (self.stages - 1)


_PRESETS = {
    "base": EncoderConfig(4, (128, 256, 512, 1024), (4, 8, 16, 32), (2, 2, 18, 2), (14, 14, 14, 7), 0.15),
    "large": EncoderConfig(4, (192, 384, 768, 1536), (6, 12, 24, 48), (2, 2, 18, 2), (14, 14, 14, 7), 0.2),
    "huge": EncoderConfig(4, (352, 704, 1408, 2816), (11, 22, 44, 88), (2, 2, 18, 2), (14, 14, 14, 7), 0.3),
    "toy": EncoderConfig(4, (16, 32, 64, 128), (1, 2, 4, 8), (1, 1, 2, 1), (8, 8, 8, 4), 0.1),
}


def encoder_preset(name: str, window: int | None = None) -> EncoderConfig:
    try:
        cfg = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(_PRESETS)}") from None
    if window is not None:
        cfg = replace(cfg, windows=(window,) * 4)
    return cfg


def stage_grids(config: EncoderConfig, image_size: int) -> list[int]:
    if image_size % config.patch_px:
        raise ConfigError(f"image edge {image_size} not divisible by patch {config.patch_px}")
    g0 = image_size // config.patch_px
    grids = []
    for s in range(config.stages):
        if g0 % 1 or g0 < 1:
            raise ConfigError(f"grid collapses at stage {s}")
        grids.append(g0)
        if s < config.stages - 1:
            if g0 % 2:
                raise ConfigError(f"stage {s} grid {g0} is odd; cannot merge 2x2")
            g0 //= 2
    return grids


def effective_window(config: EncoderConfig, stage: int, grid: int) -> int:
    """Window capped at the grid edge; a full-grid window is global attention."""
    w = min(config.windows[stage], grid)
    if grid % w:
        raise ConfigError(f"stage {stage}: window {w} does not divide grid {grid}")
    return w


def validate_config(config: EncoderConfig, image_size: int) -> None:
    for s, (c, h) in enumerate(zip(config.channels, config.heads)):
        if c % h:
            raise ConfigError(f"stage {s}: width {c} not divisible by {h} heads")
    for s, grid in enumerate(stage_grids(config, image_size)):
        effective_window(config, s, grid)


class EncoderOutput(NamedTuple):
    projected: Tensor  # (B, T_final, out_width) tokens for the decoder
    normed: Tensor  # (B, T_final, C_final) final-stage tokens after norm
    stages: list[Tensor] | None  # per-stage (B, T_s, C_s) embeddings


class Encoder:
    """Parameter store plus forward pass; one instance per model replica."""

    def __init__(
        self,
        config: EncoderConfig,
        image_size: int,
        out_width: int,
        in_channels: int = 3,
        mix_groups: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        validate_config(config, image_size)
        self.config = config
        self.image_size = image_size
        self.in_channels = in_channels
        self.out_width = out_width
        self.dtype = dtype
        self.grids = stage_grids(config, image_size)
        self.final_grid = self.grids[-1]
        rng = rng or np.random.default_rng(0)

        p = config.patch_px
        c0 = config.channels[0]
        self.params: dict[str, Tensor] = {}
        self.depth_of: dict[str, int] = {}
        make_linear(self.params, "patch_embed", p * p * in_channels, c0, rng, dtype)
        add_param(self.params, "pos_embed", (rng.normal(0, 0.02, (self.grids[0] ** 2, c0))).astype(dtype))
        for name in ("patch_embed.w", "patch_embed.b", "pos_embed"):
            self.depth_of[name] = 0

        depth = 0
        for s in range(config.stages):
            width = config.channels[s]
            for i in range(config.blocks[s]):
                prefix = f"stage{s}.block{i}"
                before = set(self.params)
                make_block(self.params, prefix, width, rng, dtype)
                depth += 1
                for name in set(self.params) - before:
                    self.depth_of[name] = depth
            if s < config.stages - 1:
                prefix = f"merge{s}"
                before = set(self.params)
                make_norm(self.params, prefix + ".norm", 4 * width, dtype)
                make_linear(self.params, prefix, 4 * width, config.channels[s + 1], rng, dtype, bias=False)
                for name in set(self.params) - before:
                    self.depth_of[name] = depth
        self.block_depth = depth  # deepest transformer block

        make_norm(self.params, "final_norm", config.channels[-1], dtype)
        make_linear(self.params, "proj", config.channels[-1], out_width, rng, dtype)
        for name in ("final_norm.g", "final_norm.b", "proj.w", "proj.b"):
            self.depth_of[name] = depth

        if mix_groups is not None:
            # One row per group plus one for virtual units.
            for s in range(config.stages):
                add_param(
                    self.params,
                    f"mix_embed.stage{s}",
                    rng.normal(0, 0.02, (mix_groups + 1, config.channels[s])).astype(dtype),
                )
                self.depth_of[f"mix_embed.stage{s}"] = 0

    # -- forward ------------------------------------------------------------

    def patch_embed(self, pixels: Tensor) -> Tensor:
        b = pixels.shape[0]
        p = self.config.patch_px
        g = self.grids[0]
        cin = self.in_channels
        if pixels.shape[2] % p or pixels.shape[3] % p:
            raise ConfigError(f"image edges {pixels.shape[2:]} not divisible by patch {p}")
        x = T.reshape(pixels, (b, cin, g, p, g, p))
        x = T.transpose(x, (0, 2, 4, 3, 5, 1))  # B, gy, gx, py, px, C
        x = T.reshape(x, (b, g * g, p * p * cin))
        tokens = linear(self.params, "patch_embed", x)
        return T.add(tokens, self.params["pos_embed"])

    def _window_split(self, x: Tensor, b: int, grid: int, width: int, win: int) -> Tensor:
        if win == grid:
            return x
        n = grid // win
        x = T.reshape(x, (b, n, win, n, win, width))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        return T.reshape(x, (b * n * n, win * win, width))

    def _window_join(self, x: Tensor, b: int, grid: int, width: int, win: int) -> Tensor:
        if win == grid:
            return x
        n = grid // win
        x = T.reshape(x, (b, n, n, win, win, width))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        return T.reshape(x, (b, grid * grid, width))

    def _attn_bias(self, maps: np.ndarray, win: int, heads: int) -> np.ndarray | None:
        allow = build_attention_mask(maps, win)
        if allow.all():
            return None
        b, nw, n, _ = allow.shape
        bias = np.where(allow, 0.0, ATTN_MASK_FILL).astype(self.dtype)
        bias = np.repeat(bias.reshape(b * nw, 1, n, n), heads, axis=1)
        return bias

    def _merge(self, x: Tensor, b: int, grid: int, width: int, stage: int) -> Tensor:
        x = T.reshape(x, (b, grid // 2, 2, grid // 2, 2, width))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (b, (grid // 2) ** 2, 4 * width))
        x = norm(self.params, f"merge{stage}.norm", x)
        return linear(self.params, f"merge{stage}", x)

    def forward(
        self,
        pixels: Tensor,
        group_maps: np.ndarray | None = None,
        reduction: str = "none",
        drop_path_rng: np.random.Generator | None = None,
        collect_stages: bool = False,
    ) -> EncoderOutput:
        if reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {reduction!r}; choose from {REDUCTIONS}")
        b = pixels.shape[0]
        cfg = self.config

        single_group = True
        if group_maps is not None:
            group_maps = np.asarray(group_maps)
            if group_maps.shape != (b, self.final_grid, self.final_grid):
                raise ConfigError(
                    f"group map shape {group_maps.shape} does not match final token grid "
                    f"{(b, self.final_grid, self.final_grid)}"
                )
            flat = group_maps.reshape(b, -1)
            single_group = bool((flat == flat[:, :1]).all())

        x = self.patch_embed(pixels)
        stages: list[Tensor] | None = [] if collect_stages else None
        rate = cfg.drop_path_rate

        for s in range(cfg.stages):
            grid = self.grids[s]
            width = cfg.channels[s]
            heads = cfg.heads[s]
            win = effective_window(cfg, s, grid)

            maps = None
            if group_maps is not None and not single_group:
                maps = upsample_mask(group_maps, grid // self.final_grid)
                # Merging safety: every 2x2 neighborhood must be group-constant.
                if grid > self.final_grid:
                    q = maps.reshape(b, grid // 2, 2, grid // 2, 2)
                    assert (q == q[:, :, :1, :, :1]).all(), "group map varies inside a 2x2 merge neighborhood"

            if reduction == "mix-embedding" and maps is not None:
                table = self.params[f"mix_embed.stage{s}"]
                picked = T.gather(table, maps.reshape(-1).astype(np.int64))
                x = T.add(x, T.reshape(picked, (b, grid * grid, width)))

            bias = None
            if reduction == "masked-attention" and maps is not None:
                bias = self._attn_bias(maps, win, heads)

            xw = self._window_split(x, b, grid, width, win)
            rows = xw.shape[0]
            for i in range(cfg.blocks[s]):
                drops = None
                if drop_path_rng is not None and rate > 0:
                    per_sample = drop_path_masks(drop_path_rng, b, rate, self.dtype)
                    per_row = np.repeat(per_sample, rows // b, axis=0)
                    per_sample2 = drop_path_masks(drop_path_rng, b, rate, self.dtype)
                    drops = (per_row, np.repeat(per_sample2, rows // b, axis=0))
                xw = block_forward(self.params, f"stage{s}.block{i}", xw, heads, bias, drops)
            x = self._window_join(xw, b, grid, width, win)

            if stages is not None:
                stages.append(x)
            if s < cfg.stages - 1:
                x = self._merge(x, b, grid, width, s)

        normed = norm(self.params, "final_norm", x)
        projected = linear(self.params, "proj", normed)
        return EncoderOutput(projected, normed, stages)


# ---------------------------------------------------------------------------
# Analytic accounting.


def count_params(config: EncoderConfig, image_size: int, in_channels: int = 3, out_width: int = 512) -> int:
    """Closed-form parameter count; matches the instantiated model exactly."""
    grids = stage_grids(config, image_size)
    p = config.patch_px
    total = (p * p * in_channels) * config.channels[0] + config.channels[0]
    total += grids[0] ** 2 * config.channels[0]
    for s in range(config.stages):
        c = config.channels[s]
        per_block = 2 * c + 4 * (c * c + c) + 2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c)
        total += config.blocks[s] * per_block
        if s < config.stages - 1:
            total += 2 * (4 * c) + 4 * c * config.channels[s + 1]
    c_last = config.channels[-1]
    total += 2 * c_last
    total += c_last * out_width + out_width
    return total


def count_flops(config: EncoderConfig, image_size: int, in_channels: int = 3) -> int:
    """Analytic multiply-accumulate count of one un-mixed encoder forward.

    One fused multiply-add counts as one operation, the convention behind
    the commonly quoted "FLOPs" of vision backbones; double it for the
    strict 2-ops-per-MAC reading.
    """
    grids = stage_grids(config, image_size)
    p = config.patch_px
    total = grids[0] ** 2 * (p * p * in_channels) * config.channels[0]
    for s in range(config.stages):
        grid = grids[s]
        t = grid * grid
        c = config.channels[s]
        win = effective_window(config, s, grid)
        n = win * win
        per_block = 4 * t * c * c + 2 * t * n * c + 8 * t * c * c
        total += config.blocks[s] * per_block
        if s < config.stages - 1:
            total += (t // 4) * (4 * c) * config.channels[s + 1]
    return total
