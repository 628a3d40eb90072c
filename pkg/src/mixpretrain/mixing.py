"""Group masks, image mixing, corruption variants, and token unmixing.

A :class:`GroupMask` assigns every mask unit of the final-stage token grid to
one of K source images. Mixing copies pixels unit-wise from the owning
source; unmixing restores one group's final-stage tokens and fills the rest
with a learned placeholder; attention masks restrict windowed self-attention
to within-group pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

FILLING_MODES = ("mix", "zero", "learnable", "shuffle", "zoomin")

# Units assigned beyond the K real groups (id == K) belong to no image; they
# stand in for explicit placeholder tokens at a raised masking ratio.
VIRTUAL = "virtual"


@dataclass(frozen=True)
class GroupMask:
    """Assignment of each mask unit to one of K source images.

    ``group_of`` is a (grid_h, grid_w) int array with values in [0, K), plus
    the value K for virtual (no-image) units when a raised masking ratio is
    requested. ``unit_px`` is the mask-unit edge in pixels and must equal the
    encoder's total downsampling at the final stage so one unit is exactly
    one final-stage token.
    """

    grid_h: int
    grid_w: int
    group_of: np.ndarray
    K: int
    unit_px: int

    @property
    def units(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def has_virtual(self) -> bool:
        return bool((self.group_of == self.K).any())

    def size_of(self, k: int) -> int:
        return int((self.group_of == k).sum())

    def masked_fraction(self, k: int) -> float:
        """Fraction of units image k does not own (foreign plus virtual)."""
        return 1.0 - self.size_of(k) / self.units


def sample_group_mask(
    grid_h: int,
    grid_w: int,
    K: int,
    seed,
    virtual_fraction: float = 0.0,
) -> GroupMask:
    """Uniformly random balanced partition of the unit grid into K groups.

    All T unit indices are shuffled with the seeded generator; groups 0..K-1
    take contiguous chunks of floor(T/K) units and the remainder is handed
    out one unit each to the leading groups. With ``virtual_fraction`` > 0,
    that share of units (rounded) is first set aside as virtual units and the
    rest is partitioned as above.
    """
    total = grid_h * grid_w
    if K < 2 or K > total:
        raise ValueError(f"mixing count K={K} outside [2, {total}] for a {grid_h}x{grid_w} grid")
    if not 0.0 <= virtual_fraction < 1.0:
        raise ValueError(f"virtual_fraction {virtual_fraction} outside [0, 1)")
    n_virtual = int(round(virtual_fraction * total))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(total)

    assignable = total - n_virtual
    base, extra = divmod(assignable, K)
    groups = np.empty(total, dtype=np.int16)
    pos = 0
    for k in range(K):
        size = base + (1 if k < extra else 0)
        groups[order[pos:pos + size]] = k
        pos += size
    groups[order[pos:]] = K  # virtual remainder, possibly empty
    # unit_px is bound later when the mask meets a concrete encoder config.
    return GroupMask(grid_h, grid_w, groups.reshape(grid_h, grid_w), K, unit_px=0)


def with_unit_px(mask: GroupMask, unit_px: int) -> GroupMask:
    return GroupMask(mask.grid_h, mask.grid_w, mask.group_of, mask.K, unit_px)


def stack_maps(masks: list[GroupMask]) -> np.ndarray:
    """Stack per-sample unit maps into a (B, grid_h, grid_w) int array."""
    return np.stack([m.group_of for m in masks])


def mix_images(sources: np.ndarray, mask: GroupMask) -> np.ndarray:
    """Compose one mixed image by copying each unit from its owning source.

    ``sources`` is (K, C, H, W). Virtual units (if any) are zero-filled here;
    the training pipeline overlays them with its learnable placeholder.
    """
    K, C, H, W = sources.shape
    if K != mask.K:
        raise ValueError(f"got {K} sources for a mask with K={mask.K}")
    u = mask.unit_px
    if u <= 0 or H != mask.grid_h * u or W != mask.grid_w * u:
        raise ValueError(
            f"image {H}x{W} does not tile a {mask.grid_h}x{mask.grid_w} grid of {u}px units"
        )
    pixmap = np.repeat(np.repeat(mask.group_of, u, axis=0), u, axis=1)
    out = np.zeros((C, H, W), dtype=sources.dtype)
    for k in range(K):
        sel = pixmap == k
        out[:, sel] = sources[k][:, sel]
    return out


def upsample_mask(mask, factor: int) -> np.ndarray:
    """Replicate each unit into a factor x factor block (nearest neighbor)."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    grid = mask.group_of if isinstance(mask, GroupMask) else np.asarray(mask)
    return np.repeat(np.repeat(grid, factor, axis=-2), factor, axis=-1)


def window_partition_map(group_map: np.ndarray, window: int) -> np.ndarray:
    """Reorder a (..., G, G) token map into (..., nW, window*window)."""
    *lead, gh, gw = group_map.shape
    if gh % window or gw % window:
        raise ValueError(f"window {window} does not divide token grid {gh}x{gw}")
    m = group_map.reshape(*lead, gh // window, window, gw // window, window)
    m = np.moveaxis(m, -2, -3)
    return m.reshape(*lead, (gh // window) * (gw // window), window * window)


def build_attention_mask(group_map: np.ndarray, window: int) -> np.ndarray:
    """Boolean attend-matrix per window: true iff same group.

    ``group_map`` is (..., G, G); a window equal to G yields one global
    window. Output is (..., nW, N, N) with N = window*window, symmetric with
    a true diagonal.
    """
    windows = window_partition_map(group_map, window)
    return windows[..., :, None] == windows[..., None, :]


def unmix_tokens(tokens: Tensor, group_maps, k: int, mask_token: Tensor) -> Tensor:
    """Keep group-k token embeddings; fill all other positions with the
    placeholder vector. ``tokens`` is (B, T, C); ``group_maps`` is a
    GroupMask or a (B, grid_h, grid_w) int array aligned with the token grid.
    """
    if isinstance(group_maps, GroupMask):
        if k >= group_maps.K:
            raise ValueError(f"group index {k} >= K={group_maps.K}")
        maps = group_maps.group_of[None]
    else:
        maps = np.asarray(group_maps)
    B, t, C = tokens.shape
    flat = maps.reshape(maps.shape[0], -1)
    if flat.shape != (B, t):
        raise ValueError(f"group map covers {flat.shape} but tokens are {(B, t)}")
    keep = (flat == k)[..., None]
    filler = T.broadcast_to(mask_token, (B, t, C))
    return T.where(keep, tokens, filler)


def corrupt(
    image: np.ndarray,
    unit_mask: np.ndarray,
    mode: str,
    unit_px: int,
    rng: np.random.Generator | None = None,
    learnable_unit: Tensor | None = None,
    zoom_range: tuple[float, float] = (1.0, 2.0),
) -> Tensor:
    """Fill the masked units of a single image per the ablation variants.

    ``unit_mask`` is a (gh, gw) bool grid, true where masked. Modes: ``zero``
    blanks masked units; ``learnable`` fills them with a shared learnable
    unit (a tensor expression, so gradients reach it); ``shuffle`` permutes
    the masked units' contents among themselves; ``zoomin`` copies masked
    units from an enlarged, randomly cropped view of the same image.
    """
    if mode not in FILLING_MODES or mode == "mix":
        raise ValueError(f"unknown filling mode {mode!r}; mixing is done by mix_images")
    C, H, W = image.shape
    gh, gw = unit_mask.shape
    u = unit_px
    if H != gh * u or W != gw * u:
        raise ValueError(f"image {H}x{W} does not tile a {gh}x{gw} grid of {u}px units")
    pixmask = np.repeat(np.repeat(unit_mask, u, axis=0), u, axis=1)

    if mode == "zero":
        out = image.copy()
        out[:, pixmask] = 0.0
        return Tensor(out)

    if mode == "learnable":
        if learnable_unit is None:
            raise ValueError("learnable mode needs the shared learnable unit")
        tiled = T.broadcast_to(learnable_unit, (gh, gw, C, u, u))
        tiled = T.transpose(tiled, (2, 0, 3, 1, 4))
        tiled = T.reshape(tiled, (C, H, W))
        return T.where(pixmask[None], tiled, Tensor(image))

    if rng is None:
        raise ValueError(f"{mode} mode needs a generator")

    if mode == "shuffle":
        units = image.reshape(C, gh, u, gw, u).transpose(1, 3, 0, 2, 4).reshape(gh * gw, C, u, u)
        masked_idx = np.flatnonzero(unit_mask.reshape(-1))
        perm = rng.permutation(len(masked_idx))
        shuffled = units.copy()
        shuffled[masked_idx] = units[masked_idx[perm]]
        out = shuffled.reshape(gh, gw, C, u, u).transpose(2, 0, 3, 1, 4).reshape(C, H, W)
        return Tensor(out)

    # zoomin: enlarge, crop back to the original frame, copy masked units.
    from .data import bilinear_resize

    lo, hi = zoom_range
    factor = rng.uniform(lo, hi)
    zh, zw = max(H + 1, int(round(H * factor))), max(W + 1, int(round(W * factor)))
    big = bilinear_resize(image, zh, zw)
    oy = rng.integers(0, zh - H + 1)
    ox = rng.integers(0, zw - W + 1)
    crop = big[:, oy:oy + H, ox:ox + W]
    out = image.copy()
    out[:, pixmask] = crop[:, pixmask]
    return Tensor(out)
