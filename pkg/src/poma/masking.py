"""Per-view block masks over the patch grid and the masked/visible partition."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidMaskError

MASK_SCALE = (0.15, 0.2)
MASK_ASPECT = (0.75, 1.5)

PatchKey = tuple[int, int, int]  # (view, row, col)


@dataclass(frozen=True)
class MaskSpec:
    view: int
    top: int
    left: int
    height: int
    width: int

    def keys(self) -> list[PatchKey]:
        return [(self.view, r, c)
                for r in range(self.top, self.top + self.height)
                for c in range(self.left, self.left + self.width)]


@dataclass(frozen=True)
class MaskPartition:
    masked: tuple[PatchKey, ...]
    visible: tuple[PatchKey, ...]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def block_shape(grid_h: int, grid_w: int, fraction: float, aspect: float) -> tuple[int, int]:
    """Block height/width for a target area fraction and aspect ratio (h/w)."""
    area = fraction * grid_h * grid_w
    h = min(max(_round_half_up(math.sqrt(area * aspect)), 1), grid_h)
    w = min(max(_round_half_up(math.sqrt(area / aspect)), 1), grid_w)
    return h, w


def sample_block_mask(grid_h: int, grid_w: int, rng: np.random.Generator,
                      scale_range: tuple[float, float] = MASK_SCALE,
                      aspect_range: tuple[float, float] = MASK_ASPECT,
                      view: int = 0) -> MaskSpec:
    if grid_h * grid_w < 1:
        raise InvalidArgumentError("grid must have at least one patch")
    for lo, hi in (scale_range, aspect_range):
        if not 0 < lo <= hi:
            raise InvalidArgumentError(f"bad range ({lo}, {hi})")
    f = rng.uniform(*scale_range)
    r = rng.uniform(*aspect_range)
    h, w = block_shape(grid_h, grid_w, f, r)
    top = int(rng.integers(grid_h - h + 1))
    left = int(rng.integers(grid_w - w + 1))
    return MaskSpec(view, top, left, h, w)


def build_partition(grids: Sequence[tuple[int, int]], masks: Sequence[MaskSpec]) -> MaskPartition:
    """Union of per-view blocks and its complement, both sorted by (view, row, col)."""
    if len(masks) != len(grids):
        raise InvalidMaskError(f"expected one mask per view ({len(grids)}), got {len(masks)}")
    masked: set[PatchKey] = set()
    for spec, (gh, gw) in zip(masks, grids):
        if spec.height < 1 or spec.width < 1 or spec.top < 0 or spec.left < 0 \
                or spec.top + spec.height > gh or spec.left + spec.width > gw:
            raise InvalidMaskError(f"mask {spec} does not fit grid {gh}x{gw}")
        masked.update(spec.keys())
    if sorted(m.view for m in masks) != list(range(len(grids))):
        raise InvalidMaskError("masks must cover each view exactly once")
    everything = [(v, r, c) for v, (gh, gw) in enumerate(grids) for r in range(gh) for c in range(gw)]
    return MaskPartition(tuple(sorted(masked)), tuple(k for k in everything if k not in masked))


def sample_partition(n_views: int, grid_h: int, grid_w: int, rng: np.random.Generator,
                     scale_range=MASK_SCALE, aspect_range=MASK_ASPECT) -> MaskPartition:
    masks = [sample_block_mask(grid_h, grid_w, rng, scale_range, aspect_range, view=v)
             for v in range(n_views)]
    return build_partition([(grid_h, grid_w)] * n_views, masks)
