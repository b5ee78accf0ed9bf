"""Density-aware masks: Gaussian scene density from rotated boxes, refined by CNN features.

The coarse map sums one isotropic Gaussian per box, evaluated at integer pixel
centers. Refinement pools the map and a CNN level to the token grid and mixes
them with a 1x1 convolution, separate weights per gated layer. The inferring
branch sees only CNN features, never the ground-truth map.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .functional import avg_pool2d, conv2d
from .geometry import RotatedBox
from .layers import Mode, Module
from .tensor import Tensor, concat, parameter

TRUNCATION_SIGMAS = 4.0


@dataclass
class DensityMap:
    values: np.ndarray

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass
class RefinedMask:
    """Token-grid mask for one gated layer; `raw` is the pre-clip conv output."""

    level: int
    grid_h: int
    grid_w: int
    values: Tensor
    raw: Tensor

    def tokens(self) -> Tensor:
        """(B, N) in row-major token order."""
        return self.values.reshape(self.values.shape[0], self.grid_h * self.grid_w)


def sigma_from_box(box: RotatedBox) -> float:
    # Geometric-mean extent; 3 sigma reaches roughly half the box.
    return math.sqrt(box.w * box.h) / 6.0


def gaussian_contribution(box: RotatedBox, x, y):
    sigma = sigma_from_box(box)
    d2 = (np.asarray(x, dtype=np.float64) - box.cx) ** 2 + (np.asarray(y, dtype=np.float64) - box.cy) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def coarse_density_map(boxes: Sequence[RotatedBox], height: int, width: int) -> DensityMap:
    """Sum of per-box Gaussians, each truncated at 4 sigma."""
    if height <= 0 or width <= 0:
        raise ShapeError(f"density map extents must be positive, got {height}x{width}")
    values = np.zeros((height, width))
    for box in boxes:
        sigma = sigma_from_box(box)
        radius = TRUNCATION_SIGMAS * sigma
        x0, x1 = max(0, math.ceil(box.cx - radius)), min(width - 1, math.floor(box.cx + radius))
        y0, y1 = max(0, math.ceil(box.cy - radius)), min(height - 1, math.floor(box.cy + radius))
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        d2 = (xs[None, :] - box.cx) ** 2 + (ys[:, None] - box.cy) ** 2
        kernel = np.exp(-d2 / (2.0 * sigma * sigma))
        kernel[d2 > radius * radius] = 0.0
        values[y0:y1 + 1, x0:x1 + 1] += kernel
    return DensityMap(values)


def pool_mask_to_tokens(values: np.ndarray, patch: int) -> np.ndarray:
    """Average PxP windows of (..., H, W) into (..., H/P, W/P)."""
    values = np.asarray(values, dtype=np.float64)
    height, width = values.shape[-2], values.shape[-1]
    if patch <= 0 or height % patch or width % patch:
        raise ShapeError(f"map {height}x{width} is not divisible by patch size {patch}")
    gh, gw = height // patch, width // patch
    lead = values.shape[:-2]
    blocks = values.reshape(*lead, gh, patch, gw, patch)
    return blocks.mean(axis=(-3, -1))


class RefineConv(Module):
    """1x1 convolution to a single channel."""

    def __init__(self, in_ch: int, init_weight: float):
        self.weight = parameter(np.full((1, in_ch, 1, 1), init_weight))
        self.bias = parameter(np.zeros(1))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


def pool_features_to_grid(feature: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """Average a (B,C,h,w) level over token windows and channels -> (B,1,grid_h,grid_w)."""
    _, _, h, w = feature.shape
    if h < grid_h or w < grid_w or h % grid_h or w % grid_w or h // grid_h != w // grid_w:
        raise ShapeError(
            f"feature extents {h}x{w} do not pool evenly onto the {grid_h}x{grid_w} token grid"
        )
    window = h // grid_h
    pooled = avg_pool2d(feature, window) if window > 1 else feature
    return pooled.mean(axis=1, keepdims=True)


class MaskRefiner(Module):
    """Per-layer refinement convs for both branches of the mask update."""

    def __init__(self, num_levels: int):
        self.train_convs = [RefineConv(2, 0.5) for _ in range(num_levels)]
        self.infer_convs = [RefineConv(1, 1.0) for _ in range(num_levels)]

    def inference_raw(self, level: int, feature: Tensor, grid_h: int, grid_w: int) -> Tensor:
        """Pre-clip inferring-branch output, (B,1,grid_h,grid_w)."""
        return self.infer_convs[level](pool_features_to_grid(feature, grid_h, grid_w))

    def refine(self, level: int, density: Optional[np.ndarray], feature: Tensor,
               grid_h: int, grid_w: int, mode: Mode) -> RefinedMask:
        """`density` is the pixel-level coarse map (B,H,W); ignored when inferring."""
        pooled_feature = pool_features_to_grid(feature, grid_h, grid_w)
        if mode is Mode.TRAINING:
            if density is None:
                raise ShapeError("training-mode refinement needs the coarse density map")
            density = np.asarray(density, dtype=np.float64)
            if density.shape[-2] % grid_h or density.shape[-1] % grid_w:
                raise ShapeError(
                    f"density map {density.shape[-2:]} does not pool onto the "
                    f"{grid_h}x{grid_w} token grid"
                )
            patch = density.shape[-2] // grid_h
            pooled_map = Tensor(pool_mask_to_tokens(density, patch)[:, None])
            raw = self.train_convs[level](concat([pooled_map, pooled_feature], axis=1))
        else:
            raw = self.infer_convs[level](pooled_feature)
        values = raw.clip(0.0, 1.0)
        return RefinedMask(level=level, grid_h=grid_h, grid_w=grid_w,
                           values=values[:, 0], raw=raw[:, 0])


def density_batch(scenes_boxes: Sequence[Sequence[RotatedBox]], height: int,
                  width: int) -> np.ndarray:
    """Stack coarse maps for a batch of box lists -> (B,H,W)."""
    maps: List[np.ndarray] = [coarse_density_map(b, height, width).values for b in scenes_boxes]
    return np.stack(maps) if maps else np.zeros((0, height, width))
