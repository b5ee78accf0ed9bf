"""Four-stage convolutional branch producing the feature pyramid F_1..F_4."""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ShapeError
from .layers import Conv2d, Module
from .tensor import Tensor, as_tensor

NUM_LEVELS = 4
DEFAULT_CHANNELS = (16, 32, 64, 128)


@dataclass
class PyramidFeatures:
    levels: List[Tensor]

    def __getitem__(self, index: int) -> Tensor:
        return self.levels[index]

    def __len__(self) -> int:
        return len(self.levels)

    def shapes(self) -> List[Tuple[int, ...]]:
        return [f.shape for f in self.levels]


class ConvStage(Module):
    """conv3x3/2 -> GELU -> conv3x3/1 -> GELU."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int):
        self.down = Conv2d(rng, in_ch, out_ch, 3, stride=2, pad=1)
        self.conv = Conv2d(rng, out_ch, out_ch, 3, stride=1, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(self.down(x).gelu()).gelu()


class FeatureCNN(Module):
    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = DEFAULT_CHANNELS,
                 in_ch: int = 1):
        if len(channels) != NUM_LEVELS:
            raise ShapeError(f"the CNN branch needs {NUM_LEVELS} channel widths, got {list(channels)}")
        self.channels = tuple(int(c) for c in channels)
        widths = (in_ch,) + self.channels
        self.stages = [ConvStage(rng, widths[i], widths[i + 1]) for i in range(NUM_LEVELS)]

    def __call__(self, image) -> PyramidFeatures:
        image = as_tensor(image)
        if image.ndim != 4:
            raise ShapeError(f"CNN branch expects (B,C,H,W), got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        factor = 2 ** NUM_LEVELS
        if h % factor or w % factor:
            raise ShapeError(f"image extents {h}x{w} must be divisible by {factor}")
        levels = []
        x = image
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return PyramidFeatures(levels)


def cnn_forward(cnn: FeatureCNN, image) -> PyramidFeatures:
    return cnn(image)
