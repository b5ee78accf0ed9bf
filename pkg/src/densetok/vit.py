"""Patch-token ViT encoder with density-gated layers.

Layer i runs the attention block alone, or a fusion block first when i is one
of the configured gated layers. Tokens stay in row-major patch order
throughout, so the final sequence folds straight back onto the token grid.
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cnn import DEFAULT_CHANNELS, NUM_LEVELS
from .defm import KEEP_CHANNEL, DensityFusion, FusionOutput
from .density import RefinedMask
from .errors import ConfigError, ShapeError
from .functional import softmax
from .layers import Conv2d, LayerNorm, Linear, Mode, Module
from .tensor import Tensor, as_tensor, concat, parameter

logger = logging.getLogger(__name__)

PE_STD = 0.02
MASKED_SCORE = -1e9
_PATCH_SIZES = (2, 4, 8, 16)


@dataclass
class ModelConfig:
    image_size: Tuple[int, int] = (64, 64)
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 4
    num_heads: int = 4
    defm_layers: Tuple[int, ...] = (1, 3)
    mlp_ratio: float = 2.0
    cnn_channels: Tuple[int, ...] = DEFAULT_CHANNELS
    hard_keep: bool = False
    keep_ratio: float = 0.7

    def __post_init__(self) -> None:
        size = self.image_size
        if isinstance(size, int):
            size = (size, size)
        self.image_size = (int(size[0]), int(size[1]))
        self.defm_layers = tuple(int(i) for i in self.defm_layers)
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        self.validate()

    def validate(self) -> None:
        h, w = self.image_size
        p = self.patch_size
        if p not in _PATCH_SIZES:
            raise ConfigError(f"model.patch_size must be one of {_PATCH_SIZES}, got {p}")
        factor = 2 ** NUM_LEVELS
        if h <= 0 or w <= 0 or h % factor or w % factor:
            raise ConfigError(f"model.image_size {h}x{w} must be positive multiples of {factor}")
        if self.embed_dim <= 0 or self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ConfigError(
                f"model.embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ConfigError(f"model.depth must be >= 1, got {self.depth}")
        layers = self.defm_layers
        if list(layers) != sorted(set(layers)) or any(i < 0 or i >= self.depth for i in layers):
            raise ConfigError(
                f"model.defm_layers {list(layers)} must be increasing indices below depth {self.depth}"
            )
        if layers and self.embed_dim % 2:
            raise ConfigError("model.embed_dim must be even when gated layers are configured")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"model.mlp_ratio must be positive, got {self.mlp_ratio}")
        if len(self.cnn_channels) != NUM_LEVELS or any(c <= 0 for c in self.cnn_channels):
            raise ConfigError(f"model.cnn_channels needs {NUM_LEVELS} positive widths")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ConfigError(f"model.keep_ratio must lie in (0, 1], got {self.keep_ratio}")

    @property
    def grid_h(self) -> int:
        return self.image_size[0] // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_size[1] // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def fuse_level(self) -> int:
        """CNN level whose spatial extents equal the token grid."""
        return int(round(math.log2(self.patch_size))) - 1

    def defm_level(self, position: int) -> int:
        """CNN level feeding the fusion block at `position` within defm_layers."""
        return min(position, self.fuse_level)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["defm_layers"] = list(self.defm_layers)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model settings: {unknown}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model settings: {exc}") from exc

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """512x512 input, 16x16 patches, 8 heads, depth 12, gates before 3, 6 and 9."""
        return cls(image_size=(512, 512), patch_size=16, embed_dim=256, depth=12,
                   num_heads=8, defm_layers=(3, 6, 9), mlp_ratio=4.0)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(image_size=(16, 16), patch_size=8, embed_dim=8, depth=2, num_heads=2,
                   defm_layers=(1,), mlp_ratio=2.0, cnn_channels=(2, 2, 2, 2))


@dataclass
class BackboneOutput:
    tokens: Tensor
    focus: List[FusionOutput] = field(default_factory=list)
    key_mask: Optional[np.ndarray] = None


# ---------------------------------------------------------------------------
# Token layout
# ---------------------------------------------------------------------------

def patchify(image, patch: int) -> Tensor:
    """(B,C,H,W) -> (B, N, C*P*P), patches and pixels both row-major."""
    image = as_tensor(image)
    if image.ndim != 4:
        raise ShapeError(f"patchify expects (B,C,H,W), got {image.shape}")
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    blocks = image.reshape(b, c, gh, patch, gw, patch).permute(0, 2, 4, 1, 3, 5)
    return blocks.reshape(b, gh * gw, c * patch * patch)


def unpatchify(patches: Tensor, patch: int, grid_h: int, grid_w: int, channels: int = 1) -> Tensor:
    b = patches.shape[0]
    blocks = patches.reshape(b, grid_h, grid_w, channels, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return blocks.reshape(b, channels, grid_h * patch, grid_w * patch)


def tokens_to_grid(tokens: Tensor, grid_h: int, grid_w: int) -> Tensor:
    """(B,N,D) -> (B,D,grid_h,grid_w); token k sits at (k // grid_w, k % grid_w)."""
    b, n, d = tokens.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"{n} tokens do not fill a {grid_h}x{grid_w} grid")
    return tokens.reshape(b, grid_h, grid_w, d).permute(0, 3, 1, 2)


def embed(patches: Tensor, projection: Tensor, positional: Tensor) -> Tensor:
    if patches.shape[-1] != projection.shape[0]:
        raise ShapeError(f"patch width {patches.shape[-1]} does not match projection {projection.shape}")
    if positional.shape != (patches.shape[1], projection.shape[1]):
        raise ShapeError(
            f"positional embedding {positional.shape} does not match "
            f"({patches.shape[1]}, {projection.shape[1]})"
        )
    return patches @ projection + positional


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

class PatchEmbedding(Module):
    def __init__(self, rng: np.random.Generator, patch_dim: int, dim: int, num_tokens: int):
        self.projection = Linear(rng, patch_dim, dim, bias=False)
        self.positional = parameter(rng.normal(0.0, PE_STD, size=(num_tokens, dim)), no_decay=True)

    def __call__(self, patches: Tensor) -> Tensor:
        return embed(patches, self.projection.weight, self.positional)


class AttentionBlock(Module):
    """Z' = MHA(Z) + Z, then LN(FFN(LN(Z')) + Z')."""

    def __init__(self, rng: np.random.Generator, dim: int, num_heads: int, mlp_ratio: float):
        if dim % num_heads:
            raise ShapeError(f"embedding width {dim} is not divisible by {num_heads} heads")
        hidden = max(1, int(round(mlp_ratio * dim)))
        self.num_heads = num_heads
        self.w_q = Linear(rng, dim, dim, bias=False)
        self.w_k = Linear(rng, dim, dim, bias=False)
        self.w_v = Linear(rng, dim, dim, bias=False)
        self.w_o = Linear(rng, dim, dim)
        self.ffn_norm = LayerNorm(dim)
        self.ffn_in = Linear(rng, dim, hidden)
        self.ffn_out = Linear(rng, hidden, dim)
        self.out_norm = LayerNorm(dim)

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.num_heads, d // self.num_heads).permute(0, 2, 1, 3)

    def attention_weights(self, z: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        """(B, heads, N, N) attention rows."""
        q, k = self._heads(self.w_q(z)), self._heads(self.w_k(z))
        scale = 1.0 / math.sqrt(z.shape[-1] // self.num_heads)
        scores = (q @ k.transpose(-2, -1)) * scale
        if key_mask is not None:
            scores = scores + np.where(key_mask, 0.0, MASKED_SCORE)[:, None, None, :]
        return softmax(scores, axis=-1)

    def attend(self, z: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        b, n, d = z.shape
        weights = self.attention_weights(z, key_mask)
        mixed = (weights @ self._heads(self.w_v(z))).permute(0, 2, 1, 3).reshape(b, n, d)
        return self.w_o(mixed)

    def __call__(self, z: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
        z_mid = self.attend(z, key_mask) + z
        ffn = self.ffn_out(self.ffn_in(self.ffn_norm(z_mid)).gelu())
        return self.out_norm(ffn + z_mid)


def attention_block(block: AttentionBlock, z: Tensor) -> Tensor:
    return block(z)


def hard_keep_mask(o_hat: Tensor, keep_ratio: float, active: Optional[np.ndarray]) -> np.ndarray:
    """Boolean (B,N): the ceil(keep_ratio*N) most confident tokens among the active ones."""
    keep_prob = o_hat.data[..., KEEP_CHANNEL]
    b, n = keep_prob.shape
    budget = math.ceil(keep_ratio * n)
    if active is None:
        active = np.ones((b, n), dtype=bool)
    ranked = np.where(active, keep_prob, -np.inf)
    mask = np.zeros((b, n), dtype=bool)
    for row in range(b):
        count = min(budget, int(active[row].sum()))
        # stable sort keeps lower token indices first among equal probabilities
        order = np.argsort(-ranked[row], kind="stable")[:count]
        mask[row, order] = True
    return mask


def gather_tokens(tokens: Tensor, index: np.ndarray) -> Tensor:
    """(B,N,D) -> (B,k,D) picking grid positions `index` (B,k) per batch row."""
    rows = np.arange(tokens.shape[0])[:, None]
    return tokens[rows, index]


def scatter_tokens(tokens: Tensor, index: np.ndarray, num_tokens: int) -> Tensor:
    """Inverse of gather_tokens; positions outside `index` come back as zero rows."""
    b, k, d = tokens.shape
    rows = np.arange(b)[:, None]
    slot = np.full((b, num_tokens), k)
    slot[rows, index] = np.arange(k)
    padded = concat([tokens, Tensor(np.zeros((b, 1, d)))], axis=1)
    return padded[rows, slot]


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, config: ModelConfig):
        self.config = config
        p, d = config.patch_size, config.embed_dim
        self.embedding = PatchEmbedding(rng, p * p, d, config.num_tokens)
        self.blocks = [AttentionBlock(rng, d, config.num_heads, config.mlp_ratio)
                       for _ in range(config.depth)]
        self.fusions = [DensityFusion(rng, d, level=config.defm_level(k))
                        for k in range(len(config.defm_layers))]

    def embed_image(self, image) -> Tensor:
        return self.embedding(patchify(image, self.config.patch_size))

    def forward_plain(self, image) -> Tensor:
        """Plain ViT: embedding then every attention block, no gating."""
        z = self.embed_image(image)
        for block in self.blocks:
            z = block(z)
        return z

    def __call__(self, image, masks: Sequence[RefinedMask], mode: Mode) -> BackboneOutput:
        """Hard keep (inferring only) runs later blocks on the kept subset alone.

        The returned tokens always cover the full grid; dropped positions are zero rows.
        """
        layers = self.config.defm_layers
        if len(masks) != len(layers):
            raise ShapeError(
                f"{len(layers)} gated layers need {len(layers)} refined masks, got {len(masks)}"
            )
        n = self.config.num_tokens
        z = self.embed_image(image)
        focus: List[FusionOutput] = []
        key_mask: Optional[np.ndarray] = None
        # grid positions of the rows of z once tokens have been dropped
        index: Optional[np.ndarray] = None
        hard = self.config.hard_keep and mode is Mode.INFERRING
        for i, block in enumerate(self.blocks):
            if i in layers:
                k = layers.index(i)
                grid = z if index is None else scatter_tokens(z, index, n)
                out = self.fusions[k](grid, masks[k], mode)
                focus.append(out)
                if hard:
                    key_mask = hard_keep_mask(out.o_hat, self.config.keep_ratio, key_mask)
                    index = np.stack([np.flatnonzero(row) for row in key_mask])
                    z = gather_tokens(out.tokens, index)
                    logger.debug("layer %d keeps %d of %d tokens", i, index.shape[1], n)
                else:
                    z = out.tokens
            z = block(z)
        if index is not None:
            z = scatter_tokens(z, index, n)
        return BackboneOutput(tokens=z, focus=focus, key_mask=key_mask)


class FinalFusion(Module):
    """Fold tokens back onto the grid, concatenate the matching CNN level, 1x1 conv to D."""

    def __init__(self, rng: np.random.Generator, dim: int, cnn_channels: int):
        self.conv = Conv2d(rng, dim + cnn_channels, dim, 1)

    def __call__(self, tokens: Tensor, feature: Tensor, grid_h: int, grid_w: int) -> Tensor:
        if feature.shape[2:] != (grid_h, grid_w):
            raise ShapeError(
                f"CNN level {feature.shape[2:]} does not match the {grid_h}x{grid_w} token grid"
            )
        grid = tokens_to_grid(tokens, grid_h, grid_w)
        return self.conv(concat([grid, feature], axis=1))


def fuse_final(fusion: FinalFusion, tokens: Tensor, feature: Tensor, grid_h: int,
               grid_w: int) -> Tensor:
    return fusion(tokens, feature, grid_h, grid_w)
