"""Density-enhanced fusion: mask-weighted global context and per-token focusing probabilities.

Pipeline for a token sequence Z (B,N,C) and a token mask m (B,N):

    LN -> GELU -> split channels into local / global halves
    G = sum_n(Z_glob * m) / sum_n(m)            (per channel)
    Z' = [Z_loc, G repeated over tokens]
    Z* = Z' * m  (training only)
    O  = softmax(linear(GELU(linear(LN(Z*)))))  (B,N,2), channel 0 = keep

The focus is applied to the block input Z, not to the normalized copy.
"""
from dataclasses import dataclass

import numpy as np

from .density import RefinedMask
from .errors import ShapeError
from .functional import softmax
from .layers import LayerNorm, Linear, Mode, Module
from .tensor import Tensor, concat, split

KEEP_CHANNEL = 0
POOL_EPS = 1e-6


@dataclass
class FusionOutput:
    o_hat: Tensor
    logits: Tensor
    tokens: Tensor


def channel_split(z: Tensor):
    channels = z.shape[-1]
    if channels % 2:
        raise ShapeError(f"channel split needs an even channel count, got {channels}")
    z_loc, z_glob = split(z, 2, axis=-1)
    return z_loc, z_glob


def broadcast_mask(token_mask: Tensor, c_half: int) -> Tensor:
    b, n = token_mask.shape
    return token_mask.reshape(b, n, 1).broadcast_to((b, n, c_half))


def masked_global_pool(z_glob: Tensor, weights: Tensor) -> Tensor:
    """Mask-weighted token mean per channel, (B,N,C/2) -> (B,C/2)."""
    if z_glob.shape != weights.shape:
        raise ShapeError(f"pool weights {weights.shape} do not match tokens {z_glob.shape}")
    numerator = (z_glob * weights).sum(axis=1)
    denominator = weights.sum(axis=1)
    guard = np.where(denominator.data == 0.0, POOL_EPS, 0.0)
    return numerator / (denominator + guard)


def fuse(z_loc: Tensor, pooled: Tensor) -> Tensor:
    b, n, c_half = z_loc.shape
    if pooled.shape != (b, pooled.shape[-1]):
        raise ShapeError(f"pooled context {pooled.shape} does not match tokens {z_loc.shape}")
    repeated = pooled.reshape(b, 1, pooled.shape[-1]).broadcast_to((b, n, pooled.shape[-1]))
    return concat([z_loc, repeated], axis=-1)


def train_modulate(z: Tensor, token_mask: Tensor, mode: Mode) -> Tensor:
    if mode is not Mode.TRAINING:
        return z
    b, n = token_mask.shape
    return z * token_mask.reshape(b, n, 1)


def apply_focus(z: Tensor, o_hat: Tensor) -> Tensor:
    """Scale each token by its keep probability."""
    if o_hat.shape[:-1] != z.shape[:-1] or o_hat.shape[-1] != 2:
        raise ShapeError(f"focus {o_hat.shape} does not match tokens {z.shape}")
    return z * o_hat[..., KEEP_CHANNEL:KEEP_CHANNEL + 1]


class DensityFusion(Module):
    """One fusion block, inserted before a gated attention layer."""

    def __init__(self, rng: np.random.Generator, dim: int, level: int = 0):
        if dim % 2:
            raise ShapeError(f"fusion block needs an even embedding width, got {dim}")
        self.level = level
        self.pre_norm = LayerNorm(dim)
        self.out_norm = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim // 2)
        self.fc2 = Linear(rng, dim // 2, 2)

    def focusing_logits(self, z_star: Tensor) -> Tensor:
        return self.fc2(self.fc1(self.out_norm(z_star)).gelu())

    def focusing_probability(self, z_star: Tensor):
        logits = self.focusing_logits(z_star)
        return softmax(logits, axis=-1), logits

    def __call__(self, z: Tensor, mask: RefinedMask, mode: Mode) -> FusionOutput:
        b, n, c = z.shape
        token_mask = mask.tokens()
        if token_mask.shape != (b, n):
            raise ShapeError(
                f"mask grid {mask.grid_h}x{mask.grid_w} does not match {n} tokens"
            )
        h = self.pre_norm(z).gelu()
        z_loc, z_glob = channel_split(h)
        pooled = masked_global_pool(z_glob, broadcast_mask(token_mask, c // 2))
        z_star = train_modulate(fuse(z_loc, pooled), token_mask, mode)
        o_hat, logits = self.focusing_probability(z_star)
        return FusionOutput(o_hat=o_hat, logits=logits, tokens=apply_focus(z, o_hat))


def defm_forward(block: DensityFusion, z: Tensor, mask: RefinedMask, mode: Mode) -> FusionOutput:
    return block(z, mask, mode)
