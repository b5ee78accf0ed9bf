"""AdamW with decoupled weight decay, global-norm clipping and a warmup+cosine schedule."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr_base: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    lr_min: float = 1e-6
    warmup_iters: int = 1000
    total_iters: int = 2000
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self) -> None:
        self.betas = (float(self.betas[0]), float(self.betas[1]))
        if not 0 < self.lr_min < self.lr_base:
            raise ConfigError(f"optim: need 0 < lr_min < lr_base, got {self.lr_min}, {self.lr_base}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError(f"optim.betas must lie in [0, 1), got {self.betas}")
        if self.total_iters < 0 or self.warmup_iters < 1:
            raise ConfigError("optim: total_iters must be >= 0 and warmup_iters >= 1")
        if self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigError("optim: weight_decay must be >= 0 and clip_norm > 0")

    def effective_warmup(self) -> int:
        """Warmup length, truncated when the run is shorter than the warmup."""
        if self.total_iters >= self.warmup_iters:
            return self.warmup_iters
        return max(1, self.total_iters // 10)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class OptimState:
    config: OptimConfig = field(default_factory=OptimConfig)
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def lr_schedule(step: int, config: OptimConfig) -> float:
    """Linear warmup to lr_base, then cosine annealing to lr_min at total_iters."""
    warmup = config.effective_warmup()
    if step < 0:
        raise ValueError(f"schedule step must be non-negative, got {step}")
    if config.total_iters > 0 and step >= max(config.total_iters, warmup):
        return config.lr_min
    if step < warmup:
        return config.lr_base * max(step, 1) / warmup
    span = config.total_iters - warmup
    if span <= 0:
        return config.lr_base
    progress = (step - warmup) / span
    # the first post-warmup step returns lr_base exactly
    return config.lr_base - (config.lr_base - config.lr_min) * 0.5 * (1.0 - math.cos(math.pi * progress))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most `max_norm`."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """AdamW over named parameters.

    Parameters flagged `no_decay` (positional embeddings, LayerNorm gamma/beta)
    skip the decoupled decay term. Parameters without a gradient are left alone.
    """

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], config: OptimConfig):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        self.state = OptimState(config=config)
        for name, p in self.params:
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)

    @property
    def config(self) -> OptimConfig:
        return self.state.config

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def _check_finite(self) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                logger.error("non-finite gradient in %s", name)
                raise NumericError(f"non-finite gradient in parameter {name}")

    def step(self, lr: float) -> float:
        """Clip, then apply one AdamW update at learning rate `lr`. Returns the pre-clip norm."""
        self._check_finite()
        cfg = self.config
        norm = clip_grad_norm([p for _, p in self.params], cfg.clip_norm)
        self.state.step += 1
        t = self.state.step
        beta1, beta2 = cfg.betas
        correction1 = 1.0 - beta1 ** t
        correction2 = 1.0 - beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self.state.first_moment[name]
            v = self.state.second_moment[name]
            m *= beta1
            m += (1.0 - beta1) * p.grad
            v *= beta2
            v += (1.0 - beta2) * p.grad * p.grad
            if cfg.weight_decay and not p.no_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            m_hat = m / correction1
            v_hat = v / correction2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return norm
