"""Finite-difference gradient checks for the autodiff core and every model component.

Relative error per coordinate is |a - n| / max(1, |a|, |n|) for analytic a and
central-difference n; a check passes when its maximum stays below 1e-4.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .cnn import FeatureCNN
from .defm import DensityFusion
from .density import MaskRefiner, RefinedMask, density_batch
from .detect import DetectionHead, detection_loss
from .errors import ConfigError, NumericError
from .functional import avg_pool2d, conv2d, layer_norm, log_softmax, softmax
from .geometry import RotatedBox
from .layers import Mode
from .model import DenseTokModel
from .tensor import Tensor, concat, no_grad, parameter
from .vit import AttentionBlock, ModelConfig

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
TIGHT = 1e-7
FD_EPS = 1e-6
EPS_RANGE = (1e-7, 1e-3)


class CheckLevel(Enum):
    PASS = "pass"
    MARGINAL = "marginal"
    FAIL = "fail"


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    level: CheckLevel
    coordinates: int


def classify(err: float) -> CheckLevel:
    if err < TIGHT:
        return CheckLevel.PASS
    if err < TOLERANCE:
        return CheckLevel.MARGINAL
    return CheckLevel.FAIL


def level_color(level: CheckLevel) -> str:
    return {
        CheckLevel.PASS: "densetok.success",
        CheckLevel.MARGINAL: "densetok.warning",
        CheckLevel.FAIL: "densetok.error",
    }.get(level, "white")


def _coordinates(shape: Tuple[int, ...], samples: Optional[int],
                 rng: np.random.Generator) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape)) if shape else 1
    flat = np.arange(size) if samples is None or samples >= size else rng.choice(size, samples, replace=False)
    return [tuple(int(i) for i in np.unravel_index(k, shape)) if shape else () for k in sorted(flat)]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = FD_EPS,
               samples: Optional[int] = None, seed: int = 0,
               corrupt: bool = False) -> Tuple[float, int]:
    """Compare backprop against central differences; returns (max rel err, coordinates checked).

    `corrupt` perturbs the analytic gradient and exists as a negative control.
    """
    low, high = EPS_RANGE
    if not low <= eps <= high:
        raise ConfigError(f"gradient check step {eps} must lie in [{low}, {high}]")
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        logger.error("gradient check: non-finite loss %s", loss.data)
        raise NumericError("gradient check: loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if corrupt:
        analytic = [a + 0.1 * (1.0 + np.abs(a)) for a in analytic]
    worst, count = 0.0, 0
    with no_grad():
        for p, grad in zip(params, analytic):
            for idx in _coordinates(p.shape, samples, rng):
                original = p.data[idx]
                p.data[idx] = original + eps
                up = f().item()
                p.data[idx] = original - eps
                down = f().item()
                p.data[idx] = original
                numeric = (up - down) / (2.0 * eps)
                if not (np.isfinite(numeric) and np.isfinite(grad[idx])):
                    logger.error("gradient check: non-finite gradient at %s", idx)
                    raise NumericError(f"gradient check: non-finite gradient at {idx}")
                a = float(grad[idx])
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
                count += 1
    for p in params:
        p.zero_grad()
    return worst, count


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

def _tiny_boxes() -> List[List[RotatedBox]]:
    return [
        [RotatedBox(4.3, 5.1, 5.0, 2.5, 0.3), RotatedBox(11.7, 10.2, 6.0, 3.0, -0.7)],
        [RotatedBox(9.4, 3.6, 4.0, 2.2, 1.1)],
    ]


def _check_primitives(rng: np.random.Generator):
    a = parameter(rng.uniform(0.5, 1.5, size=(3, 4)))
    b = parameter(rng.normal(size=(4, 2)))
    c = parameter(rng.normal(size=(3, 1)))

    def f() -> Tensor:
        x = (a.log() + a.sqrt() * c.tanh()) / (1.0 + a.exp())
        y = concat([x.sin(), x.cos().sigmoid()], axis=0) @ b
        z = y.gelu() ** 2 + y[1:4].clip(-0.5, 0.5).sum(axis=0, keepdims=True)
        return z.mean() - (x * c).sum()

    return f, [a, b, c]


def _check_functional(rng: np.random.Generator):
    x = parameter(rng.normal(size=(2, 3, 8, 8)))
    k = parameter(rng.normal(size=(4, 3, 3, 3)) * 0.3)
    gamma = parameter(rng.normal(size=4))

    def f() -> Tensor:
        y = avg_pool2d(conv2d(x, k, stride=2, pad=1), 2)
        t = y.permute(0, 2, 3, 1)
        return (softmax(layer_norm(t, gamma), axis=-1) * log_softmax(t, axis=-1)).sum()

    return f, [x, k, gamma]


def _check_cnn(rng: np.random.Generator):
    cnn = FeatureCNN(rng, (2, 2, 2, 2))
    image = Tensor(rng.uniform(size=(1, 1, 16, 16)))
    stage = cnn.stages[0]
    return (lambda: (stage(image) ** 2).sum()), stage.parameters()


def _check_refine(rng: np.random.Generator):
    refiner = MaskRefiner(1)
    feature = parameter(rng.normal(size=(2, 3, 8, 8)))
    density = density_batch(_tiny_boxes(), 16, 16)
    for conv in refiner.train_convs:
        conv.weight.data[...] = rng.uniform(0.2, 0.6, size=conv.weight.shape)

    def f() -> Tensor:
        mask = refiner.refine(0, density, feature, 2, 2, Mode.TRAINING)
        raw = refiner.inference_raw(0, feature, 2, 2)
        return (mask.values * mask.values).sum() + (raw * raw).sum()

    return f, refiner.parameters() + [feature]


def _check_attention(rng: np.random.Generator):
    block = AttentionBlock(rng, 8, 2, 2.0)
    z = parameter(rng.normal(size=(2, 4, 8)))
    return (lambda: (block(z) * Tensor(np.linspace(-1, 1, 8))).sum()), block.parameters() + [z]


def _check_defm(rng: np.random.Generator):
    block = DensityFusion(rng, 8)
    z = parameter(rng.normal(size=(2, 4, 8)))
    mask_values = parameter(rng.uniform(0.1, 0.9, size=(2, 2, 2)))

    def f() -> Tensor:
        mask = RefinedMask(level=0, grid_h=2, grid_w=2, values=mask_values, raw=mask_values)
        out = block(z, mask, Mode.TRAINING)
        return (out.tokens ** 2).sum() + out.o_hat[..., 1].sum()

    return f, block.parameters() + [z, mask_values]


def _check_head(rng: np.random.Generator):
    head = DetectionHead(rng, 8)
    fused = parameter(rng.normal(size=(2, 8, 2, 2)))
    boxes = _tiny_boxes()
    return (lambda: detection_loss(head(fused), boxes, 8).total), head.parameters() + [fused]


def _check_model(rng: np.random.Generator):
    model = DenseTokModel(ModelConfig.tiny(), seed=int(rng.integers(1 << 31)))
    images = rng.uniform(size=(2, 1, 16, 16))
    boxes = _tiny_boxes()
    return (lambda: model.training_step_loss(images, boxes).total), model.parameters()


SUITE = [
    ("tensor.primitives", _check_primitives, None),
    ("functional.conv_pool_norm", _check_functional, 12),
    ("cnn.stage", _check_cnn, 6),
    ("dam.refine", _check_refine, 8),
    ("vit.attention_block", _check_attention, 6),
    ("defm.forward", _check_defm, 6),
    ("detect.loss", _check_head, 8),
    ("model.end_to_end", _check_model, 2),
]


def run_suite(seed: int = 0, corrupt: bool = False,
              names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    results: List[CheckResult] = []
    for index, (name, build, samples) in enumerate(SUITE):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, index])
        f, params = build(rng)
        err, count = grad_check(f, params, samples=samples, seed=seed, corrupt=corrupt)
        level = classify(err)
        if level is CheckLevel.FAIL:
            logger.error("gradient check %s failed: max rel err %.3e", name, err)
        else:
            logger.debug("gradient check %s: max rel err %.3e over %d coordinates", name, err, count)
        results.append(CheckResult(name=name, max_rel_err=err, level=level, coordinates=count))
    return results


def suite_passed(results: Sequence[CheckResult]) -> bool:
    return all(r.level is not CheckLevel.FAIL for r in results)
