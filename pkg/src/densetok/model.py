"""The full detector: CNN branch, mask refinement, gated ViT, final fusion and head."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .cnn import FeatureCNN, PyramidFeatures
from .density import MaskRefiner, RefinedMask, density_batch, pool_mask_to_tokens
from .detect import (
    DENSITY_WEIGHT,
    FOCUS_WEIGHT,
    Detection,
    DetectionHead,
    HeadOutput,
    LossBreakdown,
    decode_detections,
    detection_loss,
)
from .errors import ConfigError, DataError, ShapeError
from .geometry import RotatedBox
from .layers import Mode, Module
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor, as_tensor, no_grad
from .vit import Backbone, FinalFusion, ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    head: HeadOutput
    tokens: Tensor
    features: PyramidFeatures
    masks: List[RefinedMask] = field(default_factory=list)
    focus_probs: List[Tensor] = field(default_factory=list)
    focus_logits: List[Tensor] = field(default_factory=list)
    density_raw: List[Tensor] = field(default_factory=list)
    density_targets: List[np.ndarray] = field(default_factory=list)


class DenseTokModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.cnn = FeatureCNN(rng, config.cnn_channels)
        self.refiner = MaskRefiner(len(config.defm_layers))
        self.backbone = Backbone(rng, config)
        self.fusion = FinalFusion(rng, config.embed_dim, config.cnn_channels[config.fuse_level])
        self.head = DetectionHead(rng, config.embed_dim)
        self.meta: Dict[str, Any] = {}

    def _check_images(self, images) -> Tensor:
        images = as_tensor(images)
        expected = (1,) + self.config.image_size
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"model expects images of shape (B, {', '.join(map(str, expected))}), "
                             f"got {images.shape}")
        return images

    def refine_masks(self, features: PyramidFeatures, density: Optional[np.ndarray],
                     mode: Mode) -> List[RefinedMask]:
        cfg = self.config
        return [
            self.refiner.refine(k, density, features[cfg.defm_level(k)], cfg.grid_h, cfg.grid_w, mode)
            for k in range(len(cfg.defm_layers))
        ]

    def forward(self, images, mode: Mode, density: Optional[np.ndarray] = None) -> ModelOutput:
        """`density` is the (B,H,W) coarse map; required when training, never read when inferring."""
        cfg = self.config
        images = self._check_images(images)
        if mode is Mode.TRAINING and cfg.defm_layers and density is None:
            raise ShapeError("training forward needs the coarse density maps")
        features = self.cnn(images)
        masks = self.refine_masks(features, density, mode)
        encoded = self.backbone(images, masks, mode)
        fused = self.fusion(encoded.tokens, features[cfg.fuse_level], cfg.grid_h, cfg.grid_w)
        out = ModelOutput(
            head=self.head(fused),
            tokens=encoded.tokens,
            features=features,
            masks=masks,
            focus_probs=[f.o_hat for f in encoded.focus],
            focus_logits=[f.logits for f in encoded.focus],
        )
        if mode is Mode.TRAINING and cfg.defm_layers:
            target = pool_mask_to_tokens(np.clip(density, 0.0, 1.0), cfg.patch_size)
            for k in range(len(cfg.defm_layers)):
                raw = self.refiner.inference_raw(k, features[cfg.defm_level(k)], cfg.grid_h, cfg.grid_w)
                out.density_raw.append(raw[:, 0])
                out.density_targets.append(target)
        return out

    __call__ = forward

    def loss(self, output: ModelOutput, gt_boxes: Sequence[Sequence[RotatedBox]],
             focus_weight: float = FOCUS_WEIGHT,
             density_weight: float = DENSITY_WEIGHT) -> LossBreakdown:
        return detection_loss(
            output.head, gt_boxes, self.config.patch_size,
            focus_logits=output.focus_logits, masks=output.masks,
            density_raw=output.density_raw, density_targets=output.density_targets,
            focus_weight=focus_weight, density_weight=density_weight,
        )

    def training_step_loss(self, images, gt_boxes: Sequence[Sequence[RotatedBox]],
                           focus_weight: float = FOCUS_WEIGHT,
                           density_weight: float = DENSITY_WEIGHT) -> LossBreakdown:
        h, w = self.config.image_size
        density = density_batch(gt_boxes, h, w)
        return self.loss(self.forward(images, Mode.TRAINING, density), gt_boxes,
                         focus_weight, density_weight)

    def detect(self, images, score_thresh: float, nms_iou: float) -> List[List[Detection]]:
        with no_grad():
            out = self.forward(images, Mode.INFERRING)
        return decode_detections(out.head, self.config.patch_size, score_thresh, nms_iou)

    # -- persistence --------------------------------------------------------

    def save(self, path: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
        return save_checkpoint(path, self.state_dict(), self.config.to_dict(), meta)

    @classmethod
    def load(cls, path: Union[str, Path], expected: Optional[ModelConfig] = None) -> "DenseTokModel":
        state, model_dict, meta = load_checkpoint(path)
        try:
            config = ModelConfig.from_dict(model_dict)
        except ConfigError as exc:
            raise DataError(f"checkpoint {path} carries an invalid model config: {exc}") from exc
        if expected is not None and expected != config:
            raise DataError(
                f"checkpoint {path} was trained with a different model config: "
                f"{config.to_dict()} vs {expected.to_dict()}"
            )
        model = cls(config)
        model.load_state_dict(state)
        model.meta = meta
        logger.debug("loaded %s (%d parameters)", path, model.num_parameters())
        return model
