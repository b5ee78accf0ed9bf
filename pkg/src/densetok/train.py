"""Training loop and model evaluation."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, write_effective_config
from .data import Scene, augment
from .density import density_batch
from .detect import Detection, EvalReport, evaluate
from .errors import DataError, NumericError
from .geometry import RotatedBox
from .layers import Mode
from .model import DenseTokModel
from .optim import AdamW, lr_schedule
from .runlog import EvalHistory, MetricsLog

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
LAST_GOOD_NAME = "checkpoint_last_good.ckpt"
METRICS_NAME = "metrics.csv"
EVAL_NAME = "eval.jsonl"


def _detect_one(model: DenseTokModel, scene: Scene, score_thresh: float,
                nms_iou: float) -> List[Detection]:
    return model.detect(scene.image[None], score_thresh, nms_iou)[0]


def detect_scenes(model: DenseTokModel, scenes: Sequence[Scene], score_thresh: float,
                  nms_iou: float, workers: int = 1) -> List[List[Detection]]:
    """Detections per scene, one image per forward pass so results do not depend on `workers`."""
    if workers <= 1 or len(scenes) <= 1:
        return [_detect_one(model, s, score_thresh, nms_iou) for s in scenes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: _detect_one(model, s, score_thresh, nms_iou), scenes))


def evaluate_model(model: DenseTokModel, scenes: Sequence[Scene], class_names: Sequence[str],
                   score_thresh: float, nms_iou: float, workers: int = 1,
                   iou_thresh: float = 0.5) -> EvalReport:
    detections = detect_scenes(model, scenes, score_thresh, nms_iou, workers)
    pairs: List[Tuple[List[RotatedBox], List[RotatedBox]]] = [
        ([d.box for d in dets], list(scene.boxes)) for dets, scene in zip(detections, scenes)
    ]
    return evaluate(pairs, class_names, iou_thresh)


@dataclass
class TrainResult:
    checkpoint: Path
    iterations: int
    losses: List[Dict[str, float]] = field(default_factory=list)
    evals: List[EvalReport] = field(default_factory=list)


class Trainer:
    """Single-threaded loop: sample, augment, forward, loss, backward, clipped AdamW step."""

    def __init__(self, run: RunConfig, train_scenes: Sequence[Scene],
                 val_scenes: Sequence[Scene] = (), model: Optional[DenseTokModel] = None):
        self.run = run
        self.train_scenes = list(train_scenes)
        self.val_scenes = list(val_scenes)
        self.model = model or DenseTokModel(run.model, seed=run.seed)
        self.optimizer = AdamW(self.model.named_parameters(), run.optim)
        self.out = run.paths.out
        self._rng = np.random.default_rng([run.seed, 1])
        h, w = run.model.image_size
        for scene in self.train_scenes + self.val_scenes:
            if (scene.height, scene.width) != (h, w):
                raise DataError(f"scene {scene.id} is {scene.height}x{scene.width}, model expects {h}x{w}")

    def _batch(self) -> Tuple[np.ndarray, List[List[RotatedBox]]]:
        n = len(self.train_scenes)
        size = self.run.train.batch_size
        picks = self._rng.choice(n, size=size, replace=n < size)
        scenes = [self.train_scenes[i] for i in picks]
        if self.run.train.flip_aug:
            scenes = [augment(s, self._rng) for s in scenes]
        return np.stack([s.image for s in scenes]), [list(s.boxes) for s in scenes]

    def _save(self, name: str, iteration: int, extra: Optional[Dict] = None) -> Path:
        meta = {"iteration": iteration, "seed": self.run.seed}
        meta.update(extra or {})
        return self.model.save(self.out / name, meta)

    def _abort(self, iteration: int, reason: str) -> None:
        path = self._save(LAST_GOOD_NAME, iteration - 1)
        logger.error("iteration %d: %s; last good weights saved to %s", iteration, reason, path)
        raise NumericError(f"iteration {iteration}: {reason} (last good checkpoint: {path})")

    def evaluate(self, iteration: int, history: EvalHistory) -> EvalReport:
        cfg = self.run.train
        report = evaluate_model(self.model, self.val_scenes, self.run.synth.class_names,
                                cfg.score_thresh, cfg.nms_iou, cfg.workers)
        history.add(iteration, "val", report.to_json())
        logger.info("iter %d: val mAP %s, recall %s", iteration, report.mAP, report.recall)
        return report

    def fit(self, on_step: Optional[Callable[[int, Dict[str, float]], None]] = None) -> TrainResult:
        run, cfg = self.run, self.run.train
        write_effective_config(run, self.out)
        (self.out / EVAL_NAME).unlink(missing_ok=True)
        metrics = MetricsLog(self.out / METRICS_NAME)
        history = EvalHistory(self.out / EVAL_NAME)
        result = TrainResult(checkpoint=self.out / CHECKPOINT_NAME, iterations=cfg.iters)
        if cfg.iters and not self.train_scenes:
            raise DataError("training needs at least one scene")
        h, w = run.model.image_size
        for t in range(1, cfg.iters + 1):
            images, boxes = self._batch()
            lr = lr_schedule(t, run.optim)
            self.optimizer.zero_grad()
            density = density_batch(boxes, h, w)
            output = self.model.forward(images, Mode.TRAINING, density)
            loss = self.model.loss(output, boxes, cfg.focus_weight, cfg.density_weight)
            values = loss.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                self._abort(t, f"non-finite loss {values}")
            loss.total.backward()
            try:
                self.optimizer.step(lr)
            except NumericError as exc:
                self._abort(t, str(exc))
            metrics.append(t, lr, values)
            result.losses.append(dict(values, lr=lr))
            if on_step is not None:
                on_step(t, values)
            if cfg.eval_every and self.val_scenes and t % cfg.eval_every == 0:
                result.evals.append(self.evaluate(t, history))
        meta = {"iterations": cfg.iters}
        if result.evals:
            meta["val"] = result.evals[-1].to_json()
        self._save(CHECKPOINT_NAME, cfg.iters, meta)
        logger.info("saved %s after %d iterations", result.checkpoint, cfg.iters)
        return result
