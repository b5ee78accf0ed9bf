"""Run records: per-iteration metrics CSV and the JSONL evaluation history."""
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "lr", "total", "objectness", "box_reg", "focus_aux", "density_aux")


class MetricsLog:
    """Append-only CSV of training metrics, header written once."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(METRIC_COLUMNS)

    def append(self, iteration: int, lr: float, losses: Dict[str, float]) -> None:
        row = [iteration, repr(lr)] + [repr(float(losses[c])) for c in METRIC_COLUMNS[2:]]
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(row)

    def rows(self) -> List[Dict[str, float]]:
        return read_metrics(self.path)


def read_metrics(path: Union[str, Path]) -> List[Dict[str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


@dataclass
class EvalEntry:
    iteration: int
    split: str
    mAP: Optional[float]
    recall: Optional[float]
    per_class: Dict[str, Optional[float]] = field(default_factory=dict)
    timestamp: float = 0.0


class EvalHistory:
    """JSONL-backed evaluation history, one line per evaluation."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._entries: List[EvalEntry] = []
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        for line in self.path.read_text(encoding="utf-8").splitlines():
            try:
                self._entries.append(EvalEntry(**json.loads(line)))
            except (json.JSONDecodeError, TypeError):
                logger.warning("skipping malformed eval record in %s", self.path)

    def add(self, iteration: int, split: str, report: Dict[str, object]) -> EvalEntry:
        entry = EvalEntry(
            iteration=iteration,
            split=split,
            mAP=report.get("mAP"),
            recall=report.get("recall"),
            per_class=dict(report.get("per_class") or {}),
            timestamp=time.time(),
        )
        self._entries.append(entry)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(asdict(entry)) + "\n")
        return entry

    def latest(self, split: Optional[str] = None) -> Optional[EvalEntry]:
        for entry in reversed(self._entries):
            if split is None or entry.split == split:
                return entry
        return None

    @property
    def entries(self) -> List[EvalEntry]:
        return list(self._entries)
