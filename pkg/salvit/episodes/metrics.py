from __future__ import annotations
import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ParameterError

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["run_hash", "command", "step", "episode", "name", "value"]
PREDICTION_COLUMNS = ["run_hash", "episode", "query", "keypoint_type", "x", "y",
                      "sigma_xx", "sigma_xy", "sigma_yy", "score", "correct"]


def box_size(box: Sequence[float]) -> float:
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ParameterError(f"object box must have positive size, got {box}")
    return max(w, h)


def pck(pred: np.ndarray, gt: np.ndarray, box: Sequence[float], tau: float = 0.1) -> bool:
    """Correct when ||pred - gt|| <= tau * max(box width, box height)."""
    d = float(np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))
    return d <= tau * box_size(box)


def pck_score(flags: Iterable[bool]) -> float:
    flags = list(flags)
    if not flags:
        logger.warning("PCK over an empty prediction set; reporting 0")
        return 0.0
    return 100.0 * sum(bool(f) for f in flags) / len(flags)


def ne(pred: np.ndarray, gt: np.ndarray, width: float, height: float) -> float:
    """Normalised error: distance over the longer image side."""
    d = float(np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)))
    return d / max(width, height)


def harmonic(a: float, b: float) -> float:
    return 0.0 if a + b <= 0 else 2.0 * a * b / (a + b)


class _AppendCSV:
    columns: list[str] = []

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.columns)

    def _append(self, rows: Iterable[Sequence]) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerows(rows)

    def read(self) -> list[dict[str, str]]:
        with open(self.path, newline="") as f:
            return list(csv.DictReader(f))


class MetricsLog(_AppendCSV):
    """Long-format metrics, one (step, episode, name, value) row each, shared by every command."""
    columns = METRIC_COLUMNS

    def __init__(self, path: Path, run_hash: str, command: str):
        super().__init__(path)
        self.run_hash = run_hash
        self.command = command

    def log(self, name: str, value: float, step: int = -1, episode: int = -1) -> None:
        self._append([[self.run_hash, self.command, step, episode, name, f"{float(value):.10g}"]])

    def log_many(self, values: dict[str, float], step: int = -1, episode: int = -1) -> None:
        self._append([[self.run_hash, self.command, step, episode, k, f"{float(v):.10g}"] for k, v in values.items()])


class PredictionLog(_AppendCSV):
    columns = PREDICTION_COLUMNS

    def __init__(self, path: Path, run_hash: str):
        super().__init__(path)
        self.run_hash = run_hash

    def log(self, episode: int, query: int, type_id: int, x: np.ndarray, sigma: np.ndarray,
            score: float, correct: bool) -> None:
        self._append([[self.run_hash, episode, query, type_id, f"{x[0]:.6f}", f"{x[1]:.6f}",
                       f"{sigma[0, 0]:.6g}", f"{sigma[0, 1]:.6g}", f"{sigma[1, 1]:.6g}",
                       f"{score:.6g}", int(bool(correct))]])
