"""Round-level measurements and their CSV / JSON serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .compressors import CompressorSpec, compress
from .errors import FedEFError, UndefinedRatioError
from .param_space import ParamVector
from .problems import Problem

CSV_HEADER = ("round", "grad_norm_sq", "train_loss", "bits_up_cum", "bits_down_cum",
              "q_a_sq", "participants", "restarts")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    grad_norm_sq: float
    train_loss: float
    bits_up_cum: int
    bits_down_cum: int
    q_a_sq: float | None
    participants: int
    restarts: int

    def row(self) -> list[str]:
        return [
            str(self.round),
            fmt_float(self.grad_norm_sq),
            fmt_float(self.train_loss),
            str(self.bits_up_cum),
            str(self.bits_down_cum),
            "" if self.q_a_sq is None else fmt_float(self.q_a_sq),
            str(self.participants),
            str(self.restarts),
        ]


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _discrepancy(compressed: np.ndarray, adjusted: np.ndarray) -> float:
    mean_true = adjusted.mean(axis=0)
    denom = float(np.dot(mean_true, mean_true))
    if denom == 0.0:
        raise UndefinedRatioError("mean adjusted update is zero; q_A undefined")
    diff = compressed.mean(axis=0) - mean_true
    return float(np.dot(diff, diff)) / denom


def measure_q_a(adjusted_updates: Sequence[ParamVector], spec: CompressorSpec,
                rng: np.random.Generator | None = None) -> float:
    """Squared discrepancy between the average of compressions and the true average.

    ``|mean_i C(u_i) - mean_i u_i|^2 / |mean_i u_i|^2``.
    """
    if not adjusted_updates:
        raise ValueError("need at least one update")
    adjusted = np.stack([u.values for u in adjusted_updates])
    compressed = np.stack([compress(spec, u, rng).materialize().values for u in adjusted_updates])
    return _discrepancy(compressed, adjusted)


def q_a_from_messages(decoded: Sequence[np.ndarray], adjusted: Sequence[np.ndarray]) -> float | None:
    """Same ratio from already-compressed messages; ``None`` when undefined."""
    try:
        return _discrepancy(np.stack(decoded), np.stack(adjusted))
    except UndefinedRatioError:
        return None


def grad_metrics(problem: Problem, theta: ParamVector) -> tuple[float, float]:
    """Exact full-data ``(|grad f(theta)|^2, f(theta))``."""
    g = problem.global_gradient(theta).values
    return float(np.dot(g, g)), problem.global_loss(theta)


def write_csv(records: Iterable[RoundRecord], path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for rec in records:
                w.writerow(rec.row())
    except OSError as exc:
        raise FedEFError(f"cannot write metrics CSV to {path}: {exc}") from exc
    return path


def read_csv(path: str | Path) -> list[RoundRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise FedEFError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            RoundRecord(
                round=int(r["round"]),
                grad_norm_sq=float(r["grad_norm_sq"]),
                train_loss=float(r["train_loss"]),
                bits_up_cum=int(r["bits_up_cum"]),
                bits_down_cum=int(r["bits_down_cum"]),
                q_a_sq=float(r["q_a_sq"]) if r["q_a_sq"] else None,
                participants=int(r["participants"]),
                restarts=int(r["restarts"]),
            )
            for r in reader
        ]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def write_summary_json(summary: dict, path: str | Path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise FedEFError(f"cannot write summary JSON to {path}: {exc}") from exc
    return path
