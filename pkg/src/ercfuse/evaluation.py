"""Metrics, timing capture, reference baselines, and report serialization.

Reports are versioned JSON (schema ``erc-fuse-report/1``).  The embedded
reference baselines are published accuracy and wall-clock numbers for
transformer text models, self-supervised audio models, and their two-member
ensemble on the SemEval-2024 Task 3 emotion corpus; they anchor comparison
output and are informational only, never a pass/fail gate (the timings in
particular are tied to unknown hardware).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, TypeVar

import numpy as np

from .classifiers import PredictionTable
from .corpus import LabelSet

REPORT_SCHEMA = "erc-fuse-report/1"

BASELINE_SOURCE = (
    "published baselines: transformer text models, self-supervised audio "
    "models, and their late-fusion ensemble on the SemEval-2024 Task 3 "
    "emotion corpus (Friends)"
)


@dataclass(frozen=True)
class Baseline:
    accuracy: float
    execution_seconds: float | None


# Read-only reference table; values exactly as published.
REFERENCE_BASELINES: MappingProxyType = MappingProxyType(
    {
        "RoBERTa": Baseline(0.5068, 74.6),
        "DistilBERT": Baseline(0.4982, 51.25),
        "DeBERTa": Baseline(0.4829, 21.56),
        "DistilRoBERTa": Baseline(0.4183, 5.61),
        "HuBERT": Baseline(0.3108, 113.6),
        "Wav2Vec2": Baseline(0.3543, 87.25),
        "Wav2Vec2-large-robust": Baseline(0.3254, 97.32),
        "ensemble": Baseline(0.6297, None),
    }
)


@dataclass
class EvaluationReport:
    """Metrics for one model over one evaluation set."""

    model_name: str
    n: int
    accuracy: float
    macro_f1: float
    labels: tuple[str, ...]
    per_label: dict[str, dict[str, float]]
    confusion: list[list[int]]
    timing_seconds: float | None = None
    config_hash: str = ""
    seed: int = 0
    reference_comparison: dict | None = None

    def __post_init__(self) -> None:
        total = sum(sum(row) for row in self.confusion)
        if total != self.n:
            raise ValueError(f"confusion entries sum to {total}, expected n={self.n}")
        trace = sum(self.confusion[i][i] for i in range(len(self.confusion)))
        if self.n > 0 and abs(self.accuracy - trace / self.n) > 1e-12:
            raise ValueError(
                f"accuracy {self.accuracy} inconsistent with trace/n {trace / self.n}"
            )


def _check_id_maps(pred: dict[str, int], gold: dict[str, int]) -> None:
    if not pred:
        raise ValueError("prediction map is empty")
    diff = set(pred) ^ set(gold)
    if diff:
        raise ValueError(f"prediction/gold id sets differ: {sorted(diff)[:5]}")


def accuracy(pred: dict[str, int], gold: dict[str, int]) -> float:
    """Fraction of ids whose predicted label index equals the gold index."""
    _check_id_maps(pred, gold)
    correct = sum(1 for utt_id in pred if pred[utt_id] == gold[utt_id])
    return correct / len(pred)


def confusion_matrix(
    pred: dict[str, int], gold: dict[str, int], label_set: LabelSet
) -> np.ndarray:
    """Count matrix, entry ``(g, p)`` = ids with gold g predicted p."""
    _check_id_maps(pred, gold)
    n = len(label_set)
    matrix = np.zeros((n, n), dtype=np.int64)
    for utt_id in pred:
        matrix[gold[utt_id], pred[utt_id]] += 1
    return matrix


def per_label_scores(
    pred: dict[str, int], gold: dict[str, int], label_set: LabelSet
) -> dict[str, dict[str, float]]:
    """Precision, recall, and F1 per label (zero-denominator scores are 0)."""
    matrix = confusion_matrix(pred, gold, label_set)
    scores: dict[str, dict[str, float]] = {}
    for i, label in enumerate(label_set):
        tp = float(matrix[i, i])
        fp = float(matrix[:, i].sum() - tp)
        fn = float(matrix[i, :].sum() - tp)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = (
            2.0 * precision * recall / (precision + recall)
            if precision + recall > 0
            else 0.0
        )
        scores[label] = {"precision": precision, "recall": recall, "f1": f1}
    return scores


def macro_f1(pred: dict[str, int], gold: dict[str, int], label_set: LabelSet) -> float:
    """Unweighted mean of per-label F1 over the whole label set.

    A label absent from both pred and gold still contributes F1 = 0; the
    zero-division convention is harsh but standard and monotone-safe.
    """
    scores = per_label_scores(pred, gold, label_set)
    return sum(s["f1"] for s in scores.values()) / len(label_set)


T = TypeVar("T")


def measure(block: Callable[..., T], *args: Any, **kwargs: Any) -> tuple[T, float]:
    """Run ``block`` and return ``(result, wall_seconds)`` (monotonic clock)."""
    start = time.perf_counter()
    result = block(*args, **kwargs)
    return result, time.perf_counter() - start


def evaluate_predictions(
    table: PredictionTable,
    gold: dict[str, int],
    config_hash: str = "",
    seed: int = 0,
) -> EvaluationReport:
    """Score a prediction table (argmax decisions) against gold indices."""
    pred = table.argmax()
    _check_id_maps(pred, gold)
    label_set = table.label_set
    matrix = confusion_matrix(pred, gold, label_set)
    return EvaluationReport(
        model_name=table.model_name,
        n=len(pred),
        accuracy=accuracy(pred, gold),
        macro_f1=macro_f1(pred, gold, label_set),
        labels=label_set.labels,
        per_label=per_label_scores(pred, gold, label_set),
        confusion=[[int(v) for v in row] for row in matrix],
        timing_seconds=table.timing_seconds,
        config_hash=config_hash,
        seed=seed,
    )


def compare_to_reference(
    report: EvaluationReport,
    baselines: MappingProxyType | dict = REFERENCE_BASELINES,
) -> dict:
    """Informational comparison against the embedded reference baselines.

    When the report's model name matches a baseline, the record carries the
    accuracy delta; otherwise the full baseline table is attached for
    context.  Never raises and never mutates its inputs.
    """
    record: dict = {"model_name": report.model_name, "source": BASELINE_SOURCE}
    baseline = baselines.get(report.model_name)
    if baseline is not None:
        record["matched"] = True
        record["baseline_accuracy"] = baseline.accuracy
        record["accuracy_delta"] = report.accuracy - baseline.accuracy
        record["baseline_execution_seconds"] = baseline.execution_seconds
    else:
        record["matched"] = False
        record["baseline_table"] = {
            name: {
                "accuracy": b.accuracy,
                "execution_seconds": b.execution_seconds,
            }
            for name, b in baselines.items()
        }
    return record


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def write_report(report: EvaluationReport, path: str | Path) -> None:
    """Write a report as schema-versioned JSON; round-trips losslessly."""
    payload = {
        "schema": REPORT_SCHEMA,
        "model_name": report.model_name,
        "n": report.n,
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
        "labels": list(report.labels),
        "per_label": report.per_label,
        "confusion": report.confusion,
        "timing_seconds": report.timing_seconds,
        "config_hash": report.config_hash,
        "seed": report.seed,
        "reference_comparison": report.reference_comparison,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")


def read_report(path: str | Path) -> EvaluationReport:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    schema = raw.get("schema")
    if schema != REPORT_SCHEMA:
        raise ValueError(
            f"{path}: unsupported report schema {schema!r}, expected {REPORT_SCHEMA!r}"
        )
    return EvaluationReport(
        model_name=raw["model_name"],
        n=int(raw["n"]),
        accuracy=float(raw["accuracy"]),
        macro_f1=float(raw["macro_f1"]),
        labels=tuple(raw["labels"]),
        per_label=raw["per_label"],
        confusion=[[int(v) for v in row] for row in raw["confusion"]],
        timing_seconds=raw["timing_seconds"],
        config_hash=raw["config_hash"],
        seed=int(raw["seed"]),
        reference_comparison=raw.get("reference_comparison"),
    )


def confusion_to_csv(report: EvaluationReport, path: str | Path) -> None:
    """Export the confusion matrix as CSV (rows gold, columns predicted)."""
    lines = ["gold\\predicted," + ",".join(report.labels)]
    for label, row in zip(report.labels, report.confusion):
        lines.append(label + "," + ",".join(str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_summary(report: EvaluationReport) -> str:
    """Plain-text summary table for terminal display."""
    lines = [
        f"model:     {report.model_name}",
        f"n:         {report.n}",
        f"accuracy:  {report.accuracy:.4f}",
        f"macro-F1:  {report.macro_f1:.4f}",
    ]
    if report.timing_seconds is not None:
        lines.append(f"time (s):  {report.timing_seconds:.3f}")
    lines.append("")
    lines.append(f"{'label':<12} {'precision':>9} {'recall':>9} {'f1':>9}")
    for label in report.labels:
        s = report.per_label[label]
        lines.append(
            f"{label:<12} {s['precision']:>9.4f} {s['recall']:>9.4f} {s['f1']:>9.4f}"
        )
    comparison = report.reference_comparison
    if comparison and comparison.get("matched"):
        lines.append("")
        lines.append(
            f"vs baseline {comparison['model_name']!r}: "
            f"{comparison['baseline_accuracy']:.4f} published, "
            f"delta {comparison['accuracy_delta']:+.4f}"
        )
    return "\n".join(lines)
