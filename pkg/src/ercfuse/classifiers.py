"""Unimodal probabilistic classifiers.

Two prediction sources share one output currency (per-utterance probability
distributions over the label set):

* a from-scratch multinomial softmax-regression model trained by mini-batch
  gradient descent, for desk-scale text and audio features, and
* an adapter that loads per-utterance probability rows exported by external
  heavy models (transformer text encoders, self-supervised speech models).

Training is fully deterministic given the inputs and config; shuffling uses
the pinned generator from :mod:`ercfuse.rng`, never global random state.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import LabelSet
from .rng import Xorshift64Star, mix_seed

MODEL_SCHEMA = "erc-fuse-model/1"

# Componentwise tolerance for "sums to one" on produced distributions.
DISTRIBUTION_SUM_TOL = 1e-6
# Rows from external exports are renormalized when |sum - 1| is within this
# tolerance (rounded decimals are common) and rejected beyond it.
EXTERNAL_SUM_TOL = 1e-4


class PredictionFormatError(ValueError):
    """Raised for malformed external prediction files."""


def check_distribution(vec: np.ndarray, *, tol: float = DISTRIBUTION_SUM_TOL) -> np.ndarray:
    """Validate simplex invariants and return the vector as float64.

    Components must be finite, inside [0, 1], and sum to 1 within ``tol``.
    """
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"distribution must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("distribution contains non-finite components")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"distribution components outside [0, 1]: {arr}")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"distribution sums to {total}, expected 1 +/- {tol}")
    return arr


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch gradient-descent settings.

    ``class_weighting`` switches on inverse-frequency example weights
    (``n_samples / (n_classes_present * count(label))``) for workflows that
    optimize class-balanced metrics; the default matches plain accuracy.
    """

    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    l2: float = 1e-4
    seed: int = 0
    shuffle: bool = True
    class_weighting: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.l2 < 0.0:
            raise ValueError(f"l2 must be non-negative, got {self.l2}")


@dataclass
class SoftmaxModel:
    """Linear softmax classifier: ``p = softmax(W x + b)``.

    ``loss_trace`` holds the full-dataset training loss at initialization
    followed by one entry per epoch, for convergence reporting.
    """

    weights: np.ndarray
    bias: np.ndarray
    label_set: LabelSet
    feature_dim: int
    loss_trace: list[float] = field(default_factory=list)
    train_seconds: float | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        n_labels = len(self.label_set)
        if self.weights.shape != (n_labels, self.feature_dim):
            raise ValueError(
                f"weights shape {self.weights.shape} != ({n_labels}, {self.feature_dim})"
            )
        if self.bias.shape != (n_labels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({n_labels},)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("model parameters must be finite")


@dataclass
class PredictionTable:
    """Per-utterance probability rows produced by one model."""

    model_name: str
    label_set: LabelSet
    rows: dict[str, np.ndarray]
    timing_seconds: float | None = None

    def __post_init__(self) -> None:
        n = len(self.label_set)
        for utt_id, row in self.rows.items():
            checked = check_distribution(row)
            if len(checked) != n:
                raise ValueError(
                    f"row {utt_id!r} has {len(checked)} components, expected {n}"
                )
            self.rows[utt_id] = checked

    def __len__(self) -> int:
        return len(self.rows)

    def ids(self) -> set[str]:
        return set(self.rows)

    def argmax(self) -> dict[str, int]:
        """Predicted label index per utterance (ties to the lowest index)."""
        return {utt_id: int(np.argmax(row)) for utt_id, row in self.rows.items()}


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _as_batch(
    features: np.ndarray, labels: np.ndarray, feature_dim: int
) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != feature_dim:
        raise ValueError(f"feature matrix shape {x.shape} incompatible with dim {feature_dim}")
    if y.shape != (x.shape[0],):
        raise ValueError(f"labels shape {y.shape} != ({x.shape[0]},)")
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite features")
    return x, y


def loss_and_gradient(
    model: SoftmaxModel,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 0.0,
    sample_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy loss and its exact analytic gradient over a batch.

    ``loss = mean_i w_i * (-ln p_i(gold_i)) + (l2 / 2) * ||W||^2`` with the
    weighted mean normalized by ``sum(w)`` (plain mean when weights are
    omitted).  Softmax uses max-subtraction for stability.  The bias is not
    regularized.  Returns ``(loss, grad_weights, grad_bias)``.
    """
    x, y = _as_batch(features, labels, model.feature_dim)
    n_labels = len(model.label_set)
    if np.any(y < 0) or np.any(y >= n_labels):
        raise ValueError("label index out of range")

    if sample_weights is None:
        w = np.full(len(y), 1.0 / len(y))
    else:
        sw = np.asarray(sample_weights, dtype=np.float64)
        if sw.shape != y.shape or np.any(sw < 0) or sw.sum() <= 0:
            raise ValueError("sample_weights must be non-negative with positive sum")
        w = sw / sw.sum()

    logits = x @ model.weights.T + model.bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    data_loss = float(-(w * log_probs[np.arange(len(y)), y]).sum())
    loss = data_loss + 0.5 * l2 * float((model.weights**2).sum())

    probs = np.exp(log_probs)
    delta = probs.copy()
    delta[np.arange(len(y)), y] -= 1.0
    delta *= w[:, None]
    grad_w = delta.T @ x + l2 * model.weights
    grad_b = delta.sum(axis=0)
    return loss, grad_w, grad_b


def _class_weights(labels: np.ndarray, n_labels: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_labels).astype(np.float64)
    present = counts > 0
    weights = np.zeros(n_labels)
    weights[present] = len(labels) / (present.sum() * counts[present])
    return weights


def train_softmax(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    label_set: LabelSet,
) -> SoftmaxModel:
    """Train softmax regression with mini-batch gradient descent.

    Parameters start at zero (the objective is convex, and zero init makes
    the initial loss exactly ``ln(n_labels)`` on unweighted data).  When
    ``cfg.shuffle`` is set, example order is reshuffled every epoch from a
    stream seeded by ``cfg.seed``.  ``loss_trace`` records the full-dataset
    loss at init and after each epoch.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    x, y = _as_batch(x, labels, x.shape[1])
    n_labels = len(label_set)
    if np.any(y < 0) or np.any(y >= n_labels):
        raise ValueError("label index out of range for the label set")
    missing = [label_set.labels[i] for i in range(n_labels) if not np.any(y == i)]
    if missing:
        import warnings

        warnings.warn(
            f"no training examples for labels: {missing}", stacklevel=2
        )

    start = time.perf_counter()
    model = SoftmaxModel(
        weights=np.zeros((n_labels, x.shape[1])),
        bias=np.zeros(n_labels),
        label_set=label_set,
        feature_dim=x.shape[1],
    )
    per_class = _class_weights(y, n_labels) if cfg.class_weighting else None
    example_weights = per_class[y] if per_class is not None else None

    def full_loss() -> float:
        loss, _, _ = loss_and_gradient(model, x, y, cfg.l2, example_weights)
        return loss

    trace = [full_loss()]
    rng = Xorshift64Star(mix_seed(cfg.seed, "train_softmax"))
    order = list(range(len(y)))
    for _ in range(cfg.epochs):
        if cfg.shuffle:
            rng.shuffle(order)
        for start_idx in range(0, len(order), cfg.batch_size):
            batch = order[start_idx : start_idx + cfg.batch_size]
            bw = example_weights[batch] if example_weights is not None else None
            _, grad_w, grad_b = loss_and_gradient(model, x[batch], y[batch], cfg.l2, bw)
            model.weights = model.weights - cfg.learning_rate * grad_w
            model.bias = model.bias - cfg.learning_rate * grad_b
        trace.append(full_loss())

    model.loss_trace = trace
    model.train_seconds = time.perf_counter() - start
    return model


def predict_proba(model: SoftmaxModel, x: np.ndarray) -> np.ndarray:
    """Probability distribution ``softmax(W x + b)`` for one feature vector."""
    vec = np.asarray(x, dtype=np.float64)
    if vec.shape != (model.feature_dim,):
        raise ValueError(f"feature shape {vec.shape} != ({model.feature_dim},)")
    logits = (model.weights @ vec + model.bias)[None, :]
    return _softmax_rows(logits)[0]


def predict_table(
    model: SoftmaxModel, features: dict[str, np.ndarray], name: str
) -> PredictionTable:
    """Predict every utterance in ``features``; wall time goes to ``timing``."""
    start = time.perf_counter()
    rows = {utt_id: predict_proba(model, vec) for utt_id, vec in features.items()}
    elapsed = time.perf_counter() - start
    return PredictionTable(
        model_name=name, label_set=model.label_set, rows=rows, timing_seconds=elapsed
    )


# ---------------------------------------------------------------------------
# Prediction file format (CSV + optional JSON sidecar)
# ---------------------------------------------------------------------------


def _sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".json")


def save_predictions(table: PredictionTable, path: str | Path) -> None:
    """Write a prediction table as ``id,<label1>,...,<labelN>`` CSV.

    Rows are sorted by utterance id; probabilities are written as shortest
    round-trip decimal literals.  Model name and timing go to a JSON sidecar
    next to the CSV.
    """
    path = Path(path)
    lines = ["id," + ",".join(table.label_set.labels)]
    for utt_id in sorted(table.rows):
        probs = ",".join(repr(float(p)) for p in table.rows[utt_id])
        lines.append(f"{utt_id},{probs}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    sidecar = {"model_name": table.model_name}
    if table.timing_seconds is not None:
        sidecar["timing_seconds"] = table.timing_seconds
    _sidecar_path(path).write_text(json.dumps(sidecar), encoding="utf-8")


def load_external_predictions(path: str | Path, label_set: LabelSet) -> PredictionTable:
    """Load a prediction CSV, permuting columns to ``label_set`` order.

    Header labels may appear in any order but must cover the label set
    exactly.  Row sums within ``1 +/- 1e-4`` are renormalized to 1 (external
    exports usually round); sums outside that tolerance, duplicate ids, and
    unknown header labels are rejected with the offending value named.
    """
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise PredictionFormatError(f"{path}: empty prediction file")

    header = [h.strip() for h in lines[0].split(",")]
    if not header or header[0] != "id":
        raise PredictionFormatError(f"{path}: header must start with 'id'")
    file_labels = header[1:]
    for lbl in file_labels:
        if lbl not in label_set:
            raise PredictionFormatError(f"{path}: unknown label {lbl!r} in header")
    missing = [lbl for lbl in label_set if lbl not in file_labels]
    if missing:
        raise PredictionFormatError(f"{path}: missing label columns {missing}")
    if len(file_labels) != len(label_set):
        raise PredictionFormatError(f"{path}: duplicate label columns in header")
    # Column i of the output takes the file column holding label_set[i].
    perm = [file_labels.index(lbl) for lbl in label_set]

    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise PredictionFormatError(
                f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}"
            )
        utt_id = parts[0].strip()
        if utt_id in rows:
            raise PredictionFormatError(f"{path}:{lineno}: duplicate utterance id {utt_id!r}")
        try:
            values = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise PredictionFormatError(f"{path}:{lineno}: {exc}") from exc
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise PredictionFormatError(
                f"{path}:{lineno}: row {utt_id!r} has negative or non-finite entries"
            )
        total = float(values.sum())
        if abs(total - 1.0) > EXTERNAL_SUM_TOL:
            raise PredictionFormatError(
                f"{path}:{lineno}: row {utt_id!r} sums to {total}, "
                f"outside 1 +/- {EXTERNAL_SUM_TOL}"
            )
        rows[utt_id] = (values / total)[perm]

    model_name = path.stem
    timing = None
    sidecar = _sidecar_path(path)
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        model_name = meta.get("model_name", model_name)
        timing = meta.get("timing_seconds")

    return PredictionTable(
        model_name=model_name, label_set=label_set, rows=rows, timing_seconds=timing
    )


# ---------------------------------------------------------------------------
# Model serialization
# ---------------------------------------------------------------------------


def save_model(model: SoftmaxModel, path: str | Path, config_hash: str = "") -> None:
    """Persist a model as versioned JSON (row-major weights)."""
    payload = {
        "schema": MODEL_SCHEMA,
        "labels": list(model.label_set.labels),
        "feature_dim": model.feature_dim,
        "weights": [[float(v) for v in row] for row in model.weights],
        "bias": [float(v) for v in model.bias],
        "config_hash": config_hash,
        "loss_trace": [float(v) for v in model.loss_trace],
        "train_seconds": model.train_seconds,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_model(path: str | Path) -> SoftmaxModel:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    schema = raw.get("schema")
    if schema != MODEL_SCHEMA:
        raise ValueError(f"{path}: unsupported model schema {schema!r}, expected {MODEL_SCHEMA!r}")
    return SoftmaxModel(
        weights=np.array(raw["weights"], dtype=np.float64),
        bias=np.array(raw["bias"], dtype=np.float64),
        label_set=LabelSet(tuple(raw["labels"])),
        feature_dim=int(raw["feature_dim"]),
        loss_trace=[float(v) for v in raw.get("loss_trace", [])],
        train_seconds=raw.get("train_seconds"),
    )
