"""Run orchestration: ingest, split, featurize, train, predict, fuse, evaluate.

A run is driven by one JSON config file (plus CLI flag overrides) and writes
a self-describing artifact set under its output directory::

    out/
      config.json                  resolved semantic config + config_hash
      split.json                   seeded train/test assignment
      vocab.json                   tf-idf vocabulary (text modality)
      features/<key>/*.json        cached audio feature vectors
      models/<name>.json           trained softmax models
      predictions/<name>.csv       per-model probability tables (+ sidecars)
      reports/<name>.report.json   evaluation reports with baseline deltas

Every artifact is stamped with the config hash and seed, and each stage is
independently re-runnable from the artifacts of the previous one.  Given the
same config (seeds included) the artifact bytes are identical across runs,
except for wall-clock timing fields.

Weight search, when requested, never touches the test split: member models
are fitted on 90% of the training split and scored on the held-out 10%
slice (external tables are restricted to that slice), the searched weights
are then applied to final models retrained on the full training split.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio_dsp, classifiers, evaluation, fusion, text_features
from .audio_dsp import FeatureCache, FrameConfig
from .classifiers import PredictionTable, SoftmaxModel, TrainConfig
from .corpus import Corpus, SplitAssignment, load_manifest, stratified_split, subset
from .rng import mix_seed

SPLIT_SCHEMA = "erc-fuse-split/1"
CONFIG_SCHEMA = "erc-fuse-config/1"

TEXT_MODEL_NAME = "text_softmax"
AUDIO_MODEL_NAME = "audio_softmax"
MODALITIES = ("text", "audio")

FUSION_SEARCH = "search"
SEARCH_HOLDOUT_RATIO = 0.9  # fit on 90% of train, search weights on the rest


class ConfigError(ValueError):
    """Raised when a run config is structurally or semantically invalid."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _parse_train_config(raw: dict, default_seed: int) -> TrainConfig:
    known = {
        "learning_rate",
        "epochs",
        "batch_size",
        "l2",
        "seed",
        "shuffle",
        "class_weighting",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**{"seed": default_seed, **raw})


def _parse_frame_config(raw: dict) -> tuple[FrameConfig, int]:
    raw = dict(raw)
    target_rate = int(raw.pop("target_rate", 16000))
    known = {
        "frame_length",
        "hop",
        "n_fft",
        "n_mels",
        "n_mfcc",
        "pre_emphasis",
        "fmin",
        "fmax",
        "log_floor",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown audio config keys: {sorted(unknown)}")
    return FrameConfig(**raw), target_rate


@dataclass
class RunConfig:
    """Fully resolved run configuration (paths absolute, defaults applied)."""

    manifest: Path
    out_dir: Path
    split_ratio: float = 0.8
    split_seed: int = 42
    frame: FrameConfig = field(default_factory=FrameConfig)
    target_rate: int = 16000
    text_min_df: int = text_features.DEFAULT_MIN_DF
    text_max_terms: int = text_features.DEFAULT_MAX_TERMS
    train: dict[str, TrainConfig] = field(default_factory=dict)
    fusion_method: str | None = None
    fusion_weights: tuple[float, ...] | None = None
    fusion_step: float = 0.05
    fusion_name: str | None = None
    external_predictions: tuple[tuple[str, Path], ...] = ()
    jobs: int = 1

    @classmethod
    def from_file(
        cls,
        path: str | Path,
        *,
        seed: int | None = None,
        out_dir: str | Path | None = None,
        jobs: int | None = None,
    ) -> "RunConfig":
        """Load a config file; explicit flag values win over file values."""
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a JSON object")
        base = path.parent

        known = {
            "manifest",
            "out_dir",
            "split",
            "audio",
            "text",
            "train",
            "fusion",
            "external_predictions",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
        if "manifest" not in raw:
            raise ConfigError(f"{path}: config must name a 'manifest'")

        split = raw.get("split", {})
        split_seed = int(split.get("seed", 42))
        train_raw = raw.get("train", {})
        unknown_modalities = set(train_raw) - set(MODALITIES)
        if unknown_modalities:
            raise ConfigError(f"{path}: unknown train modalities: {sorted(unknown_modalities)}")
        if seed is not None:
            split_seed = seed

        train = {}
        for modality in MODALITIES:
            if modality in train_raw:
                default_seed = seed if seed is not None else 0
                train[modality] = _parse_train_config(train_raw[modality], default_seed)

        fusion_raw = raw.get("fusion")
        fusion_method = None
        fusion_weights = None
        fusion_step = 0.05
        fusion_name = None
        if fusion_raw is not None:
            if not isinstance(fusion_raw, dict) or "method" not in fusion_raw:
                raise ConfigError(f"{path}: 'fusion' must be an object with a 'method'")
            fusion_method = fusion_raw["method"]
            if "weights" in fusion_raw and fusion_raw["weights"] is not None:
                fusion_weights = tuple(float(w) for w in fusion_raw["weights"])
            fusion_step = float(fusion_raw.get("step", 0.05))
            fusion_name = fusion_raw.get("name")

        externals = []
        for entry in raw.get("external_predictions", []):
            if not isinstance(entry, dict) or "path" not in entry:
                raise ConfigError(
                    f"{path}: external_predictions entries need at least a 'path'"
                )
            ext_path = (base / entry["path"]).resolve()
            name = entry.get("name", Path(entry["path"]).stem)
            externals.append((str(name), ext_path))

        resolved_out = out_dir if out_dir is not None else raw.get("out_dir", "run_output")
        frame, target_rate = _parse_frame_config(raw.get("audio", {}))
        text_raw = raw.get("text", {})

        cfg = cls(
            manifest=(base / raw["manifest"]).resolve(),
            out_dir=Path(resolved_out).resolve(),
            split_ratio=float(split.get("ratio", 0.8)),
            split_seed=split_seed,
            frame=frame,
            target_rate=target_rate,
            text_min_df=int(text_raw.get("min_df", text_features.DEFAULT_MIN_DF)),
            text_max_terms=int(text_raw.get("max_terms", text_features.DEFAULT_MAX_TERMS)),
            train=train,
            fusion_method=fusion_method,
            fusion_weights=fusion_weights,
            fusion_step=fusion_step,
            fusion_name=fusion_name,
            external_predictions=tuple(externals),
            jobs=jobs if jobs is not None else 1,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"split ratio must be in (0, 1), got {self.split_ratio}")
        if not self.manifest.is_file():
            raise ConfigError(f"manifest not found: {self.manifest}")
        for name, path in self.external_predictions:
            if not path.is_file():
                raise ConfigError(f"external prediction file for {name!r} not found: {path}")
        names = [n for n, _ in self.external_predictions]
        if len(set(names)) != len(names):
            raise ConfigError(f"external prediction names must be distinct: {names}")

        n_members = len(self.train) + len(self.external_predictions)
        if n_members == 0:
            raise ConfigError("config declares no trained modalities and no external predictions")
        if self.fusion_method is not None:
            valid = (*fusion.FUSION_METHODS, FUSION_SEARCH)
            if self.fusion_method not in valid:
                raise ConfigError(
                    f"unknown fusion method {self.fusion_method!r}; use one of {valid}"
                )
            if n_members < 2:
                raise ConfigError(
                    f"fusion method {self.fusion_method!r} requires at least 2 member "
                    f"tables, config provides {n_members}"
                )
            if self.fusion_weights is not None and len(self.fusion_weights) != n_members:
                raise ConfigError(
                    f"fusion declares {len(self.fusion_weights)} weights for "
                    f"{n_members} members"
                )

    def semantic_dict(self) -> dict:
        """The canonical config content that determines run results.

        Excludes execution details (output directory, job count) so the hash
        identifies the experiment, not where or how fast it ran.
        """
        out: dict = {
            "schema": CONFIG_SCHEMA,
            "manifest": str(self.manifest),
            "split": {"ratio": self.split_ratio, "seed": self.split_seed},
            "audio": {
                "target_rate": self.target_rate,
                "frame_length": self.frame.frame_length,
                "hop": self.frame.hop,
                "n_fft": self.frame.n_fft,
                "n_mels": self.frame.n_mels,
                "n_mfcc": self.frame.n_mfcc,
                "pre_emphasis": self.frame.pre_emphasis,
                "fmin": self.frame.fmin,
                "fmax": self.frame.fmax,
                "log_floor": self.frame.log_floor,
            },
            "text": {"min_df": self.text_min_df, "max_terms": self.text_max_terms},
            "train": {
                modality: {
                    "learning_rate": cfg.learning_rate,
                    "epochs": cfg.epochs,
                    "batch_size": cfg.batch_size,
                    "l2": cfg.l2,
                    "seed": cfg.seed,
                    "shuffle": cfg.shuffle,
                    "class_weighting": cfg.class_weighting,
                }
                for modality, cfg in sorted(self.train.items())
            },
            "external_predictions": [
                {"name": name, "path": str(path)}
                for name, path in self.external_predictions
            ],
        }
        if self.fusion_method is not None:
            fusion_out: dict = {"method": self.fusion_method}
            if self.fusion_weights is not None:
                fusion_out["weights"] = [float(w) for w in self.fusion_weights]
            if self.fusion_method == FUSION_SEARCH:
                fusion_out["step"] = self.fusion_step
            if self.fusion_name is not None:
                fusion_out["name"] = self.fusion_name
            out["fusion"] = fusion_out
        return out

    def config_hash(self) -> str:
        canonical = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Split artifact
# ---------------------------------------------------------------------------


def save_split(split: SplitAssignment, path: str | Path, config_hash: str = "") -> None:
    payload = {
        "schema": SPLIT_SCHEMA,
        "ratio": split.ratio,
        "seed": split.seed,
        "train_ids": sorted(split.train_ids),
        "test_ids": sorted(split.test_ids),
        "config_hash": config_hash,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")


def load_split(path: str | Path) -> SplitAssignment:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("schema") != SPLIT_SCHEMA:
        raise ValueError(f"{path}: unsupported split schema {raw.get('schema')!r}")
    return SplitAssignment(
        train_ids=frozenset(raw["train_ids"]),
        test_ids=frozenset(raw["test_ids"]),
        seed=int(raw["seed"]),
        ratio=float(raw["ratio"]),
    )


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------


def text_feature_map(
    corpus: Corpus, ids: set[str] | frozenset[str], vocab: text_features.Vocabulary
) -> dict[str, np.ndarray]:
    """tf-idf vectors for the given utterance ids."""
    by_id = corpus.by_id()
    return {
        utt_id: text_features.tfidf_vector(text_features.tokenize(by_id[utt_id].text), vocab)
        for utt_id in sorted(ids)
    }


def audio_feature_map(
    corpus: Corpus,
    ids: set[str] | frozenset[str],
    frame: FrameConfig,
    target_rate: int,
    cache: FeatureCache | None = None,
    jobs: int = 1,
) -> dict[str, np.ndarray]:
    """Pooled MFCC vectors for the ids that reference decodable audio.

    Ids without an audio reference are silently absent from the result (the
    alignment report is the place that flags them); a reference that fails
    to decode raises.
    """
    by_id = corpus.by_id()
    todo: list[tuple[str, Path]] = []
    result: dict[str, np.ndarray] = {}
    for utt_id in sorted(ids):
        utt = by_id[utt_id]
        path = corpus.resolve_audio(utt)
        if path is None:
            continue
        if cache is not None:
            cached = cache.get(utt_id)
            if cached is not None:
                result[utt_id] = cached
                continue
        todo.append((utt_id, path))

    def extract(item: tuple[str, Path]) -> tuple[str, np.ndarray]:
        utt_id, path = item
        wave = audio_dsp.read_wav(path)
        return utt_id, audio_dsp.extract_features(wave, frame, target_rate)

    if jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            extracted = list(pool.map(extract, todo))
    else:
        extracted = [extract(item) for item in todo]

    for utt_id, vec in extracted:
        result[utt_id] = vec
        if cache is not None:
            cache.put(utt_id, vec)
    return dict(sorted(result.items()))


# ---------------------------------------------------------------------------
# Modality training
# ---------------------------------------------------------------------------


def _train_text(
    corpus: Corpus,
    train_ids: frozenset[str],
    predict_ids: frozenset[str],
    cfg: RunConfig,
    train_cfg: TrainConfig,
    vocab: text_features.Vocabulary | None = None,
) -> tuple[SoftmaxModel, PredictionTable, text_features.Vocabulary]:
    by_id = corpus.by_id()
    if vocab is None:
        train_tokens = [
            text_features.tokenize(by_id[utt_id].text) for utt_id in sorted(train_ids)
        ]
        vocab = text_features.build_vocabulary(
            train_tokens, min_df=cfg.text_min_df, max_terms=cfg.text_max_terms
        )
    gold = corpus.gold_indices()
    train_feats = text_feature_map(corpus, train_ids, vocab)
    x = np.vstack([train_feats[i] for i in sorted(train_ids)])
    y = np.array([gold[i] for i in sorted(train_ids)])
    model = classifiers.train_softmax(x, y, train_cfg, corpus.label_set)
    table = classifiers.predict_table(
        model, text_feature_map(corpus, predict_ids, vocab), TEXT_MODEL_NAME
    )
    return model, table, vocab


def _train_audio(
    corpus: Corpus,
    train_ids: frozenset[str],
    predict_ids: frozenset[str],
    cfg: RunConfig,
    train_cfg: TrainConfig,
    cache: FeatureCache | None,
) -> tuple[SoftmaxModel, PredictionTable]:
    gold = corpus.gold_indices()
    train_feats = audio_feature_map(
        corpus, train_ids, cfg.frame, cfg.target_rate, cache, cfg.jobs
    )
    if not train_feats:
        raise ValueError("audio training requested but no training utterance has audio")
    keys = sorted(train_feats)
    x = np.vstack([train_feats[i] for i in keys])
    y = np.array([gold[i] for i in keys])
    model = classifiers.train_softmax(x, y, train_cfg, corpus.label_set)
    predict_feats = audio_feature_map(
        corpus, predict_ids, cfg.frame, cfg.target_rate, cache, cfg.jobs
    )
    table = classifiers.predict_table(model, predict_feats, AUDIO_MODEL_NAME)
    return model, table


def _restrict(table: PredictionTable, ids: frozenset[str] | set[str]) -> PredictionTable:
    return PredictionTable(
        model_name=table.model_name,
        label_set=table.label_set,
        rows={utt_id: row for utt_id, row in table.rows.items() if utt_id in ids},
        timing_seconds=table.timing_seconds,
    )


def _searched_weights(
    corpus: Corpus,
    split: SplitAssignment,
    cfg: RunConfig,
    externals: list[PredictionTable],
    cache: FeatureCache | None,
) -> tuple[float, ...]:
    """Grid-search fusion weights on a held-out slice of the training split."""
    inner_seed = mix_seed(cfg.split_seed, "weight_search")
    train_corpus = subset(corpus, split.train_ids)
    inner = stratified_split(train_corpus, SEARCH_HOLDOUT_RATIO, inner_seed)
    fit_ids, val_ids = inner.train_ids, inner.test_ids
    if not val_ids:
        raise ValueError("weight-search holdout slice is empty; corpus too small")

    members: list[PredictionTable] = []
    if "text" in cfg.train:
        _, table, _ = _train_text(corpus, fit_ids, val_ids, cfg, cfg.train["text"])
        members.append(table)
    if "audio" in cfg.train:
        _, table = _train_audio(corpus, fit_ids, val_ids, cfg, cfg.train["audio"], cache)
        members.append(table)
    members.extend(_restrict(t, val_ids) for t in externals)

    gold = corpus.gold_indices()
    weights, achieved = fusion.search_weights(
        members, {i: gold[i] for i in val_ids}, cfg.fusion_step
    )
    return weights


# ---------------------------------------------------------------------------
# The full run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    """Artifact paths and reports produced by one pipeline run."""

    out_dir: Path
    config_hash: str
    report_paths: dict[str, Path]
    prediction_paths: dict[str, Path]
    reports: dict[str, evaluation.EvaluationReport]
    fused_weights: tuple[float, ...] | None = None


def _stage(stage_name: str):
    """Decorator tagging a stage so failures name the stage and cause."""

    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage_name, exc) from exc

        return inner

    return wrap


def run_pipeline(cfg: RunConfig) -> RunResult:
    """Execute all configured stages; see the module docstring for layout."""
    cfg.validate()
    config_hash = cfg.config_hash()
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)

    resolved = cfg.semantic_dict()
    resolved["config_hash"] = config_hash
    (out / "config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2), encoding="utf-8"
    )

    corpus = _stage("ingest")(load_manifest)(cfg.manifest)
    gold = corpus.gold_indices()

    cache = FeatureCache(out / "features", cfg.frame.config_key()) if "audio" in cfg.train else None

    externals: list[PredictionTable] = []

    @_stage("load_external_predictions")
    def _load_externals() -> None:
        for name, path in cfg.external_predictions:
            table = classifiers.load_external_predictions(path, corpus.label_set)
            table.model_name = name
            externals.append(table)

    _load_externals()

    needs_split = bool(cfg.train) or cfg.fusion_method == FUSION_SEARCH
    split: SplitAssignment | None = None
    if needs_split:
        split = _stage("split")(stratified_split)(corpus, cfg.split_ratio, cfg.split_seed)
        save_split(split, out / "split.json", config_hash)

    # Evaluation scope: the test split when one exists, else every labeled id.
    if split is not None:
        eval_ids = split.test_ids
    else:
        eval_ids = frozenset(gold)

    tables: dict[str, PredictionTable] = {}
    models: dict[str, SoftmaxModel] = {}

    if "text" in cfg.train:
        assert split is not None

        @_stage("train_text")
        def _do_text() -> None:
            model, table, vocab = _train_text(
                corpus, split.train_ids, split.test_ids, cfg, cfg.train["text"]
            )
            text_features.save_vocabulary(vocab, out / "vocab.json")
            models[TEXT_MODEL_NAME] = model
            tables[TEXT_MODEL_NAME] = table

        _do_text()

    if "audio" in cfg.train:
        assert split is not None

        @_stage("train_audio")
        def _do_audio() -> None:
            model, table = _train_audio(
                corpus, split.train_ids, split.test_ids, cfg, cfg.train["audio"], cache
            )
            models[AUDIO_MODEL_NAME] = model
            tables[AUDIO_MODEL_NAME] = table

        _do_audio()

    for table in externals:
        tables[table.model_name] = _restrict(table, eval_ids) if split is not None else table

    models_dir = out / "models"
    if models:
        models_dir.mkdir(exist_ok=True)
        for name in sorted(models):
            classifiers.save_model(models[name], models_dir / f"{name}.json", config_hash)

    # Fusion over the deterministic member order: trained text, trained
    # audio, then externals in config order.
    member_order = [n for n in (TEXT_MODEL_NAME, AUDIO_MODEL_NAME) if n in tables]
    member_order += [name for name, _ in cfg.external_predictions]

    fused_weights: tuple[float, ...] | None = None
    if cfg.fusion_method is not None and len(member_order) >= 2:

        @_stage("fuse")
        def _do_fusion() -> None:
            nonlocal fused_weights
            member_tables = [tables[n] for n in member_order]
            if cfg.fusion_method == FUSION_SEARCH:
                assert split is not None
                fused_weights = _searched_weights(corpus, split, cfg, externals, cache)
                spec = fusion.FusionSpec(
                    method=fusion.METHOD_WEIGHTED_AVERAGE,
                    member_names=tuple(member_order),
                    weights=fused_weights,
                )
            elif cfg.fusion_method == fusion.METHOD_VOTE:
                spec = fusion.FusionSpec(
                    method=fusion.METHOD_VOTE, member_names=tuple(member_order)
                )
            else:
                spec = fusion.FusionSpec(
                    method=fusion.METHOD_WEIGHTED_AVERAGE,
                    member_names=tuple(member_order),
                    weights=cfg.fusion_weights,
                )
                fused_weights = spec.weights
            fused = fusion.fuse_tables(member_tables, spec)
            if cfg.fusion_name:
                fused.model_name = cfg.fusion_name
            tables[fused.model_name] = fused

        _do_fusion()

    predictions_dir = out / "predictions"
    predictions_dir.mkdir(exist_ok=True)
    prediction_paths: dict[str, Path] = {}

    @_stage("save_predictions")
    def _save_tables() -> None:
        for name in sorted(tables):
            path = predictions_dir / f"{_stem_for(name)}.csv"
            classifiers.save_predictions(tables[name], path)
            prediction_paths[name] = path

    _save_tables()

    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    reports: dict[str, evaluation.EvaluationReport] = {}
    report_paths: dict[str, Path] = {}

    @_stage("evaluate")
    def _do_evaluate() -> None:
        for name in sorted(tables):
            table = tables[name]
            table_gold = {utt_id: gold[utt_id] for utt_id in table.rows if utt_id in gold}
            missing = table.ids() - set(table_gold)
            if missing:
                raise ValueError(
                    f"no gold label for ids in table {name!r}: {sorted(missing)[:5]}"
                )
            report = evaluation.evaluate_predictions(
                table, table_gold, config_hash=config_hash, seed=cfg.split_seed
            )
            report.reference_comparison = evaluation.compare_to_reference(report)
            path = reports_dir / f"{_stem_for(name)}.report.json"
            evaluation.write_report(report, path)
            reports[name] = report
            report_paths[name] = path

    _do_evaluate()

    return RunResult(
        out_dir=out,
        config_hash=config_hash,
        report_paths=report_paths,
        prediction_paths=prediction_paths,
        reports=reports,
        fused_weights=fused_weights,
    )


def _stem_for(name: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name) or "model"
