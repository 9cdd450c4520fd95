"""Conversation corpus: data model, manifest loading, alignment, splitting.

A corpus is a flat, ordered list of utterances, each carrying text, an
optional audio reference, and an optional gold emotion label.  Manifests are
JSON files shaped like::

    {
      "labels": ["anger", "joy", ...],          // optional, defaults below
      "utterances": [
        {
          "id": "dia1_utt3",
          "conversation_id": "dia1",
          "speaker": "Ross",
          "text": "We were on a break!",
          "audio": "clips/dia1_utt3.wav",        // or null
          "label": "anger"                       // or null
        },
        ...
      ]
    }

Audio paths are resolved relative to the manifest's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .rng import Xorshift64Star, mix_seed

# Seven-way emotion inventory used when a manifest does not declare its own.
DEFAULT_LABELS = (
    "anger",
    "disgust",
    "fear",
    "joy",
    "sadness",
    "surprise",
    "neutral",
)

DECODABLE_AUDIO_SUFFIXES = (".wav",)


class ManifestError(ValueError):
    """Raised when a manifest violates the documented schema."""


@dataclass(frozen=True)
class LabelSet:
    """Ordered, duplicate-free emotion label inventory.

    The tuple order is load-bearing: it defines the component order of every
    probability vector, confusion matrix, and prediction file downstream.
    """

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.labels:
            raise ValueError("label set must not be empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in label set: {self.labels}")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"label {label!r} not in label set {self.labels}") from None

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, label: object) -> bool:
        return label in self.labels


@dataclass(frozen=True)
class Utterance:
    """One conversational turn."""

    utterance_id: str
    conversation_id: str
    speaker: str
    text: str
    audio_path: str | None = None
    label: str | None = None


@dataclass(frozen=True)
class Corpus:
    """An ordered utterance collection bound to a label set and audio root."""

    label_set: LabelSet
    utterances: tuple[Utterance, ...]
    root: Path

    def __iter__(self):
        return iter(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def ids(self) -> list[str]:
        return [u.utterance_id for u in self.utterances]

    def by_id(self) -> dict[str, Utterance]:
        return {u.utterance_id: u for u in self.utterances}

    def resolve_audio(self, utt: Utterance) -> Path | None:
        if utt.audio_path is None:
            return None
        return self.root / utt.audio_path

    def gold_indices(self) -> dict[str, int]:
        """Map of utterance id to gold label index, over labeled utterances."""
        return {
            u.utterance_id: self.label_set.index(u.label)
            for u in self.utterances
            if u.label is not None
        }


@dataclass(frozen=True)
class SplitAssignment:
    """A seeded, stratified train/test partition of the labeled utterances."""

    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    ratio: float

    def __post_init__(self) -> None:
        overlap = self.train_ids & self.test_ids
        if overlap:
            raise ValueError(f"train/test overlap: {sorted(overlap)[:5]}")


@dataclass(frozen=True)
class AlignmentReport:
    """Counts from checking that utterances are usable in both modalities.

    ``fully_aligned`` requires non-empty text plus an audio reference that
    exists on disk with a decodable extension.  ``text_only`` counts
    utterances with no audio reference at all; ``audio_missing_file`` counts
    references that do not resolve to a readable .wav.  Everything that is
    not fully aligned appears in ``offending_ids``.
    """

    total: int
    text_only: int
    audio_missing_file: int
    fully_aligned: int
    offending_ids: tuple[str, ...]


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ManifestError(message)


def load_manifest(path: str | Path) -> Corpus:
    """Load a JSON manifest into a :class:`Corpus`, preserving order.

    Raises :class:`ManifestError` on malformed JSON, duplicate utterance ids,
    or labels missing from the header label set; errors name the offending
    utterance id and its position in the ``utterances`` array.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed JSON: {exc}") from exc

    _require(isinstance(raw, dict), f"{path}: manifest root must be a JSON object")
    header_labels = raw.get("labels", list(DEFAULT_LABELS))
    _require(
        isinstance(header_labels, list) and all(isinstance(s, str) for s in header_labels),
        f"{path}: 'labels' must be a list of strings",
    )
    try:
        label_set = LabelSet(tuple(header_labels))
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc

    items = raw.get("utterances")
    _require(isinstance(items, list), f"{path}: 'utterances' must be a list")

    utterances: list[Utterance] = []
    seen: set[str] = set()
    for pos, item in enumerate(items):
        where = f"{path}: utterances[{pos}]"
        _require(isinstance(item, dict), f"{where}: entry must be an object")
        _require("id" in item, f"{where}: missing 'id'")
        utt_id = str(item["id"])
        _require(utt_id not in seen, f"{where}: duplicate utterance id {utt_id!r}")
        seen.add(utt_id)

        label = item.get("label")
        if label is not None:
            _require(
                label in label_set,
                f"{where}: label {label!r} of utterance {utt_id!r} "
                f"not in header label set {label_set.labels}",
            )
        audio = item.get("audio")
        if audio is not None:
            audio = str(audio)
        utterances.append(
            Utterance(
                utterance_id=utt_id,
                conversation_id=str(item.get("conversation_id", "")),
                speaker=str(item.get("speaker", "")),
                text=str(item.get("text", "")),
                audio_path=audio,
                label=label,
            )
        )

    return Corpus(label_set=label_set, utterances=tuple(utterances), root=path.parent)


def validate_alignment(corpus: Corpus) -> AlignmentReport:
    """Check text/audio coverage; problems are reported, never raised."""
    text_only = 0
    audio_missing = 0
    fully_aligned = 0
    offenders: list[str] = []
    for utt in corpus:
        has_text = bool(utt.text.strip())
        audio = corpus.resolve_audio(utt)
        if audio is None:
            audio_ok = False
            if has_text:
                text_only += 1
        else:
            audio_ok = (
                audio.suffix.lower() in DECODABLE_AUDIO_SUFFIXES and audio.is_file()
            )
            if not audio_ok:
                audio_missing += 1
        if has_text and audio_ok:
            fully_aligned += 1
        else:
            offenders.append(utt.utterance_id)
    return AlignmentReport(
        total=len(corpus),
        text_only=text_only,
        audio_missing_file=audio_missing,
        fully_aligned=fully_aligned,
        offending_ids=tuple(offenders),
    )


def _test_count(n: int, ratio: float) -> int:
    # Per-label test size: round(n * (1 - ratio)) with exact halves rounding
    # up, evaluated in IEEE double precision so every implementation of this
    # rule lands on the same integer.
    return int(math.floor(n * (1.0 - ratio) + 0.5))


def stratified_split(corpus: Corpus, ratio: float, seed: int) -> SplitAssignment:
    """Seeded per-label partition into train (``ratio``) and test (rest).

    Every label is shuffled independently with a stream derived from
    ``(seed, label)`` (see :mod:`ercfuse.rng`), then its first
    ``round(count * (1 - ratio))`` ids go to test.  The same inputs always
    produce the identical assignment; different seeds permute membership but
    keep per-label counts fixed.

    Raises ``ValueError`` if ``ratio`` is outside (0, 1) or any utterance is
    unlabeled: silently dropping data would corrupt downstream evaluation.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    unlabeled = [u.utterance_id for u in corpus if u.label is None]
    if unlabeled:
        raise ValueError(
            f"stratified_split requires labels for every utterance; "
            f"unlabeled: {unlabeled[:5]}{'...' if len(unlabeled) > 5 else ''}"
        )

    train: list[str] = []
    test: list[str] = []
    for label in corpus.label_set:
        ids = [u.utterance_id for u in corpus if u.label == label]
        if not ids:
            continue
        rng = Xorshift64Star(mix_seed(seed, label))
        rng.shuffle(ids)
        n_test = _test_count(len(ids), ratio)
        test.extend(ids[:n_test])
        train.extend(ids[n_test:])

    return SplitAssignment(
        train_ids=frozenset(train),
        test_ids=frozenset(test),
        seed=seed,
        ratio=ratio,
    )


def label_histogram(corpus: Corpus) -> dict[str, int]:
    """Counts per gold label over the labeled utterances."""
    counts: dict[str, int] = {}
    for utt in corpus:
        if utt.label is not None:
            counts[utt.label] = counts.get(utt.label, 0) + 1
    return counts


def subset(corpus: Corpus, ids: frozenset[str] | set[str]) -> Corpus:
    """A corpus restricted to ``ids``, preserving manifest order."""
    kept = tuple(u for u in corpus if u.utterance_id in ids)
    return Corpus(label_set=corpus.label_set, utterances=kept, root=corpus.root)
