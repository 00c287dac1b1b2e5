"""Dialogue corpus ingestion, snippet sampling, and skill labeling.

Every adapter normalizes its source into two-speaker dialogues with strictly
alternating A/B turns. The normalized interchange format is JSON-lines, one
dialogue per line: {"id": ..., "source": ..., "turns": [{"speaker", "text",
"skills"}]}.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

logger = logging.getLogger(__name__)


class IngestError(Exception):
    """Unknown adapter or unreadable source file."""


class SamplingError(Exception):
    """Not enough eligible dialogues to sample the requested snippets."""


SPEAKERS = ("A", "B")


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str
    detected_skills: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if self.speaker not in SPEAKERS:
            raise ValueError(f"speaker must be one of {SPEAKERS}, got {self.speaker!r}")
        if not self.text.strip():
            raise ValueError("turn text must be non-empty after trimming")


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    source: str
    turns: tuple[Turn, ...]

    def __post_init__(self) -> None:
        if len(self.turns) < 2:
            raise ValueError(f"dialogue {self.dialogue_id}: needs at least 2 turns")
        for i, turn in enumerate(self.turns):
            expected = SPEAKERS[i % 2]
            if turn.speaker != expected:
                raise ValueError(
                    f"dialogue {self.dialogue_id}: turn {i} speaker {turn.speaker} "
                    f"breaks A/B alternation"
                )


@dataclass(frozen=True)
class DialogueSnippet:
    """Exactly four context turns plus the speaker expected to reply next."""

    context: tuple[Turn, ...]
    next_speaker: str
    provenance: tuple[str, int]  # (dialogue_id, start index)

    def __post_init__(self) -> None:
        if len(self.context) != 4:
            raise ValueError(f"snippet context must be 4 turns, got {len(self.context)}")
        last = self.context[-1].speaker
        successor = SPEAKERS[(SPEAKERS.index(last) + 1) % 2]
        if self.next_speaker != successor:
            raise ValueError(
                f"next_speaker {self.next_speaker} is not the alternation successor of {last}"
            )

    def context_pairs(self) -> list[tuple[str, str]]:
        return [(t.speaker, t.text) for t in self.context]


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------


def _dialogue_from_texts(dialogue_id: str, source: str, texts: Sequence[str]) -> Dialogue:
    turns = tuple(
        Turn(speaker=SPEAKERS[i % 2], text=text.strip()) for i, text in enumerate(texts)
    )
    return Dialogue(dialogue_id=dialogue_id, source=source, turns=turns)


def _dialogue_from_speaker_texts(
    dialogue_id: str, source: str, pairs: Sequence[tuple[str, str]]
) -> Dialogue:
    """Normalize (raw speaker, text) pairs: merge consecutive turns of one
    speaker, map speakers to A/B in order of first appearance, and reject
    dialogues with more than two speakers."""
    roles = {s for s, _ in pairs}
    if len(roles) > 2:
        raise ValueError(f"{len(roles)} speakers; only dyadic dialogues are supported")
    merged: list[tuple[str, str]] = []
    for raw_speaker, text in pairs:
        text = text.strip()
        if not text:
            continue
        if merged and merged[-1][0] == raw_speaker:
            merged[-1] = (raw_speaker, merged[-1][1] + " " + text)
        else:
            merged.append((raw_speaker, text))
    mapping: dict[str, str] = {}
    turns = []
    for raw_speaker, text in merged:
        if raw_speaker not in mapping:
            mapping[raw_speaker] = SPEAKERS[len(mapping)]
        turns.append(Turn(speaker=mapping[raw_speaker], text=text))
    return Dialogue(dialogue_id=dialogue_id, source=source, turns=tuple(turns))


def _ingest_dailydialog(path: Path) -> Iterable[Dialogue]:
    """One dialogue per line, turns separated by the '__eou__' marker."""
    with path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            texts = [t.strip() for t in line.split("__eou__") if t.strip()]
            yield _dialogue_from_texts(f"dailydialog-{i}", "dailydialog", texts)


def _ingest_dialogsum(path: Path) -> Iterable[Dialogue]:
    """JSON-lines with a 'dialogue' field of '#PersonN#: text' lines."""
    with path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            pairs = []
            for turn_line in record["dialogue"].split("\n"):
                m = re.match(r"#(Person\d+)#:\s*(.*)", turn_line.strip())
                if m:
                    pairs.append((m.group(1), m.group(2)))
            yield _dialogue_from_speaker_texts(
                str(record.get("fname", f"dialogsum-{i}")), "dialogsum", pairs
            )


def _ingest_topical_chat(path: Path) -> Iterable[Dialogue]:
    """One JSON object mapping conversation id -> {'content': [{'message','agent'}]}."""
    data = json.loads(path.read_text(encoding="utf-8"))
    for conv_id, record in data.items():
        pairs = [(entry["agent"], entry["message"]) for entry in record["content"]]
        yield _dialogue_from_speaker_texts(str(conv_id), "topical_chat", pairs)


def _ingest_wizard_of_wikipedia(path: Path) -> Iterable[Dialogue]:
    """JSON array of {'dialog': [{'speaker', 'text'}]} records."""
    data = json.loads(path.read_text(encoding="utf-8"))
    for i, record in enumerate(data):
        pairs = [(entry["speaker"], entry["text"]) for entry in record["dialog"]]
        yield _dialogue_from_speaker_texts(f"wow-{i}", "wizard_of_wikipedia", pairs)


def _ingest_cmu_dog(path: Path) -> Iterable[Dialogue]:
    """JSON-lines of {'history': [{'text', 'uid'}]} conversations."""
    with path.open("r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            pairs = [(str(entry["uid"]), entry["text"]) for entry in record["history"]]
            yield _dialogue_from_speaker_texts(f"cmu-dog-{i}", "cmu_dog", pairs)


def _ingest_jsonl(path: Path) -> Iterable[Dialogue]:
    """The normalized interchange format produced by save_jsonl."""
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            turns = tuple(
                Turn(
                    speaker=t["speaker"],
                    text=t["text"],
                    detected_skills=(
                        frozenset(t["skills"]) if t.get("skills") is not None else None
                    ),
                )
                for t in record["turns"]
            )
            yield Dialogue(dialogue_id=record["id"], source=record["source"], turns=turns)


ADAPTERS: dict[str, Callable[[Path], Iterable[Dialogue]]] = {
    "dailydialog": _ingest_dailydialog,
    "dialogsum": _ingest_dialogsum,
    "topical_chat": _ingest_topical_chat,
    "wizard_of_wikipedia": _ingest_wizard_of_wikipedia,
    "cmu_dog": _ingest_cmu_dog,
    "jsonl": _ingest_jsonl,
}


@dataclass
class IngestStats:
    source: str
    dialogue_count: int = 0
    skipped: int = 0
    total_turns: int = 0
    total_words: int = 0

    @property
    def mean_turns(self) -> float:
        return self.total_turns / self.dialogue_count if self.dialogue_count else 0.0

    @property
    def mean_words_per_turn(self) -> float:
        return self.total_words / self.total_turns if self.total_turns else 0.0


def ingest(source: str, path: str | Path) -> tuple[list[Dialogue], IngestStats]:
    """Read a dataset file through its adapter, skipping malformed records.

    Records that fail normalization (corrupt layout, >2 speakers, empty turns)
    are dropped with a logged warning; the skip count lands in the stats.
    """
    if source not in ADAPTERS:
        raise IngestError(f"unknown adapter {source!r}; available: {sorted(ADAPTERS)}")
    path = Path(path)
    if not path.exists():
        raise IngestError(f"no such file: {path}")

    stats = IngestStats(source=source)
    dialogues: list[Dialogue] = []

    def _generate() -> Iterable[Dialogue]:
        iterator = iter(ADAPTERS[source](path))
        while True:
            try:
                yield next(iterator)
            except StopIteration:
                return
            except (ValueError, KeyError, json.JSONDecodeError) as exc:
                stats.skipped += 1
                logger.warning("%s: skipping malformed record: %s", path, exc)

    for dialogue in _generate():
        dialogues.append(dialogue)
        stats.dialogue_count += 1
        stats.total_turns += len(dialogue.turns)
        stats.total_words += sum(len(t.text.split()) for t in dialogue.turns)
    return dialogues, stats


def save_jsonl(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for d in dialogues:
            record = {
                "id": d.dialogue_id,
                "source": d.source,
                "turns": [
                    {
                        "speaker": t.speaker,
                        "text": t.text,
                        "skills": sorted(t.detected_skills) if t.detected_skills is not None else None,
                    }
                    for t in d.turns
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_jsonl(path: str | Path) -> list[Dialogue]:
    dialogues, _ = ingest("jsonl", path)
    return dialogues


# ---------------------------------------------------------------------------
# Snippet sampling
# ---------------------------------------------------------------------------


def sample_snippets(dialogues: Sequence[Dialogue], n: int, seed: int) -> list[DialogueSnippet]:
    """Draw n four-turn snippets uniformly over (dialogue, start) positions.

    Only dialogues with at least five turns are eligible (four context turns
    plus an actual next turn). Deterministic for a fixed seed; overlapping
    snippets from one dialogue are allowed.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    eligible = [d for d in dialogues if len(d.turns) >= 5]
    if n > 0 and not eligible:
        raise SamplingError(f"need at least 1 dialogue with >=5 turns, found 0 (requested {n})")
    rng = random.Random(seed)
    snippets: list[DialogueSnippet] = []
    for _ in range(n):
        dialogue = eligible[rng.randrange(len(eligible))]
        start = rng.randrange(len(dialogue.turns) - 4)
        context = dialogue.turns[start : start + 4]
        snippets.append(
            DialogueSnippet(
                context=context,
                next_speaker=dialogue.turns[start + 4].speaker,
                provenance=(dialogue.dialogue_id, start),
            )
        )
    return snippets


def snippet_positions(dialogue: Dialogue) -> list[int]:
    """All valid snippet start indices for one dialogue."""
    return list(range(max(0, len(dialogue.turns) - 4)))


# ---------------------------------------------------------------------------
# Labeling
# ---------------------------------------------------------------------------

_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


def split_sentences(text: str) -> list[str]:
    """Punctuation-based sentence split; falls back to the whole text."""
    parts = [p.strip() for p in _SENTENCE_BOUNDARY.split(text) if p.strip()]
    return parts or [text.strip()]


def label_corpus(dialogues: Sequence[Dialogue], detectors) -> list[Dialogue]:
    """Return dialogues with every turn's detected_skills filled in.

    `detectors` is any object with detect_all(text) -> set[int] (a
    DetectorBundle). Turns are split into sentences and the per-sentence
    detections are unioned, which matches max pooling because detection is a
    threshold on the per-token maximum. Idempotent: relabeling overwrites with
    identical values.
    """
    labeled = []
    for dialogue in dialogues:
        new_turns = []
        for turn in dialogue.turns:
            skills: set[int] = set()
            for sentence in split_sentences(turn.text):
                skills |= detectors.detect_all(sentence)
            new_turns.append(replace(turn, detected_skills=frozenset(skills)))
        labeled.append(replace(dialogue, turns=tuple(new_turns)))
    return labeled
