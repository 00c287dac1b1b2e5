"""Shared record types: the generation strategies and the persisted unit of
generation + evaluation."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus import DialogueSnippet, Turn
from .egp import ConstraintSet


class Strategy(enum.Enum):
    PROMPT_REMOTE = "prompt_remote"
    PROMPT_LOCAL = "prompt_local"
    FINETUNE = "finetune"
    DECODE = "decode"
    HYBRID = "hybrid"


@dataclass
class GenerationRecord:
    """One generated response with its constraints, detections, and timing."""

    snippet: DialogueSnippet
    constraints: ConstraintSet
    strategy: Strategy
    response: str
    detections: frozenset[int]
    latency_seconds: float
    word_count: int
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "snippet": {
                "context": [{"speaker": t.speaker, "text": t.text} for t in self.snippet.context],
                "next_speaker": self.snippet.next_speaker,
                "provenance": list(self.snippet.provenance),
            },
            "constraints": self.constraints.to_dict(),
            "strategy": self.strategy.value,
            "response": self.response,
            "detections": sorted(self.detections),
            "latency_seconds": self.latency_seconds,
            "word_count": self.word_count,
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GenerationRecord":
        snip = payload["snippet"]
        snippet = DialogueSnippet(
            context=tuple(Turn(speaker=t["speaker"], text=t["text"]) for t in snip["context"]),
            next_speaker=snip["next_speaker"],
            provenance=(snip["provenance"][0], int(snip["provenance"][1])),
        )
        return cls(
            snippet=snippet,
            constraints=ConstraintSet.from_dict(payload["constraints"]),
            strategy=Strategy(payload["strategy"]),
            response=payload["response"],
            detections=frozenset(payload["detections"]),
            latency_seconds=payload["latency_seconds"],
            word_count=payload["word_count"],
            failed=payload.get("failed", False),
            error=payload.get("error"),
        )


def save_records(records: Iterable[GenerationRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def load_records(path: str | Path) -> list[GenerationRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(GenerationRecord.from_dict(json.loads(line)))
    return records
