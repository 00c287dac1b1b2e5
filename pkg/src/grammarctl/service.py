"""HTTP service: conversation sessions with grammar-controlled bot turns,
token streaming, detection with spans, and per-skill progress.

Persistence is an append-only JSON-lines event log per session; replaying a
log reconstructs the transcript, and every stored bot turn carries enough
state (constraints + text) to recompute its satisfaction.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from .corpus import DialogueSnippet, Turn
from .detector import DetectorBundle, score_embedded_tokens
from .egp import (
    SYSTEM_MESSAGE_TEMPLATE,
    ConstraintSet,
    ConstraintVariant,
    Level,
    SkillRepository,
    format_dialog,
)
from .evaluation import satisfaction_task1, satisfaction_task2
from .records import GenerationRecord, Strategy

PROFILE_PAIRS_PER_TURN = 3  # categorical constraints accept at most 3 pairs

PLAIN_PROMPT = "Given the dialog, write a possible next turn of {next_speaker}:\n{dialog}"


class ResponseGenerator(Protocol):
    """Produces a bot turn as a stream of text chunks; the final turn text is
    exactly the concatenation of the chunks."""

    def stream(
        self,
        turns: Sequence[tuple[str, str]],
        next_speaker: str,
        constraints: ConstraintSet | None,
    ) -> Iterator[str]: ...


def _chunk_text(text: str, chunk_words: int) -> Iterator[str]:
    words = text.split(" ")
    for i in range(0, len(words), chunk_words):
        chunk = " ".join(words[i : i + chunk_words])
        yield chunk if i == 0 else " " + chunk


def _snippet_from_history(history: Sequence[tuple[str, str]], next_speaker: str) -> DialogueSnippet:
    """Last four history turns as a snippet; pads with ellipsis turns and
    renames speakers so the context ends on the other speaker and the strict
    A/B alternation invariant holds."""
    other = "A" if next_speaker == "B" else "B"
    pad = [(next_speaker, "..."), (other, "...")] * 2
    turns = (pad + list(history))[-4:]
    speakers = [next_speaker, other, next_speaker, other]
    context = tuple(Turn(speakers[i], text) for i, (_, text) in enumerate(turns))
    return DialogueSnippet(context=context, next_speaker=next_speaker, provenance=("session", 0))


def _constraint_messages(
    repo: SkillRepository,
    history: Sequence[tuple[str, str]],
    next_speaker: str,
    constraints: ConstraintSet | None,
) -> list[dict]:
    if constraints is None:
        return [
            {"role": "system", "content": SYSTEM_MESSAGE_TEMPLATE.format(next_speaker=next_speaker)},
            {
                "role": "user",
                "content": PLAIN_PROMPT.format(
                    next_speaker=next_speaker, dialog=format_dialog(history)
                ),
            },
        ]
    from .strategies import render_constraint_prompt

    prompt = render_constraint_prompt(
        constraints, repo, _snippet_from_history(history, next_speaker)
    )
    return [
        {"role": "system", "content": prompt.system},
        {"role": "user", "content": prompt.user},
    ]


class StubGenerator:
    """Echoes scripted text; used in tests and offline demos."""

    def __init__(
        self,
        script: Sequence[str] | None = None,
        default: str = "Let's keep talking.",
        chunk_words: int = 2,
        delay_event: threading.Event | None = None,
    ):
        self.script = list(script or [])
        self.default = default
        self.chunk_words = chunk_words
        self.delay_event = delay_event

    def stream(self, turns, next_speaker, constraints) -> Iterator[str]:
        if self.delay_event is not None:
            self.delay_event.wait(timeout=5.0)
        text = self.script.pop(0) if self.script else self.default
        yield from _chunk_text(text, self.chunk_words)


class PromptedGenerator:
    """Bot turns via a chat client with verbalized constraints."""

    def __init__(self, client, repo: SkillRepository, chunk_words: int = 3):
        self.client = client
        self.repo = repo
        self.chunk_words = chunk_words

    def stream(self, turns, next_speaker, constraints) -> Iterator[str]:
        messages = _constraint_messages(self.repo, turns, next_speaker, constraints)
        yield from _chunk_text(self.client.chat_complete(messages), self.chunk_words)


class DecodeGenerator:
    """Bot turns via guided decoding over the local model; streams the
    detokenized increments as the decode loop emits tokens."""

    def __init__(self, lm, repo, discriminators, encoder, bundle, params):
        self.lm = lm
        self.repo = repo
        self.discriminators = discriminators
        self.encoder = encoder
        self.bundle = bundle
        self.params = params

    def stream(self, turns, next_speaker, constraints) -> Iterator[str]:
        from .gateway import render_chat_prefix
        from .strategies import guided_decode_ids, resolve_constraint_skills

        skills = resolve_constraint_skills(constraints, self.repo) if constraints else []
        messages = _constraint_messages(self.repo, turns, next_speaker, constraints)
        prefix = render_chat_prefix(messages, self.lm.vocab)
        trace = guided_decode_ids(
            self.lm, prefix, skills, self.params, self.discriminators, self.encoder, self.bundle
        )
        emitted = ""
        ids: list[int] = []
        for token_id in trace.token_ids:
            ids.append(token_id)
            text = self.lm.vocab.decode(ids)
            if len(text) > len(emitted):
                yield text[len(emitted) :]
                emitted = text


# ---------------------------------------------------------------------------
# Spans
# ---------------------------------------------------------------------------


@dataclass
class SkillSpan:
    skill_id: int
    start_token: int
    end_token: int  # exclusive
    max_probability: float
    tokens: list[str]

    def to_dict(self) -> dict:
        return {
            "skill_id": self.skill_id,
            "start_token": self.start_token,
            "end_token": self.end_token,
            "max_probability": self.max_probability,
            "tokens": self.tokens,
        }


def compute_spans(
    bundle: DetectorBundle, text: str, skill_ids: Sequence[int] | None = None
) -> list[SkillSpan]:
    """Maximal runs of above-threshold tokens, one span per run, for every
    deployable detector that fires on the text."""
    candidates = bundle.deployable()
    if skill_ids is not None:
        candidates = {sid: candidates[sid] for sid in skill_ids if sid in candidates}
    tokens = bundle.encoder.tokenize(text)
    if not tokens or not candidates:
        return []
    embeddings = bundle.encoder.encode_tokens(tokens)
    spans: list[SkillSpan] = []
    for sid, det in sorted(candidates.items()):
        probs = score_embedded_tokens(det.head, embeddings)
        if float(probs.max()) <= det.threshold:
            continue
        start = None
        for i, p in enumerate(list(probs) + [0.0]):
            if p > det.threshold and start is None:
                start = i
            elif p <= det.threshold and start is not None:
                run = probs[start:i]
                spans.append(
                    SkillSpan(
                        skill_id=sid,
                        start_token=start,
                        end_token=i,
                        max_probability=float(run.max()),
                        tokens=tokens[start:i],
                    )
                )
                start = None
    return spans


# ---------------------------------------------------------------------------
# Sessions and persistence
# ---------------------------------------------------------------------------


@dataclass
class SessionTurn:
    speaker: str  # learner | bot
    text: str
    detections: list[int]
    spans: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    constraints: dict | None = None


@dataclass
class Session:
    session_id: str
    strategy: str
    constraints: ConstraintSet | None = None
    learner_profile: dict[str, Level] | None = None
    transcript: list[SessionTurn] = field(default_factory=list)
    created_at: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)
    bot_turn_count: int = 0

    def effective_constraints(self) -> ConstraintSet | None:
        """Constraints for the next bot turn; a learner profile is rotated
        into categorical pairs, at most 3 per turn."""
        if self.constraints is not None:
            return self.constraints
        if not self.learner_profile:
            return None
        items = sorted(self.learner_profile.items())
        start = (self.bot_turn_count * PROFILE_PAIRS_PER_TURN) % len(items)
        rotated = items[start:] + items[:start]
        return ConstraintSet.categorical(rotated[:PROFILE_PAIRS_PER_TURN])


class SessionStore:
    """Append-only event log per session plus an index file."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index_path = self.root / "index.json"
        self._lock = threading.Lock()

    def log_path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.jsonl"

    def append(self, session_id: str, kind: str, payload: dict) -> None:
        event = {"ts": time.time(), "session": session_id, "kind": kind, "payload": payload}
        with self._lock, self.log_path(session_id).open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")

    def register(self, session_id: str, meta: dict) -> None:
        with self._lock:
            index = {}
            if self.index_path.exists():
                index = json.loads(self.index_path.read_text(encoding="utf-8"))
            index[session_id] = meta
            self.index_path.write_text(json.dumps(index, indent=2), encoding="utf-8")

    def events(self, session_id: str) -> list[dict]:
        path = self.log_path(session_id)
        if not path.exists():
            return []
        out = []
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out


# ---------------------------------------------------------------------------
# API
# ---------------------------------------------------------------------------


class SessionCreate(BaseModel):
    constraints: dict | None = None
    learner_profile: dict[str, str] | None = None
    strategy: str = "stub"
    params: dict = Field(default_factory=dict)


class TurnRequest(BaseModel):
    text: str


class DetectRequest(BaseModel):
    text: str
    skill_ids: list[int] = Field(default_factory=list)


@dataclass
class ServiceState:
    repo: SkillRepository
    bundle: DetectorBundle
    generators: dict[str, ResponseGenerator]
    store: SessionStore
    sessions: dict[str, Session] = field(default_factory=dict)
    registry_lock: threading.Lock = field(default_factory=threading.Lock)


def _skill_payload(skill) -> dict:
    return {
        "skill_id": skill.skill_id,
        "super_category": skill.super_category,
        "subcategory": skill.subcategory,
        "guideword": skill.guideword,
        "can_do": skill.can_do,
        "level": skill.level.name,
        "type": skill.skill_type.value,
    }


def _session_payload(session: Session) -> dict:
    return {
        "session_id": session.session_id,
        "strategy": session.strategy,
        "constraints": session.constraints.to_dict() if session.constraints else None,
        "learner_profile": (
            {k: v.name for k, v in session.learner_profile.items()}
            if session.learner_profile
            else None
        ),
        "turns": len(session.transcript),
    }


def satisfaction_metrics(
    repo: SkillRepository,
    bundle: DetectorBundle,
    constraints: ConstraintSet,
    text: str,
) -> dict:
    """Constraint satisfaction of a bot turn, recomputable from stored state."""
    detections = frozenset(bundle.detect_all(text)) if text.strip() else frozenset()
    record = GenerationRecord(
        snippet=_snippet_from_history([("A", "...")], "B"),
        constraints=constraints,
        strategy=Strategy.PROMPT_LOCAL,
        response=text,
        detections=detections,
        latency_seconds=1.0,
        word_count=len(text.split()),
    )
    if constraints.variant is ConstraintVariant.EXPLICIT:
        return {"satisfaction": satisfaction_task1(record)}
    satisfied, overshoot = satisfaction_task2(record, repo)
    return {"satisfied_categories": satisfied, "overshoot": overshoot}


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="grammarctl service")
    app.state.service = state

    def _get_session(session_id: str) -> Session:
        session = state.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def _turn_events(session: Session, text: str) -> Iterator[tuple[str, object]]:
        """Run one learner+bot exchange; yields ("token", chunk) while the bot
        text streams, then ("final", payload). The caller holds the lock."""
        learner_detections = sorted(state.bundle.detect_all(text))
        learner_spans = [s.to_dict() for s in compute_spans(state.bundle, text)]
        learner_turn = SessionTurn(
            speaker="learner", text=text, detections=learner_detections, spans=learner_spans
        )
        session.transcript.append(learner_turn)
        state.store.append(
            session.session_id, "learner_turn", {"text": text, "detections": learner_detections}
        )

        constraints = session.effective_constraints()
        generator = state.generators[session.strategy]
        history = [("A" if t.speaker == "learner" else "B", t.text) for t in session.transcript]
        started = time.perf_counter()
        chunks: list[str] = []
        for chunk in generator.stream(history[-4:], "B", constraints):
            chunks.append(chunk)
            yield ("token", chunk)
        latency = time.perf_counter() - started
        bot_text = "".join(chunks)

        detections = sorted(state.bundle.detect_all(bot_text)) if bot_text.strip() else []
        spans = [s.to_dict() for s in compute_spans(state.bundle, bot_text)]
        metrics: dict = {"latency_seconds": latency, "word_count": len(bot_text.split())}
        if constraints is not None:
            metrics.update(satisfaction_metrics(state.repo, state.bundle, constraints, bot_text))
        bot_turn = SessionTurn(
            speaker="bot",
            text=bot_text,
            detections=detections,
            spans=spans,
            metrics=metrics,
            constraints=constraints.to_dict() if constraints else None,
        )
        session.transcript.append(bot_turn)
        session.bot_turn_count += 1
        state.store.append(
            session.session_id,
            "bot_turn",
            {
                "text": bot_text,
                "detections": detections,
                "spans": spans,
                "metrics": metrics,
                "constraints": bot_turn.constraints,
            },
        )
        yield (
            "final",
            {
                "learner_detections": learner_turn.detections,
                "learner_spans": learner_turn.spans,
                "text": bot_turn.text,
                "skill_spans": bot_turn.spans,
                "detections": bot_turn.detections,
                "metrics": bot_turn.metrics,
                "constraints": bot_turn.constraints,
            },
        )

    @app.post("/sessions", status_code=201)
    def create_session(body: SessionCreate) -> dict:
        constraints = None
        profile = None
        if body.constraints is not None:
            try:
                constraints = ConstraintSet.from_dict(body.constraints)
            except (ValueError, KeyError) as exc:
                raise HTTPException(status_code=400, detail=f"invalid constraints: {exc}")
            if constraints.variant is ConstraintVariant.EXPLICIT:
                missing = [s for s in constraints.explicit_skills if s not in state.repo]
                if missing:
                    raise HTTPException(status_code=400, detail=f"unknown skills {missing}")
            else:
                for sub, _ in constraints.category_levels:
                    if not state.repo.has_subcategory(sub):
                        raise HTTPException(status_code=400, detail=f"unknown subcategory {sub!r}")
        elif body.learner_profile is not None:
            profile = {}
            for sub, level_token in body.learner_profile.items():
                if not state.repo.has_subcategory(sub):
                    raise HTTPException(status_code=400, detail=f"unknown subcategory {sub!r}")
                try:
                    profile[sub] = Level.parse(level_token)
                except Exception as exc:
                    raise HTTPException(status_code=400, detail=str(exc))
        if body.strategy not in state.generators:
            raise HTTPException(
                status_code=400,
                detail=f"unknown strategy {body.strategy!r}; available: {sorted(state.generators)}",
            )
        session = Session(
            session_id=uuid.uuid4().hex[:12],
            strategy=body.strategy,
            constraints=constraints,
            learner_profile=profile,
        )
        with state.registry_lock:
            state.sessions[session.session_id] = session
        state.store.register(
            session.session_id, {"strategy": session.strategy, "created_at": session.created_at}
        )
        state.store.append(
            session.session_id,
            "created",
            {
                "strategy": session.strategy,
                "constraints": constraints.to_dict() if constraints else None,
                "learner_profile": {k: v.name for k, v in (profile or {}).items()} or None,
            },
        )
        return _session_payload(session)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str) -> dict:
        return _session_payload(_get_session(session_id))

    @app.post("/sessions/{session_id}/turns")
    def post_turn(session_id: str, body: TurnRequest, stream: bool = Query(default=False)):
        session = _get_session(session_id)
        if not body.text.strip():
            raise HTTPException(status_code=400, detail="turn text must be non-empty")
        if not session.lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="a turn is already in flight")
        if not stream:
            try:
                final = None
                for kind, payload in _turn_events(session, body.text):
                    if kind == "final":
                        final = payload
                return final
            except Exception as exc:
                raise HTTPException(status_code=502, detail=f"generation failed: {exc}")
            finally:
                session.lock.release()

        def sse() -> Iterator[str]:
            try:
                for kind, payload in _turn_events(session, body.text):
                    yield f"event: {kind}\ndata: {json.dumps(payload, ensure_ascii=False)}\n\n"
            finally:
                session.lock.release()

        return StreamingResponse(sse(), media_type="text/event-stream")

    @app.get("/sessions/{session_id}/progress")
    def progress(session_id: str) -> dict:
        session = _get_session(session_id)
        exposures: dict[int, int] = {}
        productions: dict[int, int] = {}
        for turn in session.transcript:
            counter = exposures if turn.speaker == "bot" else productions
            for sid in turn.detections:
                counter[sid] = counter.get(sid, 0) + 1
        tracked = sorted(set(exposures) | set(productions) | set(state.bundle.deployable()))
        return {
            "session_id": session_id,
            "skills": {
                str(sid): {
                    "exposures": exposures.get(sid, 0),
                    "productions": productions.get(sid, 0),
                }
                for sid in tracked
            },
        }

    @app.get("/skills")
    def skills(category: str | None = None, level: str | None = None) -> list[dict]:
        try:
            level_value = Level.parse(level) if level else None
            rows = state.repo.filter(subcategory=category, level=level_value)
        except Exception as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return [_skill_payload(s) for s in rows]

    @app.post("/detect")
    def detect_endpoint(body: DetectRequest) -> dict:
        if not body.text.strip():
            raise HTTPException(status_code=400, detail="text must be non-empty")
        skill_ids = body.skill_ids or None
        detected = sorted(state.bundle.detect_all(body.text, skill_ids=skill_ids))
        spans = [s.to_dict() for s in compute_spans(state.bundle, body.text, skill_ids)]
        return {"detections": detected, "spans": spans}

    return app


def replay_satisfaction(
    store: SessionStore, session_id: str, repo: SkillRepository, bundle: DetectorBundle
) -> list[dict]:
    """Recompute each persisted bot turn's satisfaction from its stored text
    and constraints; returns stored-vs-recomputed rows for auditing."""
    rows = []
    for event in store.events(session_id):
        if event["kind"] != "bot_turn":
            continue
        payload = event["payload"]
        if not payload.get("constraints"):
            continue
        constraints = ConstraintSet.from_dict(payload["constraints"])
        recomputed = satisfaction_metrics(repo, bundle, constraints, payload["text"])
        stored = payload["metrics"]
        rows.append(
            {
                "stored": {k: stored.get(k) for k in recomputed},
                "recomputed": recomputed,
                "match": all(stored.get(k) == v for k, v in recomputed.items()),
            }
        )
    return rows
