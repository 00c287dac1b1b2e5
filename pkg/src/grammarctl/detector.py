"""Per-skill binary grammar detectors over frozen token embeddings.

A detector scores every token of a response with a small feedforward head;
the response contains the skill iff the maximum token probability exceeds
0.5. Heads are trained from sentence-level labels with a max-pooled loss,
so the encoder stays frozen and only the head learns.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import EmptyTokenizationError, TokenEncoder, get_encoder

logger = logging.getLogger(__name__)

DEPLOYABLE_TEST_PRECISION = 0.80
DETECTION_THRESHOLD = 0.5


class TrainingDataError(ValueError):
    """Degenerate or conflicting training data."""


class CurationSuspended(Exception):
    """A curation loop stopped early and persisted its state for resumption."""

    def __init__(self, message: str, state_path: str | None = None):
        super().__init__(message)
        self.state_path = state_path


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class DetectorMetrics:
    validation_precision: float | None = None
    validation_recall: float | None = None
    test_precision: float | None = None

    def to_dict(self) -> dict:
        return {
            "validation_precision": self.validation_precision,
            "validation_recall": self.validation_recall,
            "test_precision": self.test_precision,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DetectorMetrics":
        return cls(
            validation_precision=payload.get("validation_precision"),
            validation_recall=payload.get("validation_recall"),
            test_precision=payload.get("test_precision"),
        )


@dataclass(frozen=True)
class SkillTrainingSet:
    """Labeled sentences for one skill. Positives and negatives are disjoint."""

    skill_id: int
    positives: tuple[str, ...]
    negatives: tuple[str, ...]
    provenance: str  # synthetic | manual | automatized

    def __post_init__(self) -> None:
        if not self.positives:
            raise TrainingDataError(f"skill {self.skill_id}: positives must be non-empty")
        overlap = set(self.positives) & set(self.negatives)
        if overlap:
            raise TrainingDataError(
                f"skill {self.skill_id}: {len(overlap)} sentence(s) labeled both "
                f"positive and negative, e.g. {next(iter(overlap))!r}"
            )


@dataclass(frozen=True)
class AnnotationRecord:
    sentence: str
    skill_id: int
    label: bool
    annotator: str
    note: str | None = None

    def to_dict(self) -> dict:
        return {
            "sentence": self.sentence,
            "skill_id": self.skill_id,
            "label": self.label,
            "annotator": self.annotator,
            "note": self.note,
        }


class DetectionHead(nn.Module):
    """Two-hidden-layer feedforward binary classifier over token embeddings.

    With the default hidden sizes (320, 160) and a 768-dim encoder this lands
    near 320K parameters; smaller encoders scale down proportionally.
    """

    def __init__(self, input_dim: int, hidden: tuple[int, int] = (320, 160)):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden[0]),
            nn.ReLU(),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(),
            nn.Linear(hidden[1], 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Token embeddings (..., input_dim) -> logits (...)."""
        return self.net(x).squeeze(-1)

    @classmethod
    def zeros(cls, input_dim: int, hidden: tuple[int, int] = (320, 160)) -> "DetectionHead":
        head = cls(input_dim, hidden)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        return head

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass
class DetectorModel:
    skill_id: int
    head: DetectionHead
    encoder_id: str
    metrics: DetectorMetrics = field(default_factory=DetectorMetrics)
    provenance: str = "unknown"
    threshold: float = DETECTION_THRESHOLD

    @property
    def deployable(self) -> bool:
        return (
            self.metrics.test_precision is not None
            and self.metrics.test_precision >= DEPLOYABLE_TEST_PRECISION
        )


# ---------------------------------------------------------------------------
# Scoring (the detection function)
# ---------------------------------------------------------------------------


def score_embedded_tokens(head: DetectionHead, embeddings: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        logits = head(torch.from_numpy(np.ascontiguousarray(embeddings, dtype=np.float32)))
        return torch.sigmoid(logits).numpy()


def score_tokens(
    text: str, detector: DetectorModel, encoder: TokenEncoder
) -> list[tuple[str, float]]:
    """One probability per encoder token of `text`."""
    tokens = encoder.tokenize(text)
    if not tokens:
        raise EmptyTokenizationError(f"no tokens in {text!r}")
    probs = score_embedded_tokens(detector.head, encoder.encode_tokens(tokens))
    return list(zip(tokens, (float(p) for p in probs)))


def detect(text: str, detector: DetectorModel, encoder: TokenEncoder) -> bool:
    """Max-pooled detection: true iff any token probability exceeds the threshold."""
    scored = score_tokens(text, detector, encoder)
    return max(p for _, p in scored) > detector.threshold


# ---------------------------------------------------------------------------
# Head training (shared by detectors and future discriminators)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 32
    negative_cap_ratio: float = 4.0  # negatives per positive, per epoch
    hidden: tuple[int, int] = (320, 160)
    seed: int = 0


Instance = tuple[np.ndarray, float]  # (token embeddings (n, dim), label)


def _pad_batch(instances: Sequence[Instance]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    max_len = max(emb.shape[0] for emb, _ in instances)
    dim = instances[0][0].shape[1]
    x = np.zeros((len(instances), max_len, dim), dtype=np.float32)
    mask = np.zeros((len(instances), max_len), dtype=bool)
    y = np.zeros(len(instances), dtype=np.float32)
    for i, (emb, label) in enumerate(instances):
        x[i, : emb.shape[0]] = emb
        mask[i, : emb.shape[0]] = True
        y[i] = label
    return torch.from_numpy(x), torch.from_numpy(mask), torch.from_numpy(y)


def _pooled_logits(head: DetectionHead, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    logits = head(x)
    return logits.masked_fill(~mask, float("-inf")).max(dim=1).values


def _epoch_instances(
    instances: Sequence[Instance], cap_ratio: float, rng: np.random.Generator
) -> list[Instance]:
    pos = [inst for inst in instances if inst[1] >= 0.5]
    neg = [inst for inst in instances if inst[1] < 0.5]
    cap = int(cap_ratio * max(len(pos), 1))
    if len(neg) > cap:
        idx = rng.choice(len(neg), size=cap, replace=False)
        neg = [neg[i] for i in idx]
    epoch = pos + neg
    order = rng.permutation(len(epoch))
    return [epoch[i] for i in order]


def _validation_loss(head: DetectionHead, instances: Sequence[Instance]) -> float:
    loss_fn = nn.BCEWithLogitsLoss()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(instances), 256):
            batch = instances[start : start + 256]
            x, mask, y = _pad_batch(batch)
            total += float(loss_fn(_pooled_logits(head, x, mask), y)) * len(batch)
            count += len(batch)
    return total / max(count, 1)


def train_head(
    train_instances: Sequence[Instance],
    val_instances: Sequence[Instance] | None,
    input_dim: int,
    config: TrainConfig,
    fixed_epochs: int | None = None,
) -> tuple[DetectionHead, int]:
    """Train a head with Adam; early-stops on validation loss when a
    validation split is given, otherwise runs `fixed_epochs`. Returns the
    best head and the epoch it came from."""
    if not any(label >= 0.5 for _, label in train_instances) or not any(
        label < 0.5 for _, label in train_instances
    ):
        raise TrainingDataError("training data must contain both classes")

    torch.manual_seed(config.seed)
    head = DetectionHead(input_dim, config.hidden)
    optimizer = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)

    n_epochs = fixed_epochs if fixed_epochs is not None else config.max_epochs
    best_state = {k: v.clone() for k, v in head.state_dict().items()}
    best_loss = float("inf")
    best_epoch = 0
    stale = 0

    for epoch in range(1, n_epochs + 1):
        head.train()
        epoch_data = _epoch_instances(train_instances, config.negative_cap_ratio, rng)
        for start in range(0, len(epoch_data), config.batch_size):
            batch = epoch_data[start : start + config.batch_size]
            x, mask, y = _pad_batch(batch)
            optimizer.zero_grad()
            loss = loss_fn(_pooled_logits(head, x, mask), y)
            loss.backward()
            optimizer.step()
        head.eval()
        if val_instances is not None:
            val_loss = _validation_loss(head, val_instances)
            if val_loss < best_loss - 1e-6:
                best_loss = val_loss
                best_epoch = epoch
                best_state = {k: v.clone() for k, v in head.state_dict().items()}
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        else:
            best_epoch = epoch
            best_state = {k: v.clone() for k, v in head.state_dict().items()}

    head.load_state_dict(best_state)
    head.eval()
    return head, max(best_epoch, 1)


# ---------------------------------------------------------------------------
# Detector training with cross-validation
# ---------------------------------------------------------------------------


def _stratified_folds(
    n_pos: int, n_neg: int, folds: int, rng: np.random.Generator
) -> list[tuple[list[int], list[int]]]:
    """Partition positive indices [0, n_pos) and negative indices [0, n_neg)
    into `folds` disjoint folds whose union is everything."""
    pos_order = rng.permutation(n_pos)
    neg_order = rng.permutation(n_neg)
    out = []
    for f in range(folds):
        out.append((list(map(int, pos_order[f::folds])), list(map(int, neg_order[f::folds]))))
    return out


def _precision_recall(
    head: DetectionHead, pos: Sequence[np.ndarray], neg: Sequence[np.ndarray]
) -> tuple[float, float]:
    def predict(embs: Sequence[np.ndarray]) -> int:
        hits = 0
        for emb in embs:
            if float(score_embedded_tokens(head, emb).max()) > DETECTION_THRESHOLD:
                hits += 1
        return hits

    tp = predict(pos)
    fp = predict(neg)
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / len(pos) if pos else 0.0
    return precision, recall


def train_detector(
    training_set: SkillTrainingSet,
    encoder: TokenEncoder,
    folds: int = 5,
    config: TrainConfig | None = None,
) -> DetectorModel:
    """Train a skill detector with k-fold cross-validation.

    Validation precision is the mean fold precision; the returned model is
    retrained on the full data for the mean best epoch count found during
    cross-validation. The encoder is never updated.
    """
    config = config or TrainConfig()
    if len(training_set.positives) < 10:
        raise TrainingDataError(
            f"skill {training_set.skill_id}: need >=10 positives, "
            f"got {len(training_set.positives)}"
        )
    if not training_set.negatives:
        raise TrainingDataError(f"skill {training_set.skill_id}: no negative examples")

    pos_emb = [encoder.encode(s) for s in training_set.positives]
    neg_emb = [encoder.encode(s) for s in training_set.negatives]
    rng = np.random.default_rng(config.seed)

    fold_precisions: list[float] = []
    fold_recalls: list[float] = []
    best_epochs: list[int] = []
    for fold_pos, fold_neg in _stratified_folds(len(pos_emb), len(neg_emb), folds, rng):
        val_pos = [pos_emb[i] for i in fold_pos]
        val_neg = [neg_emb[i] for i in fold_neg]
        train_pos = [e for i, e in enumerate(pos_emb) if i not in set(fold_pos)]
        train_neg = [e for i, e in enumerate(neg_emb) if i not in set(fold_neg)]
        if not train_pos or not train_neg or not val_pos:
            continue
        instances = [(e, 1.0) for e in train_pos] + [(e, 0.0) for e in train_neg]
        val_instances = [(e, 1.0) for e in val_pos] + [(e, 0.0) for e in val_neg]
        head, best_epoch = train_head(instances, val_instances, encoder.dim, config)
        precision, recall = _precision_recall(head, val_pos, val_neg)
        fold_precisions.append(precision)
        fold_recalls.append(recall)
        best_epochs.append(best_epoch)

    final_epochs = max(1, round(float(np.mean(best_epochs))) if best_epochs else config.max_epochs)
    instances = [(e, 1.0) for e in pos_emb] + [(e, 0.0) for e in neg_emb]
    head, _ = train_head(instances, None, encoder.dim, config, fixed_epochs=final_epochs)

    metrics = DetectorMetrics(
        validation_precision=float(np.mean(fold_precisions)) if fold_precisions else None,
        validation_recall=float(np.mean(fold_recalls)) if fold_recalls else None,
    )
    return DetectorModel(
        skill_id=training_set.skill_id,
        head=head,
        encoder_id=encoder.encoder_id,
        metrics=metrics,
        provenance=training_set.provenance,
    )


# ---------------------------------------------------------------------------
# Detector bundle
# ---------------------------------------------------------------------------


class DetectorBundle:
    """A frozen encoder plus a set of trained detectors sharing it.

    Detection (`detect_all`, spans) uses only deployable detectors: those
    whose measured test precision clears the 0.80 gate.
    """

    def __init__(self, encoder: TokenEncoder, detectors: Iterable[DetectorModel] = ()):
        self.encoder = encoder
        self.detectors: dict[int, DetectorModel] = {}
        for det in detectors:
            self.add(det)

    def add(self, detector: DetectorModel) -> None:
        if detector.encoder_id != self.encoder.encoder_id:
            raise ValueError(
                f"detector {detector.skill_id} was trained on encoder "
                f"{detector.encoder_id!r}, bundle uses {self.encoder.encoder_id!r}"
            )
        self.detectors[detector.skill_id] = detector

    def __len__(self) -> int:
        return len(self.detectors)

    def deployable(self) -> dict[int, DetectorModel]:
        return {sid: d for sid, d in self.detectors.items() if d.deployable}

    def detect_all(self, text: str, skill_ids: Iterable[int] | None = None) -> set[int]:
        """Skills detected in `text` among the deployable detectors."""
        candidates = self.deployable()
        if skill_ids is not None:
            candidates = {sid: candidates[sid] for sid in skill_ids if sid in candidates}
        if not candidates:
            return set()
        tokens = self.encoder.tokenize(text)
        if not tokens:
            return set()
        embeddings = self.encoder.encode_tokens(tokens)
        detected = set()
        for sid, det in candidates.items():
            probs = score_embedded_tokens(det.head, embeddings)
            if float(probs.max()) > det.threshold:
                detected.add(sid)
        return detected

    def score_tokens(self, skill_id: int, text: str) -> list[tuple[str, float]]:
        return score_tokens(text, self.detectors[skill_id], self.encoder)

    def detect(self, skill_id: int, text: str) -> bool:
        return detect(text, self.detectors[skill_id], self.encoder)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "encoder_id": self.encoder.encoder_id,
            "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "detectors": [],
        }
        for sid, det in sorted(self.detectors.items()):
            weights_file = f"skill_{sid}.pt"
            torch.save(
                {"state_dict": det.head.state_dict(), "input_dim": det.head.input_dim,
                 "hidden": det.head.hidden},
                directory / weights_file,
            )
            manifest["detectors"].append(
                {
                    "skill_id": sid,
                    "encoder_id": det.encoder_id,
                    "metrics": det.metrics.to_dict(),
                    "provenance": det.provenance,
                    "weights_file": weights_file,
                }
            )
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: str | Path, encoder: TokenEncoder | None = None) -> "DetectorBundle":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        encoder = encoder or get_encoder(manifest["encoder_id"])
        bundle = cls(encoder)
        for entry in manifest["detectors"]:
            payload = torch.load(directory / entry["weights_file"], weights_only=True)
            head = DetectionHead(payload["input_dim"], tuple(payload["hidden"]))
            head.load_state_dict(payload["state_dict"])
            head.eval()
            bundle.add(
                DetectorModel(
                    skill_id=entry["skill_id"],
                    head=head,
                    encoder_id=entry["encoder_id"],
                    metrics=DetectorMetrics.from_dict(entry["metrics"]),
                    provenance=entry["provenance"],
                )
            )
        return bundle


# ---------------------------------------------------------------------------
# Annotation stores
# ---------------------------------------------------------------------------


class AnnotationStore(Protocol):
    """Supplies boolean labels for (sentence, skill) pairs; None means the
    store is exhausted (e.g. annotation budget spent)."""

    def request_label(self, sentence: str, skill_id: int) -> bool | None: ...

    def records(self) -> list[AnnotationRecord]: ...


class CallbackAnnotationStore:
    """Answers from a callback; optionally capped at a budget of new labels."""

    def __init__(
        self,
        answer: Callable[[str, int], bool],
        annotator: str = "callback",
        budget: int | None = None,
    ):
        self._answer = answer
        self._annotator = annotator
        self._budget = budget
        self._records: dict[tuple[str, int], AnnotationRecord] = {}

    def request_label(self, sentence: str, skill_id: int) -> bool | None:
        key = (sentence, skill_id)
        if key in self._records:
            return self._records[key].label
        if self._budget is not None and len(self._records) >= self._budget:
            return None
        record = AnnotationRecord(
            sentence=sentence,
            skill_id=skill_id,
            label=bool(self._answer(sentence, skill_id)),
            annotator=self._annotator,
        )
        self._records[key] = record
        return record.label

    def records(self) -> list[AnnotationRecord]:
        return list(self._records.values())


class JsonlAnnotationStore:
    """Annotation records persisted as JSON-lines; one label per
    (sentence, skill, annotator). Unanswerable requests return None."""

    def __init__(
        self,
        path: str | Path,
        answer: Callable[[str, int], bool] | None = None,
        annotator: str = "human",
    ):
        self.path = Path(path)
        self._answer = answer
        self._annotator = annotator
        self._records: dict[tuple[str, int, str], AnnotationRecord] = {}
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    record = AnnotationRecord(
                        sentence=rec["sentence"],
                        skill_id=rec["skill_id"],
                        label=rec["label"],
                        annotator=rec.get("annotator", "human"),
                        note=rec.get("note"),
                    )
                    self._records[(record.sentence, record.skill_id, record.annotator)] = record

    def request_label(self, sentence: str, skill_id: int) -> bool | None:
        key = (sentence, skill_id, self._annotator)
        if key in self._records:
            return self._records[key].label
        if self._answer is None:
            return None
        record = AnnotationRecord(
            sentence=sentence,
            skill_id=skill_id,
            label=bool(self._answer(sentence, skill_id)),
            annotator=self._annotator,
        )
        self._records[key] = record
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
        return record.label

    def records(self) -> list[AnnotationRecord]:
        return list(self._records.values())


# ---------------------------------------------------------------------------
# Curation strategies
# ---------------------------------------------------------------------------


@dataclass
class CurationResult:
    training_set: SkillTrainingSet
    status: str  # completed | stalled
    iterations: int
    precision_history: list[float] = field(default_factory=list)
    regex_retries: int = 0


SYNTHETIC_PROMPT = (
    "You create training sentences for a grammar pattern.\n"
    "Pattern description: {can_do}\n"
    "Example sentences using the pattern:\n{examples}\n\n"
    "Write {n} new sentences that use the pattern and {n} sentences that do not.\n"
    "Prefix each line with 'POS:' or 'NEG:' accordingly."
)


def _parse_labeled_lines(reply: str) -> tuple[list[str], list[str]]:
    pos, neg = [], []
    for line in reply.splitlines():
        line = line.strip()
        if line.upper().startswith("POS:"):
            pos.append(line[4:].strip())
        elif line.upper().startswith("NEG:"):
            neg.append(line[4:].strip())
    return [s for s in pos if s], [s for s in neg if s]


def curate_synthetic(
    skill,
    generator_client,
    *,
    count: int = 750,
    batch: int = 25,
    resume_path: str | Path | None = None,
) -> SkillTrainingSet:
    """Request `count` labeled sentences from a generation client by few-shot
    prompting on the skill's description and examples.

    On client failure the partial set is persisted to `resume_path` and a
    CurationSuspended carrying that path is raised; a later call with the
    same path resumes where it stopped.
    """
    positives: list[str] = []
    negatives: list[str] = []
    if resume_path is not None and Path(resume_path).exists():
        saved = json.loads(Path(resume_path).read_text(encoding="utf-8"))
        if saved.get("skill_id") == skill.skill_id:
            positives = saved["positives"]
            negatives = saved["negatives"]

    examples_block = "\n".join(f"{i + 1}. {ex}" for i, ex in enumerate(skill.examples))
    while len(positives) + len(negatives) < count:
        per_label = min(batch, count) // 2 or 1
        prompt = SYNTHETIC_PROMPT.format(can_do=skill.can_do, examples=examples_block, n=per_label)
        try:
            reply = generator_client.chat_complete(
                [{"role": "user", "content": prompt}]
            )
        except Exception as exc:
            token = resume_path or f"curate_synthetic_{skill.skill_id}.resume.json"
            Path(token).write_text(
                json.dumps(
                    {"skill_id": skill.skill_id, "positives": positives, "negatives": negatives}
                ),
                encoding="utf-8",
            )
            raise CurationSuspended(
                f"generation client failed ({exc}); partial set persisted", str(token)
            ) from exc
        new_pos, new_neg = _parse_labeled_lines(reply)
        if not new_pos and not new_neg:
            raise TrainingDataError("generation client produced no parseable labeled lines")
        for s in new_pos:
            if s not in positives and s not in negatives:
                positives.append(s)
        for s in new_neg:
            if s not in negatives and s not in positives:
                negatives.append(s)

    excess = len(positives) + len(negatives) - count
    if excess > 0:
        drop_neg = min(excess, len(negatives))
        negatives = negatives[: len(negatives) - drop_neg]
        positives = positives[: len(positives) - (excess - drop_neg)]
    return SkillTrainingSet(
        skill_id=skill.skill_id,
        positives=tuple(positives),
        negatives=tuple(negatives),
        provenance="synthetic",
    )


def augment_negatives(
    training_set: SkillTrainingSet,
    other_sets: Sequence[SkillTrainingSet],
    seed: int = 0,
) -> SkillTrainingSet:
    """Extend the negative pool with positive examples of other skills.

    Used at training time for synthetic sets, whose generated negatives tend
    to be easy. The original negatives are always kept.
    """
    pool = [
        s
        for other in other_sets
        if other.skill_id != training_set.skill_id
        for s in other.positives
        if s not in set(training_set.positives) and s not in set(training_set.negatives)
    ]
    if not pool:
        logger.warning(
            "skill %s: no other-skill positives available for negative augmentation",
            training_set.skill_id,
        )
        return training_set
    rng = np.random.default_rng(seed)
    k = min(len(pool), max(len(training_set.negatives), len(training_set.positives)))
    picked = [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]
    return replace(training_set, negatives=training_set.negatives + tuple(dict.fromkeys(picked)))


@dataclass
class _CurationState:
    skill_id: int
    iterations: int = 0
    best_precision: float = 0.0
    non_improving: int = 0
    labeled_pos: list[str] = field(default_factory=list)
    labeled_neg: list[str] = field(default_factory=list)
    precision_history: list[float] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, ensure_ascii=False), encoding="utf-8")


def _label_batch(
    sentences: Iterable[str],
    skill_id: int,
    store: AnnotationStore,
    state: _CurationState,
    state_path: str | Path,
) -> list[bool]:
    """Label sentences through the store, updating state; suspends (with the
    state persisted) when the store is exhausted."""
    outcomes = []
    seen = set(state.labeled_pos) | set(state.labeled_neg)
    for sentence in sentences:
        if sentence in seen:
            outcomes.append(sentence in set(state.labeled_pos))
            continue
        label = store.request_label(sentence, skill_id)
        if label is None:
            state.save(state_path)
            raise CurationSuspended(
                f"annotation store exhausted after {len(seen)} labels", str(state_path)
            )
        (state.labeled_pos if label else state.labeled_neg).append(sentence)
        seen.add(sentence)
        outcomes.append(label)
    return outcomes


def curate_manual(
    skill,
    corpus_sentences: Sequence[str],
    regexes: Sequence[str],
    annotation_store: AnnotationStore,
    encoder: TokenEncoder,
    *,
    min_positives: int = 50,
    precision_target: float = DEPLOYABLE_TEST_PRECISION,
    max_stall: int = 5,
    mine_batch: int = 50,
    state_path: str | Path | None = None,
    train_config: TrainConfig | None = None,
    synthetic_fallback: Sequence[str] = (),
) -> CurationResult:
    """Iterative human-in-the-loop curation.

    Seed candidates come from regex matches over the corpus (plus optional
    validated fallback sentences). Once enough positives are labeled, a
    preliminary detector mines new candidates from the unlabeled remainder;
    the loop repeats until mined-candidate precision reaches the target or
    stalls for `max_stall` consecutive iterations.
    """
    if not regexes:
        raise ValueError("at least one candidate regex is required")
    state_path = state_path or f"curate_manual_{skill.skill_id}.state.json"
    state = _CurationState(skill_id=skill.skill_id)

    compiled = [re.compile(rx) for rx in regexes]
    matched = [s for s in corpus_sentences if any(rx.search(s) for rx in compiled)]
    if not matched:
        state.save(state_path)
        raise CurationSuspended(
            "regexes matched no corpus sentences; provide new expressions", str(state_path)
        )
    candidates = list(dict.fromkeys(list(matched) + list(synthetic_fallback)))

    # label seed candidates until enough positives are known
    cursor = 0
    while len(state.labeled_pos) < min_positives and cursor < len(candidates):
        batch = candidates[cursor : cursor + mine_batch]
        cursor += len(batch)
        _label_batch(batch, skill.skill_id, annotation_store, state, state_path)
    if len(state.labeled_pos) < min_positives:
        state.save(state_path)
        raise CurationSuspended(
            f"candidate pool exhausted with {len(state.labeled_pos)} positives "
            f"(< {min_positives}); provide new regexes or fallback data",
            str(state_path),
        )

    if not state.labeled_neg:
        # need contrast before a preliminary detector can be trained
        unmatched = [s for s in corpus_sentences if s not in set(candidates)][:mine_batch]
        _label_batch(unmatched, skill.skill_id, annotation_store, state, state_path)
        if not state.labeled_neg:
            state.save(state_path)
            raise CurationSuspended(
                "no negative examples found; provide harder candidates", str(state_path)
            )

    status = "stalled"
    config = train_config or TrainConfig()
    while state.non_improving < max_stall:
        state.iterations += 1
        training_set = SkillTrainingSet(
            skill_id=skill.skill_id,
            positives=tuple(state.labeled_pos),
            negatives=tuple(state.labeled_neg),
            provenance="manual",
        )
        detector = train_detector(training_set, encoder, config=config)

        labeled = set(state.labeled_pos) | set(state.labeled_neg)
        mined = []
        for sentence in corpus_sentences:
            if sentence in labeled:
                continue
            if detect(sentence, detector, encoder):
                mined.append(sentence)
            if len(mined) >= mine_batch:
                break
        if mined:
            outcomes = _label_batch(
                mined, skill.skill_id, annotation_store, state, state_path
            )
            precision = sum(outcomes) / len(outcomes)
        else:
            precision = 0.0
        state.precision_history.append(precision)
        if precision >= precision_target:
            status = "completed"
            break
        if precision > state.best_precision + 1e-9:
            state.best_precision = precision
            state.non_improving = 0
        else:
            state.non_improving += 1

    final = SkillTrainingSet(
        skill_id=skill.skill_id,
        positives=tuple(state.labeled_pos),
        negatives=tuple(state.labeled_neg),
        provenance="manual",
    )
    return CurationResult(
        training_set=final,
        status=status,
        iterations=state.iterations,
        precision_history=state.precision_history,
    )


REGEX_PROMPT = (
    "Write one regular expression (Python syntax) that matches sentences "
    "demonstrating this grammar pattern.\n"
    "Pattern: {can_do}\nExamples:\n{examples}\n"
    "Reply with the regular expression only. Attempt {attempt}."
)

JUDGE_SENTENCE_PROMPT = (
    "Pattern: {can_do}\n"
    "Does the following sentence demonstrate the pattern? "
    "Answer 'yes' or 'no' only.\nSentence: {sentence}"
)


def curate_automatized(
    skill,
    llm_client,
    corpus_sentences: Sequence[str],
    encoder: TokenEncoder,
    *,
    regex_retries: int = 3,
    state_path: str | Path | None = None,
    **manual_kwargs,
) -> CurationResult:
    """The manual loop with the human replaced by an LLM: the model proposes
    the candidate regex and answers the per-sentence yes/no judgments."""
    examples_block = "\n".join(f"{i + 1}. {ex}" for i, ex in enumerate(skill.examples))
    retries = 0
    regex = None
    for attempt in range(1, regex_retries + 1):
        reply = llm_client.chat_complete(
            [
                {
                    "role": "user",
                    "content": REGEX_PROMPT.format(
                        can_do=skill.can_do, examples=examples_block, attempt=attempt
                    ),
                }
            ]
        )
        candidate = reply.strip().splitlines()[0].strip() if reply.strip() else ""
        try:
            re.compile(candidate)
            regex = candidate
            break
        except re.error as exc:
            retries += 1
            logger.warning("skill %s: invalid regex from client (%s); retrying", skill.skill_id, exc)
    if regex is None:
        raise CurationSuspended(
            f"client produced no valid regex in {regex_retries} attempts", None
        )

    def llm_judge(sentence: str, skill_id: int) -> bool:
        reply = llm_client.chat_complete(
            [
                {
                    "role": "user",
                    "content": JUDGE_SENTENCE_PROMPT.format(can_do=skill.can_do, sentence=sentence),
                }
            ]
        )
        return reply.strip().lower().startswith("y")

    store = CallbackAnnotationStore(llm_judge, annotator="llm")
    result = curate_manual(
        skill,
        corpus_sentences,
        [regex],
        store,
        encoder,
        state_path=state_path,
        **manual_kwargs,
    )
    final = replace(result.training_set, provenance="automatized")
    return CurationResult(
        training_set=final,
        status=result.status,
        iterations=result.iterations,
        precision_history=result.precision_history,
        regex_retries=retries,
    )


# ---------------------------------------------------------------------------
# Test-precision evaluation
# ---------------------------------------------------------------------------


@dataclass
class TestPrecisionResult:
    precision: float | None
    n_sampled: int
    n_true: int
    flag: str | None = None


def evaluate_test_precision(
    detector: DetectorModel,
    encoder: TokenEncoder,
    test_sentences: Sequence[str],
    annotation_store: AnnotationStore,
    sample: int = 20,
    seed: int = 0,
) -> TestPrecisionResult:
    """Human-labeled precision on up to `sample` detected positives drawn
    from the test corpus. Sets the detector's test_precision on success;
    flags 'no-support' when the detector never fires."""
    detected = [s for s in test_sentences if detect(s, detector, encoder)]
    if not detected:
        return TestPrecisionResult(precision=None, n_sampled=0, n_true=0, flag="no-support")
    rng = np.random.default_rng(seed)
    if len(detected) > sample:
        idx = rng.choice(len(detected), size=sample, replace=False)
        detected = [detected[i] for i in sorted(idx)]
    n_true = 0
    for sentence in detected:
        label = annotation_store.request_label(sentence, detector.skill_id)
        if label is None:
            raise CurationSuspended("annotation store exhausted during test evaluation", None)
        n_true += int(label)
    precision = n_true / len(detected)
    detector.metrics.test_precision = precision
    return TestPrecisionResult(precision=precision, n_sampled=len(detected), n_true=n_true)
