"""Constraint satisfaction, quality, diversity, and speed metrics, plus the
test-suite builders and report aggregation."""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Dialogue, DialogueSnippet, sample_snippets
from .detector import DetectorBundle
from .egp import ConstraintSet, ConstraintVariant, Level, SkillRepository
from .gateway import ChatClient, JudgeParseError, QualityDimension, judge_quality
from .records import GenerationRecord, Strategy

logger = logging.getLogger(__name__)


class UnmeasuredLatencyError(ValueError):
    """Speed is undefined without a positive measured latency."""


# ---------------------------------------------------------------------------
# Per-record metrics
# ---------------------------------------------------------------------------


def _record_detections(record: GenerationRecord, bundle: DetectorBundle | None) -> frozenset[int]:
    if bundle is not None:
        if not record.response.strip():
            return frozenset()
        return frozenset(bundle.detect_all(record.response))
    return record.detections


def satisfaction_task1(record: GenerationRecord, bundle: DetectorBundle | None = None) -> float:
    """Fraction of the explicitly requested skills present in the response."""
    if record.constraints.variant is not ConstraintVariant.EXPLICIT:
        raise ValueError("satisfaction_task1 requires explicit constraints")
    requested = set(record.constraints.explicit_skills)
    detections = _record_detections(record, bundle)
    return len(requested & detections) / len(requested)


def satisfaction_task2(
    record: GenerationRecord,
    repo: SkillRepository,
    bundle: DetectorBundle | None = None,
) -> tuple[int, int]:
    """(satisfied categories, overshoot count) for categorical constraints.

    A pair is satisfied when at least one detected skill matches both the
    subcategory and the exact level; overshoot counts detected skills in a
    constrained subcategory at a level strictly above the requested one.
    """
    if record.constraints.variant is not ConstraintVariant.CATEGORICAL:
        raise ValueError("satisfaction_task2 requires categorical constraints")
    detections = _record_detections(record, bundle)
    detected_skills = [repo.get(sid) for sid in detections if sid in repo]
    satisfied = 0
    overshoot = 0
    for subcategory, level in record.constraints.category_levels:
        in_category = [s for s in detected_skills if s.subcategory.lower() == subcategory.lower()]
        if any(s.level == level for s in in_category):
            satisfied += 1
        overshoot += sum(1 for s in in_category if s.level > level)
    return satisfied, overshoot


_WORD_STRIP = re.compile(r"[^\w']+")


def _normalized_words(text: str) -> list[str]:
    words = []
    for raw in text.lower().split():
        w = _WORD_STRIP.sub("", raw)
        if w:
            words.append(w)
    return words


def _bigrams(text: str) -> list[tuple[str, str]]:
    words = _normalized_words(text)
    return list(zip(words, words[1:]))


def distinct_2(groups: Iterable[Sequence[str]]) -> float:
    """Mean over groups of (unique word bigrams / total word bigrams).

    Each group holds the responses generated for one constraint set across
    contexts; bigrams are pooled within the group. A group without bigrams
    (e.g. single one-word response) contributes 0 with a warning.
    """
    ratios = []
    for group in groups:
        bigrams: list[tuple[str, str]] = []
        for response in group:
            bigrams.extend(_bigrams(response))
        if not bigrams:
            logger.warning("distinct-2 group with no bigrams; counting as 0")
            ratios.append(0.0)
        else:
            ratios.append(len(set(bigrams)) / len(bigrams))
    if not ratios:
        raise ValueError("distinct_2 requires at least one group")
    return sum(ratios) / len(ratios)


def group_by_constraints(records: Sequence[GenerationRecord]) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for record in records:
        key = json.dumps(record.constraints.to_dict(), sort_keys=True)
        groups.setdefault(key, []).append(record.response)
    return groups


def speed_wpm(record: GenerationRecord) -> float:
    """Words per minute over the measured generation latency."""
    if record.latency_seconds <= 0:
        raise UnmeasuredLatencyError("latency is unmeasured (non-positive)")
    return record.word_count / (record.latency_seconds / 60.0)


# ---------------------------------------------------------------------------
# Quality via the judge
# ---------------------------------------------------------------------------


@dataclass
class DimensionSummary:
    mean: float | None
    n_scored: int
    n_excluded: int


def dialog_block_for_judge(snippet: DialogueSnippet) -> str:
    lines = ["Dialog:"]
    lines.extend(f"{t.speaker}: {t.text}" for t in snippet.context)
    return "\n".join(lines)


def run_quality(
    records: Sequence[GenerationRecord],
    judge_client: ChatClient,
    dimensions: Sequence[QualityDimension] = tuple(QualityDimension),
) -> dict[QualityDimension, DimensionSummary]:
    """Judge every record on every dimension; records whose verdict cannot be
    parsed are excluded from that dimension's mean and counted."""
    scores: dict[QualityDimension, list[int]] = {d: [] for d in dimensions}
    excluded: dict[QualityDimension, int] = {d: 0 for d in dimensions}
    for record in records:
        block = dialog_block_for_judge(record.snippet)
        for dim in dimensions:
            try:
                verdict = judge_quality(judge_client, block, record.response, dim)
                scores[dim].append(verdict.score)
            except JudgeParseError:
                excluded[dim] += 1
    return {
        d: DimensionSummary(
            mean=(sum(scores[d]) / len(scores[d])) if scores[d] else None,
            n_scored=len(scores[d]),
            n_excluded=excluded[d],
        )
        for d in dimensions
    }


# ---------------------------------------------------------------------------
# Suite builders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteCase:
    snippet: DialogueSnippet
    constraints: ConstraintSet
    ground_truth: str | None = None  # set on corpus-mined cases


# size -> (categories, skills per category); 2 admits both shapes
_SIZE_SHAPES: dict[int, list[tuple[int, int]]] = {
    1: [(1, 1)],
    2: [(2, 1), (1, 2)],
    3: [(3, 1)],
    4: [(2, 2)],
    6: [(3, 2)],
}


def _eligible_subcategories(
    repo: SkillRepository, eligible_ids: set[int] | None
) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for skill in repo:
        if eligible_ids is not None and skill.skill_id not in eligible_ids:
            continue
        groups.setdefault(skill.subcategory.lower(), []).append(skill.skill_id)
    return {k: sorted(v) for k, v in groups.items()}


def _labeled_snippet_index(dialogues: Sequence[Dialogue]) -> list[tuple[DialogueSnippet, str, frozenset[int]]]:
    """(snippet, ground-truth next turn, its labels) for every valid position."""
    index = []
    for dialogue in dialogues:
        for start in range(max(0, len(dialogue.turns) - 4)):
            next_turn = dialogue.turns[start + 4]
            if next_turn.detected_skills is None:
                continue
            snippet = DialogueSnippet(
                context=dialogue.turns[start : start + 4],
                next_speaker=next_turn.speaker,
                provenance=(dialogue.dialogue_id, start),
            )
            index.append((snippet, next_turn.text, next_turn.detected_skills))
    return index


def build_task1_suite(
    dialogues: Sequence[Dialogue],
    repo: SkillRepository,
    seed: int,
    n_snippets: int = 100,
    sizes: Sequence[int] = (1, 2, 3, 4, 6),
    eligible_skills: Iterable[int] | None = None,
    augment_per_set: int = 1,
) -> list[SuiteCase]:
    """Explicit-constraint test cases: for each sampled snippet and size, draw
    1-3 subcategories and 1-2 skills per subcategory; then add corpus-mined
    cases whose true next turn already satisfies the drawn constraints."""
    unknown = [s for s in sizes if s not in _SIZE_SHAPES]
    if unknown:
        raise ValueError(f"unsupported constraint sizes {unknown}; choose from {sorted(_SIZE_SHAPES)}")
    eligible = set(eligible_skills) if eligible_skills is not None else None
    groups = _eligible_subcategories(repo, eligible)
    rng = random.Random(seed)
    snippets = sample_snippets(dialogues, n_snippets, seed)
    labeled_index = _labeled_snippet_index(dialogues) if augment_per_set else []

    cases: list[SuiteCase] = []
    for snippet in snippets:
        for size in sizes:
            shapes = [
                (cats, per) for cats, per in _SIZE_SHAPES[size]
                if len([g for g in groups.values() if len(g) >= per]) >= cats
            ]
            if not shapes:
                raise ValueError(f"repository too small for constraint size {size}")
            cats, per = shapes[rng.randrange(len(shapes))] if len(shapes) > 1 else shapes[0]
            usable = sorted(k for k, v in groups.items() if len(v) >= per)
            chosen_subs = rng.sample(usable, cats)
            skill_ids: list[int] = []
            for sub in chosen_subs:
                skill_ids.extend(rng.sample(groups[sub], per))
            constraints = ConstraintSet.explicit(skill_ids)
            cases.append(SuiteCase(snippet=snippet, constraints=constraints))

            if augment_per_set:
                wanted = set(skill_ids)
                added = 0
                for cand_snippet, truth, labels in labeled_index:
                    if wanted <= labels:
                        cases.append(
                            SuiteCase(
                                snippet=cand_snippet,
                                constraints=constraints,
                                ground_truth=truth,
                            )
                        )
                        added += 1
                        if added >= augment_per_set:
                            break
    return cases


def build_task2_suite(
    dialogues: Sequence[Dialogue],
    repo: SkillRepository,
    seed: int,
    n_snippets: int = 500,
    eligible_skills: Iterable[int] | None = None,
) -> list[SuiteCase]:
    """Categorical test cases: per snippet one case each with 1, 2, and 3
    (subcategory, level) pairs, levels drawn from those present in the
    subcategory (so every pair has at least one expandable skill)."""
    eligible = set(eligible_skills) if eligible_skills is not None else None
    groups = _eligible_subcategories(repo, eligible)
    levels_by_sub = {
        sub: sorted({repo.get(sid).level for sid in ids}) for sub, ids in groups.items()
    }
    subs = sorted(groups)
    if not subs:
        raise ValueError("repository has no eligible subcategories")
    rng = random.Random(seed)
    snippets = sample_snippets(dialogues, n_snippets, seed)
    cases: list[SuiteCase] = []
    for snippet in snippets:
        for n_pairs in (1, 2, 3):
            chosen = rng.sample(subs, min(n_pairs, len(subs)))
            pairs = [(sub, Level(rng.choice(levels_by_sub[sub]))) for sub in chosen]
            cases.append(SuiteCase(snippet=snippet, constraints=ConstraintSet.categorical(pairs)))
    return cases


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------


@dataclass
class SkillRow:
    skill_id: int
    requested: int = 0
    satisfied: int = 0

    @property
    def rate(self) -> float:
        return self.satisfied / self.requested if self.requested else 0.0


@dataclass
class StrategyReport:
    strategy: Strategy
    case_counts: dict[int, int] = field(default_factory=dict)
    satisfaction_by_count: dict[int, float] = field(default_factory=dict)
    mean_satisfaction: float = 0.0
    distinct_2: float = 0.0
    speed_wpm: float | None = None
    quality: dict[str, dict] = field(default_factory=dict)
    per_skill: dict[int, SkillRow] = field(default_factory=dict)
    n_failed: int = 0
    # task-2 aggregates
    task2_satisfied_rate: float | None = None
    task2_overshoot_rate: float | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "case_counts": {str(k): v for k, v in sorted(self.case_counts.items())},
            "satisfaction_by_count": {
                str(k): v for k, v in sorted(self.satisfaction_by_count.items())
            },
            "mean_satisfaction": self.mean_satisfaction,
            "distinct_2": self.distinct_2,
            "speed_wpm": self.speed_wpm,
            "quality": self.quality,
            "n_failed": self.n_failed,
            "task2_satisfied_rate": self.task2_satisfied_rate,
            "task2_overshoot_rate": self.task2_overshoot_rate,
            "per_skill": {
                str(sid): {"requested": row.requested, "satisfied": row.satisfied, "rate": row.rate}
                for sid, row in sorted(self.per_skill.items())
            },
        }


@dataclass
class EvaluationReport:
    task: str  # task1 | task2
    strategies: dict[Strategy, StrategyReport] = field(default_factory=dict)
    detector_provenance: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "detector_provenance": self.detector_provenance,
            "strategies": {s.value: r.to_dict() for s, r in self.strategies.items()},
        }


def _detector_provenance(bundle: DetectorBundle | None) -> dict:
    if bundle is None:
        return {"note": "detections taken from records as generated"}
    return {
        "encoder_id": bundle.encoder.encoder_id,
        "deployable_skills": sorted(bundle.deployable()),
        "provenance": {
            str(sid): det.provenance for sid, det in sorted(bundle.detectors.items())
        },
    }


def evaluate_task1(
    records: Sequence[GenerationRecord],
    bundle: DetectorBundle | None = None,
) -> EvaluationReport:
    """Aggregate explicit-constraint records into a per-strategy report."""
    report = EvaluationReport(task="task1", detector_provenance=_detector_provenance(bundle))
    by_strategy: dict[Strategy, list[GenerationRecord]] = {}
    for record in records:
        by_strategy.setdefault(record.strategy, []).append(record)

    for strategy, strat_records in sorted(by_strategy.items(), key=lambda kv: kv[0].value):
        ok_records = [r for r in strat_records if not r.failed]
        strat_report = StrategyReport(strategy=strategy, n_failed=len(strat_records) - len(ok_records))
        sat_by_count: dict[int, list[float]] = {}
        all_sats: list[float] = []
        total_words = 0
        total_seconds = 0.0
        for record in ok_records:
            n = len(record.constraints.explicit_skills)
            sat = satisfaction_task1(record, bundle)
            sat_by_count.setdefault(n, []).append(sat)
            all_sats.append(sat)
            detections = _record_detections(record, bundle)
            for sid in record.constraints.explicit_skills:
                row = strat_report.per_skill.setdefault(sid, SkillRow(skill_id=sid))
                row.requested += 1
                row.satisfied += int(sid in detections)
            if record.latency_seconds > 0:
                total_words += record.word_count
                total_seconds += record.latency_seconds
        strat_report.case_counts = {n: len(v) for n, v in sat_by_count.items()}
        strat_report.satisfaction_by_count = {
            n: sum(v) / len(v) for n, v in sat_by_count.items()
        }
        strat_report.mean_satisfaction = sum(all_sats) / len(all_sats) if all_sats else 0.0
        if ok_records:
            strat_report.distinct_2 = distinct_2(group_by_constraints(ok_records).values())
        strat_report.speed_wpm = (
            total_words / (total_seconds / 60.0) if total_seconds > 0 else None
        )
        report.strategies[strategy] = strat_report
    return report


def evaluate_task2(
    records: Sequence[GenerationRecord],
    repo: SkillRepository,
    bundle: DetectorBundle | None = None,
) -> EvaluationReport:
    report = EvaluationReport(task="task2", detector_provenance=_detector_provenance(bundle))
    by_strategy: dict[Strategy, list[GenerationRecord]] = {}
    for record in records:
        by_strategy.setdefault(record.strategy, []).append(record)
    for strategy, strat_records in sorted(by_strategy.items(), key=lambda kv: kv[0].value):
        ok_records = [r for r in strat_records if not r.failed]
        strat_report = StrategyReport(strategy=strategy, n_failed=len(strat_records) - len(ok_records))
        sat_by_count: dict[int, list[float]] = {}
        total_pairs = 0
        total_satisfied = 0
        total_overshoot = 0
        total_words = 0
        total_seconds = 0.0
        for record in ok_records:
            n = len(record.constraints.category_levels)
            satisfied, overshoot = satisfaction_task2(record, repo, bundle)
            sat_by_count.setdefault(n, []).append(satisfied / n)
            total_pairs += n
            total_satisfied += satisfied
            total_overshoot += overshoot
            if record.latency_seconds > 0:
                total_words += record.word_count
                total_seconds += record.latency_seconds
        strat_report.case_counts = {n: len(v) for n, v in sat_by_count.items()}
        strat_report.satisfaction_by_count = {n: sum(v) / len(v) for n, v in sat_by_count.items()}
        all_rates = [v for vals in sat_by_count.values() for v in vals]
        strat_report.mean_satisfaction = sum(all_rates) / len(all_rates) if all_rates else 0.0
        strat_report.task2_satisfied_rate = (
            total_satisfied / total_pairs if total_pairs else None
        )
        strat_report.task2_overshoot_rate = (
            total_overshoot / total_pairs if total_pairs else None
        )
        if ok_records:
            strat_report.distinct_2 = distinct_2(group_by_constraints(ok_records).values())
        strat_report.speed_wpm = (
            total_words / (total_seconds / 60.0) if total_seconds > 0 else None
        )
        report.strategies[strategy] = strat_report
    return report


def attach_quality(
    report: EvaluationReport,
    records: Sequence[GenerationRecord],
    judge_client: ChatClient,
) -> None:
    by_strategy: dict[Strategy, list[GenerationRecord]] = {}
    for record in records:
        if not record.failed:
            by_strategy.setdefault(record.strategy, []).append(record)
    for strategy, strat_records in by_strategy.items():
        if strategy not in report.strategies:
            continue
        summaries = run_quality(strat_records, judge_client)
        report.strategies[strategy].quality = {
            dim.value: {
                "mean": summary.mean,
                "n_scored": summary.n_scored,
                "n_excluded": summary.n_excluded,
            }
            for dim, summary in summaries.items()
        }


def render_report_table(report: EvaluationReport) -> str:
    """Human-readable table: satisfaction by constraint count, then quality,
    diversity, and speed per strategy."""
    counts = sorted({n for r in report.strategies.values() for n in r.satisfaction_by_count})
    lines = []
    header = ["strategy"] + [str(n) for n in counts] + ["mean"]
    lines.append("  ".join(f"{h:>14}" for h in header))
    for strategy, strat in report.strategies.items():
        row = [strategy.value]
        for n in counts:
            value = strat.satisfaction_by_count.get(n)
            row.append(f"{value * 100:.1f}%" if value is not None else "-")
        row.append(f"{strat.mean_satisfaction * 100:.1f}%")
        lines.append("  ".join(f"{c:>14}" for c in row))
    lines.append("")
    header2 = ["strategy", "distinct-2", "speed", "failed"]
    quality_dims = [d.value for d in QualityDimension]
    lines.append("  ".join(f"{h:>22}" for h in header2 + quality_dims))
    for strategy, strat in report.strategies.items():
        row = [
            strategy.value,
            f"{strat.distinct_2:.2f}",
            f"{strat.speed_wpm:.0f} wpm" if strat.speed_wpm else "-",
            str(strat.n_failed),
        ]
        for dim in quality_dims:
            entry = strat.quality.get(dim)
            row.append(f"{entry['mean']:.2f}" if entry and entry.get("mean") is not None else "-")
        lines.append("  ".join(f"{c:>22}" for c in row))
    if report.task == "task2":
        lines.append("")
        lines.append("  ".join(f"{h:>22}" for h in ["strategy", "pairs satisfied", "overshoot rate"]))
        for strategy, strat in report.strategies.items():
            lines.append(
                "  ".join(
                    f"{c:>22}"
                    for c in [
                        strategy.value,
                        f"{(strat.task2_satisfied_rate or 0) * 100:.1f}%",
                        f"{(strat.task2_overshoot_rate or 0) * 100:.1f}%",
                    ]
                )
            )
    return "\n".join(lines)


def write_per_skill_csv(report: EvaluationReport, repo: SkillRepository, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["strategy", "skill_id", "subcategory", "guideword", "level", "requested", "satisfied", "rate"]
        )
        for strategy, strat in report.strategies.items():
            for sid, row in sorted(strat.per_skill.items()):
                skill = repo.get(sid) if sid in repo else None
                writer.writerow(
                    [
                        strategy.value,
                        sid,
                        skill.subcategory if skill else "",
                        skill.guideword if skill else "",
                        skill.level.name if skill else "",
                        row.requested,
                        row.satisfied,
                        f"{row.rate:.4f}",
                    ]
                )
