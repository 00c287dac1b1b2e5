"""Skill co-occurrence statistics over adjacent dialogue turns and the
simulated learner intervention.

The adjacency unit: a turn is *treatment-exposed* to a skill when one of the
other speaker's previous two turns (within the same dialogue) contained it;
all other turns are controls. Presence is counted at the turn level.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .corpus import Dialogue, DialogueSnippet, Turn
from .detector import DetectorBundle
from .egp import ConstraintSet, Level, SkillRepository, format_dialog
from .gateway import ChatClient, ChatParams
from .records import GenerationRecord

logger = logging.getLogger(__name__)


class DegenerateTableError(ValueError):
    """All-zero contingency table: the test is undefined."""


# ---------------------------------------------------------------------------
# Fisher's exact test (two-sided)
# ---------------------------------------------------------------------------

_EXACT_TOTAL_LIMIT = 10_000  # exact integer arithmetic below, log-gamma above
_LOG_RELATIVE_GATE = 1e-7


def _odds_ratio(a: int, b: int, c: int, d: int) -> float:
    if min(a, b, c, d) == 0:
        # Haldane-Anscombe correction for reporting; significance is unaffected
        return ((a + 0.5) * (d + 0.5)) / ((b + 0.5) * (c + 0.5))
    return (a * d) / (b * c)


def fisher_exact(table: Sequence[Sequence[int]]) -> tuple[float, float]:
    """Two-sided Fisher's exact test on a 2x2 table [[a, b], [c, d]].

    The p-value sums hypergeometric probabilities of all tables with the same
    margins that are at most as probable as the observed one. Small tables
    use exact integer arithmetic; large ones use log-gamma with the standard
    relative tolerance on the "as extreme" comparison. Returns (p, odds ratio).
    """
    (a, b), (c, d) = table
    cells = (a, b, c, d)
    if any(int(x) != x or x < 0 for x in cells):
        raise ValueError(f"cells must be non-negative integers, got {cells}")
    a, b, c, d = (int(x) for x in cells)
    n = a + b + c + d
    if n == 0:
        raise DegenerateTableError("all-zero table")

    r1, r2, c1 = a + b, c + d, a + c
    lo, hi = max(0, c1 - r2), min(r1, c1)

    if n <= _EXACT_TOTAL_LIMIT:
        weights = [math.comb(r1, k) * math.comb(r2, c1 - k) for k in range(lo, hi + 1)]
        observed = weights[a - lo]
        numerator = sum(w for w in weights if w <= observed)
        p = numerator / math.comb(n, c1)
    else:
        def log_weight(k: int) -> float:
            return (
                math.lgamma(r1 + 1) - math.lgamma(k + 1) - math.lgamma(r1 - k + 1)
                + math.lgamma(r2 + 1) - math.lgamma(c1 - k + 1) - math.lgamma(r2 - c1 + k + 1)
            )

        log_obs = log_weight(a)
        gate = log_obs + math.log1p(_LOG_RELATIVE_GATE)
        log_total = (
            math.lgamma(n + 1) - math.lgamma(c1 + 1) - math.lgamma(n - c1 + 1)
        )
        p = sum(
            math.exp(lw - log_total)
            for k in range(lo, hi + 1)
            if (lw := log_weight(k)) <= gate
        )
    return min(p, 1.0), _odds_ratio(a, b, c, d)


# ---------------------------------------------------------------------------
# Adjacency counting
# ---------------------------------------------------------------------------


@dataclass
class CoOccurrencePair:
    g_pre: int
    g_post: int
    count_with: int = 0
    exposure_with: int = 0
    count_without: int = 0
    exposure_without: int = 0
    p_value: float | None = None
    odds_ratio: float | None = None
    freq_difference: float | None = None
    significant: bool | None = None
    executed: bool = False

    def table(self) -> list[list[int]]:
        return [
            [self.count_with, self.exposure_with - self.count_with],
            [self.count_without, self.exposure_without - self.count_without],
        ]


def _exposures(dialogue: Dialogue, window: int = 2) -> list[set[int]]:
    """Skills each turn is treatment-exposed to: skills of the other
    speaker's turns for which this turn is among their next `window`
    same-speaker responses. Windows never cross dialogue boundaries."""
    exposures: list[set[int]] = [set() for _ in dialogue.turns]
    for j, source in enumerate(dialogue.turns):
        if not source.detected_skills:
            continue
        responded = 0
        for i in range(j + 1, len(dialogue.turns)):
            if dialogue.turns[i].speaker == source.speaker:
                continue
            exposures[i] |= source.detected_skills
            responded += 1
            if responded >= window:
                break
    return exposures


def count_adjacency(
    dialogues: Sequence[Dialogue],
    skill_ids: Iterable[int] | None = None,
    window: int = 2,
) -> list[CoOccurrencePair]:
    """Exposure/occurrence counts for every ordered skill pair.

    Requires labeled dialogues. The pair universe defaults to every skill
    observed in the corpus labels.
    """
    universe: set[int] = set(skill_ids) if skill_ids is not None else set()
    if skill_ids is None:
        for dialogue in dialogues:
            for turn in dialogue.turns:
                if turn.detected_skills is None:
                    raise ValueError("count_adjacency requires labeled dialogues")
                universe |= turn.detected_skills

    pairs = {
        (pre, post): CoOccurrencePair(g_pre=pre, g_post=post)
        for pre in sorted(universe)
        for post in sorted(universe)
    }
    for dialogue in dialogues:
        exposures = _exposures(dialogue, window)
        for turn, exposed in zip(dialogue.turns, exposures):
            present = turn.detected_skills or frozenset()
            for pre in universe:
                treated = pre in exposed
                for post in universe:
                    pair = pairs[(pre, post)]
                    if treated:
                        pair.exposure_with += 1
                        pair.count_with += int(post in present)
                    else:
                        pair.exposure_without += 1
                        pair.count_without += int(post in present)
    return list(pairs.values())


@dataclass
class PairTestSummary:
    n_tests: int
    n_significant: int
    bonferroni_threshold: float
    mean_odds_ratio: float | None
    mean_freq_difference: float | None
    share_freq_difference_above: float | None
    freq_difference_cutoff: float = 0.05

    def to_dict(self) -> dict:
        return {
            "n_tests": self.n_tests,
            "n_significant": self.n_significant,
            "bonferroni_threshold": self.bonferroni_threshold,
            "mean_odds_ratio": self.mean_odds_ratio,
            "mean_freq_difference": self.mean_freq_difference,
            "share_freq_difference_above": self.share_freq_difference_above,
            "freq_difference_cutoff": self.freq_difference_cutoff,
        }


def test_all_pairs(
    pairs: Sequence[CoOccurrencePair],
    alpha: float = 0.05,
    freq_cutoff: float = 0.05,
) -> PairTestSummary:
    """Fisher-test every pair with both groups populated; Bonferroni over the
    number of executed tests. Mutates the pairs in place and returns summary
    statistics (mean odds ratio over finite values, mean frequency
    difference, share of pairs above the frequency cutoff)."""
    executable = [
        p for p in pairs if p.exposure_with > 0 and p.exposure_without > 0
    ]
    n_tests = len(executable)
    threshold = alpha / n_tests if n_tests else alpha
    executable_keys = {(p.g_pre, p.g_post) for p in executable}
    for pair in pairs:
        if (pair.g_pre, pair.g_post) not in executable_keys:
            pair.executed = False
            pair.significant = None
    for pair in executable:
        p_value, odds = fisher_exact(pair.table())
        pair.p_value = p_value
        pair.odds_ratio = odds
        pair.freq_difference = (
            pair.count_with / pair.exposure_with - pair.count_without / pair.exposure_without
        )
        pair.significant = p_value < threshold
        pair.executed = True
    odds_values = [p.odds_ratio for p in executable if p.odds_ratio is not None and math.isfinite(p.odds_ratio)]
    freq_values = [p.freq_difference for p in executable if p.freq_difference is not None]
    return PairTestSummary(
        n_tests=n_tests,
        n_significant=sum(1 for p in executable if p.significant),
        bonferroni_threshold=threshold,
        mean_odds_ratio=sum(odds_values) / len(odds_values) if odds_values else None,
        mean_freq_difference=sum(freq_values) / len(freq_values) if freq_values else None,
        share_freq_difference_above=(
            sum(1 for v in freq_values if v > freq_cutoff) / len(freq_values)
            if freq_values
            else None
        ),
        freq_difference_cutoff=freq_cutoff,
    )


def write_pairs_csv(pairs: Sequence[CoOccurrencePair], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "g_pre", "g_post", "count_with", "exposure_with", "count_without",
                "exposure_without", "p_value", "odds_ratio", "freq_difference", "significant",
            ]
        )
        for p in pairs:
            writer.writerow(
                [
                    p.g_pre, p.g_post, p.count_with, p.exposure_with, p.count_without,
                    p.exposure_without, p.p_value, p.odds_ratio, p.freq_difference, p.significant,
                ]
            )


# ---------------------------------------------------------------------------
# Learner simulation
# ---------------------------------------------------------------------------


def cefr_level_descriptions() -> dict[str, str]:
    """The bundled CEFR oral-interaction rubric, one description per level."""
    payload = resources.files("grammarctl.data").joinpath("cefr_levels.json").read_text("utf-8")
    return json.loads(payload)


LEARNER_PROMPT_LEVEL = (
    "Given the dialog, write a possible next turn of {next_speaker} that an "
    "English learner on CEFR level {level} could produce:\n{dialog}"
)
LEARNER_SYSTEM_LEVEL = (
    "Only output {next_speaker}'s response using language on CEFR level {level}. "
    "This level is described as: {description}"
)
LEARNER_PROMPT_PLAIN = (
    "Given the dialog, write a possible next turn of {next_speaker}:\n{dialog}"
)
LEARNER_SYSTEM_PLAIN = "Only output {next_speaker}'s response."


def simulate_learner_turn(
    client: ChatClient,
    turns: Sequence[tuple[str, str]],
    next_speaker: str,
    level: Level | None,
    params: ChatParams | None = None,
) -> str:
    """One simulated learner reply, optionally conditioned on a CEFR level
    whose bundled description is embedded in the system message."""
    dialog = format_dialog(turns)
    if level is None:
        system = LEARNER_SYSTEM_PLAIN.format(next_speaker=next_speaker)
        user = LEARNER_PROMPT_PLAIN.format(next_speaker=next_speaker, dialog=dialog)
    else:
        description = cefr_level_descriptions()[level.name]
        system = LEARNER_SYSTEM_LEVEL.format(
            next_speaker=next_speaker, level=level.name, description=description
        )
        user = LEARNER_PROMPT_LEVEL.format(
            next_speaker=next_speaker, level=level.name, dialog=dialog
        )
    return client.chat_complete(
        [{"role": "system", "content": system}, {"role": "user", "content": user}], params
    )


@dataclass
class InterventionResult:
    g_pre: int
    g_post: int
    proficiency: str  # CEFR level name or "unconditional"
    n_success_generations: int
    attempts: int
    g_post_rate_treatment: float | None = None
    g_post_rate_control: float | None = None
    p_value: float | None = None
    odds_ratio: float | None = None
    significant: bool | None = None
    too_difficult: bool | None = None
    status: str = "ok"  # ok | skipped
    diagnostic: str | None = None

    def to_row(self) -> list:
        return [
            self.g_pre, self.g_post, self.proficiency, self.n_success_generations,
            self.attempts, self.g_post_rate_treatment, self.g_post_rate_control,
            self.p_value, self.odds_ratio, self.significant, self.too_difficult, self.status,
        ]


Generator = Callable[[DialogueSnippet, ConstraintSet | None], GenerationRecord]


def _collect_condition(
    snippets: Sequence[DialogueSnippet],
    generate: Generator,
    bundle: DetectorBundle,
    g_pre: int,
    want_pre: bool,
    n: int,
    max_attempts: int,
    rng: random.Random,
) -> tuple[list[tuple[DialogueSnippet, str]], int]:
    """Generate bot turns and keep those where g_pre presence matches the
    condition (treatment wants it, control excludes it)."""
    kept: list[tuple[DialogueSnippet, str]] = []
    attempts = 0
    constraint = ConstraintSet.explicit([g_pre]) if want_pre else None
    while len(kept) < n and attempts < max_attempts:
        snippet = snippets[rng.randrange(len(snippets))]
        record = generate(snippet, constraint)
        attempts += 1
        if record.failed or not record.response.strip():
            continue
        has_pre = bundle.detect(g_pre, record.response) if g_pre in bundle.detectors else False
        if has_pre == want_pre:
            kept.append((snippet, record.response))
    return kept, attempts


def run_intervention(
    pairs: Sequence[CoOccurrencePair],
    dialogues: Sequence[Dialogue],
    repo: SkillRepository,
    bundle: DetectorBundle,
    generate: Generator,
    learner_client: ChatClient,
    levels: Sequence[Level | None] = (None,),
    n: int = 100,
    seed: int = 0,
    success_floor: float = 0.1,
    attempts_factor: int = 10,
    alpha: float = 0.05,
) -> list[InterventionResult]:
    """For each significant pair and proficiency level: generate
    g_pre-controlled bot turns (treatment) and unconstrained ones filtered to
    exclude g_pre (control), simulate the learner reply to both, and Fisher-
    test g_post presence between conditions."""
    from .corpus import sample_snippets

    significant_pairs = [p for p in pairs if p.significant]
    snippets = sample_snippets(dialogues, max(n * 4, 200), seed)
    results: list[InterventionResult] = []
    rng = random.Random(seed)
    max_attempts = n * attempts_factor

    for pair in significant_pairs:
        treatment, t_attempts = _collect_condition(
            snippets, generate, bundle, pair.g_pre, True, n, max_attempts, rng
        )
        control, c_attempts = _collect_condition(
            snippets, generate, bundle, pair.g_pre, False, n, max_attempts, rng
        )
        for level in levels:
            proficiency = level.name if level is not None else "unconditional"
            too_difficult = None
            if level is not None and pair.g_post in repo:
                too_difficult = repo.get(pair.g_post).level > level
            if (
                len(treatment) < max(1, int(n * success_floor))
                or len(control) < max(1, int(n * success_floor))
            ):
                results.append(
                    InterventionResult(
                        g_pre=pair.g_pre,
                        g_post=pair.g_post,
                        proficiency=proficiency,
                        n_success_generations=min(len(treatment), len(control)),
                        attempts=t_attempts + c_attempts,
                        status="skipped",
                        too_difficult=too_difficult,
                        diagnostic=(
                            f"success rate below floor: treatment {len(treatment)}/{t_attempts}, "
                            f"control {len(control)}/{c_attempts}"
                        ),
                    )
                )
                continue

            def learner_has_post(snippet: DialogueSnippet, bot_turn: str) -> bool:
                bot_speaker = snippet.next_speaker
                learner_speaker = "B" if bot_speaker == "A" else "A"
                turns = snippet.context_pairs() + [(bot_speaker, bot_turn)]
                reply = simulate_learner_turn(learner_client, turns, learner_speaker, level)
                if not reply.strip() or pair.g_post not in bundle.detectors:
                    return False
                return bundle.detect(pair.g_post, reply)

            t_hits = sum(learner_has_post(s, r) for s, r in treatment)
            c_hits = sum(learner_has_post(s, r) for s, r in control)
            table = [
                [t_hits, len(treatment) - t_hits],
                [c_hits, len(control) - c_hits],
            ]
            p_value, odds = fisher_exact(table)
            results.append(
                InterventionResult(
                    g_pre=pair.g_pre,
                    g_post=pair.g_post,
                    proficiency=proficiency,
                    n_success_generations=min(len(treatment), len(control)),
                    attempts=t_attempts + c_attempts,
                    g_post_rate_treatment=t_hits / len(treatment),
                    g_post_rate_control=c_hits / len(control),
                    p_value=p_value,
                    odds_ratio=odds,
                    significant=p_value < alpha,
                    too_difficult=too_difficult,
                )
            )
    return results


def write_intervention_csv(results: Sequence[InterventionResult], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "g_pre", "g_post", "proficiency", "n_success", "attempts",
                "rate_treatment", "rate_control", "p_value", "odds_ratio",
                "significant", "too_difficult", "status",
            ]
        )
        for result in results:
            writer.writerow(result.to_row())


def render_intervention_grid(results: Sequence[InterventionResult]) -> str:
    """Text grid: rows are pairs, columns proficiency levels; cells show the
    odds ratio when significant, '.' otherwise, and '[grey]' marks cells not
    expected to be significant because the target skill is above the level."""
    levels = list(dict.fromkeys(r.proficiency for r in results))
    pair_keys = list(dict.fromkeys((r.g_pre, r.g_post) for r in results))
    by_key = {(r.g_pre, r.g_post, r.proficiency): r for r in results}
    width = 12
    lines = ["  ".join([f"{'pair':>12}"] + [f"{lv:>{width}}" for lv in levels])]
    for pre, post in pair_keys:
        row = [f"{pre}->{post:>7}"]
        for lv in levels:
            r = by_key.get((pre, post, lv))
            if r is None or r.status == "skipped":
                cell = "skip"
            elif r.significant:
                cell = f"{r.odds_ratio:.2f}" if r.odds_ratio is not None else "sig"
            else:
                cell = "."
            if r is not None and r.too_difficult:
                cell += "[grey]"
            row.append(f"{cell:>{width}}")
        lines.append("  ".join(row))
    return "\n".join(lines)
