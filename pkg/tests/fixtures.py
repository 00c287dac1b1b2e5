"""Shared synthetic fixtures: regex-defined pseudo-skills, sentence and
dialogue generators, and a small in-memory skill repository.

The regexes are the independent labeling oracle for detector tests: detectors
are trained on regex-labeled sentences and judged against fresh regex labels.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass

from grammarctl.corpus import Dialogue, Turn
from grammarctl.egp import GrammarSkill, Level, SkillRepository, SkillType

# pseudo-skill ids
SKILL_SUPERLATIVE = 901  # word ending in -est preceded by 'the'
SKILL_WOULD = 902  # contains the word 'would'
SKILL_NEGATION = 903  # contains not / never / n't

PSEUDO_SKILL_REGEXES: dict[int, re.Pattern] = {
    SKILL_SUPERLATIVE: re.compile(r"\bthe\s+\w+est\b", re.IGNORECASE),
    SKILL_WOULD: re.compile(r"\bwould\b", re.IGNORECASE),
    SKILL_NEGATION: re.compile(r"\b(?:not|never)\b|n't\b", re.IGNORECASE),
}


def pseudo_skill_repository() -> SkillRepository:
    def skill(sid, sub, guide, can_do, level, examples):
        return GrammarSkill(
            skill_id=sid,
            super_category="Fixture",
            subcategory=sub,
            guideword=guide,
            can_do=can_do,
            level=level,
            skill_type=SkillType.FORM,
            examples=tuple(examples),
        )

    return SkillRepository(
        [
            skill(
                SKILL_SUPERLATIVE,
                "superlatives",
                "FORM: 'THE' + '-EST'",
                "Can use a word ending in '-est' after 'the'.",
                Level.A2,
                ["It's the biggest room in the house.", "She bought the cheapest phone."],
            ),
            skill(
                SKILL_WOULD,
                "would",
                "FORM: AFFIRMATIVE",
                "Can use 'would' in a statement.",
                Level.B1,
                ["I would visit the garden.", "He said he would call."],
            ),
            skill(
                SKILL_NEGATION,
                "negation",
                "FORM: 'NOT' / 'NEVER'",
                "Can negate a statement with 'not' or 'never'.",
                Level.A1,
                ["I do not like the movie.", "She never waits."],
            ),
        ]
    )


def oracle_labels(sentence: str) -> set[int]:
    return {sid for sid, rx in PSEUDO_SKILL_REGEXES.items() if rx.search(sentence)}


# ---------------------------------------------------------------------------
# Sentence generation
#
# Sentences are built compositionally with independent feature draws (modal
# 'would', negation, 'the'+superlative object), so skills co-occur freely and
# every lexical item shows up in positives and negatives of every skill. The
# only stable cue for a pseudo-skill is its actual grammatical pattern.
# ---------------------------------------------------------------------------

_NOUNS = [
    "room", "house", "dog", "cat", "garden", "movie", "book", "city", "train",
    "teacher", "idea", "river", "market", "song", "road", "friend", "meal",
    "game", "phone", "store", "window", "ticket", "photo", "letter", "coat",
]
_ADJS = [
    "big", "small", "cheap", "warm", "cold", "bright", "quiet", "busy",
    "happy", "strange", "slow", "fast", "kind", "old", "new",
]
_SUPERLATIVES = [a + ("est" if not a.endswith("e") else "st") for a in _ADJS]
_VERBS = [
    "like", "see", "visit", "remember", "find", "watch", "buy", "bring",
    "enjoy", "describe", "paint", "carry", "borrow", "clean", "open",
]
_NAMES = ["Maya", "Leo", "Sam", "Nina", "Omar", "Ada", "Kai", "Rosa"]
_EST_DECOYS = ["honest", "modest", "earnest"]  # -est words kept away from 'the'
_OTHER_MODALS = ["will", "can", "could", "must", "might"]


def _subject(rng: random.Random) -> str:
    return rng.choice(_NAMES + ["She", "He", "They", "We", "I", "You"])


def _object(rng: random.Random, superlative: bool) -> str:
    noun = rng.choice(_NOUNS)
    if superlative:
        return f"the {rng.choice(_SUPERLATIVES)} {noun}"
    return rng.choice(
        [f"a {rng.choice(_ADJS)} {noun}", f"the {noun}", rng.choice(_NAMES), f"every {noun}"]
    )


def _tail(rng: random.Random) -> str:
    noun = rng.choice(_NOUNS)
    return rng.choice(
        [
            "",
            "",
            " tomorrow",
            " yesterday",
            f" in the {noun}",
            f" near the {noun}",
            f" with {rng.choice(_NAMES)}",
            f" about the {noun}",
        ]
    )


def make_sentence(
    rng: random.Random,
    skill_id: int | None = None,
    would_rate: float = 0.25,
    neg_rate: float = 0.25,
    sup_rate: float = 0.3,
) -> str:
    """One synthetic sentence; forcing a skill only pins that feature flag."""
    want_would = (skill_id == SKILL_WOULD) or rng.random() < would_rate
    want_neg = (skill_id == SKILL_NEGATION) or rng.random() < neg_rate
    want_sup = (skill_id == SKILL_SUPERLATIVE) or rng.random() < sup_rate

    verb = rng.choice(_VERBS)
    obj = _object(rng, want_sup)
    tail = _tail(rng)
    frame = rng.random()

    if frame < 0.15:  # question
        modal = "would" if want_would else rng.choice(["will", "can", "do"])
        middle = " never" if want_neg else ""
        return f"{modal.capitalize()} you{middle} {verb} {obj}{tail}?"
    if frame < 0.30 and not want_would:  # predicative
        subj = _subject(rng)
        if want_sup:
            pred = f"the {rng.choice(_SUPERLATIVES)} {rng.choice(_NOUNS)}"
        else:
            pred = rng.choice(_ADJS + _EST_DECOYS)
        copula = "is not" if want_neg else "is"
        return f"{subj} {copula} {pred}{tail}."
    if frame < 0.42:  # reported speech
        subj = _subject(rng)
        modal = "would" if want_would else rng.choice(_OTHER_MODALS)
        middle = " not" if want_neg else ""
        return f"{subj} said they {modal}{middle} {verb} {obj}{tail}."
    # plain statement
    subj = _subject(rng)
    if want_would:
        if not want_neg:
            aux_phrase = "would"
        elif skill_id != SKILL_WOULD and rng.random() < 0.4:
            aux_phrase = "wouldn't"  # negated but no bare 'would' word
        else:
            aux_phrase = rng.choice(["would not", "would never"])
        return f"{subj} {aux_phrase} {verb} {obj}{tail}."
    if want_neg:
        aux = rng.choice(["does not", "doesn't", "never", "will not", "can't"])
        return f"{subj} {aux} {verb} {obj}{tail}."
    aux = rng.choice(["", ""] + _OTHER_MODALS)
    space = f" {aux} " if aux else " "
    return f"{subj}{space}{verb} {obj}{tail}."


def make_corpus(n: int, seed: int = 0) -> list[str]:
    """n synthetic sentences with independently co-occurring pseudo-skills."""
    rng = random.Random(seed)
    return [make_sentence(rng) for _ in range(n)]


def regex_training_set(skill_id: int, sentences: list[str]):
    """Split a corpus into a regex-labeled training set for one pseudo-skill."""
    from grammarctl.detector import SkillTrainingSet

    rx = PSEUDO_SKILL_REGEXES[skill_id]
    positives = tuple(s for s in sentences if rx.search(s))
    negatives = tuple(s for s in sentences if not rx.search(s))
    return SkillTrainingSet(
        skill_id=skill_id, positives=positives, negatives=negatives, provenance="manual"
    )


# ---------------------------------------------------------------------------
# Dialogue generation
# ---------------------------------------------------------------------------


def make_dialogue(dialogue_id: str, n_turns: int, rng: random.Random) -> Dialogue:
    turns = tuple(
        Turn(speaker="AB"[i % 2], text=make_sentence(rng, rng.choice([None, None, None, SKILL_WOULD])))
        for i in range(n_turns)
    )
    return Dialogue(dialogue_id=dialogue_id, source="fixture", turns=turns)


def make_dialogues(n: int, seed: int = 0, min_turns: int = 6, max_turns: int = 12) -> list[Dialogue]:
    rng = random.Random(seed)
    return [
        make_dialogue(f"fixture-{i}", rng.randint(min_turns, max_turns), rng) for i in range(n)
    ]


@dataclass
class PlantedCorpusSpec:
    """Parameters for a labeled corpus with one planted adjacency effect."""

    g_pre: int = 11
    g_post: int = 12
    noise_skills: tuple[int, ...] = (13, 14)
    n_dialogues: int = 120
    turns_per_dialogue: int = 12
    pre_rate: float = 0.3
    treatment_rate: float = 0.3
    control_rate: float = 0.05
    noise_rate: float = 0.05


def make_planted_corpus(spec: PlantedCorpusSpec, seed: int) -> list[Dialogue]:
    """Labeled dialogues where g_post appears more often in turns that follow
    (within the two-next-turn window) a g_pre turn of the other speaker.

    All plantings other than the g_pre -> g_post link are independent and
    symmetric across speakers, so only the planted ordered pair carries a
    real association. Turn text is filler; the signal lives in the labels.
    """
    rng = random.Random(seed)
    dialogues = []
    for d in range(spec.n_dialogues):
        n = spec.turns_per_dialogue
        # g_pre i.i.d. on every turn (sampled before exposures are derived)
        has_pre = [rng.random() < spec.pre_rate for _ in range(n)]
        skills_per_turn: list[set[int]] = [set() for _ in range(n)]
        for i in range(n):
            if has_pre[i]:
                skills_per_turn[i].add(spec.g_pre)
            # exposed iff one of the other speaker's last two turns had g_pre,
            # i.e. indices i-1 and i-3 under strict A/B alternation
            exposed = (i - 1 >= 0 and has_pre[i - 1]) or (i - 3 >= 0 and has_pre[i - 3])
            rate = spec.treatment_rate if exposed else spec.control_rate
            if rng.random() < rate:
                skills_per_turn[i].add(spec.g_post)
            for noise in spec.noise_skills:
                if rng.random() < spec.noise_rate:
                    skills_per_turn[i].add(noise)
        turns = tuple(
            Turn(
                speaker="AB"[i % 2],
                text=make_sentence(rng),
                detected_skills=frozenset(skills_per_turn[i]),
            )
            for i in range(n)
        )
        dialogues.append(Dialogue(dialogue_id=f"planted-{d}", source="fixture", turns=turns))
    return dialogues
