"""Grammar-skill repository: loading, constraint expansion, prompt verbalization.

A skill file is UTF-8 tab-separated with a fixed header:
id, super_category, subcategory, guideword, can_do, level, type, examples
(examples pipe-separated). The repository is immutable after load and safe
to share across threads.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

SKILL_FILE_COLUMNS = [
    "id",
    "super_category",
    "subcategory",
    "guideword",
    "can_do",
    "level",
    "type",
    "examples",
]


class SkillFileError(Exception):
    """Malformed skill file (bad header, bad row, duplicate id)."""


class SkillValidationError(Exception):
    """A field value violates the skill schema."""


class UnknownSubcategoryError(LookupError):
    """Constraint references a subcategory absent from the repository."""


class UnknownSkillError(LookupError):
    """Constraint references a skill id absent from the repository."""


class Level(enum.IntEnum):
    """CEFR proficiency level, totally ordered A1 < A2 < B1 < B2 < C1 < C2."""

    A1 = 1
    A2 = 2
    B1 = 3
    B2 = 4
    C1 = 5
    C2 = 6

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, token: str) -> "Level":
        token = token.strip().upper()
        try:
            return cls[token]
        except KeyError:
            raise SkillValidationError(f"unknown CEFR level {token!r}") from None


class SkillType(enum.Enum):
    FORM = "FORM"
    USE = "USE"
    FORM_USE = "FORM/USE"

    @classmethod
    def parse(cls, token: str) -> "SkillType":
        token = token.strip().upper()
        for member in cls:
            if member.value == token:
                return member
        raise SkillValidationError(f"unknown skill type {token!r}")


@dataclass(frozen=True)
class GrammarSkill:
    """One row of the skill repository."""

    skill_id: int
    super_category: str
    subcategory: str
    guideword: str
    can_do: str
    level: Level
    skill_type: SkillType
    examples: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.examples:
            raise SkillValidationError(f"skill {self.skill_id}: examples must be non-empty")
        if not (1 <= len(self.examples) <= 5):
            raise SkillValidationError(
                f"skill {self.skill_id}: expected 1-5 examples, got {len(self.examples)}"
            )


class SkillRepository:
    """Immutable, id-indexed collection of grammar skills."""

    def __init__(self, skills: Iterable[GrammarSkill]):
        self._by_id: dict[int, GrammarSkill] = {}
        self._by_subcategory: dict[str, list[GrammarSkill]] = {}
        for skill in skills:
            if skill.skill_id in self._by_id:
                raise SkillFileError(f"duplicate skill id {skill.skill_id}")
            self._by_id[skill.skill_id] = skill
            self._by_subcategory.setdefault(skill.subcategory.lower(), []).append(skill)

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[GrammarSkill]:
        return iter(self._by_id.values())

    def __contains__(self, skill_id: int) -> bool:
        return skill_id in self._by_id

    def get(self, skill_id: int) -> GrammarSkill:
        try:
            return self._by_id[skill_id]
        except KeyError:
            raise UnknownSkillError(f"no skill with id {skill_id}") from None

    def subcategories(self) -> list[str]:
        seen: dict[str, str] = {}
        for skill in self._by_id.values():
            seen.setdefault(skill.subcategory.lower(), skill.subcategory)
        return sorted(seen.values())

    def by_subcategory(self, subcategory: str) -> list[GrammarSkill]:
        """All skills in a subcategory; matching is case-insensitive exact."""
        try:
            return list(self._by_subcategory[subcategory.lower()])
        except KeyError:
            raise UnknownSubcategoryError(f"unknown subcategory {subcategory!r}") from None

    def has_subcategory(self, subcategory: str) -> bool:
        return subcategory.lower() in self._by_subcategory

    def filter(self, subcategory: str | None = None, level: Level | None = None) -> list[GrammarSkill]:
        rows = list(self._by_id.values())
        if subcategory is not None:
            rows = [s for s in rows if s.subcategory.lower() == subcategory.lower()]
        if level is not None:
            rows = [s for s in rows if s.level == level]
        return rows


def load_repository(path: str | Path) -> SkillRepository:
    """Load and validate a tab-separated skill file.

    Raises SkillFileError naming the offending row for malformed rows, and
    SkillValidationError for bad field values (e.g. an unknown level token).
    An empty file (header only, or zero bytes) yields an empty repository.
    """
    path = Path(path)
    skills: list[GrammarSkill] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            return SkillRepository([])
        if [h.strip() for h in header] != SKILL_FILE_COLUMNS:
            raise SkillFileError(
                f"{path}: header {header!r} does not match expected columns {SKILL_FILE_COLUMNS!r}"
            )
        for row_num, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(SKILL_FILE_COLUMNS):
                raise SkillFileError(
                    f"{path}: row {row_num}: expected {len(SKILL_FILE_COLUMNS)} columns, got {len(row)}"
                )
            raw = dict(zip(SKILL_FILE_COLUMNS, (cell.strip() for cell in row)))
            try:
                skill = GrammarSkill(
                    skill_id=int(raw["id"]),
                    super_category=raw["super_category"],
                    subcategory=raw["subcategory"],
                    guideword=raw["guideword"],
                    can_do=raw["can_do"],
                    level=Level.parse(raw["level"]),
                    skill_type=SkillType.parse(raw["type"]),
                    examples=tuple(e.strip() for e in raw["examples"].split("|") if e.strip()),
                )
            except ValueError as exc:
                raise SkillFileError(f"{path}: row {row_num}: {exc}") from exc
            except SkillValidationError as exc:
                raise SkillValidationError(f"{path}: row {row_num}: {exc}") from exc
            skills.append(skill)
    return SkillRepository(skills)


def save_repository(repo: SkillRepository, path: str | Path) -> None:
    """Write a repository back out in the skill-file format."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(SKILL_FILE_COLUMNS)
        for skill in sorted(repo, key=lambda s: s.skill_id):
            writer.writerow(
                [
                    skill.skill_id,
                    skill.super_category,
                    skill.subcategory,
                    skill.guideword,
                    skill.can_do,
                    skill.level.name,
                    skill.skill_type.value,
                    "|".join(skill.examples),
                ]
            )


# ---------------------------------------------------------------------------
# Constraint sets
# ---------------------------------------------------------------------------


class ConstraintVariant(enum.Enum):
    EXPLICIT = "explicit"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ConstraintSet:
    """Either explicit skill ids (1-6, unique) or (subcategory, level) pairs (1-3).

    Use the `explicit()` / `categorical()` factories; they validate size and
    uniqueness bounds.
    """

    variant: ConstraintVariant
    explicit_skills: tuple[int, ...] = ()
    category_levels: tuple[tuple[str, Level], ...] = ()

    @classmethod
    def explicit(cls, skill_ids: Sequence[int]) -> "ConstraintSet":
        ids = tuple(int(s) for s in skill_ids)
        if not (1 <= len(ids) <= 6):
            raise ValueError(f"explicit constraint needs 1-6 skills, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ValueError("explicit constraint contains duplicate skill ids")
        return cls(variant=ConstraintVariant.EXPLICIT, explicit_skills=ids)

    @classmethod
    def categorical(cls, pairs: Sequence[tuple[str, Level]]) -> "ConstraintSet":
        pairs = tuple((sub, Level(level)) for sub, level in pairs)
        if not (1 <= len(pairs) <= 3):
            raise ValueError(f"categorical constraint needs 1-3 pairs, got {len(pairs)}")
        subs = [sub.lower() for sub, _ in pairs]
        if len(set(subs)) != len(subs):
            raise ValueError("categorical constraint contains duplicate subcategories")
        return cls(variant=ConstraintVariant.CATEGORICAL, category_levels=pairs)

    def to_dict(self) -> dict:
        if self.variant is ConstraintVariant.EXPLICIT:
            return {"variant": "explicit", "skills": list(self.explicit_skills)}
        return {
            "variant": "categorical",
            "pairs": [[sub, level.name] for sub, level in self.category_levels],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ConstraintSet":
        if payload.get("variant") == "explicit":
            return cls.explicit(payload["skills"])
        if payload.get("variant") == "categorical":
            return cls.categorical([(sub, Level.parse(lv)) for sub, lv in payload["pairs"]])
        raise ValueError(f"unknown constraint variant in {payload!r}")


def expand_categorical(constraints: ConstraintSet, repo: SkillRepository) -> set[int]:
    """Resolve (subcategory, level) pairs to the ids of all matching skills.

    Matching is exact on the level: a pair selects only skills whose level
    equals the requested one. An empty expansion for a pair is legal but
    logged as a warning.
    """
    if constraints.variant is not ConstraintVariant.CATEGORICAL:
        raise ValueError("expand_categorical requires a categorical constraint set")
    expanded: set[int] = set()
    for subcategory, level in constraints.category_levels:
        members = repo.by_subcategory(subcategory)
        matching = {s.skill_id for s in members if s.level == level}
        if not matching:
            logger.warning(
                "categorical pair (%s, %s) matches no skills in the repository",
                subcategory,
                level.name,
            )
        expanded |= matching
    return expanded


# ---------------------------------------------------------------------------
# Prompt verbalization
# ---------------------------------------------------------------------------

SYSTEM_MESSAGE_TEMPLATE = "Only output {next_speaker}'s response."

EXPLICIT_INSTRUCTION = (
    "Given the dialog, write a possible next turn of {next_speaker} "
    "that includes all of these grammatical items:"
)

CATEGORICAL_INSTRUCTION = (
    "Given the dialog, write a possible next turn of {next_speaker} "
    "that preferably uses the following grammar patterns in the response:"
)


@dataclass(frozen=True)
class RenderedPrompt:
    """System message plus user prompt, ready for a chat model."""

    system: str
    user: str


def format_dialog(turns: Sequence[tuple[str, str]]) -> str:
    """Render the dialog block: a 'Dialog:' line then one 'A: ...'/'B: ...' per turn."""
    lines = ["Dialog:"]
    lines.extend(f"{speaker}: {text}" for speaker, text in turns)
    return "\n".join(lines)


def verbalize_explicit(
    skills: Sequence[GrammarSkill],
    next_speaker: str,
    turns: Sequence[tuple[str, str]],
) -> RenderedPrompt:
    """Render the explicit-constraint prompt: one detailed bullet per skill."""
    if not (1 <= len(skills) <= 6):
        raise ValueError(f"explicit prompt needs 1-6 skills, got {len(skills)}")
    bullets = [
        f"- {s.subcategory} - {s.guideword}: {s.can_do} (CEFR {s.level.name})" for s in skills
    ]
    user = "\n".join(
        [EXPLICIT_INSTRUCTION.format(next_speaker=next_speaker)]
        + bullets
        + ["", format_dialog(turns)]
    )
    return RenderedPrompt(
        system=SYSTEM_MESSAGE_TEMPLATE.format(next_speaker=next_speaker), user=user
    )


def verbalize_categorical(
    constraints: ConstraintSet,
    repo: SkillRepository,
    next_speaker: str,
    turns: Sequence[tuple[str, str]],
    fix_template_typo: bool = False,
) -> RenderedPrompt:
    """Render the categorical-constraint prompt: one guideword bullet per pair.

    The template closes the level with an unbalanced parenthesis
    ("on CEFR level B1):"); this oddity is kept verbatim by default for
    compatibility with downstream prompt hashes. `fix_template_typo` drops it.
    """
    if constraints.variant is not ConstraintVariant.CATEGORICAL:
        raise ValueError("verbalize_categorical requires a categorical constraint set")
    close = ":" if fix_template_typo else "):"
    bullets = []
    for subcategory, level in constraints.category_levels:
        members = repo.by_subcategory(subcategory)
        guidewords = [s.guideword for s in members if s.level == level]
        if not guidewords:
            logger.warning(
                "categorical pair (%s, %s) has no guidewords to verbalize",
                subcategory,
                level.name,
            )
        bullets.append(f"- {subcategory} on CEFR level {level.name}{close} {', '.join(guidewords)}")
    user = "\n".join(
        [CATEGORICAL_INSTRUCTION.format(next_speaker=next_speaker)]
        + bullets
        + ["", format_dialog(turns)]
    )
    return RenderedPrompt(
        system=SYSTEM_MESSAGE_TEMPLATE.format(next_speaker=next_speaker), user=user
    )
