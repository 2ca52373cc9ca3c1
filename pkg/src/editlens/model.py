"""Canonical data types, validation, and on-disk persistence.

Datasets are line-delimited JSON (one record per line, UTF-8); judge
records live under ``runs/<run_id>/<model_id>/<prompt_kind>/<sample_id>.json``
and images under an ``images/`` directory, referenced by path plus content
hash. All types are immutable values; encode/decode round-trips are exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

__all__ = [
    "ABSTRACT_PROMPT_MAX_WORDS",
    "CategoryRef",
    "CategorySpec",
    "DatasetManifest",
    "DecodeError",
    "Domain",
    "EditAction",
    "EditLensError",
    "EntityEdit",
    "EntityEvaluation",
    "EntityExpectation",
    "EntityGroup",
    "EntityVerdict",
    "EvalRecord",
    "ExecutionLabel",
    "Expectation",
    "ExplicitSpec",
    "GlobalEvaluation",
    "HumanResponse",
    "ImageRef",
    "Insertion",
    "Persona",
    "PromptKind",
    "Provenance",
    "Sample",
    "Split",
    "Verdict",
    "Violation",
    "build_manifest",
    "canonical_json",
    "content_hash",
    "load_dataset",
    "load_record",
    "normalize_entity",
    "pretty_json",
    "read_jsonl",
    "record_path",
    "save_dataset",
    "save_record",
    "validate_eval_record",
    "word_count",
]

ABSTRACT_PROMPT_MAX_WORDS = 15


class EditLensError(Exception):
    """Base class for all package errors."""


class DecodeError(EditLensError):
    """Structured decode failure carrying the path of the first bad field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# ---------------------------------------------------------------------------
# Enumerations
# ---------------------------------------------------------------------------


class Domain(str, Enum):
    EMOTIONAL = "Emotional"
    LOGICAL = "Logical"
    PHYSICAL = "Physical"
    SOCIAL = "Social"


class Split(str, Enum):
    TEST = "test"
    TRAIN = "train"


class PromptKind(str, Enum):
    ABSTRACT = "abstract"
    EXPLICIT = "explicit"


class EntityGroup(str, Enum):
    THINGS = "things"
    STUFF = "stuff"
    GLOBAL = "global"


class Expectation(str, Enum):
    EXPECTED_CHANGE = "EXPECTED_CHANGE"
    OPTIONAL_CHANGE = "OPTIONAL_CHANGE"
    EXPECTED_PRESERVATION = "EXPECTED_PRESERVATION"


class EditAction(str, Enum):
    NO_CHANGE = "NO_CHANGE"
    OBJECT_PRESENCE = "OBJECT_PRESENCE"
    OBJECT_COUNT = "OBJECT_COUNT"
    POSITION = "POSITION"
    TRANSFORM = "TRANSFORM"
    POSE = "POSE"
    VIEWPOINT = "VIEWPOINT"
    COLOR = "COLOR"
    TEXTURE = "TEXTURE"
    LIGHTING = "LIGHTING"
    STYLE_TRANSFER = "STYLE_TRANSFER"
    ATTRIBUTE = "ATTRIBUTE"
    STATE = "STATE"
    OTHER = "OTHER"


class ExecutionLabel(str, Enum):
    """The six execution labels: {GOOD, BAD} x the three expectation states."""

    GOOD_EXPECTED_CHANGE = "GOOD_EXPECTED_CHANGE"
    BAD_EXPECTED_CHANGE = "BAD_EXPECTED_CHANGE"
    GOOD_OPTIONAL_CHANGE = "GOOD_OPTIONAL_CHANGE"
    BAD_OPTIONAL_CHANGE = "BAD_OPTIONAL_CHANGE"
    GOOD_EXPECTED_PRESERVATION = "GOOD_EXPECTED_PRESERVATION"
    BAD_EXPECTED_PRESERVATION = "BAD_EXPECTED_PRESERVATION"


CHANGE_LABELS = frozenset(
    {
        ExecutionLabel.GOOD_EXPECTED_CHANGE,
        ExecutionLabel.BAD_EXPECTED_CHANGE,
        ExecutionLabel.GOOD_OPTIONAL_CHANGE,
        ExecutionLabel.BAD_OPTIONAL_CHANGE,
    }
)
PRESERVATION_LABELS = frozenset(
    {
        ExecutionLabel.GOOD_EXPECTED_PRESERVATION,
        ExecutionLabel.BAD_EXPECTED_PRESERVATION,
    }
)
FAILURE_LABELS = frozenset(
    {
        ExecutionLabel.BAD_EXPECTED_CHANGE,
        ExecutionLabel.BAD_OPTIONAL_CHANGE,
        ExecutionLabel.BAD_EXPECTED_PRESERVATION,
    }
)


class Verdict(str, Enum):
    CORRECT_CHANGE = "correct_change"
    CORRECT_PRESERVATION = "correct_preservation"
    INCORRECT = "incorrect"
    MISSING = "missing"


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def content_hash(data: bytes) -> str:
    """SHA-256 hex digest; the empty input hashes to e3b0c442...b855."""
    return hashlib.sha256(data).hexdigest()


def normalize_entity(name: str) -> str:
    """Whitespace-normalized, lowercased entity key used for name matching."""
    return " ".join(name.split()).lower()


def word_count(text: str) -> int:
    """Words split on whitespace; hyphenated tokens count as one word."""
    return len(text.split())


def canonical_json(data: Any) -> str:
    """Compact, key-sorted JSON; one dataset record per line."""
    return json.dumps(data, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def pretty_json(data: Any) -> str:
    """Indented, key-sorted JSON with trailing newline for on-disk records."""
    return json.dumps(data, ensure_ascii=False, sort_keys=True, indent=2) + "\n"


def _expect(d: Any, key: str, kind: type, path: str, optional: bool = False) -> Any:
    if not isinstance(d, dict):
        raise DecodeError(path, f"expected object, got {type(d).__name__}")
    if key not in d:
        if optional:
            return None
        raise DecodeError(f"{path}.{key}" if path else key, "missing field")
    value = d[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise DecodeError(f"{path}.{key}" if path else key, "expected integer, got boolean")
    if not isinstance(value, kind):
        raise DecodeError(
            f"{path}.{key}" if path else key,
            f"expected {kind.__name__}, got {type(value).__name__}",
        )
    return value


def _expect_enum(d: Any, key: str, enum: type[Enum], path: str) -> Any:
    raw = _expect(d, key, str, path)
    try:
        return enum(raw)
    except ValueError:
        allowed = ", ".join(e.value for e in enum)
        raise DecodeError(
            f"{path}.{key}" if path else key,
            f"unknown value {raw!r}; expected one of: {allowed}",
        ) from None


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

PERSONA_FIELDS = (
    "name",
    "age_group",
    "country",
    "gender",
    "hobby",
    "profession",
    "tech_skill",
    "visual_language",
    "personality",
    "motivation",
)


@dataclass(frozen=True)
class Persona:
    """One point in the ten-feature persona space."""

    name: str
    age_group: str
    country: str
    gender: str
    hobby: str
    profession: str
    tech_skill: str
    visual_language: str
    personality: str
    motivation: str

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in PERSONA_FIELDS}

    @classmethod
    def from_dict(cls, d: Any, path: str = "persona") -> "Persona":
        return cls(**{f: _expect(d, f, str, path) for f in PERSONA_FIELDS})


@dataclass(frozen=True)
class CategoryRef:
    """Reference to a category by name, with its domain cached inline."""

    domain: Domain
    name: str

    def to_dict(self) -> dict:
        return {"domain": self.domain.value, "name": self.name}

    @classmethod
    def from_dict(cls, d: Any, path: str = "category") -> "CategoryRef":
        return cls(
            domain=_expect_enum(d, "domain", Domain, path),
            name=_expect(d, "name", str, path),
        )


@dataclass(frozen=True)
class CategorySpec:
    """A curation category: guideline text plus an optional requirement predicate."""

    domain: Domain
    name: str
    guideline: str
    requirement: str | None = None

    def ref(self) -> CategoryRef:
        return CategoryRef(domain=self.domain, name=self.name)

    def to_dict(self) -> dict:
        d = {"domain": self.domain.value, "name": self.name, "guideline": self.guideline}
        if self.requirement is not None:
            d["requirement"] = self.requirement
        return d

    @classmethod
    def from_dict(cls, d: Any, path: str = "category") -> "CategorySpec":
        requirement = d.get("requirement") if isinstance(d, dict) else None
        if requirement is not None and not isinstance(requirement, str):
            raise DecodeError(f"{path}.requirement", "expected string")
        return cls(
            domain=_expect_enum(d, "domain", Domain, path),
            name=_expect(d, "name", str, path),
            guideline=_expect(d, "guideline", str, path),
            requirement=requirement,
        )


@dataclass(frozen=True)
class EntityEdit:
    """Atomic instruction sentences for one entity; each sentence is one change."""

    entity: str
    instructions: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"entity": self.entity, "instructions": list(self.instructions)}

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "EntityEdit":
        raw = _expect(d, "instructions", list, path)
        for i, s in enumerate(raw):
            if not isinstance(s, str) or not s.strip():
                raise DecodeError(f"{path}.instructions[{i}]", "atomic sentence must be a non-empty string")
        return cls(entity=_expect(d, "entity", str, path), instructions=tuple(raw))


@dataclass(frozen=True)
class Insertion:
    entity: str
    placement: str

    def to_dict(self) -> dict:
        return {"entity": self.entity, "placement": self.placement}

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "Insertion":
        placement = _expect(d, "placement", str, path)
        if not placement.strip():
            raise DecodeError(f"{path}.placement", "insertion requires a placement description")
        return cls(entity=_expect(d, "entity", str, path), placement=placement)


@dataclass(frozen=True)
class ExplicitSpec:
    """Structured explicit instruction: per-entity edits, global text, insertions."""

    entity_edits: tuple[EntityEdit, ...]
    general_instruction: str
    insertions: tuple[Insertion, ...] = ()

    def to_dict(self) -> dict:
        return {
            "entity_edits": [e.to_dict() for e in self.entity_edits],
            "general_instruction": self.general_instruction,
            "insertions": [i.to_dict() for i in self.insertions],
        }

    @classmethod
    def from_dict(cls, d: Any, path: str = "explicit_spec") -> "ExplicitSpec":
        edits = _expect(d, "entity_edits", list, path)
        insertions = d.get("insertions", [])
        if not isinstance(insertions, list):
            raise DecodeError(f"{path}.insertions", "expected list")
        return cls(
            entity_edits=tuple(
                EntityEdit.from_dict(e, f"{path}.entity_edits[{i}]") for i, e in enumerate(edits)
            ),
            general_instruction=_expect(d, "general_instruction", str, path),
            insertions=tuple(
                Insertion.from_dict(e, f"{path}.insertions[{i}]") for i, e in enumerate(insertions)
            ),
        )

    def render_text(self) -> str:
        """Flatten into the instruction text handed to an editing model."""
        parts: list[str] = []
        for edit in self.entity_edits:
            parts.extend(edit.instructions)
        if self.general_instruction.strip():
            parts.append(self.general_instruction.strip())
        for ins in self.insertions:
            parts.append(f"Insert {ins.entity}: {ins.placement}")
        return " ".join(parts)


@dataclass(frozen=True)
class ImageRef:
    """Image referenced by relative path plus content hash."""

    path: str
    sha256: str | None = None

    def to_dict(self) -> dict:
        return {"path": self.path, "sha256": self.sha256}

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "ImageRef":
        sha = d.get("sha256") if isinstance(d, dict) else None
        if sha is not None and not isinstance(sha, str):
            raise DecodeError(f"{path}.sha256", "expected string or null")
        return cls(path=_expect(d, "path", str, path), sha256=sha)

    def resolve(self, base: Path | str | None = None) -> Path:
        p = Path(self.path)
        if base is not None and not p.is_absolute():
            p = Path(base) / p
        return p


@dataclass(frozen=True)
class Sample:
    """One benchmark item: context image, category, persona, prompt pair."""

    sample_id: str
    context_image: ImageRef
    source_entities: tuple[str, ...]
    category: CategoryRef
    persona: Persona | None
    abstract_prompt: str
    explicit_spec: ExplicitSpec
    split: Split = Split.TEST
    verified: bool = False
    synthetic_category: bool = False

    def prompt(self, kind: PromptKind) -> str:
        if kind is PromptKind.ABSTRACT:
            return self.abstract_prompt
        return self.explicit_spec.render_text()

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "context_image": self.context_image.to_dict(),
            "source_entities": list(self.source_entities),
            "category": self.category.to_dict(),
            "persona": self.persona.to_dict() if self.persona else None,
            "abstract_prompt": self.abstract_prompt,
            "explicit_spec": self.explicit_spec.to_dict(),
            "split": self.split.value,
            "verified": self.verified,
            "synthetic_category": self.synthetic_category,
        }

    @classmethod
    def from_dict(cls, d: Any, path: str = "") -> "Sample":
        abstract = _expect(d, "abstract_prompt", str, path)
        if word_count(abstract) > ABSTRACT_PROMPT_MAX_WORDS:
            raise DecodeError(
                f"{path}.abstract_prompt" if path else "abstract_prompt",
                f"abstract prompt has {word_count(abstract)} words; "
                f"limit is {ABSTRACT_PROMPT_MAX_WORDS}",
            )
        persona = d.get("persona")
        entities = _expect(d, "source_entities", list, path)
        for i, e in enumerate(entities):
            if not isinstance(e, str):
                raise DecodeError(f"{path}.source_entities[{i}]", "expected string")
        return cls(
            sample_id=_expect(d, "sample_id", str, path),
            context_image=ImageRef.from_dict(
                _expect(d, "context_image", dict, path), f"{path}.context_image"
            ),
            source_entities=tuple(entities),
            category=CategoryRef.from_dict(_expect(d, "category", dict, path), f"{path}.category"),
            persona=Persona.from_dict(persona, f"{path}.persona") if persona else None,
            abstract_prompt=abstract,
            explicit_spec=ExplicitSpec.from_dict(
                _expect(d, "explicit_spec", dict, path), f"{path}.explicit_spec"
            ),
            split=_expect_enum(d, "split", Split, path),
            verified=bool(d.get("verified", False)),
            synthetic_category=bool(d.get("synthetic_category", False)),
        )


@dataclass(frozen=True)
class EntityExpectation:
    """Pre-edit expectation for one entity, from the expectation call."""

    entity: str
    group: EntityGroup
    expectation: Expectation

    def to_dict(self) -> dict:
        return {
            "entity": self.entity,
            "group": self.group.value,
            "expectation": self.expectation.value,
        }

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "EntityExpectation":
        return cls(
            entity=_expect(d, "entity", str, path),
            group=_expect_enum(d, "group", EntityGroup, path),
            expectation=_expect_enum(d, "expectation", Expectation, path),
        )


@dataclass(frozen=True)
class EntityEvaluation:
    """Post-edit judgment for one entity."""

    entity: str
    group: EntityGroup
    change_description: str
    change_occurred: bool
    edit_action: EditAction
    edit_expectation: Expectation
    edit_execution: ExecutionLabel
    entity_edit_rationale: str
    entity_overall_score: int

    def to_dict(self) -> dict:
        return {
            "entity": self.entity,
            "group": self.group.value,
            "change_description": self.change_description,
            "change_occurred": self.change_occurred,
            "edit_action": self.edit_action.value,
            "edit_expectation": self.edit_expectation.value,
            "edit_execution": self.edit_execution.value,
            "entity_edit_rationale": self.entity_edit_rationale,
            "entity_overall_score": self.entity_overall_score,
        }

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "EntityEvaluation":
        return cls(
            entity=_expect(d, "entity", str, path),
            group=_expect_enum(d, "group", EntityGroup, path),
            change_description=_expect(d, "change_description", str, path),
            change_occurred=_expect(d, "change_occurred", bool, path),
            edit_action=_expect_enum(d, "edit_action", EditAction, path),
            edit_expectation=_expect_enum(d, "edit_expectation", Expectation, path),
            edit_execution=_expect_enum(d, "edit_execution", ExecutionLabel, path),
            entity_edit_rationale=_expect(d, "entity_edit_rationale", str, path),
            entity_overall_score=_expect(d, "entity_overall_score", int, path),
        )


@dataclass(frozen=True)
class GlobalEvaluation:
    """Whole-image audit flags plus the final 1-10 rank and rationale."""

    missing_changes: bool
    over_editing: bool
    overall_narrative_coherence: bool
    final_rank: int
    final_rationale: str

    def to_dict(self) -> dict:
        return {
            "missing_changes": self.missing_changes,
            "over_editing": self.over_editing,
            "overall_narrative_coherence": self.overall_narrative_coherence,
            "final_rank": self.final_rank,
            "final_rationale": self.final_rationale,
        }

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "GlobalEvaluation":
        return cls(
            missing_changes=_expect(d, "missing_changes", bool, path),
            over_editing=_expect(d, "over_editing", bool, path),
            overall_narrative_coherence=_expect(d, "overall_narrative_coherence", bool, path),
            final_rank=_expect(d, "final_rank", int, path),
            final_rationale=_expect(d, "final_rationale", str, path),
        )


@dataclass(frozen=True)
class Provenance:
    judge_model: str
    created_at: str
    cache_keys: tuple[str, ...] = ()
    repaired: bool = False
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "judge_model": self.judge_model,
            "created_at": self.created_at,
            "cache_keys": list(self.cache_keys),
            "repaired": self.repaired,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Any, path: str = "provenance") -> "Provenance":
        return cls(
            judge_model=_expect(d, "judge_model", str, path),
            created_at=_expect(d, "created_at", str, path),
            cache_keys=tuple(d.get("cache_keys", [])),
            repaired=bool(d.get("repaired", False)),
            diagnostics=tuple(d.get("diagnostics", [])),
        )


@dataclass(frozen=True)
class EvalRecord:
    """Full judged result for one (sample, model, prompt kind)."""

    sample_id: str
    model_id: str
    prompt_kind: PromptKind
    expectations: tuple[EntityExpectation, ...]
    entity_evaluations: tuple[EntityEvaluation, ...]
    global_evaluation: GlobalEvaluation
    provenance: Provenance

    def key(self) -> tuple[str, str, str]:
        return (self.sample_id, self.model_id, self.prompt_kind.value)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "model_id": self.model_id,
            "prompt_kind": self.prompt_kind.value,
            "expectations": [e.to_dict() for e in self.expectations],
            "entity_evaluations": [e.to_dict() for e in self.entity_evaluations],
            "global_evaluation": self.global_evaluation.to_dict(),
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Any, path: str = "") -> "EvalRecord":
        expectations = _expect(d, "expectations", list, path)
        evaluations = _expect(d, "entity_evaluations", list, path)
        return cls(
            sample_id=_expect(d, "sample_id", str, path),
            model_id=_expect(d, "model_id", str, path),
            prompt_kind=_expect_enum(d, "prompt_kind", PromptKind, path),
            expectations=tuple(
                EntityExpectation.from_dict(e, f"{path}.expectations[{i}]")
                for i, e in enumerate(expectations)
            ),
            entity_evaluations=tuple(
                EntityEvaluation.from_dict(e, f"{path}.entity_evaluations[{i}]")
                for i, e in enumerate(evaluations)
            ),
            global_evaluation=GlobalEvaluation.from_dict(
                _expect(d, "global_evaluation", dict, path), f"{path}.global_evaluation"
            ),
            provenance=Provenance.from_dict(
                _expect(d, "provenance", dict, path), f"{path}.provenance"
            ),
        )


@dataclass(frozen=True)
class EntityVerdict:
    """One annotator verdict for one entity; raw string kept beside the enum."""

    entity: str
    verdict: Verdict
    added_by_annotator: bool = False
    raw: str | None = None

    def to_dict(self) -> dict:
        return {
            "entity": self.entity,
            "verdict": self.verdict.value,
            "added_by_annotator": self.added_by_annotator,
            "raw": self.raw,
        }

    @classmethod
    def from_dict(cls, d: Any, path: str) -> "EntityVerdict":
        raw = d.get("raw") if isinstance(d, dict) else None
        if raw is not None and not isinstance(raw, str):
            raise DecodeError(f"{path}.raw", "expected string or null")
        return cls(
            entity=_expect(d, "entity", str, path),
            verdict=_expect_enum(d, "verdict", Verdict, path),
            added_by_annotator=bool(d.get("added_by_annotator", False)),
            raw=raw,
        )


@dataclass(frozen=True)
class HumanResponse:
    """One annotator's questionnaire answers for a (sample, model) task."""

    task_id: str
    annotator_id: str
    q1_instruction_following: int
    q2_entity_verdicts: tuple[EntityVerdict, ...]
    q3_preservation: int
    q4_quality: int
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "annotator_id": self.annotator_id,
            "q1_instruction_following": self.q1_instruction_following,
            "q2_entity_verdicts": [v.to_dict() for v in self.q2_entity_verdicts],
            "q3_preservation": self.q3_preservation,
            "q4_quality": self.q4_quality,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: Any, path: str = "") -> "HumanResponse":
        verdicts = _expect(d, "q2_entity_verdicts", list, path)
        resp = cls(
            task_id=_expect(d, "task_id", str, path),
            annotator_id=_expect(d, "annotator_id", str, path),
            q1_instruction_following=_expect(d, "q1_instruction_following", int, path),
            q2_entity_verdicts=tuple(
                EntityVerdict.from_dict(v, f"{path}.q2_entity_verdicts[{i}]")
                for i, v in enumerate(verdicts)
            ),
            q3_preservation=_expect(d, "q3_preservation", int, path),
            q4_quality=_expect(d, "q4_quality", int, path),
            timestamp=_expect(d, "timestamp", str, path),
        )
        for label, value in (
            ("q1_instruction_following", resp.q1_instruction_following),
            ("q3_preservation", resp.q3_preservation),
            ("q4_quality", resp.q4_quality),
        ):
            if not 1 <= value <= 5:
                raise DecodeError(f"{path}.{label}" if path else label, "scale answer must be in [1,5]")
        return resp


@dataclass(frozen=True)
class DatasetManifest:
    """Counts and prompt statistics computed from a loaded dataset."""

    split_sizes: dict
    domain_counts: dict
    category_counts: dict
    prompt_words: dict
    source_images: int

    def to_dict(self) -> dict:
        return {
            "split_sizes": self.split_sizes,
            "domain_counts": self.domain_counts,
            "category_counts": self.category_counts,
            "prompt_words": self.prompt_words,
            "source_images": self.source_images,
        }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    """One violated invariant: a stable code plus the offending field path."""

    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.path}: {self.message}"


def validate_eval_record(record: EvalRecord) -> list[Violation]:
    """Check every record invariant; returns all violations (empty means ok).

    Codes: ``duplicate_entity``, ``score_range``, ``rank_range``,
    ``no_change_consistency``, ``execution_family``, ``expectation_mismatch``,
    ``empty_rationale``.
    """
    violations: list[Violation] = []

    seen: dict[str, int] = {}
    for i, exp in enumerate(record.expectations):
        key = normalize_entity(exp.entity)
        if key in seen:
            violations.append(
                Violation(
                    "duplicate_entity",
                    f"expectations[{i}].entity",
                    f"duplicate of expectations[{seen[key]}] after normalization",
                )
            )
        else:
            seen[key] = i
    expected_state = {
        normalize_entity(exp.entity): exp.expectation for exp in record.expectations
    }

    seen_eval: dict[str, int] = {}
    for i, ev in enumerate(record.entity_evaluations):
        base = f"entity_evaluations[{i}]"
        key = normalize_entity(ev.entity)
        if key in seen_eval:
            violations.append(
                Violation(
                    "duplicate_entity",
                    f"{base}.entity",
                    f"duplicate of entity_evaluations[{seen_eval[key]}] after normalization",
                )
            )
        else:
            seen_eval[key] = i

        if not 1 <= ev.entity_overall_score <= 10:
            violations.append(
                Violation(
                    "score_range",
                    f"{base}.entity_overall_score",
                    f"score {ev.entity_overall_score} outside [1,10]",
                )
            )
        if ev.change_occurred != (ev.edit_action is not EditAction.NO_CHANGE):
            violations.append(
                Violation(
                    "no_change_consistency",
                    f"{base}.edit_action",
                    "change_occurred=false must pair with NO_CHANGE and vice versa",
                )
            )
        allowed = CHANGE_LABELS if ev.change_occurred else PRESERVATION_LABELS
        if ev.edit_execution not in allowed:
            violations.append(
                Violation(
                    "execution_family",
                    f"{base}.edit_execution",
                    f"{ev.edit_execution.value} not valid for change_occurred={ev.change_occurred}",
                )
            )
        state = expected_state.get(key)
        if state is not None and ev.edit_expectation is not state:
            violations.append(
                Violation(
                    "expectation_mismatch",
                    f"{base}.edit_expectation",
                    f"{ev.edit_expectation.value} contradicts expectation {state.value}",
                )
            )

    g = record.global_evaluation
    if not 1 <= g.final_rank <= 10:
        violations.append(
            Violation(
                "rank_range",
                "global_evaluation.final_rank",
                f"rank {g.final_rank} outside [1,10]",
            )
        )
    if not g.final_rationale.strip():
        violations.append(
            Violation(
                "empty_rationale",
                "global_evaluation.final_rationale",
                "final rationale must be non-empty",
            )
        )
    return violations


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def read_jsonl(path: Path | str) -> Iterator[tuple[int, Any]]:
    """Yield (1-based line number, parsed object) for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DecodeError(f"line {lineno}", f"invalid JSON: {exc}") from None


def load_dataset(path: Path | str) -> tuple[list[Sample], DatasetManifest]:
    """Load samples from a JSONL file or a directory containing samples.jsonl.

    Malformed records raise :class:`DecodeError` naming the line number and
    first failing field; duplicate sample ids are rejected.
    """
    p = Path(path)
    if p.is_dir():
        p = p / "samples.jsonl"
    if not p.exists():
        raise EditLensError(f"dataset not found: {p}")

    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, raw in read_jsonl(p):
        try:
            sample = Sample.from_dict(raw)
        except DecodeError as exc:
            raise DecodeError(f"line {lineno}.{exc.path}", exc.args[0].split(": ", 1)[-1]) from None
        if sample.sample_id in seen:
            raise DecodeError(
                f"line {lineno}.sample_id",
                f"duplicate sample_id {sample.sample_id!r} (first seen on line {seen[sample.sample_id]})",
            )
        seen[sample.sample_id] = lineno
        samples.append(sample)
    return samples, build_manifest(samples)


def save_dataset(samples: Iterable[Sample], path: Path | str) -> Path:
    """Write samples as canonical JSONL; returns the file path."""
    p = Path(path)
    if p.is_dir() or p.suffix == "":
        p.mkdir(parents=True, exist_ok=True)
        p = p / "samples.jsonl"
    else:
        p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(canonical_json(sample.to_dict()) + "\n")
    return p


def build_manifest(samples: list[Sample]) -> DatasetManifest:
    split_sizes: dict[str, int] = {}
    domain_counts: dict[str, dict[str, int]] = {}
    category_counts: dict[str, dict[str, int]] = {}
    words: list[int] = []
    images: set[str] = set()
    for s in samples:
        split = s.split.value
        split_sizes[split] = split_sizes.get(split, 0) + 1
        dc = domain_counts.setdefault(split, {})
        dc[s.category.domain.value] = dc.get(s.category.domain.value, 0) + 1
        cc = category_counts.setdefault(split, {})
        cc[s.category.name] = cc.get(s.category.name, 0) + 1
        words.append(word_count(s.abstract_prompt))
        images.add(s.context_image.sha256 or s.context_image.path)
    prompt_words = {
        "mean": (sum(words) / len(words)) if words else 0.0,
        "min": min(words) if words else 0,
        "max": max(words) if words else 0,
    }
    return DatasetManifest(
        split_sizes=split_sizes,
        domain_counts=domain_counts,
        category_counts=category_counts,
        prompt_words=prompt_words,
        source_images=len(images),
    )


def record_path(
    root: Path | str, run_id: str, model_id: str, prompt_kind: PromptKind | str, sample_id: str
) -> Path:
    kind = prompt_kind.value if isinstance(prompt_kind, PromptKind) else prompt_kind
    return Path(root) / run_id / model_id / kind / f"{sample_id}.json"


def save_record(record: EvalRecord, root: Path | str, run_id: str) -> Path:
    path = record_path(root, run_id, record.model_id, record.prompt_kind, record.sample_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(pretty_json(record.to_dict()), encoding="utf-8")
    return path


def load_record(path: Path | str) -> EvalRecord:
    with open(path, encoding="utf-8") as fh:
        return EvalRecord.from_dict(json.load(fh))


def load_run_records(run_dir: Path | str) -> list[EvalRecord]:
    """Load every record under a run directory, ordered by file path.

    Only files matching the record layout `<model_id>/<prompt_kind>/<sample_id>.json`
    are read; sidecars at the run root (failure lists, run logs) are not records.
    """
    records = [load_record(p) for p in sorted(Path(run_dir).glob("*/*/*.json"))]
    return records
