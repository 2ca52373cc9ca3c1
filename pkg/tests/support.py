"""Shared builders for tests: records, samples, tiny images."""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

from editlens.model import (
    CategoryRef,
    Domain,
    EditAction,
    EntityEdit,
    EntityEvaluation,
    EntityExpectation,
    EntityGroup,
    EvalRecord,
    Expectation,
    ExplicitSpec,
    GlobalEvaluation,
    ImageRef,
    PromptKind,
    Provenance,
    Sample,
)
from editlens.rubric import classify_execution

FIXTURES = Path(__file__).parent / "fixtures"


def png_bytes(width: int = 8, height: int = 8, seed: int = 0) -> bytes:
    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    raw = b""
    for y in range(height):
        raw += b"\x00"
        for x in range(width):
            raw += bytes(((seed * 31 + x) % 256, (seed * 47 + y) % 256, (seed * 61 + x + y) % 256))
    ihdr = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def write_png(path: Path, seed: int = 0, width: int = 8, height: int = 8) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(width, height, seed))
    return path


def make_expectation(
    entity: str = "sky",
    group: EntityGroup = EntityGroup.STUFF,
    expectation: Expectation = Expectation.EXPECTED_CHANGE,
) -> EntityExpectation:
    return EntityExpectation(entity=entity, group=group, expectation=expectation)


def make_evaluation(
    entity: str = "sky",
    expectation: Expectation = Expectation.EXPECTED_CHANGE,
    changed: bool = True,
    good: bool = True,
    action: EditAction = EditAction.COLOR,
    score: int = 8,
    group: EntityGroup = EntityGroup.STUFF,
) -> EntityEvaluation:
    act = action if changed else EditAction.NO_CHANGE
    return EntityEvaluation(
        entity=entity,
        group=group,
        change_description=f"{entity}: test change" if changed else f"{entity}: unchanged",
        change_occurred=changed,
        edit_action=act,
        edit_expectation=expectation,
        edit_execution=classify_execution(expectation, changed, good),
        entity_edit_rationale="test rationale",
        entity_overall_score=score,
    )


def make_global(
    rank: int = 8,
    missing: bool = False,
    over: bool = False,
    coherent: bool = True,
    rationale: str = "test global rationale",
) -> GlobalEvaluation:
    return GlobalEvaluation(
        missing_changes=missing,
        over_editing=over,
        overall_narrative_coherence=coherent,
        final_rank=rank,
        final_rationale=rationale,
    )


def make_record(
    sample_id: str = "s-1",
    model_id: str = "m-1",
    prompt_kind: PromptKind = PromptKind.ABSTRACT,
    entities: list[tuple] | None = None,
    rank: int = 8,
    missing: bool = False,
    over: bool = False,
    extra_evaluations: list[EntityEvaluation] | None = None,
) -> EvalRecord:
    """Entities: (name, expectation, changed, good, action, score) tuples."""
    if entities is None:
        entities = [("sky", Expectation.EXPECTED_CHANGE, True, True, EditAction.COLOR, 8)]
    expectations = tuple(
        make_expectation(name, EntityGroup.THINGS, exp) for name, exp, *_ in entities
    )
    evaluations = [
        make_evaluation(name, exp, changed, good, action, score, EntityGroup.THINGS)
        for name, exp, changed, good, action, score in entities
    ]
    if extra_evaluations:
        evaluations.extend(extra_evaluations)
    return EvalRecord(
        sample_id=sample_id,
        model_id=model_id,
        prompt_kind=prompt_kind,
        expectations=expectations,
        entity_evaluations=tuple(evaluations),
        global_evaluation=make_global(rank, missing, over),
        provenance=Provenance(judge_model="test-judge", created_at="1970-01-01T00:00:00+00:00"),
    )


def make_sample(
    sample_id: str = "s-1",
    image_path: str = "images/s-1.png",
    domain: Domain = Domain.PHYSICAL,
    category: str = "Material",
    entities: tuple[str, ...] = ("sky", "sea"),
    abstract: str = "Make it feel like a long holiday.",
) -> Sample:
    return Sample(
        sample_id=sample_id,
        context_image=ImageRef(path=image_path),
        source_entities=entities,
        category=CategoryRef(domain=domain, name=category),
        persona=None,
        abstract_prompt=abstract,
        explicit_spec=ExplicitSpec(
            entity_edits=tuple(EntityEdit(entity=e, instructions=()) for e in entities),
            general_instruction="Raise brightness by 10 percent.",
            insertions=(),
        ),
    )
