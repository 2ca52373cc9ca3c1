"""Two-call judge protocol: prompt construction, parsing, and stitching.

Call 1 sees the instruction and the context image only and commits to a
per-entity expectation baseline. Call 2 sees both images plus the serialized
baseline and returns per-entity evaluations and a global assessment. Absent
a repair, a judged sample costs exactly two provider completions; a single
parse failure triggers exactly one repair completion, and a second failure
fails the sample without aborting the batch.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .gateway import ChatRequest, Gateway, ImagePart, TextPart, fingerprint
from .model import (
    DecodeError,
    EditAction,
    EditLensError,
    EntityEvaluation,
    EntityExpectation,
    EntityGroup,
    EvalRecord,
    ExecutionLabel,
    Expectation,
    GlobalEvaluation,
    PromptKind,
    Provenance,
    Sample,
    canonical_json,
    normalize_entity,
    validate_eval_record,
)

logger = logging.getLogger(__name__)

__all__ = [
    "CALL1_TEMPLATE",
    "CALL2_TEMPLATE",
    "ExpectationSet",
    "JudgeResponseEnvelope",
    "RunFailure",
    "SampleFailure",
    "build_evaluation_prompt",
    "build_expectation_prompt",
    "classify_execution",
    "evaluate_run",
    "evaluate_sample",
    "extract_envelope",
    "parse_evaluation",
    "parse_expectations",
    "utc_timestamp",
]


def utc_timestamp() -> str:
    """ISO-8601 UTC time; honors SOURCE_DATE_EPOCH for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    seconds = int(epoch) if epoch else int(time.time())
    return datetime.fromtimestamp(seconds, tz=timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# Prompt templates (shipped verbatim as the judging protocol's fixed text)
# ---------------------------------------------------------------------------

CALL1_TEMPLATE = """\
Role: Expert Visual Analyst

You are given an edit instruction and the context image (the original image before any edit).

Analysis Steps:

Step 1: Define Categories. Identify Things (distinct people/animals/objects; multiple instances must be differentiated with unique IDs and parts), Stuff (general environmental and structural elements), and Global (abstract image properties like luminance or spatial complexity).

Step 2: Generate Element List. Create a comprehensive master list of all entities and parts present in the context image relevant to the edit.

Step 3: Per-Element Evaluation. Assign each entity its group and evaluate its editing expectation:
- EXPECTED_CHANGE: Highly expected to change. Obvious and necessary changes that everyone would expect (e.g., adding snow for a "winter scene").
- OPTIONAL_CHANGE: May change to improve alignment without hurting identity preservation. Not everyone would think of it, but it is a positive creative interpretation (e.g., adding an umbrella for "make it rainy").
- EXPECTED_PRESERVATION: Should be preserved and NOT change. Irrelevant to the instruction.

Output Format: Return a single JSON object of the form
{"entity_expectations": {"<entity_name>": {"group": "things" | "stuff" | "global", "expectation": "<one of the three states defined in Step 3>"}}}
Return only the JSON object.
"""

CALL2_TEMPLATE = """\
Role: Micro-Detail Observer and Expert Visual Analyst

You are given an edit instruction, the context image (the original), the edited image (the candidate result), and the entity expectations from the prior analysis.

Analysis Steps:

Steps 1 & 2: Define & Generate List. Expand the master list by scanning both images to include new elements introduced in the edited image.

Step 3: Per-Element Evaluation. For each item, determine:
- Group & Change Description: Describe the literal visual delta between the images.
- Edit Action: Categorize the change type as one of NO_CHANGE, OBJECT_PRESENCE, OBJECT_COUNT, POSITION, TRANSFORM, POSE, VIEWPOINT, COLOR, TEXTURE, LIGHTING, STYLE_TRANSFER, ATTRIBUTE, STATE, OTHER.
- Reality vs. Expectation: Compare the actual change to the baseline expectation:
  - GOOD_EXPECTED_CHANGE: Changed, and needed to. Explicitly requested or mandatory.
  - BAD_EXPECTED_CHANGE: Changed and needed to, but actively hurts alignment (failure of core intent).
  - GOOD_OPTIONAL_CHANGE: Changed without being obvious, but actively improves alignment (positive creative interpretation).
  - BAD_OPTIONAL_CHANGE: Changed without being obvious, but actively hurts alignment or preservation (negative creative interpretation).
  - GOOD_EXPECTED_PRESERVATION: Did not change, and this is the correct outcome.
  - BAD_EXPECTED_PRESERVATION: Did not change, but should have to successfully fulfill the instruction.

Step 4: Global Assessment. Evaluate missing changes, over-editing, and overall narrative coherence.

Step 5: Overall Score Synthesis. Synthesize an overall 1-10 alignment score:
- 10 (Perfect Alignment): Perfectly embodies the instruction with all required changes executed flawlessly. Essence is preserved; narrative is cohesive.
- 8-9 (Strong Alignment): Strongly reflects the instruction with most required changes executed well. Minor imperfections exist but do not detract overall.
- 6-7 (Moderate-High Alignment): Good level of alignment. Most required changes executed, but some minor imperfections or missed requirements exist.
- 4-5 (Moderate Alignment): Some required changes executed, but noticeable imperfections, missed requirements, or signs of over-editing. Disjointed narrative.
- 2-3 (Low Alignment): Many required changes missing; significantly different from what was requested. Substantial over-editing or preservation issues.
- 1 (Very Low Alignment): Fails to align. Required changes mostly missing; output unrelated to instruction. Incoherent narrative and severe preservation issues.

Output Format: Return a single JSON object with this schema:
{
  "entity_evaluations": {
    "<entity_name>": {
      "group": "things" | "stuff" | "global",
      "change_description": "string",
      "change_occured": boolean,
      "edit_action": "<one of the edit action types in Step 3>",
      "edit_expectation": "<the baseline expectation for this entity>",
      "edit_execution": "<one of the six outcomes in Step 3>",
      "entity_edit_rationale": "string",
      "entity_overall_score": "integer [1-10]"
    }
  },
  "global_evaluation": {
    "missing_changes": "boolean",
    "over_editing": "boolean",
    "overall_narrative_coherence": "boolean",
    "final_rank": "integer [1-10]",
    "final_rationale": "string"
  }
}
Return only the JSON object.
"""

REPAIR_SUFFIX = "Return only the corrected object."


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpectationSet:
    sample_id: str
    entities: tuple[EntityExpectation, ...]

    def to_prompt_payload(self) -> dict:
        return {
            "entity_expectations": {
                e.entity: {"group": e.group.value, "expectation": e.expectation.value}
                for e in self.entities
            }
        }


@dataclass(frozen=True)
class JudgeResponseEnvelope:
    """Raw reply plus the extracted payload; payload present <=> no diagnostics."""

    raw: str
    payload: dict | None
    diagnostics: tuple[str, ...] = ()


class SampleFailure(EditLensError):
    """Terminal per-sample failure; the enclosing run keeps going."""

    def __init__(self, stage: str, diagnostics: list[str]):
        self.stage = stage
        self.diagnostics = tuple(diagnostics)
        super().__init__(f"{stage}: " + " | ".join(diagnostics))


@dataclass(frozen=True)
class RunFailure:
    sample_id: str
    model_id: str
    prompt_kind: PromptKind
    stage: str
    diagnostics: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "model_id": self.model_id,
            "prompt_kind": self.prompt_kind.value,
            "stage": self.stage,
            "diagnostics": list(self.diagnostics),
        }


# ---------------------------------------------------------------------------
# Payload extraction
# ---------------------------------------------------------------------------

_FENCE_LINE = re.compile(r"^\s*```[a-zA-Z0-9_-]*\s*$", re.MULTILINE)


def _balanced_objects(text: str) -> list[str]:
    """All top-level {...} spans, string-aware (quotes and escapes honored)."""
    spans: list[str] = []
    depth = 0
    start = -1
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            if depth > 0:
                in_string = True
            continue
        if ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                spans.append(text[start : i + 1])
    return spans


def extract_envelope(raw: str) -> JudgeResponseEnvelope:
    """Longest balanced top-level JSON object wins; code fencing is stripped."""
    stripped = _FENCE_LINE.sub("", raw)
    diagnostics: list[str] = []
    for candidate in sorted(_balanced_objects(stripped), key=len, reverse=True):
        try:
            payload = json.loads(candidate)
        except json.JSONDecodeError as exc:
            diagnostics.append(f"candidate object rejected: {exc}")
            continue
        if isinstance(payload, dict):
            return JudgeResponseEnvelope(raw=raw, payload=payload, diagnostics=())
    diagnostics.insert(0, "no parseable top-level JSON object in response")
    return JudgeResponseEnvelope(raw=raw, payload=None, diagnostics=tuple(diagnostics))


# ---------------------------------------------------------------------------
# Prompt builders
# ---------------------------------------------------------------------------


def _require_image(path: Path, label: str) -> str:
    if not path.exists():
        raise EditLensError(f"{label} image not resolvable: {path}")
    return str(path)


def build_expectation_prompt(
    sample: Sample, prompt_kind: PromptKind, dataset_dir: Path | str | None = None
) -> ChatRequest:
    """Call-1 request: fixed template, the instruction, the context image only."""
    ctx = _require_image(sample.context_image.resolve(dataset_dir), "context")
    instruction = sample.prompt(prompt_kind)
    return ChatRequest(
        system_text=CALL1_TEMPLATE,
        user_parts=(
            TextPart(f"Instruction: {instruction}"),
            ImagePart(ctx),
        ),
        response_format="json",
        temperature=0.0,
        fixture_id=f"call1/{sample.sample_id}/{prompt_kind.value}",
    )


def build_evaluation_prompt(
    sample: Sample,
    edited_image: Path | str,
    expectations: ExpectationSet,
    prompt_kind: PromptKind,
    model_id: str,
    dataset_dir: Path | str | None = None,
) -> ChatRequest:
    """Call-2 request: template, instruction, context then edited image, baseline."""
    ctx = _require_image(sample.context_image.resolve(dataset_dir), "context")
    edited = _require_image(Path(edited_image), "edited")
    instruction = sample.prompt(prompt_kind)
    serialized = canonical_json(expectations.to_prompt_payload())
    return ChatRequest(
        system_text=CALL2_TEMPLATE,
        user_parts=(
            TextPart(f"Instruction: {instruction}"),
            ImagePart(ctx),
            ImagePart(edited),
            TextPart(f"Entity Expectations: {serialized}"),
        ),
        response_format="json",
        temperature=0.0,
        fixture_id=f"call2/{sample.sample_id}/{prompt_kind.value}/{model_id}",
    )


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------


def _payload_or_raise(envelope: JudgeResponseEnvelope) -> dict:
    if envelope.payload is None:
        raise DecodeError("", "; ".join(envelope.diagnostics) or "empty payload")
    return envelope.payload


def _iter_entity_block(block: object, path: str) -> Iterable[tuple[str, dict, str]]:
    """Yield (entity name, fields, item path) from mapping or list shaped blocks."""
    if isinstance(block, dict):
        for name, fields in block.items():
            if not isinstance(fields, dict):
                raise DecodeError(f"{path}[{name!r}]", "expected object")
            yield name, fields, f"{path}[{name!r}]"
    elif isinstance(block, list):
        for i, item in enumerate(block):
            if not isinstance(item, dict):
                raise DecodeError(f"{path}[{i}]", "expected object")
            name = item.get("entity") or item.get("entity_name")
            if not isinstance(name, str) or not name.strip():
                raise DecodeError(f"{path}[{i}].entity", "missing entity name")
            yield name, item, f"{path}[{i}]"
    else:
        raise DecodeError(path, f"expected object or list, got {type(block).__name__}")


def _get_enum(fields: dict, key: str, enum: type, path: str, aliases: tuple[str, ...] = ()):
    for k in (key, *aliases):
        if k in fields:
            raw = fields[k]
            if not isinstance(raw, str):
                raise DecodeError(f"{path}.{k}", "expected string")
            try:
                return enum(raw)
            except ValueError:
                allowed = ", ".join(e.value for e in enum)
                raise DecodeError(
                    f"{path}.{k}", f"unknown value {raw!r}; expected one of: {allowed}"
                ) from None
    raise DecodeError(f"{path}.{key}", "missing field")


_KNOWN_EXPECTATION_KEYS = {"entity", "entity_name", "group", "expectation", "edit_expectation"}


def parse_expectations(envelope: JudgeResponseEnvelope, sample_id: str = "") -> ExpectationSet:
    """Typed Call-1 result; duplicates and unknown enum strings are errors."""
    payload = _payload_or_raise(envelope)
    block = payload.get("entity_expectations")
    if block is None:
        raise DecodeError("entity_expectations", "missing field")
    entities: list[EntityExpectation] = []
    seen: set[str] = set()
    for name, fields, path in _iter_entity_block(block, "entity_expectations"):
        for unknown in set(fields) - _KNOWN_EXPECTATION_KEYS:
            logger.warning("%s: ignoring unknown field %r", path, unknown)
        key = normalize_entity(name)
        if key in seen:
            raise DecodeError(path, f"duplicate entity {name!r} after normalization")
        seen.add(key)
        entities.append(
            EntityExpectation(
                entity=name,
                group=_get_enum(fields, "group", EntityGroup, path),
                expectation=_get_enum(
                    fields, "expectation", Expectation, path, aliases=("edit_expectation",)
                ),
            )
        )
    return ExpectationSet(sample_id=sample_id, entities=tuple(entities))


_KNOWN_EVALUATION_KEYS = {
    "entity",
    "entity_name",
    "group",
    "change_description",
    "change_occurred",
    "change_occured",
    "edit_action",
    "edit_expectation",
    "edit_execution",
    "entity_edit_rationale",
    "entity_overall_score",
}


def _get_bool(fields: dict, key: str, path: str, aliases: tuple[str, ...] = ()) -> bool:
    for k in (key, *aliases):
        if k in fields:
            if not isinstance(fields[k], bool):
                raise DecodeError(f"{path}.{k}", "expected boolean")
            return fields[k]
    raise DecodeError(f"{path}.{key}", "missing field")


def _get_str(fields: dict, key: str, path: str) -> str:
    if key not in fields:
        raise DecodeError(f"{path}.{key}", "missing field")
    if not isinstance(fields[key], str):
        raise DecodeError(f"{path}.{key}", "expected string")
    return fields[key]


def _get_int(fields: dict, key: str, path: str) -> int:
    if key not in fields:
        raise DecodeError(f"{path}.{key}", "missing field")
    value = fields[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise DecodeError(f"{path}.{key}", "expected integer")
    return value


def parse_evaluation(
    envelope: JudgeResponseEnvelope,
) -> tuple[list[EntityEvaluation], GlobalEvaluation]:
    """Typed Call-2 result. Accepts both the documented mapping shape and a
    list shape, the historical ``change_occured`` spelling, and a pluralized
    global block key; output is always the canonical form."""
    payload = _payload_or_raise(envelope)
    block = payload.get("entity_evaluations")
    if block is None:
        raise DecodeError("entity_evaluations", "missing field")

    evaluations: list[EntityEvaluation] = []
    seen: set[str] = set()
    for name, fields, path in _iter_entity_block(block, "entity_evaluations"):
        for unknown in set(fields) - _KNOWN_EVALUATION_KEYS:
            logger.warning("%s: ignoring unknown field %r", path, unknown)
        key = normalize_entity(name)
        if key in seen:
            raise DecodeError(path, f"duplicate entity {name!r} after normalization")
        seen.add(key)
        evaluations.append(
            EntityEvaluation(
                entity=name,
                group=_get_enum(fields, "group", EntityGroup, path),
                change_description=_get_str(fields, "change_description", path),
                change_occurred=_get_bool(fields, "change_occurred", path, aliases=("change_occured",)),
                edit_action=_get_enum(fields, "edit_action", EditAction, path),
                edit_expectation=_get_enum(fields, "edit_expectation", Expectation, path),
                edit_execution=_get_enum(fields, "edit_execution", ExecutionLabel, path),
                entity_edit_rationale=_get_str(fields, "entity_edit_rationale", path),
                entity_overall_score=_get_int(fields, "entity_overall_score", path),
            )
        )

    g = payload.get("global_evaluation", payload.get("global_evaluations"))
    if g is None:
        raise DecodeError("", "missing global_evaluation object")
    if not isinstance(g, dict):
        raise DecodeError("global_evaluation", "expected object")
    gpath = "global_evaluation"
    global_eval = GlobalEvaluation(
        missing_changes=_get_bool(g, "missing_changes", gpath),
        over_editing=_get_bool(g, "over_editing", gpath),
        overall_narrative_coherence=_get_bool(g, "overall_narrative_coherence", gpath),
        final_rank=_get_int(g, "final_rank", gpath),
        final_rationale=_get_str(g, "final_rationale", gpath),
    )
    return evaluations, global_eval


# ---------------------------------------------------------------------------
# Execution-label cross-check
# ---------------------------------------------------------------------------


def classify_execution(
    expectation: Expectation, change_occurred: bool, helps_alignment: bool
) -> ExecutionLabel:
    """Deterministic label from (baseline expectation, observed change, effect).

    Used to cross-check the judge's own label; `helps_alignment` is ignored
    when nothing changed, where only the baseline decides whether stasis was
    the correct outcome.
    """
    if not change_occurred:
        if expectation is Expectation.EXPECTED_CHANGE:
            return ExecutionLabel.BAD_EXPECTED_PRESERVATION
        return ExecutionLabel.GOOD_EXPECTED_PRESERVATION
    if expectation is Expectation.EXPECTED_CHANGE:
        return (
            ExecutionLabel.GOOD_EXPECTED_CHANGE
            if helps_alignment
            else ExecutionLabel.BAD_EXPECTED_CHANGE
        )
    return (
        ExecutionLabel.GOOD_OPTIONAL_CHANGE
        if helps_alignment
        else ExecutionLabel.BAD_OPTIONAL_CHANGE
    )


def _cross_check(
    expectations: ExpectationSet, evaluations: list[EntityEvaluation]
) -> list[str]:
    """Soft diagnostics only; the judge's labels are never overridden."""
    notes: list[str] = []
    by_name = {normalize_entity(e.entity): e for e in expectations.entities}
    evaluated = {normalize_entity(ev.entity) for ev in evaluations}
    for ev in evaluations:
        exp = by_name.get(normalize_entity(ev.entity))
        if exp is None:
            continue
        helps = ev.edit_execution.value.startswith("GOOD_")
        derived = classify_execution(exp.expectation, ev.change_occurred, helps)
        if derived is not ev.edit_execution:
            notes.append(
                f"cross-check: entity {ev.entity!r} labeled {ev.edit_execution.value}, "
                f"derived {derived.value} from baseline {exp.expectation.value}"
            )
    for exp in expectations.entities:
        if normalize_entity(exp.entity) not in evaluated:
            notes.append(f"cross-check: expected entity {exp.entity!r} missing from evaluation")
    return notes


def _stitch(
    expectations: ExpectationSet, parsed: tuple[list[EntityEvaluation], GlobalEvaluation]
) -> tuple[list[EntityEvaluation], GlobalEvaluation, list[str]]:
    """Align Call-2 entities with the baseline by normalized name.

    Names absent from the baseline are insertions: they stay in the record
    with edit_expectation forced to OPTIONAL_CHANGE (no baseline exists for
    them) and a diagnostic note.
    """
    evaluations, global_eval = parsed
    known = {normalize_entity(e.entity) for e in expectations.entities}
    notes: list[str] = []
    stitched: list[EntityEvaluation] = []
    for ev in evaluations:
        if normalize_entity(ev.entity) not in known:
            notes.append(f"insertion: entity {ev.entity!r} absent from baseline")
            if ev.edit_expectation is not Expectation.OPTIONAL_CHANGE:
                ev = dataclasses.replace(ev, edit_expectation=Expectation.OPTIONAL_CHANGE)
        stitched.append(ev)
    return stitched, global_eval, notes


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _repair_request(request: ChatRequest, diagnostics: str) -> ChatRequest:
    note = TextPart(
        f"Your previous reply could not be parsed. Parse diagnostics: {diagnostics}\n{REPAIR_SUFFIX}"
    )
    return dataclasses.replace(
        request,
        user_parts=request.user_parts + (note,),
        fixture_id=f"{request.fixture_id}/repair" if request.fixture_id else None,
    )


def _complete_parsed(
    gateway: Gateway, request: ChatRequest, parse_fn: Callable, stage: str, no_cache: bool
):
    """One completion, at most one repair. Returns (result, keys, repaired, notes)."""
    keys = [fingerprint(gateway.profile, request)]
    raw = gateway.complete(request, no_cache=no_cache)
    try:
        return parse_fn(extract_envelope(raw)), keys, False, []
    except DecodeError as first:
        repair = _repair_request(request, str(first))
        keys.append(fingerprint(gateway.profile, repair))
        raw2 = gateway.complete(repair, no_cache=no_cache)
        try:
            result = parse_fn(extract_envelope(raw2))
        except DecodeError as second:
            raise SampleFailure(stage, [str(first), f"after repair: {second}"]) from None
        return result, keys, True, [f"repaired after: {first}"]


def evaluate_sample(
    gateway: Gateway,
    sample: Sample,
    edited_image: Path | str,
    model_id: str,
    prompt_kind: PromptKind,
    dataset_dir: Path | str | None = None,
    no_cache: bool = False,
) -> EvalRecord:
    """Call 1 then Call 2 for one (sample, edited image); validated record out.

    Raises :class:`SampleFailure` on missing images, unparseable responses
    after one repair, or invariant violations in the stitched record.
    """
    edited = Path(edited_image)
    if not edited.exists():
        raise SampleFailure("inputs", [f"edited image not resolvable: {edited}"])

    req1 = build_expectation_prompt(sample, prompt_kind, dataset_dir)
    expectations, keys1, repaired1, notes1 = _complete_parsed(
        gateway,
        req1,
        lambda env: parse_expectations(env, sample.sample_id),
        "call1",
        no_cache,
    )

    req2 = build_evaluation_prompt(sample, edited, expectations, prompt_kind, model_id, dataset_dir)

    def parse_and_stitch(envelope: JudgeResponseEnvelope):
        evaluations, global_eval, notes = _stitch(expectations, parse_evaluation(envelope))
        candidate = EvalRecord(
            sample_id=sample.sample_id,
            model_id=model_id,
            prompt_kind=prompt_kind,
            expectations=expectations.entities,
            entity_evaluations=tuple(evaluations),
            global_evaluation=global_eval,
            provenance=Provenance(judge_model="", created_at=""),
        )
        violations = validate_eval_record(candidate)
        if violations:
            first = violations[0]
            raise DecodeError(first.path, f"[{first.code}] {first.message}")
        return evaluations, global_eval, notes

    (evaluations, global_eval, notes2), keys2, repaired2, repair_notes = _complete_parsed(
        gateway, req2, parse_and_stitch, "call2", no_cache
    )

    diagnostics = notes1 + repair_notes + notes2 + _cross_check(
        ExpectationSet(sample.sample_id, expectations.entities), evaluations
    )
    return EvalRecord(
        sample_id=sample.sample_id,
        model_id=model_id,
        prompt_kind=prompt_kind,
        expectations=expectations.entities,
        entity_evaluations=tuple(evaluations),
        global_evaluation=global_eval,
        provenance=Provenance(
            judge_model=gateway.profile.model,
            created_at=utc_timestamp(),
            cache_keys=tuple(keys1 + keys2),
            repaired=repaired1 or repaired2,
            diagnostics=tuple(diagnostics),
        ),
    )


def find_output_image(
    outputs_root: Path | str, model_id: str, prompt_kind: PromptKind, sample_id: str
) -> Path | None:
    """Resolve `outputs/<model_id>/<prompt_kind>/<sample_id>.<ext>`, any extension."""
    base = Path(outputs_root) / model_id / prompt_kind.value
    if not base.is_dir():
        return None
    matches = sorted(p for p in base.iterdir() if p.stem == sample_id and p.is_file())
    return matches[0] if matches else None


def evaluate_run(
    gateway: Gateway,
    samples: list[Sample],
    outputs_root: Path | str,
    model_id: str,
    prompt_kind: PromptKind,
    concurrency: int = 4,
    dataset_dir: Path | str | None = None,
    no_cache: bool = False,
) -> tuple[list[EvalRecord], list[RunFailure]]:
    """Judge every sample for one model; canonical sample_id ordering out.

    Per-sample failures become :class:`RunFailure` entries; the batch never
    aborts. Results are identical for any concurrency level.
    """
    records: list[EvalRecord] = []
    failures: list[RunFailure] = []

    def work(sample: Sample) -> tuple[EvalRecord | None, RunFailure | None]:
        edited = find_output_image(outputs_root, model_id, prompt_kind, sample.sample_id)
        if edited is None:
            return None, RunFailure(
                sample.sample_id,
                model_id,
                prompt_kind,
                "missing-output",
                (f"no output image for {sample.sample_id} under {outputs_root}",),
            )
        try:
            record = evaluate_sample(
                gateway, sample, edited, model_id, prompt_kind, dataset_dir, no_cache
            )
            return record, None
        except SampleFailure as exc:
            return None, RunFailure(
                sample.sample_id, model_id, prompt_kind, exc.stage, exc.diagnostics
            )

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        for record, failure in pool.map(work, samples):
            if record is not None:
                records.append(record)
            if failure is not None:
                failures.append(failure)

    records.sort(key=lambda r: r.sample_id)
    failures.sort(key=lambda f: f.sample_id)
    return records, failures
