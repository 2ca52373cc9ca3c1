"""Human-judgment study backend.

Tasks are (sample, model) pairs judged by up to `annotators_per_task`
distinct annotators. Assignment hands out the least-answered open task under
a time-limited lease; submissions are validated against the questionnaire
invariants and stored append-only. Export produces per-question item x rater
matrices and a join against the judge's final ranks for correlation.

The service core is framework-free and fully injectable (clock, token rng);
`build_app` wraps it in HTTP endpoints.
"""

from __future__ import annotations

import json
import math
import secrets
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .model import (
    DecodeError,
    EditLensError,
    EvalRecord,
    HumanResponse,
    PromptKind,
    Sample,
    canonical_json,
    normalize_entity,
)
from .rubric import find_output_image, utc_timestamp

__all__ = [
    "AnnotationService",
    "AnnotationTask",
    "Assignment",
    "GUIDELINES_TEXT",
    "QUESTIONNAIRE",
    "RejectError",
    "Study",
    "build_app",
    "stratified_sample",
]

# Questionnaire wording and scale anchors are shipped as config so deployers
# can match their own study materials.
QUESTIONNAIRE = {
    "q1": {
        "part": "A",
        "title": "Instruction Following",
        "text": "How well does the edited image follow the given instruction overall?",
        "anchors": {
            "1": "Not followed at all",
            "2": "Mostly not followed",
            "3": "Partially followed",
            "4": "Mostly followed",
            "5": "Fully followed",
        },
    },
    "q2": {
        "part": "A",
        "title": "Entity-Level Check",
        "text": (
            "For every listed entity, verify whether it was correctly changed or "
            "correctly preserved. Add entities that are new or missing and rate them too."
        ),
        "verdicts": ["correct_change", "correct_preservation", "incorrect", "missing"],
    },
    "q3": {
        "part": "B",
        "title": "Preservation",
        "text": "How accurately were areas unrelated to the instruction preserved?",
        "anchors": {
            "1": "Severe unintended changes",
            "2": "Many unintended changes",
            "3": "Some unintended changes",
            "4": "Minor unintended changes",
            "5": "No unintended changes",
        },
    },
    "q4": {
        "part": "B",
        "title": "Quality",
        "text": "Rate the overall realism and visual quality compared to the original image.",
        "anchors": {
            "1": "Very poor",
            "2": "Poor",
            "3": "Acceptable",
            "4": "Good",
            "5": "Excellent",
        },
    },
}

GUIDELINES_TEXT = (
    "Compare the context image (left) with the edited image (right). Part A: rate "
    "overall instruction following (Q1) and give a verdict for every listed entity "
    "(Q2): correct_change when the entity changed as the instruction requires, "
    "correct_preservation when it correctly stayed unchanged, incorrect when it "
    "changed wrongly or failed to change, missing when it disappeared or cannot be "
    "found. If the edit introduced an entity that is not listed (for example a "
    "magazine appearing on a table), use 'add entity' to append and rate it. "
    "Part B: rate preservation of unrelated areas (Q3) and overall realism and "
    "visual quality against the original (Q4). All scales run 1 (worst) to 5 (best)."
)

_EXPORT_DEFINITIONS = {
    "q2_derived": (
        "Per (task, rater): 1 + round(4 * fraction of seed entities with a "
        "correct_change or correct_preservation verdict), halves rounded up; "
        "annotator-added entities are excluded from the fraction but preserved "
        "in the verdict table."
    ),
    "x2_scaling": "human_mean_q1_x2 = mean Q1 rating x 2, for 1-10 comparisons.",
    "missing_cells": "null marks a rater who did not answer that task.",
}


class RejectError(EditLensError):
    """Validation or state rejection with a stable machine-readable code."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)


@dataclass(frozen=True)
class AnnotationTask:
    task_id: str
    sample_id: str
    model_id: str
    prompt_kind: PromptKind
    instruction: str
    context_image: str
    edited_image: str
    seed_entities: tuple[str, ...]
    guidelines: str = GUIDELINES_TEXT

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "sample_id": self.sample_id,
            "model_id": self.model_id,
            "prompt_kind": self.prompt_kind.value,
            "instruction": self.instruction,
            "seed_entities": list(self.seed_entities),
            "guidelines": self.guidelines,
            "questionnaire": QUESTIONNAIRE,
            "images": {
                "context": f"tasks/{self.task_id}/images/context",
                "edited": f"tasks/{self.task_id}/images/edited",
            },
        }


@dataclass
class Assignment:
    task_id: str
    annotator_id: str
    state: str  # open | submitted | expired
    lease_expiry: float


@dataclass
class Study:
    study_id: str
    tasks: dict
    tokens: dict
    annotators_per_task: int
    lease_seconds: float
    prompt_kind: PromptKind
    judge_rank: dict
    assignments: list = field(default_factory=list)
    responses: list = field(default_factory=list)  # append-only

    def submitted_by(self, task_id: str) -> set[str]:
        return {r.annotator_id for r in self.responses if r.task_id == task_id}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_sample(samples: Sequence[Sample], n: int, seed: int) -> list[Sample]:
    """Proportional-by-domain draw with a fixed seed; largest-remainder quotas."""
    import random

    from .curation import allocate_counts

    if n > len(samples):
        raise RejectError("bad_request", f"asked for {n} samples, only {len(samples)} available")
    by_domain: dict[str, list[Sample]] = {}
    for s in sorted(samples, key=lambda s: s.sample_id):
        by_domain.setdefault(s.category.domain.value, []).append(s)
    proportions = {d: len(v) / len(samples) for d, v in by_domain.items()}
    counts = allocate_counts(proportions, n)
    rng = random.Random(seed)
    chosen: list[Sample] = []
    for domain in sorted(counts):
        pool = by_domain.get(domain, [])
        want = min(counts[domain], len(pool))
        chosen.extend(rng.sample(pool, want))
    # rounding against tiny pools can under-fill; top up deterministically
    if len(chosen) < n:
        chosen_ids = {s.sample_id for s in chosen}
        rest = [s for s in sorted(samples, key=lambda s: s.sample_id) if s.sample_id not in chosen_ids]
        chosen.extend(rest[: n - len(chosen)])
    return sorted(chosen, key=lambda s: s.sample_id)


class AnnotationService:
    """State and rules for annotation studies over judged run records."""

    def __init__(
        self,
        samples: Sequence[Sample],
        records: Sequence[EvalRecord],
        outputs_root: Path | str,
        dataset_dir: Path | str | None = None,
        clock: Callable[[], float] = time.time,
        token_fn: Callable[[], str] | None = None,
        store_dir: Path | str | None = None,
    ):
        self.samples = {s.sample_id: s for s in samples}
        self.records = {(r.sample_id, r.model_id, r.prompt_kind): r for r in records}
        self.outputs_root = Path(outputs_root)
        self.dataset_dir = Path(dataset_dir) if dataset_dir else None
        self.clock = clock
        self.token_fn = token_fn or (lambda: secrets.token_hex(16))
        self.store_dir = Path(store_dir) if store_dir else None
        self.studies: dict[str, Study] = {}
        self._lock = threading.Lock()

    # -- study lifecycle ----------------------------------------------------

    def create_study(
        self,
        models: Sequence[str],
        annotators: Sequence[str],
        prompt_kind: PromptKind = PromptKind.ABSTRACT,
        sample_ids: Sequence[str] | None = None,
        n_samples: int | None = None,
        seed: int = 0,
        annotators_per_task: int = 3,
        lease_seconds: float = 1800.0,
    ) -> Study:
        """Tasks = selected samples x models; a bearer token per annotator.

        Every (sample, model) must already have a judged record; missing
        records are reported together, not one at a time.
        """
        if not models:
            raise RejectError("bad_request", "at least one model required")
        if not annotators or len(set(annotators)) != len(annotators):
            raise RejectError("bad_request", "annotator ids must be non-empty and unique")

        if sample_ids is not None:
            missing = [s for s in sample_ids if s not in self.samples]
            if missing:
                raise RejectError("bad_request", f"unknown sample ids: {missing}")
            selected = [self.samples[s] for s in sorted(sample_ids)]
        else:
            pool = [
                s
                for s in self.samples.values()
                if all((s.sample_id, m, prompt_kind) in self.records for m in models)
            ]
            if n_samples is not None:
                selected = stratified_sample(pool, n_samples, seed)
            else:
                selected = sorted(pool, key=lambda s: s.sample_id)
        if not selected:
            raise RejectError("bad_request", "sample filter excluded all samples")

        gaps = [
            (s.sample_id, m)
            for s in selected
            for m in models
            if (s.sample_id, m, prompt_kind) not in self.records
        ]
        if gaps:
            raise RejectError("bad_request", f"no judged record for (sample, model) pairs: {gaps}")

        tasks: dict[str, AnnotationTask] = {}
        judge_rank: dict[str, int] = {}
        for sample in selected:
            for model in sorted(models):
                record = self.records[(sample.sample_id, model, prompt_kind)]
                edited = find_output_image(self.outputs_root, model, prompt_kind, sample.sample_id)
                if edited is None:
                    raise RejectError(
                        "bad_request",
                        f"no edited image for ({sample.sample_id}, {model}, {prompt_kind.value})",
                    )
                context = sample.context_image.resolve(self.dataset_dir)
                if not context.exists():
                    raise RejectError("bad_request", f"context image missing: {context}")
                task_id = f"{sample.sample_id}--{model}"
                seed_entities = tuple(e.entity for e in record.expectations) or sample.source_entities
                tasks[task_id] = AnnotationTask(
                    task_id=task_id,
                    sample_id=sample.sample_id,
                    model_id=model,
                    prompt_kind=prompt_kind,
                    instruction=sample.prompt(prompt_kind),
                    context_image=str(context),
                    edited_image=str(edited),
                    seed_entities=seed_entities,
                    guidelines=GUIDELINES_TEXT,
                )
                judge_rank[task_id] = record.global_evaluation.final_rank

        with self._lock:
            study_id = f"study-{len(self.studies) + 1:04d}"
            study = Study(
                study_id=study_id,
                tasks=tasks,
                tokens={a: self.token_fn() for a in annotators},
                annotators_per_task=annotators_per_task,
                lease_seconds=lease_seconds,
                prompt_kind=prompt_kind,
                judge_rank=judge_rank,
            )
            self.studies[study_id] = study
        return study

    def _study(self, study_id: str) -> Study:
        study = self.studies.get(study_id)
        if study is None:
            raise RejectError("unknown_study", f"no study {study_id!r}")
        return study

    def authenticate(self, study_id: str, annotator_id: str, token: str | None) -> Study:
        study = self._study(study_id)
        expected = study.tokens.get(annotator_id)
        if expected is None:
            raise RejectError("unknown_annotator", f"annotator {annotator_id!r} not in study")
        if token != expected:
            raise RejectError("auth", "bad or missing bearer token")
        return study

    # -- assignment ---------------------------------------------------------

    def _expire_stale(self, study: Study, now: float) -> None:
        for a in study.assignments:
            if a.state == "open" and now >= a.lease_expiry:
                a.state = "expired"

    def next_task(self, study_id: str, annotator_id: str, token: str | None) -> AnnotationTask | None:
        """Least-answered open task this annotator has not answered; leases it.

        Holding an unexpired lease simply returns the same task again, so an
        annotator never accumulates parallel leases.
        """
        study = self.authenticate(study_id, annotator_id, token)
        with self._lock:
            now = self.clock()
            self._expire_stale(study, now)
            for a in study.assignments:
                if a.annotator_id == annotator_id and a.state == "open":
                    return study.tasks[a.task_id]
            answered = {
                r.task_id for r in study.responses if r.annotator_id == annotator_id
            }
            counts = {tid: len(study.submitted_by(tid)) for tid in study.tasks}
            candidates = [
                tid
                for tid in study.tasks
                if tid not in answered and counts[tid] < study.annotators_per_task
            ]
            if not candidates:
                return None
            chosen = min(candidates, key=lambda tid: (counts[tid], tid))
            study.assignments.append(
                Assignment(
                    task_id=chosen,
                    annotator_id=annotator_id,
                    state="open",
                    lease_expiry=now + study.lease_seconds,
                )
            )
            return study.tasks[chosen]

    # -- submission ---------------------------------------------------------

    def submit_response(
        self, study_id: str, annotator_id: str, token: str | None, payload: Mapping
    ) -> dict:
        """Validate and append one response; closes the lease.

        Rejection codes: auth/unknown_annotator (401-ish), unknown_task,
        no_lease, duplicate, task_full, range, missing_entity_verdict,
        bad_payload.
        """
        study = self.authenticate(study_id, annotator_id, token)
        try:
            response = HumanResponse.from_dict(dict(payload))
        except DecodeError as exc:
            code = "range" if "scale answer" in str(exc) else "bad_payload"
            raise RejectError(code, str(exc)) from None
        if response.annotator_id != annotator_id:
            raise RejectError("bad_payload", "annotator_id does not match the authenticated annotator")

        with self._lock:
            now = self.clock()
            self._expire_stale(study, now)
            task = study.tasks.get(response.task_id)
            if task is None:
                raise RejectError("unknown_task", f"no task {response.task_id!r}")
            if annotator_id in study.submitted_by(response.task_id):
                raise RejectError("duplicate", "annotator already submitted this task")
            submitters = study.submitted_by(response.task_id)
            if len(submitters) >= study.annotators_per_task:
                raise RejectError("task_full", "task already has the maximum number of annotators")
            lease = next(
                (
                    a
                    for a in study.assignments
                    if a.task_id == response.task_id
                    and a.annotator_id == annotator_id
                    and a.state == "open"
                ),
                None,
            )
            if lease is None:
                raise RejectError("no_lease", "no open lease for this task (missing or expired)")

            seed_keys = {normalize_entity(e) for e in task.seed_entities}
            verdict_keys = {
                normalize_entity(v.entity) for v in response.q2_entity_verdicts if not v.added_by_annotator
            }
            missing = sorted(seed_keys - verdict_keys)
            if missing:
                raise RejectError(
                    "missing_entity_verdict", f"no verdict for seed entities: {missing}"
                )

            lease.state = "submitted"
            study.responses.append(response)
            if self.store_dir is not None:
                self.store_dir.mkdir(parents=True, exist_ok=True)
                log = self.store_dir / f"{study.study_id}.jsonl"
                entry = {"received_at": utc_timestamp(), "response": response.to_dict()}
                with open(log, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json(entry) + "\n")
            progress = self.progress(study_id)
        return {"accepted": True, "progress": progress}

    def progress(self, study_id: str) -> dict:
        study = self._study(study_id)
        per_task = {tid: len(study.submitted_by(tid)) for tid in sorted(study.tasks)}
        target = len(study.tasks) * study.annotators_per_task
        submitted = len(study.responses)
        return {
            "target_responses": target,
            "submitted": submitted,
            "per_task": per_task,
            "done": submitted >= target,
        }

    # -- export -------------------------------------------------------------

    def export_study(self, study_id: str) -> dict:
        """Matrices, verdict table, and the judge-rank join for correlation.

        Deterministic and invariant to submission order: rows are sorted task
        ids, columns sorted annotator ids.
        """
        study = self._study(study_id)
        task_ids = sorted(study.tasks)
        raters = sorted(study.tokens)
        by_cell: dict[tuple[str, str], HumanResponse] = {}
        for r in study.responses:
            by_cell[(r.task_id, r.annotator_id)] = r

        def matrix(value_fn) -> list[list[int | None]]:
            return [
                [
                    value_fn(by_cell[(tid, a)]) if (tid, a) in by_cell else None
                    for a in raters
                ]
                for tid in task_ids
            ]

        def q2_derived(resp: HumanResponse) -> int:
            task = study.tasks[resp.task_id]
            seed_keys = {normalize_entity(e) for e in task.seed_entities}
            if not seed_keys:
                return 1
            correct = 0
            for v in resp.q2_entity_verdicts:
                if v.added_by_annotator:
                    continue
                if normalize_entity(v.entity) in seed_keys and v.verdict.value.startswith("correct_"):
                    correct += 1
            return 1 + _round_half_up(4.0 * correct / len(seed_keys))

        matrices = {
            "q1": matrix(lambda r: r.q1_instruction_following),
            "q2_derived": matrix(q2_derived),
            "q3": matrix(lambda r: r.q3_preservation),
            "q4": matrix(lambda r: r.q4_quality),
        }

        def mean_row(row: list[int | None]) -> float | None:
            present = [v for v in row if v is not None]
            return sum(present) / len(present) if present else None

        mean_vote = {q: [mean_row(row) for row in m] for q, m in matrices.items()}

        verdicts = []
        for tid in task_ids:
            for a in raters:
                resp = by_cell.get((tid, a))
                if resp is None:
                    continue
                for v in sorted(resp.q2_entity_verdicts, key=lambda v: v.entity):
                    verdicts.append(
                        {
                            "task_id": tid,
                            "annotator_id": a,
                            "entity": v.entity,
                            "verdict": v.verdict.value,
                            "added_by_annotator": v.added_by_annotator,
                            "raw": v.raw,
                        }
                    )

        alignment = []
        for i, tid in enumerate(task_ids):
            task = study.tasks[tid]
            q1 = mean_vote["q1"][i]
            alignment.append(
                {
                    "task_id": tid,
                    "sample_id": task.sample_id,
                    "model_id": task.model_id,
                    "judge_final_rank": study.judge_rank[tid],
                    "human_mean_q1": q1,
                    "human_mean_q1_x2": None if q1 is None else q1 * 2,
                    "human_mean_q2_derived": mean_vote["q2_derived"][i],
                    "human_mean_q3": mean_vote["q3"][i],
                    "human_mean_q4": mean_vote["q4"][i],
                }
            )
        complete = [row for row in alignment if row["human_mean_q1"] is not None]

        return {
            "study_id": study_id,
            "prompt_kind": study.prompt_kind.value,
            "tasks": task_ids,
            "raters": raters,
            "scale_k": 5,
            "matrices": matrices,
            "mean_vote": mean_vote,
            "verdicts": verdicts,
            "alignment": alignment,
            "spearman_pairs": {
                "judge": [row["judge_final_rank"] for row in complete],
                "human": [row["human_mean_q1"] for row in complete],
            },
            "partial": len(complete) < len(alignment),
            "definitions": _EXPORT_DEFINITIONS,
        }


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

_HTTP_STATUS = {
    "unknown_study": 404,
    "unknown_task": 404,
    "unknown_annotator": 401,
    "auth": 401,
    "no_lease": 403,
    "duplicate": 409,
    "task_full": 409,
    "range": 422,
    "missing_entity_verdict": 422,
    "bad_payload": 422,
    "bad_request": 400,
}


def build_app(service: AnnotationService, ui_dir: Path | str | None = None):
    """FastAPI wrapper over the service; optionally serves the UI bundle at /."""
    from fastapi import FastAPI, Header
    from fastapi.responses import FileResponse, JSONResponse

    app = FastAPI(title="annotation-service")

    def _token(authorization: str | None) -> str | None:
        if authorization and authorization.startswith("Bearer "):
            return authorization[len("Bearer ") :]
        return None

    @app.exception_handler(RejectError)
    async def _reject_handler(_request, exc: RejectError):
        return JSONResponse(
            status_code=_HTTP_STATUS.get(exc.code, 400),
            content={"code": exc.code, "message": str(exc)},
        )

    @app.post("/studies")
    async def create_study(body: dict):
        study = service.create_study(
            models=body.get("models", []),
            annotators=body.get("annotators", []),
            prompt_kind=PromptKind(body.get("prompt_kind", "abstract")),
            sample_ids=body.get("sample_ids"),
            n_samples=body.get("n_samples"),
            seed=int(body.get("seed", 0)),
            annotators_per_task=int(body.get("annotators_per_task", 3)),
            lease_seconds=float(body.get("lease_seconds", 1800.0)),
        )
        return {
            "study_id": study.study_id,
            "tokens": study.tokens,
            "n_tasks": len(study.tasks),
            "target_responses": len(study.tasks) * study.annotators_per_task,
        }

    @app.get("/studies/{study_id}/next")
    async def next_task(
        study_id: str, annotator: str, authorization: str | None = Header(default=None)
    ):
        task = service.next_task(study_id, annotator, _token(authorization))
        if task is None:
            return {"done": True, "task": None}
        return {"done": False, "task": task.to_dict()}

    @app.post("/studies/{study_id}/responses")
    async def submit(study_id: str, body: dict, authorization: str | None = Header(default=None)):
        annotator = body.get("annotator_id", "")
        return service.submit_response(study_id, annotator, _token(authorization), body)

    @app.get("/studies/{study_id}/progress")
    async def progress(study_id: str):
        return service.progress(study_id)

    @app.get("/studies/{study_id}/export")
    async def export(study_id: str):
        return service.export_study(study_id)

    @app.get("/studies/{study_id}/tasks/{task_id}/images/{which}")
    async def task_image(study_id: str, task_id: str, which: str):
        study = service._study(study_id)
        task = study.tasks.get(task_id)
        if task is None:
            raise RejectError("unknown_task", f"no task {task_id!r}")
        if which == "context":
            path = Path(task.context_image)
        elif which == "edited":
            path = Path(task.edited_image)
        else:
            raise RejectError("bad_request", "image must be 'context' or 'edited'")
        if not path.exists():
            raise RejectError("bad_request", f"image missing on disk: {path}")
        return FileResponse(path)

    if ui_dir is not None:
        ui_path = Path(ui_dir)

        @app.get("/")
        async def index():
            return FileResponse(ui_path / "index.html")

        @app.get("/static/{filename}")
        async def static_file(filename: str):
            target = (ui_path / filename).resolve()
            if ui_path.resolve() not in target.parents or not target.exists():
                raise RejectError("bad_request", f"no static file {filename!r}")
            return FileResponse(target)

    return app
