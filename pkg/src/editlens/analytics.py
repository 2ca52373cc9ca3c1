"""Aggregation of judged records into reporting quantities.

All aggregations are pure functions over in-memory record lists and are
exactly permutation-invariant (sums use `math.fsum`, which is independent of
summation order). Failure-profile rates are sample fractions computed from
the two global audit booleans; the report definitions carry that sentence so
every rendered header documents it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .model import (
    FAILURE_LABELS,
    Domain,
    EditAction,
    EditLensError,
    EvalRecord,
    ExecutionLabel,
    PromptKind,
    normalize_entity,
)

__all__ = [
    "ActionFailure",
    "AnalyticsError",
    "DEFAULT_CUE_SUBSTRINGS",
    "DEFINITIONS",
    "InsertionCueRate",
    "PairedDeltas",
    "RunReport",
    "ScoreStats",
    "abstract_vs_explicit",
    "action_failure_matrix",
    "aggregate_scores",
    "build_run_report",
    "entity_failure_profile",
    "export_reports_csv",
    "failure_profile",
    "text_cue_insertion_rate",
]

DEFAULT_CUE_SUBSTRINGS = ("text", "sign", "cue", "banner", "poster", "label", "writing")

DEFINITIONS = {
    "failure_profile": (
        "Sample fractions: under_rate is the share of judged samples whose global "
        "audit set missing_changes, over_rate the share with over_editing. A sample "
        "with both flags counts in both rates."
    ),
    "sd": "Sample standard deviation (n-1 denominator), reported to 2 decimals.",
    "action_failure": (
        "Per edit action: failures are entity evaluations with a BAD_* execution "
        "label, normalized by that action's occurrence count."
    ),
    "insertion_text_cue": (
        "Over inserted entities (present in the evaluation, absent from the "
        "expectation baseline, change_occurred with OBJECT_PRESENCE): the fraction "
        "whose normalized name contains a configured cue substring."
    ),
}


class AnalyticsError(EditLensError):
    pass


@dataclass(frozen=True)
class ScoreStats:
    n: int
    mean: float
    sd: float
    sd_defined: bool

    def to_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean, "sd": self.sd, "sd_defined": self.sd_defined}


@dataclass(frozen=True)
class ActionFailure:
    failures: int
    occurrences: int

    @property
    def rate(self) -> float:
        return self.failures / self.occurrences

    def to_dict(self) -> dict:
        return {"failures": self.failures, "occurrences": self.occurrences, "rate": self.rate}


@dataclass(frozen=True)
class InsertionCueRate:
    inserted: int
    cue_matches: int

    @property
    def defined(self) -> bool:
        return self.inserted > 0

    @property
    def rate(self) -> float | None:
        return self.cue_matches / self.inserted if self.defined else None

    def to_dict(self) -> dict:
        return {
            "inserted": self.inserted,
            "cue_matches": self.cue_matches,
            "rate": self.rate,
            "defined": self.defined,
        }


@dataclass(frozen=True)
class RunReport:
    model_id: str
    prompt_kind: PromptKind
    n: int
    score: ScoreStats
    per_domain: dict
    under_rate: float
    over_rate: float
    action_failure: dict
    insertion_text_cue: InsertionCueRate

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "prompt_kind": self.prompt_kind.value,
            "n": self.n,
            "score": self.score.to_dict(),
            "per_domain": {d: s.to_dict() for d, s in sorted(self.per_domain.items())},
            "failure_profile": {"under_rate": self.under_rate, "over_rate": self.over_rate},
            "action_failure": {a: f.to_dict() for a, f in sorted(self.action_failure.items())},
            "insertion_text_cue": self.insertion_text_cue.to_dict(),
            "definitions": DEFINITIONS,
        }


def _stats(values: Sequence[float]) -> ScoreStats:
    n = len(values)
    if n == 0:
        raise AnalyticsError("cannot aggregate zero records")
    mean = math.fsum(values) / n
    if n == 1:
        return ScoreStats(n=n, mean=mean, sd=0.0, sd_defined=False)
    var = math.fsum((v - mean) ** 2 for v in sorted(values)) / (n - 1)
    return ScoreStats(n=n, mean=mean, sd=math.sqrt(var), sd_defined=True)


def aggregate_scores(
    records: Sequence[EvalRecord], domain_of: Mapping[str, Domain] | None = None
) -> tuple[ScoreStats, dict[str, ScoreStats]]:
    """Mean/sd of global final_rank overall and, when domains are known, per domain.

    sd is the sample (n-1) standard deviation; a single record reports sd 0.0
    with sd_defined false.
    """
    if not records:
        raise AnalyticsError("cannot aggregate zero records")
    overall = _stats([float(r.global_evaluation.final_rank) for r in records])
    per_domain: dict[str, ScoreStats] = {}
    if domain_of is not None:
        groups: dict[str, list[float]] = {}
        for r in records:
            domain = domain_of.get(r.sample_id)
            if domain is None:
                raise AnalyticsError(f"no domain known for sample {r.sample_id!r}")
            groups.setdefault(domain.value, []).append(float(r.global_evaluation.final_rank))
        per_domain = {d: _stats(v) for d, v in sorted(groups.items())}
    return overall, per_domain


def failure_profile(records: Sequence[EvalRecord]) -> tuple[float, float]:
    """(under_rate, over_rate) as sample fractions of the two global flags."""
    if not records:
        raise AnalyticsError("failure profile over zero records")
    n = len(records)
    under = sum(1 for r in records if r.global_evaluation.missing_changes)
    over = sum(1 for r in records if r.global_evaluation.over_editing)
    return under / n, over / n


def entity_failure_profile(records: Sequence[EvalRecord]) -> tuple[float, float]:
    """Secondary diagnostic: entity-level fractions rather than sample fractions.

    under = share of entity evaluations labeled BAD_EXPECTED_PRESERVATION
    (should have changed, did not); over = share labeled BAD_OPTIONAL_CHANGE
    (changed without need, hurting the result).
    """
    evaluations = [ev for r in records for ev in r.entity_evaluations]
    if not evaluations:
        raise AnalyticsError("entity failure profile over zero entity evaluations")
    n = len(evaluations)
    under = sum(1 for ev in evaluations if ev.edit_execution is ExecutionLabel.BAD_EXPECTED_PRESERVATION)
    over = sum(1 for ev in evaluations if ev.edit_execution is ExecutionLabel.BAD_OPTIONAL_CHANGE)
    return under / n, over / n


def action_failure_matrix(records: Sequence[EvalRecord]) -> dict[str, ActionFailure]:
    """Failure rate per edit action, normalized by occurrences.

    A failure is any entity evaluation whose execution label is BAD_*;
    NO_CHANGE occurrences fail via BAD_EXPECTED_PRESERVATION. Actions that
    never occur are omitted.
    """
    failures: dict[str, int] = {}
    occurrences: dict[str, int] = {}
    for record in records:
        for ev in record.entity_evaluations:
            action = ev.edit_action.value
            occurrences[action] = occurrences.get(action, 0) + 1
            if ev.edit_execution in FAILURE_LABELS:
                failures[action] = failures.get(action, 0) + 1
    return {
        action: ActionFailure(failures=failures.get(action, 0), occurrences=count)
        for action, count in sorted(occurrences.items())
    }


@dataclass(frozen=True)
class PairedDeltas:
    """Abstract-minus-explicit deltas over matched (sample_id, model_id) pairs."""

    pairs: tuple
    mean_rank_delta: float
    under_rate_delta: float
    over_rate_delta: float
    orphans_abstract: tuple
    orphans_explicit: tuple

    def to_dict(self) -> dict:
        return {
            "pairs": [
                {"sample_id": s, "model_id": m, "rank_delta": d} for (s, m, d) in self.pairs
            ],
            "mean_rank_delta": self.mean_rank_delta,
            "under_rate_delta": self.under_rate_delta,
            "over_rate_delta": self.over_rate_delta,
            "orphans_abstract": [list(k) for k in self.orphans_abstract],
            "orphans_explicit": [list(k) for k in self.orphans_explicit],
        }


def abstract_vs_explicit(
    records_abs: Sequence[EvalRecord], records_exp: Sequence[EvalRecord]
) -> PairedDeltas:
    """Pair records by (sample_id, model_id) and report per-pair and flag deltas.

    Deltas are abstract minus explicit. Unmatched records on either side are
    reported as orphans, never silently dropped.
    """
    by_key_abs = {(r.sample_id, r.model_id): r for r in records_abs}
    by_key_exp = {(r.sample_id, r.model_id): r for r in records_exp}
    matched = sorted(by_key_abs.keys() & by_key_exp.keys())
    if not matched:
        raise AnalyticsError("no matched (sample_id, model_id) pairs")
    pairs = []
    for key in matched:
        a, e = by_key_abs[key], by_key_exp[key]
        pairs.append(
            (key[0], key[1], float(a.global_evaluation.final_rank - e.global_evaluation.final_rank))
        )
    abs_matched = [by_key_abs[k] for k in matched]
    exp_matched = [by_key_exp[k] for k in matched]
    under_abs, over_abs = failure_profile(abs_matched)
    under_exp, over_exp = failure_profile(exp_matched)
    return PairedDeltas(
        pairs=tuple(pairs),
        mean_rank_delta=math.fsum(d for (_, _, d) in pairs) / len(pairs),
        under_rate_delta=under_abs - under_exp,
        over_rate_delta=over_abs - over_exp,
        orphans_abstract=tuple(sorted(by_key_abs.keys() - by_key_exp.keys())),
        orphans_explicit=tuple(sorted(by_key_exp.keys() - by_key_abs.keys())),
    )


def _inserted_entities(record: EvalRecord) -> Iterable[str]:
    baseline = {normalize_entity(e.entity) for e in record.expectations}
    for ev in record.entity_evaluations:
        if (
            normalize_entity(ev.entity) not in baseline
            and ev.change_occurred
            and ev.edit_action is EditAction.OBJECT_PRESENCE
        ):
            yield ev.entity


def text_cue_insertion_rate(
    records: Sequence[EvalRecord], cues: Sequence[str] = DEFAULT_CUE_SUBSTRINGS
) -> InsertionCueRate:
    """Fraction of inserted entities whose normalized name contains a cue term.

    With zero insertions the rate is undefined (flagged), never reported as 0.
    """
    cue_list = [normalize_entity(c) for c in cues]
    inserted = 0
    matches = 0
    for record in records:
        for name in _inserted_entities(record):
            inserted += 1
            norm = normalize_entity(name)
            if any(c in norm for c in cue_list):
                matches += 1
    return InsertionCueRate(inserted=inserted, cue_matches=matches)


def build_run_report(
    records: Sequence[EvalRecord],
    model_id: str,
    prompt_kind: PromptKind,
    domain_of: Mapping[str, Domain] | None = None,
    cues: Sequence[str] = DEFAULT_CUE_SUBSTRINGS,
) -> RunReport:
    """One RunReport for one (model, prompt kind) record set."""
    subset = [r for r in records if r.model_id == model_id and r.prompt_kind is prompt_kind]
    if not subset:
        raise AnalyticsError(f"no records for model {model_id!r} / {prompt_kind.value}")
    score, per_domain = aggregate_scores(subset, domain_of)
    under, over = failure_profile(subset)
    return RunReport(
        model_id=model_id,
        prompt_kind=prompt_kind,
        n=len(subset),
        score=score,
        per_domain=per_domain,
        under_rate=under,
        over_rate=over,
        action_failure=action_failure_matrix(subset),
        insertion_text_cue=text_cue_insertion_rate(subset, cues),
    )


def export_reports_csv(reports: Sequence[RunReport]) -> str:
    """One CSV row per (model, prompt_kind); 2-decimal formatting throughout."""
    if not reports:
        raise AnalyticsError("no reports to export")
    domains = [d.value for d in Domain]
    header = (
        ["model_id", "prompt_kind", "n", "mean", "sd", "under_rate", "over_rate"]
        + [f"{col}_{d}" for d in domains for col in ("mean", "sd", "n")]
        + ["insertion_cue_rate"]
    )
    lines = [",".join(header)]
    for report in reports:
        row = [
            report.model_id,
            report.prompt_kind.value,
            str(report.n),
            f"{report.score.mean:.2f}",
            f"{report.score.sd:.2f}",
            f"{report.under_rate:.2f}",
            f"{report.over_rate:.2f}",
        ]
        for d in domains:
            stats = report.per_domain.get(d)
            if stats is None:
                row += ["", "", ""]
            else:
                row += [f"{stats.mean:.2f}", f"{stats.sd:.2f}", str(stats.n)]
        cue = report.insertion_text_cue
        row.append(f"{cue.rate:.4f}" if cue.defined else "undefined")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
