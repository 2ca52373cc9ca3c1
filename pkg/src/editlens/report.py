"""Rendering: score colors, per-sample overlay documents, leaderboards.

All rendering is deterministic; identical inputs yield byte-identical
documents. Overlay graphics are standalone SVG with the source image
embedded as a data URI.
"""

from __future__ import annotations

import base64
import logging
import math
import struct
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .analytics import DEFINITIONS, RunReport
from .model import EditLensError, EvalRecord, canonical_json

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_BINS",
    "ReportError",
    "bin_for",
    "emit_leaderboard",
    "emit_overlay",
    "render_correlation_md",
    "render_run_report_md",
    "score_to_color",
]


class ReportError(EditLensError):
    pass


RED_ENDPOINT = (211.0, 47.0, 47.0)  # score 1
GREEN_ENDPOINT = (56.0, 142.0, 60.0)  # score 10

# Qualitative frame bins; thresholds are configuration, documented in output.
DEFAULT_BINS = (
    {"min": 1.0, "max": 4.0, "name": "red", "color": "#d32f2f"},
    {"min": 4.0, "max": 7.0, "name": "amber", "color": "#ffb300"},
    {"min": 7.0, "max": 10.0, "name": "green", "color": "#388e3c"},
)

COLOR_RULE = (
    "Chip colors interpolate linearly from rgb(211,47,47) at score 1 to "
    "rgb(56,142,60) at score 10; channel halves round up."
)


def _bins_note(bins: Sequence[Mapping]) -> str:
    spans = ", ".join(
        f"[{b['min']:g},{b['max']:g}{']' if b is bins[-1] else ')'} {b['name']}" for b in bins
    )
    return f"Frame bins: {spans}."


def score_to_color(score: float) -> tuple[float, float, float]:
    """Linear RGB interpolation across [1,10]; out-of-range clamps with a warning."""
    if not 1.0 <= score <= 10.0:
        logger.warning("score %s outside [1,10]; clamping", score)
        score = min(max(score, 1.0), 10.0)
    t = (score - 1.0) / 9.0
    return tuple(r + t * (g - r) for r, g in zip(RED_ENDPOINT, GREEN_ENDPOINT))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _color_hex(score: float) -> str:
    r, g, b = (_round_half_up(c) for c in score_to_color(score))
    return f"#{r:02x}{g:02x}{b:02x}"


def bin_for(score: float, bins: Sequence[Mapping] = DEFAULT_BINS) -> Mapping:
    for i, b in enumerate(bins):
        last = i == len(bins) - 1
        if b["min"] <= score < b["max"] or (last and score == b["max"]):
            return b
    raise ReportError(f"score {score} matches no bin")


# ---------------------------------------------------------------------------
# Image probing
# ---------------------------------------------------------------------------

_MIME = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg", ".gif": "image/gif", ".webp": "image/webp"}


def _image_size(data: bytes, suffix: str) -> tuple[int, int] | None:
    if suffix == ".png" and len(data) >= 24 and data[:8] == b"\x89PNG\r\n\x1a\n":
        w, h = struct.unpack(">II", data[16:24])
        return w, h
    if suffix in (".jpg", ".jpeg"):
        i = 2
        while i + 9 < len(data):
            if data[i] != 0xFF:
                i += 1
                continue
            marker = data[i + 1]
            if marker in (0xC0, 0xC1, 0xC2, 0xC3):
                h, w = struct.unpack(">HH", data[i + 5 : i + 9])
                return w, h
            if marker in (0xD8, 0xD9) or 0xD0 <= marker <= 0xD7:
                i += 2
                continue
            (seg_len,) = struct.unpack(">H", data[i + 2 : i + 4])
            i += 2 + seg_len
    return None


# ---------------------------------------------------------------------------
# Overlay document
# ---------------------------------------------------------------------------

_PANEL_W = 360
_ROW_H = 26
_PAD = 12


def emit_overlay(
    record: EvalRecord,
    image_ref: Path | str | None,
    boxes: Mapping[str, Sequence[float]] | None = None,
    bins: Sequence[Mapping] = DEFAULT_BINS,
) -> str:
    """SVG for one judged record: image (or placeholder) plus entity chips.

    With a boxes sidecar (entity -> [x, y, w, h] in image pixels), callouts
    are anchored on-image; otherwise entities render as a chip panel beside
    the image. The global panel shows the rank badge, audit flags, and the
    final rationale; the outer frame color comes from the rank's bin.
    """
    img_w, img_h = 480, 360
    image_tag = ""
    if image_ref is not None and Path(image_ref).exists():
        data = Path(image_ref).read_bytes()
        suffix = Path(image_ref).suffix.lower()
        size = _image_size(data, suffix)
        if size:
            img_w, img_h = size
        mime = _MIME.get(suffix, "application/octet-stream")
        uri = f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"
        image_tag = (
            f'<image x="{_PAD}" y="{_PAD}" width="{img_w}" height="{img_h}" href="{uri}"/>'
        )
    else:
        image_tag = (
            f'<rect x="{_PAD}" y="{_PAD}" width="{img_w}" height="{img_h}" fill="#eceff1"/>'
            f'<text x="{_PAD + img_w / 2:.1f}" y="{_PAD + img_h / 2:.1f}" text-anchor="middle" '
            f'font-size="16" fill="#607d8b">image unavailable</text>'
        )

    g = record.global_evaluation
    frame = bin_for(float(g.final_rank), bins)
    entities = record.entity_evaluations
    n_rows = max(len(entities), 1)
    panel_h = n_rows * _ROW_H + 150
    height = max(img_h + 2 * _PAD, panel_h + 2 * _PAD)
    width = _PAD * 3 + img_w + _PANEL_W

    parts: list[str] = []
    parts.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif">'
    )
    parts.append(
        f"<desc>{escape(_bins_note(bins))} {escape(COLOR_RULE)} "
        f"{escape(DEFINITIONS['failure_profile'])}</desc>"
    )
    parts.append(f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>')
    parts.append(
        f'<rect x="1.5" y="1.5" width="{width - 3}" height="{height - 3}" fill="none" '
        f'stroke="{frame["color"]}" stroke-width="3"/>'
    )
    parts.append(image_tag)

    px = _PAD * 2 + img_w
    y = _PAD + 16
    parts.append(
        f'<text x="{px}" y="{y}" font-size="14" font-weight="bold">'
        f"{escape(record.sample_id)} / {escape(record.model_id)} "
        f"({escape(record.prompt_kind.value)})</text>"
    )
    y += 10

    if boxes:
        for ev in entities:
            box = boxes.get(ev.entity)
            if not box or len(box) != 4:
                continue
            bx, by, bw, bh = box
            color = _color_hex(float(ev.entity_overall_score))
            parts.append(
                f'<rect x="{_PAD + bx:.1f}" y="{_PAD + by:.1f}" width="{bw:.1f}" '
                f'height="{bh:.1f}" fill="none" stroke="{color}" stroke-width="2.5"/>'
            )
            parts.append(
                f'<text x="{_PAD + bx + 2:.1f}" y="{_PAD + by - 4:.1f}" font-size="12" '
                f'fill="{color}">{escape(ev.entity)} {ev.entity_overall_score}</text>'
            )

    for ev in entities:
        y += _ROW_H
        color = _color_hex(float(ev.entity_overall_score))
        parts.append(
            f'<rect x="{px}" y="{y - 16}" width="22" height="20" rx="4" fill="{color}"/>'
        )
        parts.append(
            f'<text x="{px + 11}" y="{y - 2}" text-anchor="middle" font-size="12" '
            f'fill="#ffffff">{ev.entity_overall_score}</text>'
        )
        parts.append(
            f'<text x="{px + 30}" y="{y - 2}" font-size="13">{escape(ev.entity)} '
            f'<tspan fill="#78909c" font-size="11">{escape(ev.edit_execution.value)}</tspan></text>'
        )

    y += _ROW_H + 8
    rank_color = _color_hex(float(g.final_rank))
    parts.append(f'<rect x="{px}" y="{y - 18}" width="54" height="26" rx="6" fill="{rank_color}"/>')
    parts.append(
        f'<text x="{px + 27}" y="{y}" text-anchor="middle" font-size="15" font-weight="bold" '
        f'fill="#ffffff">{g.final_rank}/10</text>'
    )
    flags = (
        f"missing_changes={str(g.missing_changes).lower()} "
        f"over_editing={str(g.over_editing).lower()} "
        f"coherent={str(g.overall_narrative_coherence).lower()}"
    )
    parts.append(f'<text x="{px + 64}" y="{y - 2}" font-size="11" fill="#455a64">{escape(flags)}</text>')

    y += 22
    rationale = g.final_rationale
    # crude wrap: fixed 52-char lines keeps rendering deterministic
    for i in range(0, min(len(rationale), 520), 52):
        parts.append(
            f'<text x="{px}" y="{y}" font-size="11" fill="#37474f">'
            f"{escape(rationale[i : i + 52])}</text>"
        )
        y += 14

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Leaderboards and summaries
# ---------------------------------------------------------------------------

_DOMAINS = ("Emotional", "Logical", "Physical", "Social")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _leaderboard_rows(reports: Sequence[RunReport]) -> list[dict]:
    rows = []
    for r in sorted(reports, key=lambda r: (-r.score.mean, r.model_id)):
        row: dict = {
            "model_id": r.model_id,
            "n": r.n,
            "mean": round(r.score.mean, 2),
            "sd": round(r.score.sd, 2),
            "under_rate": round(r.under_rate, 2),
            "over_rate": round(r.over_rate, 2),
        }
        for d in _DOMAINS:
            stats = r.per_domain.get(d)
            row[d] = (
                {"mean": round(stats.mean, 2), "sd": round(stats.sd, 2), "n": stats.n}
                if stats
                else None
            )
        rows.append(row)
    return rows


def emit_leaderboard(reports: Sequence[RunReport], format: str = "md") -> str:
    """Leaderboard over RunReports of one prompt kind, sorted by mean desc."""
    if not reports:
        raise ReportError("no reports to rank")
    kinds = {r.prompt_kind for r in reports}
    if len(kinds) > 1:
        raise ReportError(
            f"mixed prompt kinds in one table: {sorted(k.value for k in kinds)}"
        )
    kind = next(iter(kinds)).value
    rows = _leaderboard_rows(reports)

    if format == "json":
        return canonical_json(
            {
                "prompt_kind": kind,
                "rows": rows,
                "definitions": DEFINITIONS,
                "bins": _bins_note(DEFAULT_BINS),
            }
        ) + "\n"

    if format == "csv":
        header = ["model_id", "n", "mean", "sd", "under_rate", "over_rate"] + [
            f"{col}_{d}" for d in _DOMAINS for col in ("mean", "sd", "n")
        ]
        lines = [",".join(header)]
        for row in rows:
            cells = [
                row["model_id"],
                str(row["n"]),
                _f(row["mean"]),
                _f(row["sd"]),
                _f(row["under_rate"]),
                _f(row["over_rate"]),
            ]
            for d in _DOMAINS:
                cell = row[d]
                cells += ["", "", ""] if cell is None else [_f(cell["mean"]), _f(cell["sd"]), str(cell["n"])]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    if format == "md":
        lines = [
            f"# Leaderboard ({kind} prompts)",
            "",
            "Sorted descending by mean final rank. Values are mean ± sample sd "
            "(n-1 denominator), 2 decimals.",
            f"Failure profile: {DEFINITIONS['failure_profile']}",
            _bins_note(DEFAULT_BINS),
            "",
            "| Model | n | Mean ± SD | Under | Over | "
            + " | ".join(_DOMAINS)
            + " |",
            "|---|---|---|---|---|" + "---|" * len(_DOMAINS),
        ]
        for row in rows:
            cells = [
                row["model_id"],
                str(row["n"]),
                f"{_f(row['mean'])} ± {_f(row['sd'])}",
                _f(row["under_rate"]),
                _f(row["over_rate"]),
            ]
            for d in _DOMAINS:
                cell = row[d]
                cells.append("-" if cell is None else f"{_f(cell['mean'])} ± {_f(cell['sd'])}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    raise ReportError(f"unknown leaderboard format {format!r}")


def render_run_report_md(report: RunReport) -> str:
    """Single-run summary with per-action failure rates and insertion cue rate."""
    lines = [
        f"# Run report: {report.model_id} ({report.prompt_kind.value} prompts)",
        "",
        f"Failure profile: {DEFINITIONS['failure_profile']}",
        f"Standard deviation: {DEFINITIONS['sd']}",
        "",
        f"- n: {report.n}",
        f"- mean final rank: {_f(report.score.mean)}",
        f"- sd: {_f(report.score.sd)}" + ("" if report.score.sd_defined else " (undefined, n=1)"),
        f"- under_rate: {_f(report.under_rate)}",
        f"- over_rate: {_f(report.over_rate)}",
    ]
    cue = report.insertion_text_cue
    if cue.defined:
        lines.append(
            f"- insertion text-cue rate: {cue.rate:.4f} ({cue.cue_matches}/{cue.inserted})"
        )
    else:
        lines.append("- insertion text-cue rate: undefined (no insertions)")
    if report.per_domain:
        lines += ["", "| Domain | n | Mean ± SD |", "|---|---|---|"]
        for domain, stats in sorted(report.per_domain.items()):
            lines.append(f"| {domain} | {stats.n} | {_f(stats.mean)} ± {_f(stats.sd)} |")
    if report.action_failure:
        lines += ["", "| Edit action | Failures | Occurrences | Rate |", "|---|---|---|---|"]
        for action, af in sorted(report.action_failure.items()):
            lines.append(f"| {action} | {af.failures} | {af.occurrences} | {_f(af.rate)} |")
    return "\n".join(lines) + "\n"


def render_correlation_md(rows: Sequence[tuple[str, float, int]]) -> str:
    """Correlation table: (label, rho, n) rows."""
    lines = ["| Comparison | Spearman rho | n |", "|---|---|---|"]
    for label, rho, n in rows:
        lines.append(f"| {label} | {rho:.4f} | {n} |")
    return "\n".join(lines) + "\n"
