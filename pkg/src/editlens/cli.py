"""Command-line entry point.

Subcommands: curate, evaluate, analyze, stats, report, serve, review.
Exit codes: 0 ok, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .analytics import AnalyticsError, build_run_report, export_reports_csv
from .gateway import ConfigurationError, Gateway, load_profiles, mock_provider
from .metrics import (
    FeatureMatrix,
    MetricError,
    delta_similarity,
    load_features,
    load_ratings_csv,
    spearman_rho,
    vendi_score,
    weighted_fleiss_kappa,
)
from .model import (
    Domain,
    EditLensError,
    PromptKind,
    build_manifest,
    canonical_json,
    load_dataset,
    load_run_records,
    pretty_json,
    save_dataset,
    save_record,
)
from .report import ReportError, emit_leaderboard, emit_overlay, render_run_report_md
from .rubric import evaluate_run, find_output_image, utc_timestamp

_RUNTIME_ERRORS = (EditLensError, MetricError, AnalyticsError, ReportError, OSError, ValueError)


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def _write_run_log(out_dir: Path, command: str, payload: dict) -> None:
    # machine-readable invocation record; not part of any golden comparison
    out_dir.mkdir(parents=True, exist_ok=True)
    log = {"command": command, "finished_at": utc_timestamp(), **payload}
    (out_dir / "run_log.json").write_text(canonical_json(log) + "\n", encoding="utf-8")


def _make_gateway(args: argparse.Namespace) -> Gateway:
    if getattr(args, "profiles", None):
        profiles = load_profiles(args.profiles)
        if args.provider not in profiles:
            raise ConfigurationError(
                f"provider {args.provider!r} not in {args.profiles} "
                f"(have: {sorted(profiles)})"
            )
        profile = profiles[args.provider]
    elif args.provider == "mock":
        if not getattr(args, "fixtures", None):
            raise ConfigurationError("the mock provider needs --fixtures DIR")
        profile = mock_provider(args.fixtures)
    else:
        raise ConfigurationError(
            f"unknown provider {args.provider!r}; pass --profiles FILE or use 'mock'"
        )
    cache_dir = getattr(args, "cache_dir", None)
    return Gateway(profile, cache_dir=cache_dir)


def _read_vector(path: str) -> list[float]:
    values: list[float] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        for token in line.replace(",", " ").split():
            values.append(float(token))
    if not values:
        raise MetricError(f"no numbers in {path}")
    return values


def _domain_map(dataset_dir: str) -> dict[str, Domain]:
    samples, _ = load_dataset(dataset_dir)
    return {s.sample_id: s.category.domain for s in samples}


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _cmd_curate(args: argparse.Namespace) -> int:
    from .curation import assemble_dataset, curate_images, load_categories, load_feature_space

    gateway = _make_gateway(args)
    categories = load_categories(args.categories)
    feature_space = load_feature_space(args.personas)
    items = curate_images(
        gateway, args.images, categories, feature_space, seed=args.seed, no_cache=args.no_cache
    )
    samples, manifest = assemble_dataset(
        items, args.out, train_total=args.train_total, seed=args.seed
    )
    _write_run_log(
        Path(args.out),
        "curate",
        {
            "images": len({i.image.path for i in items}),
            "samples": len(samples),
            "provider_dispatches": gateway.dispatches,
            "cache_hits": gateway.cache_hits,
        },
    )
    print(f"curated {len(samples)} samples -> {args.out}")
    print(f"split sizes: {manifest.split_sizes}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    gateway = _make_gateway(args)
    samples, _ = load_dataset(args.dataset)
    prompt_kind = PromptKind(args.prompt_kind)
    outputs = Path(args.outputs)
    models = args.models or sorted(d.name for d in outputs.iterdir() if d.is_dir())
    if not models:
        raise EditLensError(f"no model output directories under {outputs}")

    out_dir = Path(args.out) / args.run_id
    n_records = 0
    all_failures = []
    for model_id in models:
        records, failures = evaluate_run(
            gateway,
            samples,
            outputs,
            model_id,
            prompt_kind,
            concurrency=args.concurrency,
            dataset_dir=args.dataset,
            no_cache=args.no_cache,
        )
        for record in records:
            save_record(record, args.out, args.run_id)
        n_records += len(records)
        all_failures.extend({"model_id": model_id, **f.to_dict()} for f in failures)

    if all_failures:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "failures.json").write_text(
            pretty_json(all_failures), encoding="utf-8"
        )
    _write_run_log(
        out_dir,
        "evaluate",
        {
            "run_id": args.run_id,
            "prompt_kind": prompt_kind.value,
            "models": list(models),
            "records": n_records,
            "failures": len(all_failures),
            "provider_dispatches": gateway.dispatches,
            "cache_hits": gateway.cache_hits,
        },
    )
    print(f"wrote {n_records} records -> {out_dir}")
    if all_failures:
        print(f"{len(all_failures)} sample(s) failed; see {out_dir / 'failures.json'}", file=sys.stderr)
        return 1
    return 0


def _group_reports(records, domain_of, cues=None):
    pairs = sorted({(r.model_id, r.prompt_kind) for r in records}, key=lambda p: (p[0], p[1].value))
    kwargs = {"cues": tuple(cues)} if cues else {}
    return [
        build_run_report(records, model_id, kind, domain_of=domain_of, **kwargs)
        for model_id, kind in pairs
    ]


def _cmd_analyze(args: argparse.Namespace) -> int:
    records = load_run_records(args.run)
    if not records:
        raise AnalyticsError(f"no records under {args.run}")
    domain_of = _domain_map(args.dataset) if args.dataset else None
    reports = _group_reports(records, domain_of)
    out_dir = Path(args.out) if args.out else Path(args.run) / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        stem = f"report-{report.model_id}-{report.prompt_kind.value}"
        (out_dir / f"{stem}.json").write_text(pretty_json(report.to_dict()), encoding="utf-8")
        (out_dir / f"{stem}.md").write_text(render_run_report_md(report), encoding="utf-8")
    (out_dir / "reports.csv").write_text(export_reports_csv(reports), encoding="utf-8")
    _write_run_log(out_dir, "analyze", {"reports": len(reports), "records": len(records)})
    print(f"wrote {len(reports)} report(s) -> {out_dir}")
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    if args.metric == "spearman":
        x = _read_vector(args.inputs[0])
        y = _read_vector(args.inputs[1])
        print(_fmt(spearman_rho(x, y)))
    elif args.metric == "kappa":
        _, matrix = load_ratings_csv(args.inputs[0], k=args.k)
        print(_fmt(weighted_fleiss_kappa(matrix)))
    elif args.metric == "vendi":
        _, features, _ = load_features(args.inputs[0])
        print(_fmt(vendi_score(features, kernel=args.kernel)))
    elif args.metric == "delta":
        ctx, edit, text = (_read_vector(p) for p in args.inputs)
        print(_fmt(delta_similarity(ctx, edit, text)))
    else:  # pragma: no cover - argparse choices guard this
        raise EditLensError(f"unknown metric {args.metric!r}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    records = load_run_records(args.run)
    if not records:
        raise ReportError(f"no records under {args.run}")
    kind = PromptKind(args.prompt_kind)
    subset = [r for r in records if r.prompt_kind is kind]
    if not subset:
        raise ReportError(f"no {kind.value} records under {args.run}")
    domain_of = _domain_map(args.dataset) if args.dataset else None
    reports = _group_reports(subset, domain_of)
    document = emit_leaderboard(reports, format=args.format)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(document, encoding="utf-8")
        print(f"wrote leaderboard -> {args.out}")
    else:
        sys.stdout.write(document)

    if args.overlays:
        if not args.outputs:
            raise ReportError("--overlays needs --outputs DIR to locate edited images")
        boxes_by_sample = {}
        if args.boxes:
            boxes_by_sample = json.loads(Path(args.boxes).read_text(encoding="utf-8"))
        overlay_dir = Path(args.overlays)
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for record in subset:
            image = find_output_image(args.outputs, record.model_id, kind, record.sample_id)
            svg = emit_overlay(record, image, boxes=boxes_by_sample.get(record.sample_id))
            name = f"{record.model_id}--{kind.value}--{record.sample_id}.svg"
            (overlay_dir / name).write_text(svg, encoding="utf-8")
        print(f"wrote {len(subset)} overlay(s) -> {overlay_dir}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .annotation import AnnotationService, build_app

    samples, _ = load_dataset(args.dataset)
    records = load_run_records(args.run)
    service = AnnotationService(
        samples,
        records,
        outputs_root=args.outputs,
        dataset_dir=args.dataset,
        store_dir=args.store,
    )
    app = build_app(service, ui_dir=args.ui)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_review(args: argparse.Namespace) -> int:
    dataset_dir = Path(args.dataset)
    samples, _ = load_dataset(dataset_dir)
    if args.approve:
        unknown = [sid for sid in args.approve if sid not in {s.sample_id for s in samples}]
        if unknown:
            raise EditLensError(f"unknown sample ids: {unknown}")
        approve = set(args.approve)
        samples = [
            dataclasses.replace(s, verified=True) if s.sample_id in approve else s
            for s in samples
        ]
        target = dataset_dir / "samples.jsonl" if dataset_dir.is_dir() else dataset_dir
        save_dataset(samples, target)
        if dataset_dir.is_dir():
            manifest = build_manifest(samples)
            (dataset_dir / "manifest.json").write_text(
                pretty_json(manifest.to_dict()), encoding="utf-8"
            )
        print(f"verified {len(approve)} sample(s)")
    pending = [s for s in samples if not s.verified]
    print(f"{len(pending)} sample(s) awaiting review")
    if args.list:
        for s in pending:
            print(f"{s.sample_id}\t{s.abstract_prompt}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="editlens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_provider_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--provider", default="mock", help="provider profile name")
        p.add_argument("--profiles", help="JSON file of provider profiles")
        p.add_argument("--fixtures", help="fixture dir for the mock provider")
        p.add_argument("--cache-dir", help="response cache root (default: no cache)")
        p.add_argument("--no-cache", action="store_true", help="skip cache reads")

    p = sub.add_parser("curate", help="build a dataset from images + entity sidecars")
    add_provider_flags(p)
    p.add_argument("--images", required=True, help="directory of context images")
    p.add_argument("--categories", help="category registry JSON (default: packaged)")
    p.add_argument("--personas", help="persona feature space JSON (default: packaged)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--train-total", type=int, default=None, help="train split size")
    p.set_defaults(func=_cmd_curate)

    p = sub.add_parser("evaluate", help="judge model outputs against a dataset")
    add_provider_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--outputs", required=True, help="outputs/<model>/<kind>/<sample>.<ext> root")
    p.add_argument("--prompt-kind", choices=[k.value for k in PromptKind], default="abstract")
    p.add_argument("--models", nargs="*", default=None, help="default: subdirs of --outputs")
    p.add_argument("--run-id", default="run-001")
    p.add_argument("--out", default="runs", help="run records root")
    p.add_argument("--concurrency", type=int, default=4)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("analyze", help="aggregate run records into reports")
    p.add_argument("--run", required=True, help="runs/<run_id> directory")
    p.add_argument("--dataset", help="dataset dir for per-domain breakdowns")
    p.add_argument("--out", help="default: <run>/analysis")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("stats", help="meta-evaluation metrics on files")
    p.add_argument("metric", choices=["spearman", "kappa", "vendi", "delta"])
    p.add_argument("inputs", nargs="+", help="input files (see each metric)")
    p.add_argument("--k", type=int, default=5, help="rating scale size for kappa")
    p.add_argument("--kernel", choices=["cosine", "linear"], default="cosine")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("report", help="leaderboards and per-sample overlays")
    p.add_argument("--run", required=True)
    p.add_argument("--dataset", help="dataset dir for per-domain columns")
    p.add_argument("--prompt-kind", choices=[k.value for k in PromptKind], default="abstract")
    p.add_argument("--format", choices=["md", "csv", "json"], default="md")
    p.add_argument("--out", help="leaderboard file (default: stdout)")
    p.add_argument("--overlays", help="directory for per-sample overlay documents")
    p.add_argument("--outputs", help="edited-image root, needed with --overlays")
    p.add_argument("--boxes", help="JSON sidecar {sample_id: {entity: [x,y,w,h]}}")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("serve", help="run the annotation study HTTP service")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run", required=True, help="judged run directory")
    p.add_argument("--outputs", required=True)
    p.add_argument("--ui", help="static UI bundle directory")
    p.add_argument("--store", help="append-only response log directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("review", help="list and verify curated samples")
    p.add_argument("--dataset", required=True)
    p.add_argument("--list", action="store_true", help="print pending sample ids")
    p.add_argument("--approve", nargs="*", default=None, help="sample ids to mark verified")
    p.set_defaults(func=_cmd_review)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
