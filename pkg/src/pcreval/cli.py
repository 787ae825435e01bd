"""Command-line interface.

Subcommands: synth, score, eval-map, fit, estimate, report.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import DataError, NumericalError
from .evaluation import evaluate_map, render_ap_table, write_ap_report
from .pipeline import (
    NmsConfig,
    load_samples,
    read_prepared_records,
    score_dataset,
    score_manifest,
)
from .regression import (
    BASELINE_METHODS,
    fit,
    fit_piecewise,
    leave_one_out,
    load_model,
    loo_by_severity,
    predict,
    resolve_features,
    save_model,
)
from .scoring import PcrParams
from .synth import SEVERITIES, VARIANT_FAMILIES, build_meta, default_source_bank


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the contract here is exit code 1
    def error(self, message):
        raise UsageError(message)


def _add_params_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("scoring parameters")
    group.add_argument("--params", metavar="JSON", default=None,
                       help="JSON object overriding scoring parameters, "
                            'e.g. \'{"c": 0.4, "k_r": 8}\'')
    group.add_argument("--conf-threshold", type=float, default=None, dest="c",
                       help="confidence threshold c (default 0.5)")
    group.add_argument("--k-c", type=float, default=None, help="consistency scale (default -60)")
    group.add_argument("--k-r", type=float, default=None, help="reliability scale (default 10)")
    group.add_argument("--alpha", type=float, default=None,
                       help="reliability floor (default 0.2)")
    group.add_argument("--no-clamp-cc", action="store_true",
                       help="keep raw (possibly negative) center closeness")
    group.add_argument("--dedup-reliability", action="store_true",
                       help="count candidates shared by several confident finals once")


def _add_nms_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("post-processing")
    group.add_argument("--nms-iou", type=float, default=0.5,
                       help="NMS IoU threshold (default 0.5)")
    group.add_argument("--score-floor", type=float, default=0.05,
                       help="candidate confidence floor (default 0.05)")
    group.add_argument("--assoc-iou", type=float, default=None,
                       help="IoU threshold for --association=iou (default: --nms-iou)")
    group.add_argument("--association", choices=("suppression", "iou"), default="suppression",
                       help="candidate-to-final association pathway (default suppression)")


def _pcr_params(args) -> PcrParams:
    values = {}
    if args.params:
        try:
            doc = json.loads(args.params)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--params is not valid JSON: {exc.msg}") from exc
        if not isinstance(doc, dict):
            raise UsageError("--params must be a JSON object")
        allowed = {f.name for f in dataclasses.fields(PcrParams)}
        unknown = set(doc) - allowed
        if unknown:
            raise UsageError(f"--params has unknown keys: {', '.join(sorted(unknown))}")
        values.update(doc)
    for key in ("c", "k_c", "k_r", "alpha"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "no_clamp_cc", False):
        values["clamp_cc"] = False
    if getattr(args, "dedup_reliability", False):
        values["dedup_reliability"] = True
    if getattr(args, "score_floor", None) is not None:
        values.setdefault("score_floor", args.score_floor)
    try:
        return PcrParams(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scoring parameters: {exc}") from exc


def _nms_config(args) -> NmsConfig:
    return NmsConfig(
        iou_threshold=args.nms_iou,
        score_floor=args.score_floor,
        assoc_iou=args.assoc_iou,
        association=args.association,
    )


def _parse_methods(spec: str) -> dict[str, tuple[str, ...]]:
    methods = {}
    for name in (m.strip() for m in spec.split(",")):
        if name:
            methods[name] = resolve_features(name)
    if not methods:
        raise UsageError("no methods selected")
    return methods


def cmd_synth(args) -> int:
    bank = default_source_bank()
    severities = tuple(int(s) for s in args.severities.split(",")) if args.severities else SEVERITIES
    variants = args.variants.split(",") if args.variants else None
    manifest = build_meta(
        bank, args.out_dir, seed=args.seed, variants=variants,
        severities=severities, n_images=args.images, jobs=args.jobs,
    )
    print(f"wrote meta-dataset manifest: {manifest}")
    return 0


def cmd_score(args) -> int:
    params = _pcr_params(args)
    nms_cfg = _nms_config(args)
    out_dir = Path(args.out_dir)
    if (args.input is None) == (args.manifest is None):
        raise UsageError("give exactly one of --input or --manifest")
    if args.manifest:
        ids = score_manifest(args.manifest, out_dir, params=params, nms_cfg=nms_cfg,
                             jobs=args.jobs)
        print(f"scored {len(ids)} datasets into {out_dir}")
        return 0
    result = score_dataset(args.input, out_dir, dataset_id=args.dataset_id,
                           params=params, nms_cfg=nms_cfg)
    print(f"wrote {result.scores_path}")
    print(f"wrote {result.summary_path}")
    if result.summary.true_map is not None:
        print(f"true mAP = {result.summary.true_map:.4f}")
    return 0


def cmd_eval_map(args) -> int:
    records = read_prepared_records(args.input, _nms_config(args))
    if not records:
        raise DataError(f"{args.input}: no images")
    report = evaluate_map(records)
    print(render_ap_table(report))
    if args.out:
        write_ap_report(report, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_fit(args) -> int:
    samples = load_samples(args.manifest, args.scores_dir, target=args.target)
    if args.exclude_untransformed:
        samples = [s for s in samples if not s.is_test]
    features = resolve_features(args.method)
    rows = [[s.summary.feature(f) for f in features] for s in samples]
    targets = [s.true_map() for s in samples]
    if args.piecewise:
        model = fit_piecewise(rows, targets, features, args.piecewise_threshold)
    else:
        model = fit(rows, targets, features)
    save_model(model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_estimate(args) -> int:
    model = load_model(args.model)
    try:
        with open(args.summary, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"summary not found: {args.summary}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.summary}: invalid JSON: {exc.msg}") from exc
    from .pipeline import summary_from_json

    summary = summary_from_json(doc, target="map")
    raw = predict(model, summary)
    clamped = min(1.0, max(0.0, raw))
    print(f"estimated mAP = {clamped:.4f} (raw {raw:.4f})")
    if args.out:
        from .detection import atomic_write_text

        atomic_write_text(args.out, json.dumps(
            {"dataset_id": summary.dataset_id, "estimate": raw,
             "estimate_clamped": clamped}, indent=2) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    from . import report as reporting

    samples = load_samples(args.manifest, args.scores_dir, target=args.target)
    methods = _parse_methods(args.methods)
    reports = leave_one_out(
        samples, methods,
        include_test_in_train=not args.exclude_untransformed,
        piecewise=args.piecewise, piecewise_threshold=args.piecewise_threshold,
    )
    severities = {s.severity for s in samples if s.severity > 0}
    per_severity = None
    if len(severities) > 1:
        per_severity = loo_by_severity(samples, methods, piecewise=args.piecewise,
                                       piecewise_threshold=args.piecewise_threshold)

    print(reporting.render_method_grid(reports))
    if per_severity:
        print()
        print("Per-severity RMSE (mAP %):")
        print(reporting.render_severity_grid(per_severity))

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    correlation_features = sorted({f for feats in methods.values() for f in feats})
    correlations = reporting.score_correlations(samples, correlation_features)
    reporting.write_report_json(reports, per_severity, correlations, out_dir / "report.json")
    reporting.write_methods_csv(reports, per_severity, out_dir / "report_methods.csv")
    reporting.write_per_source_csv(reports, out_dir / "report_per_source.csv")
    written = ["report.json", "report_methods.csv", "report_per_source.csv"]
    if not args.no_figures:
        reporting.plot_score_vs_map(samples, correlation_features,
                                    out_dir / "fig_score_vs_map.png")
        written.append("fig_score_vs_map.png")
        if per_severity:
            reporting.plot_severity_rmse(per_severity, out_dir / "fig_severity_rmse.png")
            written.append("fig_severity_rmse.png")
    print()
    print(f"wrote {', '.join(written)} in {out_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pcreval",
                     description="Label-free mAP estimation from pre-/post-NMS detections")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", parser_class=_Parser,
                       help="generate the synthetic meta-dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--images", type=int, default=100, help="images per dataset (default 100)")
    p.add_argument("--variants", default=None,
                   help=f"comma-separated subset of: {', '.join(VARIANT_FAMILIES)}")
    p.add_argument("--severities", default=None, help="comma-separated subset of 1..5")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("score", parser_class=_Parser,
                       help="score a dump (or every dump in a manifest)")
    p.add_argument("--input", default=None, help="one detection dump (JSONL)")
    p.add_argument("--manifest", default=None, help="meta-dataset manifest JSON")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dataset-id", default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_nms_flags(p)
    _add_params_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval-map", parser_class=_Parser,
                       help="evaluate true mAP against ground truth")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None, help="write the AP report JSON here")
    _add_nms_flags(p)
    p.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("fit", parser_class=_Parser,
                       help="fit a score->mAP regression on a scored meta-dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores-dir", required=True)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--method", default="pcr",
                   help="named feature set or '+'-joined features (default pcr)")
    p.add_argument("--target", choices=("map", "map50", "map75"), default="map")
    p.add_argument("--piecewise", action="store_true")
    p.add_argument("--piecewise-threshold", type=float, default=0.05)
    p.add_argument("--exclude-untransformed", action="store_true",
                   help="drop severity-0 test sets from the fit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("estimate", parser_class=_Parser,
                       help="apply a fitted model to one dataset summary")
    p.add_argument("--model", required=True)
    p.add_argument("--summary", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", parser_class=_Parser,
                       help="leave-one-out method comparison with figures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--methods", default="pcr," + ",".join(BASELINE_METHODS),
                   help="comma-separated method names (default: pcr plus baselines)")
    p.add_argument("--target", choices=("map", "map50", "map75"), default="map")
    p.add_argument("--piecewise", action="store_true")
    p.add_argument("--piecewise-threshold", type=float, default=0.05)
    p.add_argument("--exclude-untransformed", action="store_true",
                   help="train folds on transformed variants only")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
