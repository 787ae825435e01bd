"""Dataset-level plumbing: score a dump end to end, persist and reload
summaries, and assemble meta-dataset samples from a manifest."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .detection import ImageRecord, atomic_write_text, prepare_record, read_dump
from .errors import DataError
from .evaluation import ApReport, evaluate_map
from .regression import MetaSample
from .scoring import (
    DatasetSummary,
    ImageScores,
    PcrParams,
    score_image,
    summarize_scores,
    with_true_map,
)
from .synth import load_manifest


@dataclass(frozen=True)
class NmsConfig:
    """Post-processing knobs applied when a dump lacks finals or associations."""

    iou_threshold: float = 0.5
    score_floor: float = 0.05
    assoc_iou: float | None = None
    association: str = "suppression"


def score_to_json(score: ImageScores) -> dict:
    return {
        "image_id": score.image_id,
        "consistency": score.consistency,
        "consistency_unscaled": score.consistency_unscaled,
        "reliability": score.reliability,
        "ps": score.ps,
        "es": score.es,
        "ac": score.ac,
        "atc": score.atc,
        "flags": list(score.flags),
    }


def summary_to_json(summary: DatasetSummary, *, true_map50: float | None = None,
                    true_map75: float | None = None) -> dict:
    return {
        "dataset_id": summary.dataset_id,
        "n_images": summary.n_images,
        "consistency": summary.consistency,
        "consistency_unscaled": summary.consistency_unscaled,
        "consistency_iou_only": summary.consistency_iou_only,
        "reliability": summary.reliability,
        "ps": summary.ps,
        "es": summary.es,
        "ac": summary.ac,
        "atc": summary.atc,
        "mean_finals": summary.mean_finals,
        "mean_candidates": summary.mean_candidates,
        "mean_empty_association": summary.mean_empty_association,
        "flag_counts": {k: v for k, v in summary.flag_counts},
        "true_map": summary.true_map,
        "true_map50": true_map50,
        "true_map75": true_map75,
    }


def summary_from_json(doc: dict, *, target: str = "map") -> DatasetSummary:
    """Rebuild a summary; `target` picks which true-mAP flavor to regress on."""
    key = {"map": "true_map", "map50": "true_map50", "map75": "true_map75"}.get(target)
    if key is None:
        raise DataError(f"unknown regression target '{target}'")
    try:
        return DatasetSummary(
            dataset_id=doc["dataset_id"],
            n_images=int(doc["n_images"]),
            consistency=float(doc["consistency"]),
            consistency_unscaled=float(doc["consistency_unscaled"]),
            consistency_iou_only=float(doc["consistency_iou_only"]),
            reliability=float(doc["reliability"]),
            ps=float(doc["ps"]),
            es=float(doc["es"]),
            ac=float(doc["ac"]),
            atc=float(doc["atc"]),
            mean_finals=float(doc["mean_finals"]),
            mean_candidates=float(doc["mean_candidates"]),
            mean_empty_association=float(doc["mean_empty_association"]),
            flag_counts=tuple(sorted((k, int(v)) for k, v in doc.get("flag_counts", {}).items())),
            true_map=None if doc.get(key) is None else float(doc[key]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed summary JSON: {exc}") from exc


@dataclass(frozen=True)
class DatasetResult:
    summary: DatasetSummary
    scores_path: Path
    summary_path: Path
    ap_report: ApReport | None


def score_dataset(dump_path, out_dir, *, dataset_id: str | None = None,
                  params: PcrParams = PcrParams(), nms_cfg: NmsConfig = NmsConfig(),
                  ) -> DatasetResult:
    """Score one dump: write per-image scores JSONL and the summary JSON.

    When every record carries ground truth, the true mAP is evaluated and
    stored in the summary so the dataset can serve as a regression sample.
    """
    dump_path = Path(dump_path)
    if dataset_id is None:
        dataset_id = dump_path.name.removesuffix(".jsonl")
    try:
        records = [
            prepare_record(r, nms_iou=nms_cfg.iou_threshold, score_floor=nms_cfg.score_floor,
                           assoc_iou=nms_cfg.assoc_iou, association=nms_cfg.association)
            for r in read_dump(dump_path)
        ]
    except FileNotFoundError:
        raise DataError(f"dump not found: {dump_path}") from None
    if not records:
        raise DataError(f"{dump_path}: no images")

    scores = [score_image(r, params) for r in records]
    summary = summarize_scores(scores, dataset_id)

    ap_report = None
    true50 = true75 = None
    if all(r.ground_truth is not None for r in records):
        ap_report = evaluate_map(records)
        summary = with_true_map(summary, ap_report.map)
        true50, true75 = ap_report.map50, ap_report.map75

    out_dir = Path(out_dir)
    scores_path = out_dir / f"{dataset_id}.scores.jsonl"
    summary_path = out_dir / f"{dataset_id}.summary.json"
    atomic_write_text(scores_path, (json.dumps(score_to_json(s)) + "\n" for s in scores))
    atomic_write_text(
        summary_path,
        json.dumps(summary_to_json(summary, true_map50=true50, true_map75=true75), indent=2) + "\n",
    )
    return DatasetResult(summary, scores_path, summary_path, ap_report)


def _score_entry(args: tuple[str, str, str, PcrParams, NmsConfig]) -> str:
    dump_path, out_dir, dataset_id, params, nms_cfg = args
    score_dataset(dump_path, out_dir, dataset_id=dataset_id, params=params, nms_cfg=nms_cfg)
    return dataset_id


def score_manifest(manifest_path, out_dir, *, params: PcrParams = PcrParams(),
                   nms_cfg: NmsConfig = NmsConfig(), jobs: int = 1) -> list[str]:
    """Score every dataset listed in a manifest; returns the dataset ids."""
    manifest_path = Path(manifest_path)
    doc = load_manifest(manifest_path)
    base = manifest_path.parent
    tasks = []
    for entry in doc["datasets"]:
        dump_path = base / entry["path"]
        dataset_id = Path(entry["path"]).name.removesuffix(".jsonl")
        tasks.append((str(dump_path), str(out_dir), dataset_id, params, nms_cfg))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_score_entry, tasks))
    return [_score_entry(task) for task in tasks]


def load_samples(manifest_path, scores_dir, *, target: str = "map",
                 require_true_map: bool = True) -> list[MetaSample]:
    """Join manifest entries with their summary files into regression samples."""
    manifest_path = Path(manifest_path)
    doc = load_manifest(manifest_path)
    scores_dir = Path(scores_dir)
    samples = []
    for entry in doc["datasets"]:
        dataset_id = Path(entry["path"]).name.removesuffix(".jsonl")
        summary_path = scores_dir / f"{dataset_id}.summary.json"
        try:
            with summary_path.open("r", encoding="utf-8") as fh:
                summary_doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(
                f"missing summary for dataset '{dataset_id}': {summary_path} "
                "(run `pcreval score --manifest ...` first)"
            ) from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{summary_path}: invalid JSON: {exc.msg}") from exc
        summary = summary_from_json(summary_doc, target=target)
        if require_true_map and summary.true_map is None:
            raise DataError(f"dataset '{dataset_id}' has no true mAP in its summary")
        samples.append(MetaSample(
            summary=summary,
            source=str(entry["source"]),
            variant=entry.get("variant"),
            severity=int(entry["severity"]),
        ))
    return samples


def read_prepared_records(dump_path, nms_cfg: NmsConfig) -> list[ImageRecord]:
    try:
        return [
            prepare_record(r, nms_iou=nms_cfg.iou_threshold, score_floor=nms_cfg.score_floor,
                           assoc_iou=nms_cfg.assoc_iou, association=nms_cfg.association)
            for r in read_dump(dump_path)
        ]
    except FileNotFoundError:
        raise DataError(f"dump not found: {dump_path}") from None
