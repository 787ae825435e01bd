"""Consistency and reliability scores plus the confidence-only baselines.

Per image, a prediction's consistency compares it with the tight merge of the
pre-NMS candidates it absorbed; the image score down-weights confident
predictions so that consistently-localized *low*-confidence boxes dominate.
Reliability measures which share of the candidate pool's (sigmoid-weighted)
confidence mass is attached to confident final predictions. Both are averaged
over a dataset and fed to the mAP regression.

All reductions use `math.fsum`, so scores are invariant to the ordering of
finals and candidates and identical between serial and parallel runs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .detection import CandidateBox, FinalPrediction, ImageRecord
from .errors import DataError
from .geometry import center_closeness, iou, merge_boxes

# Flags attached to per-image scores for degenerate inputs.
FLAG_EMPTY_IMAGE = "empty_image"
FLAG_EMPTY_POOL = "empty_candidate_pool"
FLAG_EMPTY_ASSOCIATION = "empty_association"
FLAG_RELIABILITY_ABOVE_ONE = "reliability_above_one"


@dataclass(frozen=True)
class PcrParams:
    """Scoring hyperparameters.

    `c` is the confidence threshold shared by both scores, `k_c < 0` and
    `k_r > 0` the sigmoid scales, and `alpha` the reliability floor.
    `score_floor` is the candidate cutoff used by the average-confidence
    baseline (the same cutoff NMS applies). `dedup_reliability` collapses
    candidates shared by several confident finals to a single numerator
    term; off by default, which follows the reliability formula literally.
    """

    c: float = 0.5
    k_c: float = -60.0
    k_r: float = 10.0
    alpha: float = 0.2
    clamp_cc: bool = True
    score_floor: float = 0.05
    dedup_reliability: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.c < 1.0:
            raise ValueError(f"confidence threshold {self.c} outside (0, 1)")
        if self.k_c >= 0:
            raise ValueError(f"consistency scale k_c must be negative, got {self.k_c}")
        if self.k_r <= 0:
            raise ValueError(f"reliability scale k_r must be positive, got {self.k_r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"floor value {self.alpha} outside [0, 1)")
        if not 0.0 <= self.score_floor < 1.0:
            raise ValueError(f"score_floor {self.score_floor} outside [0, 1)")


@dataclass(frozen=True)
class ImageScores:
    image_id: str
    consistency: float
    consistency_unscaled: float
    consistency_iou_only: float
    reliability: float
    ps: float
    es: float
    ac: float
    atc: float
    n_finals: int
    n_candidates: int
    n_empty_association: int
    flags: tuple[str, ...]


@dataclass(frozen=True)
class DatasetSummary:
    """Per-dataset mean of every image score; one regression sample."""

    dataset_id: str
    n_images: int
    consistency: float
    consistency_unscaled: float
    consistency_iou_only: float
    reliability: float
    ps: float
    es: float
    ac: float
    atc: float
    mean_finals: float
    mean_candidates: float
    mean_empty_association: float
    flag_counts: tuple[tuple[str, int], ...] = ()
    true_map: float | None = None

    def feature(self, name: str) -> float:
        if name in ("dataset_id", "flag_counts", "feature"):
            raise KeyError(name)
        try:
            value = getattr(self, name)
        except AttributeError:
            raise KeyError(name) from None
        if value is None:
            raise KeyError(name)
        return float(value)


def _sigmoid(t: float) -> float:
    # overflow-safe 1 / (1 + e^-t)
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def sigma_c(x: float, params: PcrParams) -> float:
    """Consistency weight: near 1 for low confidence, near 0 for high."""
    return _sigmoid(params.k_c * (x - params.c))


def sigma_r(x: float, params: PcrParams) -> float:
    """Reliability weight in [alpha, 1): near 1 for high confidence."""
    return params.alpha + (1.0 - params.alpha) * _sigmoid(params.k_r * (x - params.c))


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def consistency_per_prediction(final: FinalPrediction, candidates: Sequence[CandidateBox],
                               params: PcrParams) -> float:
    """Mean of IoU and center closeness between a final box and its merged candidates."""
    i, cc = _consistency_parts(final, candidates, params)
    return (i + cc) / 2.0


def _consistency_parts(final: FinalPrediction, candidates: Sequence[CandidateBox],
                       params: PcrParams) -> tuple[float, float]:
    if not final.associated:
        raise ValueError("final prediction has no associated candidates")
    merged = merge_boxes([candidates[j].box for j in final.associated])
    i = iou(final.box, merged)
    cc = center_closeness(final.box, merged)
    if params.clamp_cc:
        cc = _clamp01(cc)
    return i, cc


def _check_prepared(record: ImageRecord) -> tuple[FinalPrediction, ...]:
    if record.finals is None:
        raise DataError(f"image '{record.image_id}': finals not computed; run NMS first")
    for f in record.finals:
        if f.associated is None:
            raise DataError(
                f"image '{record.image_id}': final prediction lacks an association list"
            )
    return record.finals


def image_consistency(record: ImageRecord, params: PcrParams) -> tuple[float, float]:
    """(confidence-scaled, unscaled) mean per-prediction consistency of an image.

    Predictions with no associated candidates (or a degenerate box)
    contribute zero but still count toward N; an image with no finals
    scores (0, 0) so dataset means stay total.
    """
    finals = _check_prepared(record)
    if not finals:
        return 0.0, 0.0
    scaled, unscaled = [], []
    for f in finals:
        s = _per_prediction_or_zero(f, record.candidates, params)
        s = (s[0] + s[1]) / 2.0
        unscaled.append(s)
        scaled.append(s * sigma_c(f.confidence, params))
    n = len(finals)
    return math.fsum(scaled) / n, math.fsum(unscaled) / n


def _per_prediction_or_zero(final: FinalPrediction, candidates, params) -> tuple[float, float]:
    if not final.associated:
        return 0.0, 0.0
    try:
        return _consistency_parts(final, candidates, params)
    except ValueError:
        # degenerate final box (zero diagonal): treated like an orphan
        return 0.0, 0.0


def image_reliability(record: ImageRecord, params: PcrParams) -> float:
    """Share of the candidate pool's sigmoid-weighted confidence mass that is
    attached to confident final predictions.

    The denominator runs over the deduplicated union of all association
    lists. The numerator keeps one term per (final, candidate) pair, so a
    candidate shared by several confident finals is counted once per final
    unless `params.dedup_reliability` is set.
    """
    finals = _check_prepared(record)
    pool = sorted({j for f in finals for j in f.associated})
    if not pool:
        return 0.0
    denominator = math.fsum(sigma_r(record.candidates[j].confidence, params) for j in pool)
    if params.dedup_reliability:
        confident = sorted({
            j for f in finals if f.confidence > params.c for j in f.associated
        })
        numerator = math.fsum(sigma_r(record.candidates[j].confidence, params) for j in confident)
    else:
        numerator = math.fsum(
            sigma_r(record.candidates[j].confidence, params)
            for f in finals if f.confidence > params.c
            for j in f.associated
        )
    return numerator / denominator


def baseline_scores(record: ImageRecord, params: PcrParams) -> tuple[float, float, float, float]:
    """Confidence-only baselines (ps, es, ac, atc) for one image.

    ps: mean final confidence. es: negated mean binary entropy of final
    confidences (higher = more certain). ac: mean candidate confidence above
    the score floor. atc: fraction of finals above the confidence threshold.
    """
    finals = record.finals if record.finals is not None else ()
    n = len(finals)
    if n == 0:
        return 0.0, 0.0, 0.0, 0.0
    confs = [f.confidence for f in finals]
    ps = math.fsum(confs) / n
    es = -math.fsum(_binary_entropy(h) for h in confs) / n
    pool = [c.confidence for c in record.candidates if c.confidence >= params.score_floor]
    ac = math.fsum(pool) / len(pool) if pool else 0.0
    atc = sum(1 for h in confs if h > params.c) / n
    return ps, es, ac, atc


def _binary_entropy(h: float) -> float:
    # natural log; 0 log 0 := 0
    acc = 0.0
    if 0.0 < h < 1.0:
        acc = -h * math.log(h) - (1.0 - h) * math.log(1.0 - h)
    return acc


def score_image(record: ImageRecord, params: PcrParams) -> ImageScores:
    """All per-image scores plus diagnostics flags in one pass."""
    finals = _check_prepared(record)
    flags = []
    n = len(finals)
    n_empty = 0

    if n == 0:
        flags.append(FLAG_EMPTY_IMAGE)
        consistency = consistency_unscaled = consistency_iou = 0.0
        ps = es = ac = atc = 0.0
        reliability = 0.0
        if not record.candidates:
            flags.append(FLAG_EMPTY_POOL)
    else:
        scaled, unscaled, iou_scaled = [], [], []
        for f in finals:
            parts = _per_prediction_or_zero(f, record.candidates, params)
            if not f.associated:
                n_empty += 1
            s = (parts[0] + parts[1]) / 2.0
            w = sigma_c(f.confidence, params)
            scaled.append(s * w)
            unscaled.append(s)
            iou_scaled.append(parts[0] * w)
        consistency = math.fsum(scaled) / n
        consistency_unscaled = math.fsum(unscaled) / n
        consistency_iou = math.fsum(iou_scaled) / n
        if n_empty:
            flags.append(FLAG_EMPTY_ASSOCIATION)

        pool = sorted({j for f in finals for j in f.associated})
        if not pool:
            flags.append(FLAG_EMPTY_POOL)
            reliability = 0.0
        else:
            reliability = image_reliability(record, params)
            if reliability > 1.0:
                flags.append(FLAG_RELIABILITY_ABOVE_ONE)
                warnings.warn(
                    f"image '{record.image_id}': reliability {reliability:.6f} exceeds 1 "
                    "(overlapping association lists)",
                    RuntimeWarning,
                    stacklevel=2,
                )
        ps, es, ac, atc = baseline_scores(record, params)

    return ImageScores(
        image_id=record.image_id,
        consistency=consistency,
        consistency_unscaled=consistency_unscaled,
        consistency_iou_only=consistency_iou,
        reliability=reliability,
        ps=ps,
        es=es,
        ac=ac,
        atc=atc,
        n_finals=n,
        n_candidates=len(record.candidates),
        n_empty_association=n_empty,
        flags=tuple(flags),
    )


_MEAN_FIELDS = (
    "consistency", "consistency_unscaled", "consistency_iou_only", "reliability",
    "ps", "es", "ac", "atc",
)


def summarize_scores(scores: Sequence[ImageScores], dataset_id: str) -> DatasetSummary:
    """Arithmetic mean of each per-image score over a dataset."""
    if not scores:
        raise DataError(f"dataset '{dataset_id}': no images to summarize")
    n = len(scores)
    means = {f: math.fsum(getattr(s, f) for s in scores) / n for f in _MEAN_FIELDS}
    flag_counts: dict[str, int] = {}
    for s in scores:
        for flag in s.flags:
            flag_counts[flag] = flag_counts.get(flag, 0) + 1
    return DatasetSummary(
        dataset_id=dataset_id,
        n_images=n,
        mean_finals=math.fsum(s.n_finals for s in scores) / n,
        mean_candidates=math.fsum(s.n_candidates for s in scores) / n,
        mean_empty_association=math.fsum(s.n_empty_association for s in scores) / n,
        flag_counts=tuple(sorted(flag_counts.items())),
        **means,
    )


def summarize(records: Iterable[ImageRecord], dataset_id: str,
              params: PcrParams) -> DatasetSummary:
    """Score every record and average; errors on an empty dataset."""
    scores = [score_image(r, params) for r in records]
    return summarize_scores(scores, dataset_id)


def with_true_map(summary: DatasetSummary, true_map: float) -> DatasetSummary:
    return replace(summary, true_map=true_map)
