"""Linear mAP estimation, leave-one-out evaluation, and error statistics.

A model is an affine map from dataset-level score averages to mAP, fitted by
ordinary least squares. The optional piecewise variant keeps separate models
for the low- and high-mAP regimes, routed at inference by the global model's
own prediction (the true mAP that defines the regimes is unknown at test
time).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import DataError, NumericalError
from .scoring import DatasetSummary

# Named feature sets selectable from the CLI; arbitrary "+"-joined feature
# combinations are accepted as well.
METHOD_FEATURES: dict[str, tuple[str, ...]] = {
    "pcr": ("consistency", "reliability"),
    "consistency": ("consistency",),
    "reliability": ("reliability",),
    "pcr-iou-only": ("consistency_iou_only",),
    "pcr-unscaled": ("consistency_unscaled",),
    "ps": ("ps",),
    "es": ("es",),
    "ac": ("ac",),
    "atc": ("atc",),
}

BASELINE_METHODS = ("ps", "es", "ac", "atc")


class RankDeficientError(NumericalError):
    def __init__(self, columns: Sequence[str]):
        self.columns = tuple(columns)
        super().__init__(
            "rank-deficient regression design; collinear columns: " + ", ".join(self.columns)
        )


@dataclass(frozen=True)
class RegressionModel:
    """Affine score->mAP model: weights[0] + sum(weights[1+t] * feature_t)."""

    feature_names: tuple[str, ...]
    weights: tuple[float, ...]
    split: "PiecewiseSplit | None" = None

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.feature_names) + 1:
            raise ValueError("need exactly one weight per feature plus an intercept")

    def to_json(self) -> dict:
        doc: dict = {
            "feature_names": list(self.feature_names),
            "weights": list(self.weights),
        }
        if self.split is not None:
            doc["split"] = {
                "split_feature": "true_map_regime",
                "threshold": self.split.threshold,
                "low": self.split.low.to_json(),
                "high": self.split.high.to_json(),
            }
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RegressionModel":
        split = None
        if doc.get("split"):
            s = doc["split"]
            split = PiecewiseSplit(
                threshold=float(s["threshold"]),
                low=cls.from_json(s["low"]),
                high=cls.from_json(s["high"]),
            )
        return cls(
            feature_names=tuple(doc["feature_names"]),
            weights=tuple(float(w) for w in doc["weights"]),
            split=split,
        )


@dataclass(frozen=True)
class PiecewiseSplit:
    threshold: float
    low: RegressionModel
    high: RegressionModel


@dataclass(frozen=True)
class DatasetEstimate:
    dataset_id: str
    estimate: float          # raw regression output
    estimate_clamped: float  # clipped to [0, 1] for reporting
    true_map: float
    abs_error: float


@dataclass(frozen=True)
class EvalReport:
    method: str
    per_dataset: tuple[DatasetEstimate, ...]
    rmse: float
    pearson: float | None
    spearman: float | None
    avg_rank: float | None = None

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "rmse": self.rmse,
            "pearson": self.pearson,
            "spearman": self.spearman,
            "avg_rank": self.avg_rank,
            "per_dataset": [
                {
                    "dataset_id": e.dataset_id,
                    "estimate": e.estimate,
                    "estimate_clamped": e.estimate_clamped,
                    "true_map": e.true_map,
                    "abs_error": e.abs_error,
                }
                for e in self.per_dataset
            ],
        }


@dataclass(frozen=True)
class MetaSample:
    """One meta-dataset entry: a scored dataset with its provenance."""

    summary: DatasetSummary
    source: str
    variant: str | None
    severity: int

    @property
    def is_test(self) -> bool:
        return self.severity == 0

    def true_map(self) -> float:
        if self.summary.true_map is None:
            raise DataError(f"dataset '{self.summary.dataset_id}' has no true mAP")
        return self.summary.true_map


def resolve_features(method: str) -> tuple[str, ...]:
    """Map a method name or '+'-joined feature list to feature names."""
    if method in METHOD_FEATURES:
        return METHOD_FEATURES[method]
    parts = tuple(p.strip() for p in method.split("+") if p.strip())
    if not parts:
        raise DataError(f"unknown method '{method}'")
    return parts


def _design_matrix(rows: Sequence[Sequence[float]]) -> np.ndarray:
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2:
        x = x.reshape(len(rows), -1)
    return np.hstack([np.ones((x.shape[0], 1)), x])


def fit(features: Sequence[Sequence[float]], targets: Sequence[float],
        feature_names: Sequence[str]) -> RegressionModel:
    """Ordinary least squares with intercept via SVD (numpy lstsq).

    Requires at least T + 2 samples for T features and a full-rank design;
    on rank deficiency the offending columns are named in the error.
    """
    names = tuple(feature_names)
    y = np.asarray(targets, dtype=float)
    x = _design_matrix(features)
    if x.shape[1] != len(names) + 1:
        raise ValueError("feature matrix width does not match feature_names")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise DataError("non-finite value in regression inputs")
    if x.shape[0] < len(names) + 2:
        raise DataError(
            f"need at least {len(names) + 2} samples to fit {len(names)} features, "
            f"got {x.shape[0]}"
        )
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        bad = []
        for t, name in enumerate(names):
            reduced = np.delete(x, t + 1, axis=1)
            if np.linalg.matrix_rank(reduced) == rank:
                bad.append(name)
        raise RankDeficientError(bad or list(names))
    weights, *_ = np.linalg.lstsq(x, y, rcond=None)
    return RegressionModel(feature_names=names, weights=tuple(float(w) for w in weights))


def _affine(model: RegressionModel, values: Sequence[float]) -> float:
    return model.weights[0] + math.fsum(
        w * v for w, v in zip(model.weights[1:], values)
    )


def _feature_values(summary: DatasetSummary | Mapping[str, float],
                    names: Sequence[str]) -> list[float]:
    values = []
    for name in names:
        try:
            if isinstance(summary, DatasetSummary):
                values.append(summary.feature(name))
            else:
                values.append(float(summary[name]))
        except KeyError:
            raise DataError(f"summary does not provide feature '{name}'") from None
    return values


def predict(model: RegressionModel, summary: DatasetSummary | Mapping[str, float]) -> float:
    """Raw (unclamped) mAP estimate for one dataset summary."""
    values = _feature_values(summary, model.feature_names)
    routed = _affine(model, values)
    if model.split is None:
        return routed
    branch = model.split.low if routed < model.split.threshold else model.split.high
    return _affine(branch, _feature_values(summary, branch.feature_names))


def fit_piecewise(features: Sequence[Sequence[float]], targets: Sequence[float],
                  feature_names: Sequence[str], threshold: float = 0.05) -> RegressionModel:
    """Separate low/high-mAP regime models, routed by the global model.

    A regime with too few samples falls back to the global model, so a
    threshold outside the data range degenerates to plain least squares.
    """
    base = fit(features, targets, feature_names)
    rows = [list(r) for r in features]
    y = list(targets)
    lo = [(r, t) for r, t in zip(rows, y) if t < threshold]
    hi = [(r, t) for r, t in zip(rows, y) if t >= threshold]

    def branch(subset):
        if len(subset) < len(base.feature_names) + 2:
            return base
        try:
            return fit([r for r, _ in subset], [t for _, t in subset], feature_names)
        except RankDeficientError:
            return base

    return RegressionModel(
        feature_names=base.feature_names,
        weights=base.weights,
        split=PiecewiseSplit(threshold=threshold, low=branch(lo), high=branch(hi)),
    )


def statistics(estimates: Sequence[float], truths: Sequence[float],
               ) -> tuple[float, float | None, float | None]:
    """(rmse, pearson, spearman); correlations are None on zero variance."""
    if len(estimates) != len(truths) or not estimates:
        raise ValueError("estimates and truths must be equal-length and nonempty")
    e = np.asarray(estimates, dtype=float)
    t = np.asarray(truths, dtype=float)
    rmse = float(np.sqrt(np.mean((e - t) ** 2)))
    if len(e) < 2 or np.ptp(e) == 0 or np.ptp(t) == 0:
        return rmse, None, None
    pearson = float(stats.pearsonr(e, t).statistic)
    spearman = float(stats.spearmanr(e, t).statistic)
    return rmse, pearson, spearman


def _fit_for(samples: Sequence[MetaSample], names: Sequence[str],
             piecewise: bool, piecewise_threshold: float) -> RegressionModel:
    rows = [_feature_values(s.summary, names) for s in samples]
    targets = [s.true_map() for s in samples]
    if piecewise:
        return fit_piecewise(rows, targets, names, piecewise_threshold)
    return fit(rows, targets, names)


def leave_one_out(samples: Sequence[MetaSample], methods: Mapping[str, Sequence[str]],
                  *, include_test_in_train: bool = True, piecewise: bool = False,
                  piecewise_threshold: float = 0.05) -> dict[str, EvalReport]:
    """Hold out each source in turn; fit on the rest, predict its test set.

    The training side uses every summary of the non-held-out sources,
    including their untransformed test sets unless `include_test_in_train`
    is False. Reports carry the per-method average rank by held-out error.
    """
    sources = sorted({s.source for s in samples})
    if len(sources) < 3:
        raise DataError(f"leave-one-out needs at least 3 sources, got {len(sources)}")
    tests: dict[str, MetaSample] = {}
    for s in samples:
        if s.is_test:
            if s.source in tests:
                raise DataError(f"source '{s.source}' has multiple untransformed test sets")
            tests[s.source] = s
    missing = [src for src in sources if src not in tests]
    if missing:
        raise DataError("source(s) without an untransformed test set: " + ", ".join(missing))

    reports: dict[str, EvalReport] = {}
    for method, names in methods.items():
        names = tuple(names)
        estimates: list[DatasetEstimate] = []
        for held in sources:
            train = [
                s for s in samples
                if s.source != held and (include_test_in_train or not s.is_test)
            ]
            model = _fit_for(train, names, piecewise, piecewise_threshold)
            test = tests[held]
            raw = predict(model, test.summary)
            truth = test.true_map()
            estimates.append(DatasetEstimate(
                dataset_id=test.summary.dataset_id,
                estimate=raw,
                estimate_clamped=min(1.0, max(0.0, raw)),
                true_map=truth,
                abs_error=abs(raw - truth),
            ))
        rmse, pearson, spearman = statistics(
            [e.estimate for e in estimates], [e.true_map for e in estimates]
        )
        reports[method] = EvalReport(
            method=method,
            per_dataset=tuple(estimates),
            rmse=rmse,
            pearson=pearson,
            spearman=spearman,
        )
    return _with_ranks(reports, sources)


def _with_ranks(reports: dict[str, EvalReport], sources: Sequence[str]) -> dict[str, EvalReport]:
    # rank methods per held-out source by absolute error (average ranks on ties)
    if not reports:
        return reports
    methods = list(reports)
    rank_sums = {m: 0.0 for m in methods}
    n_folds = len(reports[methods[0]].per_dataset)
    for k in range(n_folds):
        errors = [reports[m].per_dataset[k].abs_error for m in methods]
        ranks = stats.rankdata(errors, method="average")
        for m, r in zip(methods, ranks):
            rank_sums[m] += float(r)
    out = {}
    for m in methods:
        rep = reports[m]
        out[m] = EvalReport(
            method=rep.method,
            per_dataset=rep.per_dataset,
            rmse=rep.rmse,
            pearson=rep.pearson,
            spearman=rep.spearman,
            avg_rank=rank_sums[m] / n_folds,
        )
    return out


def loo_by_severity(samples: Sequence[MetaSample], methods: Mapping[str, Sequence[str]],
                    *, piecewise: bool = False, piecewise_threshold: float = 0.05,
                    ) -> dict[int, dict[str, float]]:
    """Per-severity LOO RMSE: train only on that severity's variants."""
    severities = sorted({s.severity for s in samples if s.severity > 0})
    out: dict[int, dict[str, float]] = {}
    for sev in severities:
        subset = [s for s in samples if s.severity in (0, sev)]
        reports = leave_one_out(
            subset, methods, include_test_in_train=False,
            piecewise=piecewise, piecewise_threshold=piecewise_threshold,
        )
        out[sev] = {m: rep.rmse for m, rep in reports.items()}
    return out


def save_model(model: RegressionModel, path) -> None:
    from .detection import atomic_write_text

    atomic_write_text(path, json.dumps(model.to_json(), indent=2) + "\n")


def load_model(path) -> RegressionModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid model JSON: {exc.msg}") from exc
    try:
        return RegressionModel.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed model file: {exc}") from exc
