"""Deterministic synthetic meta-dataset generator.

Simulated scenes are run through a pseudo-detector that emits clustered
pre-NMS candidates: each surviving ground-truth object yields a jittered
candidate cluster whose confidences fall off with jitter magnitude, and
spurious low-confidence clusters model false positives. Degradation severity
scales localization noise, confidence attenuation, miss rate, and false
positives, so a grid of variants spans a wide range of true mAP, standing
in for a corruption-based meta-dataset at desk scale.

Everything is driven by explicitly derived integer seeds: the same
(seed, variant, severity) always produces byte-identical dumps, regardless
of generation order or parallelism.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .detection import CandidateBox, GroundTruthBox, ImageRecord, atomic_write_text, write_dump
from .errors import DataError
from .geometry import Box, iou

# Confidence falloff shape for true-positive clusters: at normalized jitter
# magnitude equal to this value the confidence factor is exp(-1/2). Kept
# tight so confidence tracks localization quality from the first severity
# level on.
_CONF_SHAPE = 0.22
# Relative jitter of false-positive clusters; kept tight so spurious
# detections look spatially consistent.
_FP_NOISE = 0.06

# Severity-5 increments added on top of a source's base degradation.
_NOISE_MAX = 0.40
_ATTEN_MAX = 0.55
_MISS_MAX = 0.55
_FP_MAX = 2.6
# Convex severity response: level 1 is a mild perturbation of the base
# profile, level 5 the full increment.
_SEVERITY_EXP = 1.7
# Per-dataset confidence calibration drift: corruptions shift the score
# scale of a detector unpredictably from dataset to dataset.
_CALIBRATION_DRIFT = 0.045

# Ten degradation families as (noise, attenuation, miss, false-positive)
# weights: four single-parameter-dominant families plus six mixtures.
VARIANT_FAMILIES: dict[str, tuple[float, float, float, float]] = {
    "blur": (1.00, 0.25, 0.10, 0.15),
    "sensor": (0.70, 0.45, 0.20, 0.35),
    "occlusion": (0.30, 0.25, 1.00, 0.20),
    "lowlight": (0.25, 1.00, 0.40, 0.25),
    "clutter": (0.20, 0.15, 0.10, 1.00),
    "haze": (0.50, 0.70, 0.35, 0.30),
    "glare": (0.60, 0.40, 0.50, 0.55),
    "warp": (0.90, 0.30, 0.25, 0.45),
    "crowding": (0.40, 0.20, 0.55, 0.85),
    "washout": (0.30, 0.80, 0.25, 0.60),
}

SEVERITIES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class SceneParams:
    """Source-dataset geometry: image extent, object density and size, classes."""

    extent: tuple[int, int]
    objects_per_image: tuple[int, int]
    object_size: tuple[float, float]
    n_classes: int
    n_images: int
    seed: int

    def __post_init__(self) -> None:
        w, h = self.extent
        if w <= 0 or h <= 0:
            raise ValueError(f"invalid extent {self.extent}")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid objects_per_image range {self.objects_per_image}")
        slo, shi = self.object_size
        if not 0 < slo <= shi <= min(w, h):
            raise ValueError(f"object_size {self.object_size} not within extent {self.extent}")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.n_images < 1:
            raise ValueError("need at least one image per dataset")


@dataclass(frozen=True)
class DegradationParams:
    """Realized pseudo-detector quality for one dataset.

    Severity 0 is the base (untransformed) detector profile; severities 1-5
    are the corrupted variants. The confidence-model fields (base confidence,
    confidence noise, false-positive confidence) are generator details that
    let sources differ in calibration.
    """

    severity: int
    loc_noise: float
    attenuation: float
    miss_rate: float
    fp_rate: float
    candidates_per_object: tuple[int, int]
    base_confidence: float = 0.92
    confidence_noise: float = 0.03
    fp_confidence: float = 0.30

    def __post_init__(self) -> None:
        if self.severity not in (0, 1, 2, 3, 4, 5):
            raise ValueError(f"severity {self.severity} outside 0..5")
        if self.loc_noise < 0:
            raise ValueError("loc_noise must be nonnegative")
        if not 0.0 <= self.attenuation <= 1.0:
            raise ValueError("attenuation must be in [0, 1]")
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must be in [0, 1]")
        if self.fp_rate < 0:
            raise ValueError("fp_rate must be nonnegative")
        lo, hi = self.candidates_per_object
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid candidates_per_object range {self.candidates_per_object}")
        if not 0.0 < self.base_confidence <= 1.0:
            raise ValueError("base_confidence must be in (0, 1]")
        if self.confidence_noise < 0:
            raise ValueError("confidence_noise must be nonnegative")
        if not 0.0 < self.fp_confidence < 1.0:
            raise ValueError("fp_confidence must be in (0, 1)")


@dataclass(frozen=True)
class SourceSpec:
    """A named source: its scene statistics and base detector profile."""

    name: str
    scene: SceneParams
    base: DegradationParams


def default_source_bank(n_images: int = 100) -> tuple[SourceSpec, ...]:
    """Three sources differing in density, object size, and calibration.

    Calibration is deliberately not aligned with difficulty: the hardest
    source has the most overconfident detector profile, mirroring how
    confidence calibration drifts across real domains.
    """
    return (
        SourceSpec(
            name="sparse-wide",
            scene=SceneParams(extent=(640, 480), objects_per_image=(1, 4),
                              object_size=(60.0, 150.0), n_classes=2,
                              n_images=n_images, seed=101),
            base=DegradationParams(severity=0, loc_noise=0.04, attenuation=0.03,
                                   miss_rate=0.04, fp_rate=0.3,
                                   candidates_per_object=(3, 8),
                                   base_confidence=0.87, confidence_noise=0.035,
                                   fp_confidence=0.30),
        ),
        SourceSpec(
            name="dense-small",
            scene=SceneParams(extent=(800, 600), objects_per_image=(4, 10),
                              object_size=(28.0, 80.0), n_classes=3,
                              n_images=n_images, seed=202),
            base=DegradationParams(severity=0, loc_noise=0.05, attenuation=0.03,
                                   miss_rate=0.04, fp_rate=0.62,
                                   candidates_per_object=(5, 12),
                                   base_confidence=0.93, confidence_noise=0.02,
                                   fp_confidence=0.30),
        ),
        SourceSpec(
            name="mixed-mid",
            scene=SceneParams(extent=(512, 512), objects_per_image=(2, 7),
                              object_size=(40.0, 110.0), n_classes=2,
                              n_images=n_images, seed=303),
            base=DegradationParams(severity=0, loc_noise=0.045, attenuation=0.03,
                                   miss_rate=0.04, fp_rate=0.62,
                                   candidates_per_object=(3, 9),
                                   base_confidence=0.9, confidence_noise=0.03,
                                   fp_confidence=0.30),
        ),
    )


def stable_seed(*parts) -> int:
    """Platform-stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "big") >> 1


def degradation_for(base: DegradationParams, variant: str, severity: int) -> DegradationParams:
    """Base profile plus the variant family's severity-scaled increments."""
    if variant not in VARIANT_FAMILIES:
        raise DataError(f"unknown degradation variant '{variant}'")
    if severity not in SEVERITIES:
        raise ValueError(f"severity {severity} outside 1..5")
    w_noise, w_atten, w_miss, w_fp = VARIANT_FAMILIES[variant]
    t = (severity / 5.0) ** _SEVERITY_EXP
    return replace(
        base,
        severity=severity,
        loc_noise=base.loc_noise + w_noise * _NOISE_MAX * t,
        attenuation=min(0.95, base.attenuation + w_atten * _ATTEN_MAX * t),
        miss_rate=min(0.98, base.miss_rate + w_miss * _MISS_MAX * t),
        fp_rate=base.fp_rate + w_fp * _FP_MAX * t,
    )


def _place_objects(rng: np.random.Generator, scene: SceneParams) -> list[tuple[Box, int]]:
    w_img, h_img = scene.extent
    lo, hi = scene.objects_per_image
    n = int(rng.integers(lo, hi + 1))
    placed: list[tuple[Box, int]] = []
    for _ in range(n):
        box = None
        cls = 0
        # retry placement to keep same-class overlaps below the NMS regime
        for _attempt in range(40):
            w = float(rng.uniform(*scene.object_size))
            h = float(rng.uniform(*scene.object_size))
            cx = float(rng.uniform(w / 2, w_img - w / 2))
            cy = float(rng.uniform(h / 2, h_img - h / 2))
            cls = int(rng.integers(0, scene.n_classes))
            box = Box.from_center(cx, cy, w, h)
            if all(iou(box, b) < 0.35 for b, c in placed if c == cls):
                break
        placed.append((box, cls))
    return placed


def _tp_cluster(rng: np.random.Generator, gt: Box, cls: int,
                deg: DegradationParams, conf_bias: float) -> list[CandidateBox]:
    lo, hi = deg.candidates_per_object
    k = int(rng.integers(lo, hi + 1))
    w, h = gt.width, gt.height
    # attenuation hits each object with its own strength (corruption rarely
    # dims every object equally): a severity-proportional share of objects
    # is hit hard, the rest mildly, keeping the dataset-level confidence
    # profile smooth in severity instead of collapsing past the threshold
    if float(rng.random()) < min(0.85, 0.9 * deg.attenuation):
        atten = float(rng.uniform(0.45, 0.9))
    else:
        atten = min(0.97, deg.attenuation * 0.6 * float(rng.exponential(1.0)))
    # systematic per-cluster drift on top of per-candidate jitter
    drift_mag = abs(float(rng.normal(0.0, 0.6 * deg.loc_noise)))
    drift_dir = float(rng.uniform(0.0, 2.0 * math.pi))
    drift_x = drift_mag * math.cos(drift_dir) * w
    drift_y = drift_mag * math.sin(drift_dir) * h
    dx = rng.normal(0.0, deg.loc_noise * w, size=k) + drift_x
    dy = rng.normal(0.0, deg.loc_noise * h, size=k) + drift_y
    lsw = rng.normal(0.0, 0.5 * deg.loc_noise, size=k)
    lsh = rng.normal(0.0, 0.5 * deg.loc_noise, size=k)
    conf_noise = rng.normal(0.0, deg.confidence_noise, size=k)
    out = []
    for j in range(k):
        cw = w * math.exp(lsw[j])
        ch = h * math.exp(lsh[j])
        box = Box.from_center(gt.center_x + dx[j], gt.center_y + dy[j], cw, ch)
        m2 = (dx[j] / w) ** 2 + (dy[j] / h) ** 2 + lsw[j] ** 2 + lsh[j] ** 2
        conf = (deg.base_confidence * math.exp(-m2 / (2.0 * _CONF_SHAPE**2))
                * (1.0 - atten) + conf_noise[j] + conf_bias)
        out.append(CandidateBox(box, min(0.995, max(0.01, float(conf))), cls))
    return out


def _fp_cluster(rng: np.random.Generator, scene: SceneParams,
                deg: DegradationParams, conf_bias: float) -> list[CandidateBox]:
    w_img, h_img = scene.extent
    w = float(rng.uniform(*scene.object_size))
    h = float(rng.uniform(*scene.object_size))
    cx = float(rng.uniform(w / 2, w_img - w / 2))
    cy = float(rng.uniform(h / 2, h_img - h / 2))
    cls = int(rng.integers(0, scene.n_classes))
    k = int(rng.integers(2, 6))
    dx = rng.normal(0.0, _FP_NOISE * w, size=k)
    dy = rng.normal(0.0, _FP_NOISE * h, size=k)
    lsw = rng.normal(0.0, 0.5 * _FP_NOISE, size=k)
    lsh = rng.normal(0.0, 0.5 * _FP_NOISE, size=k)
    scale = rng.normal(1.0, 0.35, size=k)
    out = []
    for j in range(k):
        box = Box.from_center(cx + dx[j], cy + dy[j],
                              w * math.exp(lsw[j]), h * math.exp(lsh[j]))
        conf = deg.fp_confidence * scale[j] + conf_bias
        out.append(CandidateBox(box, min(0.62, max(0.02, float(conf))), cls))
    return out


def _generate_image(rng: np.random.Generator, scene: SceneParams, deg: DegradationParams,
                    image_id: str, conf_bias: float) -> ImageRecord:
    objects = _place_objects(rng, scene)
    candidates: list[CandidateBox] = []
    for gt_box, cls in objects:
        if float(rng.random()) < deg.miss_rate:
            continue
        candidates.extend(_tp_cluster(rng, gt_box, cls, deg, conf_bias))
    n_fp = int(rng.poisson(deg.fp_rate))
    for _ in range(n_fp):
        candidates.extend(_fp_cluster(rng, scene, deg, conf_bias))
    return ImageRecord(
        image_id=image_id,
        candidates=tuple(candidates),
        finals=None,
        ground_truth=tuple(GroundTruthBox(box, cls) for box, cls in objects),
    )


def generate_dataset(scene: SceneParams, deg: DegradationParams,
                     variant_id: str) -> Iterator[ImageRecord]:
    """Stream one dataset's image records with ground truth and candidate pools.

    Output is fully determined by (scene.seed, variant_id, deg.severity).
    """
    rng = np.random.default_rng(stable_seed(scene.seed, variant_id, deg.severity))
    # dataset-wide calibration drift; a monotone confidence shift, so the
    # ranking (and with it the true mAP) is essentially unaffected
    conf_bias = float(rng.normal(0.0, _CALIBRATION_DRIFT))
    for idx in range(scene.n_images):
        yield _generate_image(rng, scene, deg, f"img-{idx:05d}", conf_bias)


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate one dump file."""

    dataset_id: str
    path: str
    source: str
    variant: str | None
    severity: int
    scene: SceneParams
    deg: DegradationParams

    @property
    def seed(self) -> int:
        return stable_seed(self.scene.seed, self.variant_key, self.severity)

    @property
    def variant_key(self) -> str:
        return self.variant if self.variant is not None else "test"


def plan_meta(bank: Sequence[SourceSpec], *, seed: int = 0,
              variants: Sequence[str] | None = None,
              severities: Sequence[int] = SEVERITIES,
              n_images: int | None = None) -> list[DatasetSpec]:
    """Expand a source bank into the full grid of dataset specs."""
    if len(bank) < 3:
        raise DataError(f"need at least 3 named sources, got {len(bank)}")
    names = [s.name for s in bank]
    if len(set(names)) != len(names):
        raise DataError("duplicate source names in the bank")
    variant_names = list(variants) if variants is not None else list(VARIANT_FAMILIES)
    specs: list[DatasetSpec] = []
    for source in bank:
        scene = source.scene
        if n_images is not None:
            scene = replace(scene, n_images=n_images)
        scene = replace(scene, seed=stable_seed(seed, source.name, scene.seed))
        specs.append(DatasetSpec(
            dataset_id=f"{source.name}--test",
            path=f"{source.name}--test.jsonl",
            source=source.name,
            variant=None,
            severity=0,
            scene=scene,
            deg=source.base,
        ))
        for variant in variant_names:
            for severity in severities:
                specs.append(DatasetSpec(
                    dataset_id=f"{source.name}--{variant}-s{severity}",
                    path=f"{source.name}--{variant}-s{severity}.jsonl",
                    source=source.name,
                    variant=variant,
                    severity=severity,
                    scene=scene,
                    deg=degradation_for(source.base, variant, severity),
                ))
    return specs


def _write_spec(args: tuple[DatasetSpec, str]) -> str:
    spec, out_dir = args
    path = Path(out_dir) / spec.path
    write_dump(generate_dataset(spec.scene, spec.deg, spec.variant_key), path)
    return spec.path


def build_meta(bank: Sequence[SourceSpec], out_dir, *, seed: int = 0,
               variants: Sequence[str] | None = None,
               severities: Sequence[int] = SEVERITIES,
               n_images: int | None = None, jobs: int = 1) -> Path:
    """Generate the full meta-dataset into `out_dir`; returns the manifest path.

    One dump per (source, variant, severity) plus one untransformed test dump
    per source. Existing target files are treated as collisions and rejected.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = plan_meta(bank, seed=seed, variants=variants, severities=severities,
                      n_images=n_images)
    for spec in specs:
        target = out_dir / spec.path
        if target.exists():
            raise DataError(f"output path collision: {target} already exists")

    tasks = [(spec, str(out_dir)) for spec in specs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_write_spec, tasks))
    else:
        for task in tasks:
            _write_spec(task)

    manifest = {
        "sources": [s.name for s in bank],
        "datasets": [
            {
                "path": spec.path,
                "source": spec.source,
                "variant": spec.variant,
                "severity": spec.severity,
                "seed": spec.seed,
            }
            for spec in specs
        ],
    }
    manifest_path = out_dir / "manifest.json"
    atomic_write_text(manifest_path, json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid manifest JSON: {exc.msg}") from exc
    if not isinstance(doc, dict) or "datasets" not in doc or "sources" not in doc:
        raise DataError(f"{path}: manifest must contain 'sources' and 'datasets'")
    return doc
