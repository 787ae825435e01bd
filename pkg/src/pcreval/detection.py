"""Per-image detector output model, NMS with suppression tracking, and dump I/O.

The on-disk format is JSON Lines, one image per line:

    {"image_id": str,
     "candidates": [{"box": [x_min, y_min, x_max, y_max], "score": f, "class": i}, ...],
     "finals": [{"box": [...], "score": f, "class": i, "associated": [i, ...]?}, ...]?,
     "ground_truth": [{"box": [...], "class": i}, ...]?}

`finals` and `ground_truth` are optional, as is `associated` within a final.
When `finals` is absent the toolkit runs NMS; when `associated` is absent it
runs IoU association.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import DataError
from .geometry import Box, iou


class DumpError(DataError):
    """Problem with a detection dump file; carries path/line/field context."""

    def __init__(self, message: str, *, path=None, line: int | None = None,
                 field: str | None = None):
        self.path = path
        self.line = line
        self.field = field
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{': '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class MalformedLineError(DumpError):
    """A dump line is not valid JSON."""


class SchemaError(DumpError):
    """A dump line parses as JSON but violates the record schema."""


class RecordInvariantError(DumpError):
    """A record is schema-valid but breaks a model invariant."""


@dataclass(frozen=True)
class CandidateBox:
    """A pre-NMS candidate: box, confidence, class."""

    box: Box
    confidence: float
    class_id: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class_id {self.class_id}")


@dataclass(frozen=True)
class FinalPrediction:
    """A post-NMS prediction plus the candidate-pool indices it absorbed.

    `associated` is None when the association has not been computed yet
    (external dumps without a suppression map).
    """

    box: Box
    confidence: float
    class_id: int
    associated: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class_id {self.class_id}")
        if self.associated is not None:
            if len(set(self.associated)) != len(self.associated):
                raise ValueError("duplicate candidate indices in association list")


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    class_id: int

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"negative class_id {self.class_id}")


@dataclass(frozen=True)
class ImageRecord:
    """One image's candidate pool, final predictions, and optional ground truth."""

    image_id: str
    candidates: tuple[CandidateBox, ...]
    finals: tuple[FinalPrediction, ...] | None = None
    ground_truth: tuple[GroundTruthBox, ...] | None = None

    def __post_init__(self) -> None:
        if self.finals is None:
            return
        n = len(self.candidates)
        for i, final in enumerate(self.finals):
            if final.associated is None:
                continue
            for j in final.associated:
                if not 0 <= j < n:
                    raise ValueError(
                        f"final {i}: associated index {j} outside candidate pool of size {n}"
                    )
                if self.candidates[j].class_id != final.class_id:
                    raise ValueError(
                        f"final {i} (class {final.class_id}): associated candidate {j} "
                        f"has class {self.candidates[j].class_id}"
                    )


def nms(candidates: Sequence[CandidateBox], iou_threshold: float = 0.5,
        score_floor: float = 0.05) -> list[FinalPrediction]:
    """Greedy per-class NMS that records which candidates each keeper absorbed.

    Candidates below `score_floor` are dropped up front. The keeper's own
    pool index is included in its association list, so every NMS-derived
    final has at least one associated candidate. Ties in confidence are
    broken by lower pool index, making the output deterministic.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    if not 0.0 <= score_floor < 1.0:
        raise ValueError(f"score_floor {score_floor} outside [0, 1)")

    order = sorted(
        (i for i, c in enumerate(candidates) if c.confidence >= score_floor),
        key=lambda i: (-candidates[i].confidence, i),
    )
    suppressed = set()
    finals: list[FinalPrediction] = []
    for pos, i in enumerate(order):
        if i in suppressed:
            continue
        keeper = candidates[i]
        absorbed = [i]
        for j in order[pos + 1:]:
            if j in suppressed or candidates[j].class_id != keeper.class_id:
                continue
            if iou(keeper.box, candidates[j].box) >= iou_threshold:
                suppressed.add(j)
                absorbed.append(j)
        finals.append(FinalPrediction(
            box=keeper.box,
            confidence=keeper.confidence,
            class_id=keeper.class_id,
            associated=tuple(sorted(absorbed)),
        ))
    return finals


def associate(finals: Sequence[FinalPrediction], candidates: Sequence[CandidateBox],
              iou_threshold: float = 0.5) -> list[FinalPrediction]:
    """Attach each candidate to every same-class final it overlaps at >= threshold.

    Used for dumps that ship finals without a suppression map. A candidate may
    land in several finals' lists, and a final may end up with an empty list;
    both are handled downstream.
    """
    out = []
    for final in finals:
        absorbed = tuple(
            j for j, cand in enumerate(candidates)
            if cand.class_id == final.class_id and iou(final.box, cand.box) >= iou_threshold
        )
        out.append(replace(final, associated=absorbed))
    return out


def prepare_record(record: ImageRecord, *, nms_iou: float = 0.5, score_floor: float = 0.05,
                   assoc_iou: float | None = None, association: str = "suppression") -> ImageRecord:
    """Fill in finals and association lists so the record can be scored.

    `association="suppression"` takes associations from the NMS suppression
    map when NMS is run here; `"iou"` always recomputes them with the IoU
    test. Dumps that already carry `associated` are used verbatim.
    """
    if association not in ("suppression", "iou"):
        raise ValueError(f"unknown association mode '{association}'")
    thr = nms_iou if assoc_iou is None else assoc_iou
    finals = record.finals
    if finals is None:
        finals = tuple(nms(record.candidates, nms_iou, score_floor))
        if association == "iou":
            finals = tuple(associate(finals, record.candidates, thr))
        return replace(record, finals=finals)
    if association == "iou" or any(f.associated is None for f in finals):
        finals = tuple(associate(finals, record.candidates, thr))
        return replace(record, finals=finals)
    return record


# ---------------------------------------------------------------------------
# JSONL dump I/O

def _box_to_json(box: Box) -> list[float]:
    return [box.x_min, box.y_min, box.x_max, box.y_max]


def _record_to_json(record: ImageRecord) -> dict:
    doc: dict = {
        "image_id": record.image_id,
        "candidates": [
            {"box": _box_to_json(c.box), "score": c.confidence, "class": c.class_id}
            for c in record.candidates
        ],
    }
    if record.finals is not None:
        finals = []
        for f in record.finals:
            entry = {"box": _box_to_json(f.box), "score": f.confidence, "class": f.class_id}
            if f.associated is not None:
                entry["associated"] = list(f.associated)
            finals.append(entry)
        doc["finals"] = finals
    if record.ground_truth is not None:
        doc["ground_truth"] = [
            {"box": _box_to_json(g.box), "class": g.class_id} for g in record.ground_truth
        ]
    return doc


def _parse_box(value, *, path, line: int, field: str) -> Box:
    if (not isinstance(value, list) or len(value) != 4
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise SchemaError("box must be a list of four numbers", path=path, line=line, field=field)
    try:
        return Box(*(float(v) for v in value))
    except ValueError as exc:
        raise RecordInvariantError(str(exc), path=path, line=line, field=field) from exc


def _require(doc: dict, key: str, kind, *, path, line: int, parent: str = "") -> object:
    field = f"{parent}{key}"
    if key not in doc:
        raise SchemaError(f"missing required field '{field}'", path=path, line=line, field=field)
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SchemaError(f"'{field}' must be a number", path=path, line=line, field=field)
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise SchemaError(f"'{field}' has wrong type", path=path, line=line, field=field)
    return value


def _parse_record(doc: object, *, path, line: int) -> ImageRecord:
    if not isinstance(doc, dict):
        raise SchemaError("record must be a JSON object", path=path, line=line)
    image_id = _require(doc, "image_id", str, path=path, line=line)
    raw_candidates = _require(doc, "candidates", list, path=path, line=line)

    candidates = []
    for k, entry in enumerate(raw_candidates):
        parent = f"candidates[{k}]."
        if not isinstance(entry, dict):
            raise SchemaError("candidate must be an object", path=path, line=line,
                              field=f"candidates[{k}]")
        box = _parse_box(entry.get("box"), path=path, line=line, field=parent + "box")
        score = _require(entry, "score", float, path=path, line=line, parent=parent)
        cls = _require(entry, "class", int, path=path, line=line, parent=parent)
        try:
            candidates.append(CandidateBox(box, score, cls))
        except ValueError as exc:
            raise RecordInvariantError(str(exc), path=path, line=line,
                                       field=f"candidates[{k}]") from exc

    finals = None
    if "finals" in doc:
        raw_finals = _require(doc, "finals", list, path=path, line=line)
        finals = []
        for k, entry in enumerate(raw_finals):
            parent = f"finals[{k}]."
            if not isinstance(entry, dict):
                raise SchemaError("final must be an object", path=path, line=line,
                                  field=f"finals[{k}]")
            box = _parse_box(entry.get("box"), path=path, line=line, field=parent + "box")
            score = _require(entry, "score", float, path=path, line=line, parent=parent)
            cls = _require(entry, "class", int, path=path, line=line, parent=parent)
            assoc = None
            if "associated" in entry:
                raw_assoc = entry["associated"]
                if (not isinstance(raw_assoc, list)
                        or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw_assoc)):
                    raise SchemaError("'associated' must be a list of integers", path=path,
                                      line=line, field=parent + "associated")
                assoc = tuple(raw_assoc)
            try:
                finals.append(FinalPrediction(box, score, cls, assoc))
            except ValueError as exc:
                raise RecordInvariantError(str(exc), path=path, line=line,
                                           field=f"finals[{k}]") from exc
        finals = tuple(finals)

    ground_truth = None
    if "ground_truth" in doc:
        raw_gt = _require(doc, "ground_truth", list, path=path, line=line)
        ground_truth = []
        for k, entry in enumerate(raw_gt):
            parent = f"ground_truth[{k}]."
            if not isinstance(entry, dict):
                raise SchemaError("ground-truth entry must be an object", path=path, line=line,
                                  field=f"ground_truth[{k}]")
            box = _parse_box(entry.get("box"), path=path, line=line, field=parent + "box")
            cls = _require(entry, "class", int, path=path, line=line, parent=parent)
            try:
                ground_truth.append(GroundTruthBox(box, cls))
            except ValueError as exc:
                raise RecordInvariantError(str(exc), path=path, line=line,
                                           field=f"ground_truth[{k}]") from exc
        ground_truth = tuple(ground_truth)

    try:
        return ImageRecord(image_id, tuple(candidates), finals, ground_truth)
    except ValueError as exc:
        raise RecordInvariantError(str(exc), path=path, line=line) from exc


def read_dump(path) -> Iterator[ImageRecord]:
    """Stream records from a JSONL dump; errors carry file/line/field context."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise MalformedLineError(f"invalid JSON: {exc.msg}", path=path,
                                         line=line_no) from exc
            yield _parse_record(doc, path=path, line=line_no)


def record_to_line(record: ImageRecord) -> str:
    return json.dumps(_record_to_json(record))


def write_dump(records: Iterable[ImageRecord], path) -> int:
    """Write records as JSONL atomically (temp file + rename); returns the count."""
    path = Path(path)
    n = 0

    def lines():
        nonlocal n
        for record in records:
            n += 1
            yield record_to_line(record) + "\n"

    atomic_write_text(path, lines())
    return n


def atomic_write_text(path, content: str | Iterable[str]) -> None:
    """Write text to `path` via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            if isinstance(content, str):
                fh.write(content)
            else:
                fh.writelines(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
