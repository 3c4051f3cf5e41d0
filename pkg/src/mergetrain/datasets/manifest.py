"""Detection manifests: split/strip/merge and JSON Lines persistence."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from mergetrain.geometry import Box, GeometryError

log = logging.getLogger(__name__)

SCHEMA = "mergetrain-manifest-v1"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Annotation:
    box: Box
    class_id: int


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"record {self.id!r}: image size must be positive")


@dataclass
class DatasetManifest:
    class_table: dict[int, str]
    records: list[ImageRecord]
    provenance: list[dict] = field(default_factory=list)

    def __post_init__(self):
        ids = set()
        for rec in self.records:
            if rec.id in ids:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            ids.add(rec.id)
            for ann in rec.annotations:
                if ann.class_id not in self.class_table:
                    raise ManifestError(f"record {rec.id!r}: class {ann.class_id} not in class table")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_annotations(self) -> int:
        return sum(len(r.annotations) for r in self.records)

    def by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.records}

    def require_nonempty(self) -> None:
        if not self.records:
            raise ManifestError("manifest has no records; refusing to train on it")


def split_and_strip(full: DatasetManifest, class_set: Iterable[int]) -> DatasetManifest:
    """Keep records with at least one annotation in ``class_set``, dropping the others' boxes."""
    keep = set(class_set)
    if not keep:
        raise ManifestError("class_set is empty")
    unknown = keep - set(full.class_table)
    if unknown:
        raise ManifestError(f"classes {sorted(unknown)} are not in the class table")

    records = []
    stripped = 0
    for rec in full.records:
        anns = tuple(a for a in rec.annotations if a.class_id in keep)
        if not anns:
            continue
        stripped += len(rec.annotations) - len(anns)
        records.append(rec if len(anns) == len(rec.annotations) else replace(rec, annotations=anns))
    if not records:
        raise ManifestError(f"no record contains any of the classes {sorted(keep)}")

    prov = list(full.provenance) + [
        {"op": "split_and_strip", "classes": sorted(keep), "kept_records": len(records), "stripped_annotations": stripped}
    ]
    table = {k: v for k, v in full.class_table.items()}
    return DatasetManifest(table, records, prov)


def merge(a: DatasetManifest, b: DatasetManifest, prefix: str = "b:") -> DatasetManifest:
    """Union of two manifests.  Colliding ids in ``b`` are re-prefixed, never dropped."""
    table = dict(a.class_table)
    for cid, name in b.class_table.items():
        if cid in table and table[cid] != name:
            raise ManifestError(f"class {cid} is {table[cid]!r} in one manifest and {name!r} in the other")
        table[cid] = name

    taken = {r.id for r in a.records}
    records = list(a.records)
    renamed = 0
    for rec in b.records:
        if rec.id in taken:
            new_id = prefix + rec.id
            while new_id in taken:
                new_id = prefix + new_id
            rec = replace(rec, id=new_id)
            renamed += 1
        taken.add(rec.id)
        records.append(rec)

    prov = list(a.provenance) + list(b.provenance) + [{"op": "merge", "renamed_ids": renamed}]
    return DatasetManifest(dict(sorted(table.items())), records, prov)


def missing_rate(partial: DatasetManifest, full: DatasetManifest) -> float:
    """Fraction of annotation instances of ``full`` that are absent from ``partial``.

    The denominator counts the full annotations of the images present in
    ``partial``, restricted to ``partial``'s class table.  Records are
    matched by id, falling back to the image path for re-prefixed duplicates.
    """
    full_by_id = full.by_id()
    full_by_path = {r.path: r for r in full.records}
    classes = set(partial.class_table)

    have = 0
    total = 0
    for rec in partial.records:
        ref = full_by_id.get(rec.id) or full_by_path.get(rec.path)
        if ref is None:
            raise ManifestError(f"record {rec.id!r} of the partial manifest is not in the full manifest")
        have += len(rec.annotations)
        total += sum(1 for a in ref.annotations if a.class_id in classes)
    if total == 0:
        raise ManifestError("full manifest has no annotations over the partial manifest's images")
    return 1.0 - have / total


# -- persistence -------------------------------------------------------------


def _record_to_json(rec: ImageRecord) -> dict:
    return {
        "id": rec.id,
        "path": rec.path,
        "w": rec.width,
        "h": rec.height,
        "ann": [
            {"cx": a.box.cx, "cy": a.box.cy, "w": a.box.w, "h": a.box.h, "cls": a.class_id}
            for a in rec.annotations
        ],
    }


def _record_from_json(obj: Mapping, lineno: int) -> ImageRecord:
    rid = obj.get("id")
    if not isinstance(rid, str):
        raise ManifestError(f"line {lineno}: record without a string id")
    try:
        anns = []
        for k, a in enumerate(obj.get("ann", [])):
            if "cls" not in a:
                raise ManifestError(f"record {rid!r}: annotation {k} has no class_id ('cls')")
            anns.append(Annotation(Box(float(a["cx"]), float(a["cy"]), float(a["w"]), float(a["h"])), int(a["cls"])))
        return ImageRecord(rid, str(obj["path"]), int(obj["w"]), int(obj["h"]), tuple(anns))
    except ManifestError:
        raise
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise ManifestError(f"record {rid!r}: malformed ({exc})") from exc


def dumps_manifest(manifest: DatasetManifest) -> str:
    header = {
        "schema": SCHEMA,
        "classes": {str(k): v for k, v in sorted(manifest.class_table.items())},
        "provenance": manifest.provenance,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(_record_to_json(r), sort_keys=True) for r in manifest.records)
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(dumps_manifest(manifest))


def loads_manifest(text: str) -> DatasetManifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestError("empty manifest file (no header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unreadable manifest header: {exc}") from exc
    if header.get("schema") != SCHEMA:
        raise ManifestError(f"unknown manifest schema {header.get('schema')!r}")
    table = {int(k): str(v) for k, v in header.get("classes", {}).items()}

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from exc
        records.append(_record_from_json(obj, lineno))
    if not records:
        log.warning("manifest has 0 records")
    return DatasetManifest(table, records, list(header.get("provenance", [])))


def load_manifest(path: str | Path) -> DatasetManifest:
    return loads_manifest(Path(path).read_text())
