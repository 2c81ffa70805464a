"""Metadata ingestion, skin-tone grouping and protocol sampling.

Records are plain dataclasses; sampling is driven by seeded numpy generators
so that a fixed seed always yields the same id sequence.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
from PIL import Image

from fairvae.config import TrainingConfig

logger = logging.getLogger(__name__)

MISSING_FST = -1
VALID_FST = frozenset({MISSING_FST, 1, 2, 3, 4, 5, 6})

# Column names of the public Fitzpatrick17k CSV.
FITZPATRICK17K_SCHEMA: dict[str, str] = {
    "id": "md5hash",
    "fst": "fitzpatrick_scale",
    "fine": "label",
    "mid": "nine_partition_label",
    "coarse": "three_partition_label",
    "source": "url",
}
LOGICAL_FIELDS = ("id", "fst", "fine", "mid", "coarse", "source")


class DatasetError(Exception):
    """Base class for dataset problems."""


class SchemaError(DatasetError):
    pass


class EmptyInputError(DatasetError):
    pass


class SizingError(DatasetError):
    pass


class ImageLoadError(DatasetError):
    def __init__(self, record_id: str, reason: str):
        super().__init__(f"cannot load image for record {record_id!r}: {reason}")
        self.record_id = record_id


class SkinToneGroup(str, Enum):
    LIGHT = "Light"
    DARK = "Dark"


@dataclass(frozen=True)
class ImageRecord:
    id: str
    source: str
    fst: int
    fine_label: str
    mid_label: str
    coarse_label: str
    # Materialized pixels (HxWx3 float in [0,1]); set by the synthetic generator.
    image: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def group(self) -> SkinToneGroup | None:
        return assign_group(self.fst)

    def label(self, granularity: str) -> str:
        return {"fine": self.fine_label, "mid": self.mid_label, "coarse": self.coarse_label}[granularity]


@dataclass
class ParseSummary:
    total_rows: int = 0
    rejected_rows: int = 0
    fst_counts: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total_rows": self.total_rows,
            "rejected_rows": self.rejected_rows,
            "fst_counts": {str(k): v for k, v in sorted(self.fst_counts.items())},
        }


@dataclass
class DatasetSplit:
    test_light: list[ImageRecord]
    test_dark: list[ImageRecord]
    train_pool_light: list[ImageRecord]
    train_pool_dark: list[ImageRecord]

    def manifest_rows(self) -> list[dict]:
        rows = []
        for role, group, recs in (
            ("test", SkinToneGroup.LIGHT, self.test_light),
            ("test", SkinToneGroup.DARK, self.test_dark),
            ("train_pool", SkinToneGroup.LIGHT, self.train_pool_light),
            ("train_pool", SkinToneGroup.DARK, self.train_pool_dark),
        ):
            rows.extend({"id": r.id, "group": group.value, "role": role} for r in recs)
        return rows


def _parse_fst(raw: str | None) -> tuple[int, bool]:
    """Return (fst, ok). Unparseable or out-of-scale codes map to MISSING_FST."""
    if raw is None or not raw.strip():
        return MISSING_FST, True
    try:
        value = float(raw)
    except ValueError:
        return MISSING_FST, False
    if not value.is_integer() or int(value) not in VALID_FST:
        return MISSING_FST, False
    return int(value), True


def parse_metadata(
    stream: TextIO | str, schema: Mapping[str, str] = FITZPATRICK17K_SCHEMA
) -> tuple[list[ImageRecord], ParseSummary]:
    """Parse a comma-separated metadata table into records.

    ``schema`` maps the logical fields ``id, fst, fine, mid, coarse, source``
    to column names. ``source`` may be omitted from the mapping, in which case
    records get an empty source. Invalid FST codes are kept as ``-1`` and
    counted in ``summary.rejected_rows``.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.DictReader(stream)
    if reader.fieldnames is None:
        raise EmptyInputError("metadata stream is empty (no header row)")
    columns = set(reader.fieldnames)
    for logical in LOGICAL_FIELDS:
        if logical == "source" and logical not in schema:
            continue
        if logical not in schema:
            raise SchemaError(f"schema does not map required field {logical!r}")
        if schema[logical] not in columns:
            raise SchemaError(f"column {schema[logical]!r} (for field {logical!r}) not found in metadata header")

    records: list[ImageRecord] = []
    summary = ParseSummary()
    counts: Counter[int] = Counter()
    seen: set[str] = set()
    for row in reader:
        summary.total_rows += 1
        rid = (row[schema["id"]] or "").strip()
        if not rid:
            raise DatasetError(f"row {summary.total_rows} has an empty id")
        if rid in seen:
            raise DatasetError(f"duplicate record id {rid!r}")
        seen.add(rid)
        fst, ok = _parse_fst(row[schema["fst"]])
        if not ok:
            summary.rejected_rows += 1
        counts[fst] += 1
        records.append(
            ImageRecord(
                id=rid,
                source=(row[schema["source"]] or "").strip() if "source" in schema else "",
                fst=fst,
                fine_label=(row[schema["fine"]] or "").strip(),
                mid_label=(row[schema["mid"]] or "").strip(),
                coarse_label=(row[schema["coarse"]] or "").strip(),
            )
        )
    summary.fst_counts = dict(sorted(counts.items()))
    if summary.rejected_rows:
        logger.warning("%d rows had invalid FST codes and were set to -1", summary.rejected_rows)
    return records, summary


def read_metadata(path: str | Path, schema: Mapping[str, str] = FITZPATRICK17K_SCHEMA):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_metadata(fh, schema)


def assign_group(fst: int) -> SkinToneGroup | None:
    if fst in (1, 2):
        return SkinToneGroup.LIGHT
    if fst in (5, 6):
        return SkinToneGroup.DARK
    return None


def group_records(records: Iterable[ImageRecord]) -> dict[SkinToneGroup, list[ImageRecord]]:
    groups: dict[SkinToneGroup, list[ImageRecord]] = {SkinToneGroup.LIGHT: [], SkinToneGroup.DARK: []}
    for r in records:
        g = assign_group(r.fst)
        if g is not None:
            groups[g].append(r)
    return groups


def make_split(records: Sequence[ImageRecord], test_size_per_group: int, seed: int) -> DatasetSplit:
    """Draw one Light and one Dark test set without replacement.

    Records outside both groups are dropped; the rest of each group (in input
    order) becomes its training pool.
    """
    groups = group_records(records)
    short = {g.value: len(v) for g, v in groups.items() if len(v) < test_size_per_group}
    if short:
        raise SizingError(f"need {test_size_per_group} records per group for testing, available: {short}")
    rng = np.random.default_rng(seed)
    parts = {}
    for g in (SkinToneGroup.LIGHT, SkinToneGroup.DARK):
        pop = groups[g]
        idx = rng.choice(len(pop), size=test_size_per_group, replace=False)
        taken = set(idx.tolist())
        parts[g] = ([pop[i] for i in idx], [r for i, r in enumerate(pop) if i not in taken])
    return DatasetSplit(
        test_light=parts[SkinToneGroup.LIGHT][0],
        test_dark=parts[SkinToneGroup.DARK][0],
        train_pool_light=parts[SkinToneGroup.LIGHT][1],
        train_pool_dark=parts[SkinToneGroup.DARK][1],
    )


def light_count(config: TrainingConfig) -> int:
    # round-half-up; Python's round() is banker's rounding
    return int(math.floor(config.light_fraction * config.train_size + 0.5))


def sample_training_set(split: DatasetSplit, config: TrainingConfig) -> list[ImageRecord]:
    n_light = light_count(config)
    n_dark = config.train_size - n_light
    if n_light and not split.train_pool_light:
        raise SizingError(f"{config.name} needs {n_light} Light draws but the Light pool is empty")
    if n_dark and not split.train_pool_dark:
        raise SizingError(f"{config.name} needs {n_dark} Dark draws but the Dark pool is empty")
    rng = np.random.default_rng(config.seed)
    out: list[ImageRecord] = []
    for pool, n in ((split.train_pool_light, n_light), (split.train_pool_dark, n_dark)):
        if n:
            out.extend(pool[i] for i in rng.integers(0, len(pool), size=n))
    return out


def _resolve_source(record: ImageRecord, image_root: str | Path | None) -> bytes | Path:
    src = record.source
    if src.startswith(("http://", "https://")):
        with urllib.request.urlopen(src, timeout=30) as resp:
            return resp.read()
    if src:
        path = Path(src)
        if not path.is_absolute() and image_root is not None:
            path = Path(image_root) / path
        return path
    if image_root is None:
        raise FileNotFoundError("record has no source and no image root was given")
    matches = sorted(Path(image_root).glob(f"{record.id}.*"))
    if not matches:
        raise FileNotFoundError(f"no file named {record.id}.* under {image_root}")
    return matches[0]


def load_image(record: ImageRecord, side: int, image_root: str | Path | None = None) -> np.ndarray:
    """Return the record's image as a ``side x side x 3`` float32 array in [0, 1]."""
    if record.image is not None:
        arr = np.asarray(record.image, dtype=np.float32)
        if arr.shape == (side, side, 3):
            return arr
        img = Image.fromarray(np.clip(arr * 255.0 + 0.5, 0, 255).astype(np.uint8))
    else:
        try:
            src = _resolve_source(record, image_root)
            img = Image.open(io.BytesIO(src) if isinstance(src, bytes) else src)
            img.load()
        except Exception as exc:  # PIL raises a zoo of exception types
            raise ImageLoadError(record.id, str(exc)) from exc
    img = img.convert("RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.Resampling.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_images(
    records: Sequence[ImageRecord], side: int, image_root: str | Path | None = None
) -> tuple[np.ndarray, list[ImageRecord], list[str]]:
    """Load a batch of records, skipping failures.

    Returns ``(images, kept_records, failed_ids)`` with images stacked as
    ``N x side x side x 3``. Order of ``kept_records`` follows the input.
    """
    images, kept, failed = [], [], []
    cache: dict[str, np.ndarray] = {}
    for r in records:
        if r.id in cache:
            images.append(cache[r.id])
            kept.append(r)
            continue
        try:
            arr = load_image(r, side, image_root)
        except ImageLoadError as exc:
            logger.warning("%s", exc)
            failed.append(r.id)
            continue
        cache[r.id] = arr
        images.append(arr)
        kept.append(r)
    stacked = np.stack(images) if images else np.zeros((0, side, side, 3), dtype=np.float32)
    return stacked, kept, failed


def write_manifest(split: DatasetSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in split.manifest_rows():
            fh.write(json.dumps(row) + "\n")


def write_metadata(records: Sequence[ImageRecord], path: str | Path, schema: Mapping[str, str] = FITZPATRICK17K_SCHEMA) -> None:
    cols = [schema[k] for k in LOGICAL_FIELDS if k in schema]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            values = {"id": r.id, "fst": r.fst, "fine": r.fine_label, "mid": r.mid_label,
                      "coarse": r.coarse_label, "source": r.source}
            w.writerow([values[k] for k in LOGICAL_FIELDS if k in schema])
