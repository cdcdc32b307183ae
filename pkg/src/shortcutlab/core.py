"""Core data model: image records, manifests, patient-level splits, binary correlation.

Everything downstream (generation, resampling, training, evaluation) speaks in
terms of these types. Labels and attributes are binary with an explicit
"missing" state (``None``); statistics exclude missing values pairwise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

MISSING = None

__all__ = [
    "ImageRecord",
    "Manifest",
    "DatasetSplit",
    "CorrelationSpec",
    "ManifestError",
    "compute_phi",
    "contingency_counts",
    "phi_from_cells",
    "partition_by_patient",
    "load_manifest",
    "save_manifest",
    "split_stats",
]


class ManifestError(ValueError):
    """Raised for malformed manifest files or inconsistent record sets."""


@dataclass
class ImageRecord:
    """One grayscale image with its identity, binary labels and attributes.

    ``pixels`` are float values in [0, 1]. ``labels`` and ``attributes`` map
    names to 0, 1 or ``None`` (missing).
    """

    image_id: str
    patient_id: str
    study_id: str
    pixels: np.ndarray
    labels: dict = field(default_factory=dict)
    attributes: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.pixels.ndim != 2:
            raise ValueError(f"record {self.image_id}: pixels must be 2-D")
        lo, hi = float(self.pixels.min(initial=0.0)), float(self.pixels.max(initial=0.0))
        if lo < -1e-9 or hi > 1 + 1e-9:
            raise ValueError(f"record {self.image_id}: pixel range [{lo}, {hi}] outside [0, 1]")
        for name, val in list(self.labels.items()) + list(self.attributes.items()):
            if val not in (0, 1, MISSING):
                raise ValueError(f"record {self.image_id}: value {val!r} for {name!r} not in {{0, 1, missing}}")

    def copy(self, **changes) -> "ImageRecord":
        rec = replace(self, **changes)
        if "labels" not in changes:
            rec.labels = dict(self.labels)
        if "attributes" not in changes:
            rec.attributes = dict(self.attributes)
        return rec


@dataclass
class Manifest:
    """An ordered collection of records plus the task/attribute vocabulary."""

    records: list = field(default_factory=list)
    declared_tasks: list = field(default_factory=list)
    declared_attributes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            rec.validate()
            if rec.image_id in seen:
                raise ManifestError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            extra_l = set(rec.labels) - set(self.declared_tasks)
            extra_a = set(rec.attributes) - set(self.declared_attributes)
            if extra_l:
                raise ManifestError(f"record {rec.image_id}: undeclared tasks {sorted(extra_l)}")
            if extra_a:
                raise ManifestError(f"record {rec.image_id}: undeclared attributes {sorted(extra_a)}")

    def patients(self) -> dict:
        """patient_id -> list of records, in manifest order."""
        out: dict = {}
        for rec in self.records:
            out.setdefault(rec.patient_id, []).append(rec)
        return out

    def subset(self, patient_ids) -> "Manifest":
        wanted = set(patient_ids)
        recs = [r for r in self.records if r.patient_id in wanted]
        return Manifest(recs, list(self.declared_tasks), list(self.declared_attributes))

    def prevalence(self, task: str) -> float:
        vals = [r.labels.get(task) for r in self.records]
        present = [v for v in vals if v is not MISSING]
        if not present:
            raise ValueError(f"no non-missing values for task {task!r}")
        return float(np.mean(present))

    def positive_rate(self, attribute: str) -> float:
        vals = [r.attributes.get(attribute) for r in self.records]
        present = [v for v in vals if v is not MISSING]
        if not present:
            raise ValueError(f"no non-missing values for attribute {attribute!r}")
        return float(np.mean(present))


@dataclass
class CorrelationSpec:
    """Target correlation between a task label and an attribute.

    ``target_phi`` is the phi coefficient to steer toward; ``tolerance`` is
    the acceptable absolute deviation of the achieved value.
    """

    task: str
    attribute: str
    target_phi: float
    size_budget: int
    prevalence_target: float
    tolerance: float = 0.05

    def __post_init__(self):
        if abs(self.target_phi) > 1:
            raise ValueError(f"target_phi {self.target_phi} outside [-1, 1]")
        if self.size_budget < 4:
            raise ValueError("size_budget must be >= 4")
        if not 0 < self.prevalence_target < 1:
            raise ValueError("prevalence_target must be in (0, 1)")


@dataclass
class DatasetSplit:
    """Patient-disjoint train/validation/test partition with per-split stats."""

    train: set
    validation: set
    test: set
    stats: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.train & self.validation or self.train & self.test or self.validation & self.test:
            raise ValueError("splits share patient_ids")

    def split_of(self, patient_id: str):
        for name in ("train", "validation", "test"):
            if patient_id in getattr(self, name):
                return name
        return None

    def to_json(self) -> str:
        payload = {
            "train": sorted(self.train),
            "validation": sorted(self.validation),
            "test": sorted(self.test),
            "stats": self.stats,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        payload = json.loads(text)
        return cls(
            train=set(payload["train"]),
            validation=set(payload["validation"]),
            test=set(payload["test"]),
            stats=payload.get("stats", {}),
        )


# ---------------------------------------------------------------------------
# phi coefficient


def contingency_counts(records, task: str, attribute: str):
    """(n11, n10, n01, n00) over records with both values present.

    First index is the task value, second the attribute value.
    """
    n11 = n10 = n01 = n00 = 0
    for rec in records:
        y = rec.labels.get(task)
        b = rec.attributes.get(attribute)
        if y is MISSING or b is MISSING:
            continue
        if y == 1 and b == 1:
            n11 += 1
        elif y == 1 and b == 0:
            n10 += 1
        elif y == 0 and b == 1:
            n01 += 1
        else:
            n00 += 1
    return n11, n10, n01, n00


def phi_from_cells(n11: int, n10: int, n01: int, n00: int) -> float:
    """Phi coefficient of a 2x2 contingency table."""
    n1_ = n11 + n10
    n0_ = n01 + n00
    n_1 = n11 + n01
    n_0 = n10 + n00
    denom = math.sqrt(float(n1_) * n0_ * n_1 * n_0)
    if denom == 0:
        raise ValueError("undefined correlation: degenerate marginal")
    return (n11 * n00 - n10 * n01) / denom


def compute_phi(records, task: str, attribute: str) -> float:
    """Phi correlation between a binary task and attribute over a record set.

    Records with either value missing are excluded. Raises if a remaining
    marginal is degenerate (all-positive or all-negative).
    """
    n11, n10, n01, n00 = contingency_counts(records, task, attribute)
    return phi_from_cells(n11, n10, n01, n00)


# ---------------------------------------------------------------------------
# patient-level partitioning


def partition_by_patient(manifest: Manifest, fractions, seed: int) -> DatasetSplit:
    """Randomly assign whole patients to train/validation/test.

    ``fractions`` is (train, validation, test) and must sum to 1. Split sizes
    in patients are within +-1 of the requested fractions (largest-remainder
    rounding). Deterministic given ``seed``.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} must be three non-negatives summing to 1")
    if len(manifest) == 0:
        raise ValueError("manifest is empty")

    patients = sorted(manifest.patients())
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    shuffled = [patients[i] for i in order]

    n = len(patients)
    raw = [f * n for f in fractions]
    counts = [int(math.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    while sum(counts) < n:
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0

    train = set(shuffled[: counts[0]])
    validation = set(shuffled[counts[0] : counts[0] + counts[1]])
    test = set(shuffled[counts[0] + counts[1] :])
    split = DatasetSplit(train=train, validation=validation, test=test)
    split.stats = {
        name: split_stats(manifest.subset(getattr(split, name)))
        for name in ("train", "validation", "test")
    }
    split.validate()
    return split


def split_stats(manifest: Manifest) -> dict:
    """Record count, prevalence, attribute rates and phi per pair for one split."""
    stats = {"n": len(manifest)}
    prevalence = {}
    for task in manifest.declared_tasks:
        vals = [r.labels.get(task) for r in manifest.records]
        present = [v for v in vals if v is not MISSING]
        prevalence[task] = float(np.mean(present)) if present else None
    rates = {}
    for attr in manifest.declared_attributes:
        vals = [r.attributes.get(attr) for r in manifest.records]
        present = [v for v in vals if v is not MISSING]
        rates[attr] = float(np.mean(present)) if present else None
    phi = {}
    for task in manifest.declared_tasks:
        for attr in manifest.declared_attributes:
            try:
                phi[f"{task}|{attr}"] = compute_phi(manifest.records, task, attr)
            except ValueError:
                phi[f"{task}|{attr}"] = None
    stats["prevalence"] = prevalence
    stats["attribute_rate"] = rates
    stats["phi"] = phi
    return stats


# ---------------------------------------------------------------------------
# manifest CSV + PNG I/O

_FIXED_COLUMNS = ("patient_id", "study_id", "image_id", "image_path")


def _parse_binary(cell: str, row_num: int, column: str):
    cell = cell.strip()
    if cell == "":
        return MISSING
    if cell in ("0", "1"):
        return int(cell)
    raise ManifestError(f"row {row_num}: column {column!r} has invalid value {cell!r}")


def load_manifest(path, image_root) -> Manifest:
    """Load a manifest CSV plus its grayscale images.

    The CSV has columns ``patient_id, study_id, image_id, image_path`` then
    ``label:<name>`` and ``attr:<name>`` columns. Blank label/attr cells are
    missing values. Pixels are normalized to [0, 1].
    """
    path = Path(path)
    image_root = Path(image_root)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: no header row") from None
        if tuple(header[:4]) != _FIXED_COLUMNS:
            raise ManifestError(f"{path}: header must start with {_FIXED_COLUMNS}, got {header[:4]}")
        tasks, attrs, col_kinds = [], [], []
        for col in header[4:]:
            if col.startswith("label:"):
                tasks.append(col[len("label:"):])
                col_kinds.append(("label", col[len("label:"):]))
            elif col.startswith("attr:"):
                attrs.append(col[len("attr:"):])
                col_kinds.append(("attr", col[len("attr:"):]))
            else:
                raise ManifestError(f"{path}: unexpected column {col!r}")

        records = []
        seen_ids = set()
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"row {row_num}: expected {len(header)} cells, got {len(row)}")
            patient_id, study_id, image_id, image_path = (c.strip() for c in row[:4])
            if not image_id:
                raise ManifestError(f"row {row_num}: empty image_id")
            if image_id in seen_ids:
                raise ManifestError(f"duplicate image_id {image_id!r} (row {row_num})")
            seen_ids.add(image_id)
            labels, attributes = {}, {}
            for (kind, name), cell in zip(col_kinds, row[4:]):
                val = _parse_binary(cell, row_num, f"{kind}:{name}")
                (labels if kind == "label" else attributes)[name] = val
            try:
                pixels = load_image(image_root / image_path)
            except Exception as exc:
                raise ManifestError(f"unreadable image for image_id {image_id!r}: {exc}") from exc
            records.append(
                ImageRecord(image_id, patient_id, study_id, pixels, labels, attributes)
            )
    manifest = Manifest(records, tasks, attrs)
    manifest.validate()
    return manifest


def save_manifest(manifest: Manifest, path, image_root, bit_depth: int = 8) -> None:
    """Write manifest CSV and grayscale PNGs (8- or 16-bit)."""
    path = Path(path)
    image_root = Path(image_root)
    image_root.mkdir(parents=True, exist_ok=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = list(_FIXED_COLUMNS)
    header += [f"label:{t}" for t in manifest.declared_tasks]
    header += [f"attr:{a}" for a in manifest.declared_attributes]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in manifest.records:
            rel = f"{rec.image_id}.png"
            save_image(rec.pixels, image_root / rel, bit_depth=bit_depth)
            row = [rec.patient_id, rec.study_id, rec.image_id, rel]
            for t in manifest.declared_tasks:
                v = rec.labels.get(t, MISSING)
                row.append("" if v is MISSING else str(v))
            for a in manifest.declared_attributes:
                v = rec.attributes.get(a, MISSING)
                row.append("" if v is MISSING else str(v))
            writer.writerow(row)


def save_image(pixels: np.ndarray, path, bit_depth: int = 8) -> None:
    if bit_depth == 8:
        arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(path)
    elif bit_depth == 16:
        arr = np.clip(np.round(pixels * 65535.0), 0, 65535).astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        raise ValueError(f"unsupported bit depth {bit_depth}")


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "I;16":
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr
