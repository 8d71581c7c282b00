"""HAM10000 ingestion, stratified splitting and tensor archive export.

The metadata CSV is the standard HAM10000 layout with columns
lesion_id, image_id, dx, dx_type, age, sex, localization. Images are
resolved as ``<image_root>/<image_id>.jpg`` and resized with bilinear
interpolation to a square side (224 by default), yielding float32 values
in [0, 1].

Splitting is stratified per class and runs in two stages calibrated so the
canonical HAM10000 class frequencies reproduce the published per-class
train/validation/test counts exactly:

1. the test partition takes ``ceil(test_ratio * N)`` records overall,
   allocated across classes by largest remainder;
2. the validation partition takes ``ceil(val_ratio * N_remaining)`` of the
   remaining records, again by largest remainder;
3. everything else trains.

Note stage 2 applies the validation ratio to the *remaining* pool, so
nominal 80:10:10 lands at 81:9:10 overall; this is what the published
per-class counts encode. Within a class, membership is decided by a seeded
shuffle, so a manifest regenerates bit-identically from (records, ratios,
seed).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageLoadError, MetadataError, SplitError
from .labels import CLASS_NAMES, CLASS_ORDER, ClassLabel

REQUIRED_COLUMNS = ("lesion_id", "image_id", "dx", "dx_type", "age", "sex", "localization")

DEFAULT_SIDE = 224


class Sex(enum.Enum):
    MALE = "male"
    FEMALE = "female"


class Partition(enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


PARTITIONS = (Partition.TRAIN, Partition.VAL, Partition.TEST)


@dataclass(frozen=True)
class LesionRecord:
    """One dataset row: image reference, diagnosis and patient metadata."""

    image_id: str
    lesion_id: str
    label: ClassLabel
    image_path: Path
    age: float | None = None
    sex: Sex | None = None
    localization: str | None = None


def parse_metadata(csv_content: str, image_root: str | Path) -> list[LesionRecord]:
    """Parse metadata CSV text into records.

    Missing age/sex values become None. Image files are not checked here;
    unreadable files surface later from :func:`load_and_resize`.
    """
    image_root = Path(image_root)
    reader = csv.DictReader(io.StringIO(csv_content))
    header = reader.fieldnames or []
    missing = [col for col in REQUIRED_COLUMNS if col not in header]
    if missing:
        raise MetadataError(f"metadata CSV is missing columns: {', '.join(missing)}")

    records: list[LesionRecord] = []
    seen: set[str] = set()
    for row in reader:
        image_id = (row["image_id"] or "").strip()
        if not image_id:
            raise MetadataError(f"row {reader.line_num}: empty image_id")
        if image_id in seen:
            raise MetadataError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)

        label = ClassLabel.from_dx(row["dx"] or "")

        age_raw = (row.get("age") or "").strip()
        try:
            age = float(age_raw) if age_raw else None
        except ValueError:
            raise MetadataError(f"row {reader.line_num}: bad age value {age_raw!r}") from None

        sex_raw = (row.get("sex") or "").strip().lower()
        sex = Sex(sex_raw) if sex_raw in ("male", "female") else None

        localization = (row.get("localization") or "").strip() or None
        if localization and localization.lower() == "unknown":
            localization = None

        records.append(
            LesionRecord(
                image_id=image_id,
                lesion_id=(row["lesion_id"] or "").strip(),
                label=label,
                image_path=image_root / f"{image_id}.jpg",
                age=age,
                sex=sex,
                localization=localization,
            )
        )
    return records


def read_metadata(csv_path: str | Path, image_root: str | Path) -> list[LesionRecord]:
    return parse_metadata(Path(csv_path).read_text(), image_root)


def load_image_file(path: str | Path, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Load any image file as RGB, resize to side x side (bilinear), scale to [0, 1].

    Aspect ratio is not preserved: a 600x450 source squashes directly to the
    target square. A source already at the target size passes through
    untouched.
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        if img.size != (side, side):
            img = img.resize((side, side), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


def load_and_resize(record: LesionRecord, side: int = DEFAULT_SIDE) -> np.ndarray:
    """Load a record's image; failures carry the record's image_id."""
    try:
        return load_image_file(record.image_path, side=side)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageLoadError(
            f"cannot load image {record.image_id!r} from {record.image_path}: {exc}",
            image_id=record.image_id,
        ) from exc


@dataclass
class SplitManifest:
    """Deterministic assignment of every record to train/val/test."""

    seed: int
    ratios: tuple[float, float, float]
    assignments: dict[str, Partition]
    class_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def image_ids(self, partition: Partition) -> list[str]:
        return [iid for iid, part in self.assignments.items() if part is partition]

    def partition_sizes(self) -> dict[str, int]:
        sizes = {p.value: 0 for p in PARTITIONS}
        for part in self.assignments.values():
            sizes[part.value] += 1
        return sizes

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "class_counts": self.class_counts,
            "assignments": {iid: part.value for iid, part in self.assignments.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "SplitManifest":
        return cls(
            seed=int(data["seed"]),
            ratios=tuple(float(r) for r in data["ratios"]),
            assignments={iid: Partition(part) for iid, part in data["assignments"].items()},
            class_counts={k: dict(v) for k, v in data["class_counts"].items()},
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        return cls.from_dict(json.loads(text))


def _largest_remainder(counts: list[int], total_draw: int) -> list[int]:
    """Allocate total_draw across classes proportionally to counts.

    Floor of the proportional share first; leftovers go to the largest
    fractional parts (ties: larger class first, then lower class index).
    """
    n = sum(counts)
    continuous = [c * total_draw / n for c in counts]
    base = [math.floor(x) for x in continuous]
    leftover = total_draw - sum(base)
    order = sorted(
        range(len(counts)),
        key=lambda i: (-(continuous[i] - base[i]), -counts[i], i),
    )
    for i in order[:leftover]:
        base[i] += 1
    return base


def split_counts(
    class_totals: dict[ClassLabel, int], ratios: tuple[float, float, float]
) -> dict[ClassLabel, tuple[int, int, int]]:
    """Per-class (train, val, test) counts under the calibrated rounding rule."""
    labels = [lab for lab in CLASS_ORDER if class_totals.get(lab, 0) > 0]
    totals = [class_totals[lab] for lab in labels]
    n = sum(totals)

    test_total = math.ceil(ratios[2] * n)
    test = _largest_remainder(totals, test_total)

    remaining = [t - te for t, te in zip(totals, test)]
    val_total = math.ceil(ratios[1] * sum(remaining))
    val = _largest_remainder(remaining, val_total)

    train = [r - v for r, v in zip(remaining, val)]
    return {lab: (tr, v, te) for lab, tr, v, te in zip(labels, train, val, test)}


def stratified_split(
    records: list[LesionRecord],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Assign every record to train/val/test, stratified by class.

    Records of each class are shuffled with a generator seeded from `seed`
    (classes processed in canonical label order), then cut into
    train/val/test blocks sized by :func:`split_counts`.
    """
    if len(ratios) != 3:
        raise SplitError(f"expected 3 ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise SplitError(f"ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    if not records:
        raise SplitError("no records to split")

    by_class: dict[ClassLabel, list[LesionRecord]] = {lab: [] for lab in CLASS_ORDER}
    for rec in records:
        by_class[rec.label].append(rec)

    for lab in CLASS_ORDER:
        n_class = len(by_class[lab])
        if 0 < n_class < len(PARTITIONS):
            raise SplitError(
                f"class {lab.name} has {n_class} records, fewer than "
                f"{len(PARTITIONS)} partitions"
            )

    class_totals = {lab: len(recs) for lab, recs in by_class.items() if recs}
    counts = split_counts(class_totals, tuple(float(r) for r in ratios))

    rng = np.random.default_rng(seed)
    assignment_by_id: dict[str, Partition] = {}
    class_counts: dict[str, dict[str, int]] = {}
    for lab in CLASS_ORDER:
        recs = by_class[lab]
        if not recs:
            continue
        train_c, val_c, test_c = counts[lab]
        order = rng.permutation(len(recs))
        for pos, idx in enumerate(order):
            if pos < train_c:
                part = Partition.TRAIN
            elif pos < train_c + val_c:
                part = Partition.VAL
            else:
                part = Partition.TEST
            assignment_by_id[recs[idx].image_id] = part
        class_counts[lab.name] = {"train": train_c, "val": val_c, "test": test_c}

    # manifest lists assignments in input-record order
    assignments = {rec.image_id: assignment_by_id[rec.image_id] for rec in records}
    return SplitManifest(
        seed=seed,
        ratios=tuple(float(r) for r in ratios),
        assignments=assignments,
        class_counts=class_counts,
    )


def write_split_report_csv(manifest: SplitManifest, path: str | Path) -> None:
    """Human-readable per-class split table (Class, Train, Validation, Test)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Class", "Train", "Validation", "Test"])
        for name in CLASS_NAMES:
            row = manifest.class_counts.get(name)
            if row is None:
                continue
            writer.writerow([name, row["train"], row["val"], row["test"]])


ARCHIVE_NAMES = {p: f"{p.value}.npz" for p in PARTITIONS}


def export_archive(
    manifest: SplitManifest,
    records: list[LesionRecord],
    out_dir: str | Path,
    side: int = DEFAULT_SIDE,
) -> dict[str, Path]:
    """Write train/val/test .npz archives plus the manifest sidecar.

    Each archive pairs an `images` block (N, side, side, 3) float32 with a
    `labels` block (N,) int64, ordered as the manifest lists that
    partition's records. Any unreadable image aborts the export, reporting
    every failed image_id at once.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_id = {rec.image_id: rec for rec in records}
    missing = [iid for iid in by_id if iid not in manifest.assignments]
    if missing:
        raise SplitError(
            f"manifest does not cover {len(missing)} record(s): {', '.join(sorted(missing)[:5])}"
        )
    unknown = [iid for iid in manifest.assignments if iid not in by_id]
    if unknown:
        raise SplitError(
            f"manifest references {len(unknown)} unknown record(s): "
            f"{', '.join(sorted(unknown)[:5])}"
        )

    order: dict[Partition, list[LesionRecord]] = {p: [] for p in PARTITIONS}
    for iid, part in manifest.assignments.items():
        order[part].append(by_id[iid])

    failed: list[str] = []
    loaded: dict[Partition, tuple[np.ndarray, np.ndarray]] = {}
    for part in PARTITIONS:
        recs = order[part]
        images = np.zeros((len(recs), side, side, 3), dtype=np.float32)
        labels = np.zeros(len(recs), dtype=np.int64)
        for i, rec in enumerate(recs):
            try:
                images[i] = load_and_resize(rec, side=side)
            except ImageLoadError as exc:
                failed.append(exc.image_id or rec.image_id)
                continue
            labels[i] = int(rec.label)
        loaded[part] = (images, labels)
    if failed:
        raise ImageLoadError(
            f"export aborted, {len(failed)} image(s) failed to load: "
            + ", ".join(sorted(failed))
        )

    paths: dict[str, Path] = {}
    for part in PARTITIONS:
        images, labels = loaded[part]
        path = out_dir / ARCHIVE_NAMES[part]
        np.savez(path, images=images, labels=labels)
        paths[part.value] = path

    sidecar = out_dir / "split_manifest.json"
    sidecar.write_text(manifest.to_json() + "\n")
    paths["manifest"] = sidecar
    return paths


def load_archive(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read back one partition archive as (images, labels)."""
    with np.load(path) as data:
        return data["images"], data["labels"]
