"""Sensor dataset ingestion: raw parsing, windowing, normalization, splits, container I/O.

Datasets are stored as float32 arrays of shape [N, channels, T]. All windows in
one dataset share the same (channels, T); labels index into an alphabetically
ordered class-name table that is frozen in the container manifest.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import FormatError, IngestionError

logger = logging.getLogger(__name__)

DATASET_FORMAT = "bsdgan-dataset-v1"
MALFORMED_WARN_FRACTION = 0.05
STD_CLAMP = 1e-8


@dataclass
class SensorWindow:
    """One fixed-length multichannel window (acceleration, m/s^2)."""

    values: np.ndarray  # [channels, T]
    label: Optional[int] = None
    source_id: Optional[int] = None


@dataclass
class LabeledDataset:
    """A batch of same-shape windows with aligned integer labels."""

    values: np.ndarray  # [N, channels, T] float32
    labels: np.ndarray  # [N] int64
    class_names: list[str]
    split: str = "train"
    source_ids: Optional[np.ndarray] = None  # [N] int32
    synthetic: Optional[np.ndarray] = None  # [N] bool; None means all real

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 3:
            raise FormatError(f"dataset values must be [N, channels, T], got shape {self.values.shape}")
        if len(self.values) != len(self.labels):
            raise FormatError(f"{len(self.values)} windows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise FormatError("label outside class-name table")
        if not np.isfinite(self.values).all():
            raise IngestionError("dataset contains NaN/Inf values")
        if self.source_ids is not None:
            self.source_ids = np.asarray(self.source_ids, dtype=np.int32)
        if self.synthetic is not None:
            self.synthetic = np.asarray(self.synthetic, dtype=bool)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def window(self, i: int) -> SensorWindow:
        return SensorWindow(
            values=self.values[i],
            label=int(self.labels[i]),
            source_id=int(self.source_ids[i]) if self.source_ids is not None else None,
        )

    def __iter__(self) -> Iterator[SensorWindow]:
        return (self.window(i) for i in range(len(self)))

    def subset(self, indices: np.ndarray, split: Optional[str] = None) -> "LabeledDataset":
        indices = np.asarray(indices)
        return LabeledDataset(
            values=self.values[indices],
            labels=self.labels[indices],
            class_names=list(self.class_names),
            split=split if split is not None else self.split,
            source_ids=self.source_ids[indices] if self.source_ids is not None else None,
            synthetic=self.synthetic[indices] if self.synthetic is not None else None,
        )


@dataclass
class NormalizationStats:
    """Per-channel z-score parameters fitted on the train split only."""

    mean: np.ndarray  # [channels] float64
    std: np.ndarray  # [channels] float64, every entry > 0
    clamped_channels: list[int] = field(default_factory=list)


@dataclass
class WisdmRows:
    """Row table parsed from a raw WISDM log, in file order."""

    users: np.ndarray  # [N] int32
    activity_codes: np.ndarray  # [N] int32, index into activity_names
    activity_names: list[str]  # order of first appearance
    timestamps: np.ndarray  # [N] int64
    xyz: np.ndarray  # [N, 3] float32
    skipped: int
    total_lines: int  # non-empty lines seen

    def __len__(self) -> int:
        return len(self.users)

    @property
    def malformed_warning(self) -> bool:
        return self.total_lines > 0 and self.skipped / self.total_lines > MALFORMED_WARN_FRACTION


def parse_wisdm_raw(path: str | os.PathLike) -> WisdmRows:
    """Parse a WISDM-style raw accelerometer log.

    Each non-empty line is expected to read ``user,activity,timestamp,x,y,z;``
    (the trailing semicolon is tolerated but not required). Lines that do not
    parse are counted and skipped; crossing 5% malformed raises a warning flag
    on the returned row table.
    """
    path = Path(path)
    users: list[int] = []
    codes: list[int] = []
    names: list[str] = []
    name_to_code: dict[str, int] = {}
    stamps: list[int] = []
    xyz: list[tuple[float, float, float]] = []
    skipped = 0
    total = 0

    try:
        handle = path.open("r", encoding="utf-8", errors="replace")
    except OSError as exc:
        raise IngestionError(f"cannot read WISDM raw file {path}: {exc}") from exc

    with handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            total += 1
            if line.endswith(";"):
                line = line[:-1].rstrip()
            parts = line.split(",")
            if len(parts) != 6:
                skipped += 1
                continue
            try:
                user = int(parts[0])
                stamp = int(parts[2])
                x, y, z = float(parts[3]), float(parts[4]), float(parts[5])
            except ValueError:
                skipped += 1
                continue
            activity = parts[1].strip()
            if not activity or not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
                skipped += 1
                continue
            code = name_to_code.get(activity)
            if code is None:
                code = len(names)
                name_to_code[activity] = code
                names.append(activity)
            users.append(user)
            codes.append(code)
            stamps.append(stamp)
            xyz.append((x, y, z))

    rows = WisdmRows(
        users=np.asarray(users, dtype=np.int32),
        activity_codes=np.asarray(codes, dtype=np.int32),
        activity_names=names,
        timestamps=np.asarray(stamps, dtype=np.int64),
        xyz=np.asarray(xyz, dtype=np.float32).reshape(-1, 3),
        skipped=skipped,
        total_lines=total,
    )
    if rows.malformed_warning:
        logger.warning(
            "%s: %d of %d lines malformed (%.1f%%)", path.name, skipped, total, 100.0 * skipped / total
        )
    return rows


def parse_unimib(path: str | os.PathLike, length: int = 151) -> LabeledDataset:
    """Parse a CSV export of a UniMiB-style archive into a LabeledDataset.

    Expected row layout: ``label,source_id,x_0..x_{T-1},y_0..,z_0..`` with
    T == ``length`` samples per axis. An optional header row is skipped.
    """
    path = Path(path)
    expected_fields = 2 + 3 * length
    raw_labels: list[str] = []
    sources: list[int] = []
    instances: list[np.ndarray] = []

    try:
        handle = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise IngestionError(f"cannot read UniMiB CSV {path}: {exc}") from exc

    with handle:
        reader = csv.reader(handle)
        for idx, row in enumerate(reader):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if idx == 0 and _looks_like_header(row):
                continue
            if len(row) != expected_fields:
                per_axis = (len(row) - 2) / 3
                raise FormatError(
                    f"instance {idx}: expected {length} samples per axis, got {per_axis:g}"
                )
            try:
                source = int(row[1])
                flat = np.asarray(row[2:], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"instance {idx}: non-numeric value ({exc})") from exc
            if not np.isfinite(flat).all():
                raise FormatError(f"instance {idx}: non-finite sample")
            raw_labels.append(row[0].strip())
            sources.append(source)
            instances.append(flat.reshape(3, length))

    if not instances:
        return LabeledDataset(
            values=np.zeros((0, 3, length), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            class_names=[],
        )

    class_names = sorted(set(raw_labels))
    name_to_label = {name: i for i, name in enumerate(class_names)}
    labels = np.asarray([name_to_label[name] for name in raw_labels], dtype=np.int64)
    return LabeledDataset(
        values=np.stack(instances).astype(np.float32),
        labels=labels,
        class_names=class_names,
        source_ids=np.asarray(sources, dtype=np.int32),
    )


def _looks_like_header(row: Sequence[str]) -> bool:
    if len(row) < 3:
        return False
    try:
        float(row[2])
        return False
    except ValueError:
        return True


def window(rows: WisdmRows, length: int, stride: int) -> LabeledDataset:
    """Slice raw rows into fixed-length windows, one (user, activity) run at a time.

    A run is a maximal stretch of consecutive rows sharing user and activity;
    windows never cross run boundaries and partial tails are dropped. Class
    labels are re-indexed alphabetically by activity name.
    """
    if length < 1 or stride < 1:
        raise ValueError("window length and stride must be >= 1")

    class_names = sorted(rows.activity_names)
    remap = np.full(max(len(rows.activity_names), 1), -1, dtype=np.int64)
    for code, name in enumerate(rows.activity_names):
        remap[code] = class_names.index(name)

    n = len(rows)
    if n == 0:
        return LabeledDataset(
            values=np.zeros((0, 3, length), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            class_names=class_names,
        )

    boundary = np.flatnonzero(
        (np.diff(rows.users) != 0) | (np.diff(rows.activity_codes) != 0)
    )
    run_starts = np.concatenate(([0], boundary + 1))
    run_ends = np.concatenate((boundary + 1, [n]))

    starts: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    users: list[np.ndarray] = []
    longest_run = 0
    for s, e in zip(run_starts, run_ends):
        run_len = e - s
        longest_run = max(longest_run, run_len)
        if run_len < length:
            continue
        count = (run_len - length) // stride + 1
        run_starts_arr = s + stride * np.arange(count)
        starts.append(run_starts_arr)
        labels.append(np.full(count, remap[rows.activity_codes[s]], dtype=np.int64))
        users.append(np.full(count, rows.users[s], dtype=np.int32))

    if not starts:
        logger.warning("window length %d exceeds longest run (%d rows); empty dataset", length, longest_run)
        return LabeledDataset(
            values=np.zeros((0, 3, length), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            class_names=class_names,
        )

    start_idx = np.concatenate(starts)
    gather = start_idx[:, None] + np.arange(length)[None, :]
    values = rows.xyz[gather]  # [N, length, 3]
    values = np.ascontiguousarray(values.transpose(0, 2, 1))
    return LabeledDataset(
        values=values,
        labels=np.concatenate(labels),
        class_names=class_names,
        source_ids=np.concatenate(users),
    )


def class_histogram(ds: LabeledDataset) -> dict[int, int]:
    """Count windows per class; keys cover exactly the classes present."""
    labels, counts = np.unique(ds.labels, return_counts=True)
    return {int(c): int(n) for c, n in zip(labels, counts)}


def fit_normalization(train: LabeledDataset) -> NormalizationStats:
    """Fit per-channel z-score stats on the train split.

    Zero-variance channels get their std clamped to 1e-8 so apply stays finite.
    """
    if len(train) == 0:
        raise IngestionError("cannot fit normalization on an empty train split")
    flat = train.values.astype(np.float64)
    mean = flat.mean(axis=(0, 2))
    std = flat.std(axis=(0, 2))
    clamped = [int(c) for c in np.flatnonzero(std < STD_CLAMP)]
    if clamped:
        logger.warning("zero-variance channel(s) %s: std clamped to %g", clamped, STD_CLAMP)
        std = np.maximum(std, STD_CLAMP)
    return NormalizationStats(mean=mean, std=std, clamped_channels=clamped)


def apply_normalization(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Z-score values per channel; computed and returned in float64."""
    x = np.asarray(values, dtype=np.float64)
    return (x - stats.mean[:, None]) / stats.std[:, None]


def invert_normalization(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Exact algebraic inverse of apply_normalization (float64)."""
    x = np.asarray(values, dtype=np.float64)
    return x * stats.std[:, None] + stats.mean[:, None]


def normalize_dataset(ds: LabeledDataset, stats: NormalizationStats) -> LabeledDataset:
    """Return a float32 normalized copy of the dataset (container dtype)."""
    return LabeledDataset(
        values=apply_normalization(ds.values, stats).astype(np.float32),
        labels=ds.labels.copy(),
        class_names=list(ds.class_names),
        split=ds.split,
        source_ids=None if ds.source_ids is None else ds.source_ids.copy(),
        synthetic=None if ds.synthetic is None else ds.synthetic.copy(),
    )


def stratified_split(
    ds: LabeledDataset,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Split into (train, val, test) preserving per-class proportions within +-1.

    Deterministic for a fixed (dataset, fractions, seed). Classes with fewer
    samples than non-empty splits go entirely to train, with a warning.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must have exactly three entries (train, val, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")

    rng = np.random.default_rng(seed)
    nonzero_splits = sum(1 for f in fractions if f > 0)
    assigned: list[list[np.ndarray]] = [[], [], []]
    for cls in sorted(class_histogram(ds)):
        idx = np.flatnonzero(ds.labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        if n < nonzero_splits:
            logger.warning("class %d has %d sample(s) < %d splits; all assigned to train", cls, n, nonzero_splits)
            assigned[0].append(idx)
            continue
        counts = _split_counts(n, fractions)
        offset = 0
        for part, count in enumerate(counts):
            assigned[part].append(idx[offset : offset + count])
            offset += count

    names = ("train", "val", "test")
    out = []
    for part, name in enumerate(names):
        if assigned[part]:
            part_idx = np.sort(np.concatenate(assigned[part]))
        else:
            part_idx = np.zeros(0, dtype=np.int64)
        out.append(ds.subset(part_idx, split=name))
    return out[0], out[1], out[2]


def _split_counts(n: int, fractions: tuple[float, float, float]) -> list[int]:
    """Cumulative-rounded per-split counts, bumped so no non-empty split gets 0."""
    cum = np.floor(np.cumsum(fractions) * n + 0.5).astype(int)
    cum[-1] = n
    counts = np.diff(np.concatenate(([0], cum))).tolist()
    for part, frac in enumerate(fractions):
        if frac > 0 and counts[part] == 0:
            donor = int(np.argmax(counts))
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[part] += 1
    return counts


# ---------------------------------------------------------------------------
# Dataset container: textual manifest + one little-endian float32 blob per split
# ---------------------------------------------------------------------------

def save_dataset_container(
    out_dir: str | os.PathLike,
    splits: dict[str, LabeledDataset],
    stats: Optional[NormalizationStats] = None,
    seed: Optional[int] = None,
    extra: Optional[dict] = None,
) -> Path:
    """Write a dataset container directory; returns the manifest path.

    Layout: ``manifest.json`` plus per-split ``<split>.bin`` (float32 LE,
    row-major [N, channels, T]), ``<split>_labels.bin`` (int32 LE) and optional
    ``<split>_sources.bin`` / ``<split>_provenance.bin`` (uint8 synthetic flag).
    All files are written to temp names and renamed so interrupted writes never
    leave a readable-but-partial container.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    shapes = {(ds.channels, ds.length) for ds in splits.values() if len(ds)}
    if len(shapes) > 1:
        raise FormatError(f"splits disagree on window shape: {sorted(shapes)}")
    class_names = None
    for ds in splits.values():
        if class_names is None:
            class_names = ds.class_names
        elif ds.class_names != class_names:
            raise FormatError("splits disagree on class names")
    channels, length = next(iter(shapes)) if shapes else next(iter(splits.values())).values.shape[1:]

    manifest: dict = {
        "format": DATASET_FORMAT,
        "channels": int(channels),
        "length": int(length),
        "class_names": class_names or [],
        "seed": seed,
        "normalization": None
        if stats is None
        else {
            "mean": [float(v) for v in stats.mean],
            "std": [float(v) for v in stats.std],
            "clamped_channels": list(stats.clamped_channels),
        },
        "splits": {},
    }
    if extra:
        manifest["extra"] = extra

    for name, ds in splits.items():
        values = np.ascontiguousarray(ds.values, dtype="<f4")
        labels = np.ascontiguousarray(ds.labels, dtype="<i4")
        entry = {
            "count": len(ds),
            "values": f"{name}.bin",
            "values_bytes": values.nbytes,
            "labels": f"{name}_labels.bin",
            "labels_bytes": labels.nbytes,
        }
        _atomic_write_bytes(out_dir / entry["values"], values.tobytes())
        _atomic_write_bytes(out_dir / entry["labels"], labels.tobytes())
        if ds.source_ids is not None:
            sources = np.ascontiguousarray(ds.source_ids, dtype="<i4")
            entry["sources"] = f"{name}_sources.bin"
            entry["sources_bytes"] = sources.nbytes
            _atomic_write_bytes(out_dir / entry["sources"], sources.tobytes())
        if ds.synthetic is not None:
            flags = np.ascontiguousarray(ds.synthetic, dtype=np.uint8)
            entry["provenance"] = f"{name}_provenance.bin"
            entry["provenance_bytes"] = flags.nbytes
            _atomic_write_bytes(out_dir / entry["provenance"], flags.tobytes())
        manifest["splits"][name] = entry

    manifest_path = out_dir / "manifest.json"
    _atomic_write_bytes(manifest_path, json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest_path


def load_dataset_container(
    container_dir: str | os.PathLike,
    splits: Optional[Sequence[str]] = None,
) -> tuple[dict[str, LabeledDataset], Optional[NormalizationStats], dict]:
    """Load (splits, normalization stats, manifest) from a container directory.

    Passing ``splits`` loads only those splits; blob byte lengths are checked
    against the manifest before any array is materialized.
    """
    container_dir = Path(container_dir)
    manifest_path = container_dir / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"unsupported container format {manifest.get('format')!r}")

    channels, length = manifest["channels"], manifest["length"]
    class_names = list(manifest["class_names"])
    wanted = list(splits) if splits is not None else list(manifest["splits"])
    out: dict[str, LabeledDataset] = {}
    for name in wanted:
        if name not in manifest["splits"]:
            raise IngestionError(f"split {name!r} not present in container")
        entry = manifest["splits"][name]
        values = _read_blob(container_dir / entry["values"], entry["values_bytes"], "<f4")
        labels = _read_blob(container_dir / entry["labels"], entry["labels_bytes"], "<i4")
        count = entry["count"]
        values = values.reshape(count, channels, length)
        sources = None
        if "sources" in entry:
            sources = _read_blob(container_dir / entry["sources"], entry["sources_bytes"], "<i4")
        flags = None
        if "provenance" in entry:
            flags = _read_blob(container_dir / entry["provenance"], entry["provenance_bytes"], np.uint8).astype(bool)
        out[name] = LabeledDataset(
            values=values,
            labels=labels.astype(np.int64),
            class_names=class_names,
            split=name,
            source_ids=sources,
            synthetic=flags,
        )

    stats = None
    norm = manifest.get("normalization")
    if norm is not None:
        stats = NormalizationStats(
            mean=np.asarray(norm["mean"], dtype=np.float64),
            std=np.asarray(norm["std"], dtype=np.float64),
            clamped_channels=list(norm.get("clamped_channels", [])),
        )
    return out, stats, manifest


def _read_blob(path: Path, expected_bytes: int, dtype) -> np.ndarray:
    if not path.exists():
        raise IngestionError(f"missing container blob {path}")
    raw = path.read_bytes()
    if len(raw) != expected_bytes:
        raise FormatError(f"{path.name}: {len(raw)} bytes on disk, manifest says {expected_bytes}")
    return np.frombuffer(raw, dtype=dtype).copy()


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
