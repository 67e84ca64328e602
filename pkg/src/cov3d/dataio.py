"""Dataset ingestion, the volume file format, and synthetic data generation.

Dataset layout on disk:

    <root>/{train,validation,test}/{covid,non-covid}/<scan_id>/<n>.jpg
    <root>/severity.csv            # header: scan_id,partition,severity

Scan directories sitting directly under a partition directory (outside
covid/non-covid) are treated as unlabeled, which is how test scans are
shipped. Volume files use a fixed little-endian binary layout so they are
bit-identical across platforms.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

PARTITIONS = ("train", "validation", "test")
LABEL_DIRS = {"covid": True, "non-covid": False}
SEVERITY_TABLE = "severity.csv"
SEVERITY_CLASSES = (1, 2, 3, 4)

VOLUME_MAGIC = b"COV3DV01"
VOLUME_SUFFIX = ".c3d"
_VOLUME_HEADER = struct.Struct("<8s3I")

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}


@dataclass
class RawVolume:
    """Decoded slice stack: (depth, height, width) 8-bit grayscale voxels."""

    voxels: np.ndarray
    scan_id: str

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise DataError(f"shape error: raw volume must be 3D, got ndim={v.ndim}")
        if v.dtype != np.uint8:
            raise DataError(f"shape error: raw volume must be uint8, got {v.dtype}")
        d, h, w = v.shape
        if d < 1 or h < 8 or w < 8:
            raise DataError(f"shape error: raw volume dims {d}x{h}x{w} below minimum 1x8x8")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    partition: str
    covid_label: bool | None
    severity: int | None = None

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise DataError(f"integrity error: unknown partition {self.partition!r}")
        if self.severity is not None:
            if self.severity not in SEVERITY_CLASSES:
                raise DataError(f"integrity error: severity must be 1..4, got {self.severity}")
            if self.covid_label is not True:
                raise DataError(
                    f"integrity error: scan {self.scan_id} has severity but is not covid-positive"
                )


@dataclass
class AnnotationSet:
    """All scan records of one dataset root, with per-partition tallies."""

    records: list[ScanRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.scan_id in seen:
                raise DataError(f"integrity error: duplicate scan_id {rec.scan_id!r}")
            seen.add(rec.scan_id)

    @property
    def counts(self) -> dict[str, dict]:
        """Per-partition tallies, recomputed from the records on every access."""
        tallies: dict[str, dict] = {}
        for part in PARTITIONS:
            tallies[part] = {
                "positive": 0,
                "negative": 0,
                "unlabeled": 0,
                "severity": {c: 0 for c in SEVERITY_CLASSES},
            }
        for rec in self.records:
            t = tallies[rec.partition]
            if rec.covid_label is None:
                t["unlabeled"] += 1
            elif rec.covid_label:
                t["positive"] += 1
            else:
                t["negative"] += 1
            if rec.severity is not None:
                t["severity"][rec.severity] += 1
        return tallies

    def partition(self, name: str) -> list[ScanRecord]:
        if name not in PARTITIONS:
            raise ConfigError(f"unknown partition {name!r}")
        return [r for r in self.records if r.partition == name]

    def get(self, scan_id: str) -> ScanRecord:
        for rec in self.records:
            if rec.scan_id == scan_id:
                return rec
        raise DataError(f"integrity error: unknown scan_id {scan_id!r}")

    def __len__(self) -> int:
        return len(self.records)


def _sorted_records(records: list[ScanRecord]) -> list[ScanRecord]:
    order = {p: i for i, p in enumerate(PARTITIONS)}
    return sorted(records, key=lambda r: (order[r.partition], r.scan_id))


def scan_dataset(root_path) -> AnnotationSet:
    """Walk a dataset root and build the annotation manifest.

    Severity classes are merged in from ``severity.csv`` when the table is
    present. Labeled scans live under covid/non-covid; unlabeled scan
    directories may sit directly under a partition.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"structural error: dataset root {root} does not exist")
    records: list[ScanRecord] = []
    for part in PARTITIONS:
        part_dir = root / part
        if not part_dir.is_dir():
            raise DataError(f"structural error: missing partition directory {part_dir}")
        for label_name, label in LABEL_DIRS.items():
            label_dir = part_dir / label_name
            if not label_dir.is_dir():
                continue
            for scan_dir in sorted(label_dir.iterdir()):
                if scan_dir.is_dir():
                    records.append(ScanRecord(scan_dir.name, part, label))
        for entry in sorted(part_dir.iterdir()):
            if entry.is_dir() and entry.name not in LABEL_DIRS:
                records.append(ScanRecord(entry.name, part, None))
    annotations = AnnotationSet(_sorted_records(records))

    severity_path = root / SEVERITY_TABLE
    if severity_path.is_file():
        annotations = _merge_severity(annotations, severity_path)
    return annotations


def _merge_severity(annotations: AnnotationSet, table_path: Path) -> AnnotationSet:
    by_id = {rec.scan_id: rec for rec in annotations.records}
    with open(table_path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["scan_id", "partition", "severity"]
        if reader.fieldnames != expected:
            raise DataError(
                f"format error: severity table header {reader.fieldnames} != {expected}"
            )
        for row in reader:
            scan_id = row["scan_id"]
            if scan_id not in by_id:
                raise DataError(f"integrity error: severity row references unknown scan_id {scan_id!r}")
            rec = by_id[scan_id]
            if rec.partition != row["partition"]:
                raise DataError(
                    f"integrity error: severity row for {scan_id!r} names partition "
                    f"{row['partition']!r} but the scan is in {rec.partition!r}"
                )
            if rec.severity is not None:
                raise DataError(f"integrity error: duplicate severity row for {scan_id!r}")
            try:
                severity = int(row["severity"])
            except ValueError:
                raise DataError(f"format error: non-integer severity for {scan_id!r}") from None
            by_id[scan_id] = ScanRecord(rec.scan_id, rec.partition, rec.covid_label, severity)
    return AnnotationSet(_sorted_records(list(by_id.values())))


def scan_directory(root, record: ScanRecord) -> Path:
    """Path of a scan's slice directory under the dataset layout."""
    part_dir = Path(root) / record.partition
    if record.covid_label is None:
        return part_dir / record.scan_id
    return part_dir / ("covid" if record.covid_label else "non-covid") / record.scan_id


def load_slice_stack(scan_dir) -> RawVolume:
    """Load one scan directory of integer-named image slices as a RawVolume.

    Slices are ordered by their numeric index (1.jpg < 2.jpg < 10.jpg) so the
    result does not depend on directory enumeration order. Color inputs are
    converted to grayscale with Rec.601 luma weights.
    """
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise DataError(f"structural error: scan directory {scan_dir} does not exist")
    indexed = []
    for entry in scan_dir.iterdir():
        if not entry.is_file() or entry.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            index = int(entry.stem)
        except ValueError:
            continue
        indexed.append((index, entry))
    if not indexed:
        raise DataError(f"structural error: no integer-named image files in {scan_dir}")
    indexed.sort(key=lambda pair: pair[0])

    slices = []
    shape = None
    for _, path in indexed:
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("L"), dtype=np.uint8)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"decode error: cannot read image {path}: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(
                f"shape error: slice {path} is {arr.shape[0]}x{arr.shape[1]}, "
                f"expected {shape[0]}x{shape[1]}"
            )
        slices.append(arr)
    return RawVolume(np.stack(slices, axis=0), scan_id=scan_dir.name)


def write_volume_file(volume, path) -> None:
    """Serialize a preprocessed volume: magic, D/H/W uint32, float32 payload.

    All integers and floats are little-endian; the payload is row-major with
    depth slowest. The write is atomic (temp file + rename).
    """
    voxels = np.ascontiguousarray(volume.voxels, dtype="<f4")
    if voxels.ndim != 3:
        raise DataError(f"shape error: volume payload must be 3D, got ndim={voxels.ndim}")
    if not np.isfinite(voxels).all():
        raise DataError("numeric error: volume contains non-finite values")
    d, h, w = voxels.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_VOLUME_HEADER.pack(VOLUME_MAGIC, d, h, w))
            fh.write(voxels.tobytes())
        tmp.replace(path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise DataError(f"i/o error: cannot write {path}: {exc}") from exc


def read_volume_header(path) -> tuple[int, int, int]:
    """Read only the D,H,W header of a volume file."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = fh.read(_VOLUME_HEADER.size)
    except OSError as exc:
        raise DataError(f"i/o error: cannot read {path}: {exc}") from exc
    if len(header) < _VOLUME_HEADER.size:
        raise DataError(f"length error: {path} shorter than the volume header")
    magic, d, h, w = _VOLUME_HEADER.unpack(header)
    if magic != VOLUME_MAGIC:
        raise DataError(f"format error: {path} has bad magic {magic!r}")
    return d, h, w


def read_volume_file(path):
    """Read a volume file back; bit-identical to what was written."""
    from .resampler import PreprocessedVolume, preset_for_dims

    path = Path(path)
    d, h, w = read_volume_header(path)
    with open(path, "rb") as fh:
        fh.seek(_VOLUME_HEADER.size)
        payload = fh.read()
    expected = d * h * w * 4
    if len(payload) != expected:
        raise DataError(
            f"length error: {path} payload is {len(payload)} bytes, expected {expected}"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(d, h, w)
    if not np.isfinite(voxels).all():
        raise DataError(f"format error: {path} payload contains non-finite values")
    return PreprocessedVolume(
        voxels=voxels.copy(), scan_id=path.stem, preset=preset_for_dims(d, h, w)
    )


# --- synthetic dataset generation -------------------------------------------

@dataclass(frozen=True)
class BlobSignal:
    """Lesion signal for one severity class."""

    count: int
    radius_frac: float
    intensity: float


# Blob load grows sharply with the class index so a small network can pick the
# classes apart from desk-scale sample counts: the expected bright-volume
# fraction roughly triples per class, far outside the noise floor of a scan's
# mean intensity.
DEFAULT_CLASS_SIGNAL: dict[int, BlobSignal] = {
    1: BlobSignal(count=3, radius_frac=0.33, intensity=0.62),
    2: BlobSignal(count=5, radius_frac=0.40, intensity=0.75),
    3: BlobSignal(count=8, radius_frac=0.46, intensity=0.87),
    4: BlobSignal(count=12, radius_frac=0.52, intensity=0.97),
}

TRAIN_FRACTION = 0.6


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic slice-stack generator.

    ``n_scans_per_class`` counts scans per class over the whole dataset; they
    are split deterministically between the train and validation partitions.
    ``n_test_scans`` adds unlabeled scans to the test partition.
    """

    n_scans_per_class: int = 10
    seed: int = 0
    depth_range: tuple[int, int] = (24, 40)
    side_range: tuple[int, int] = (48, 64)
    class_signal: tuple[tuple[int, BlobSignal], ...] = tuple(DEFAULT_CLASS_SIGNAL.items())
    n_test_scans: int = 0
    jpeg_quality: int = 95

    def __post_init__(self):
        if self.n_scans_per_class < 2:
            raise ConfigError("n_scans_per_class: must be >= 2 (train and validation splits)")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed: must fit in 64 bits")
        for name, (lo, hi) in (("depth_range", self.depth_range), ("side_range", self.side_range)):
            if lo > hi or lo < 8:
                raise ConfigError(f"{name}: invalid range {lo}..{hi}")
        classes = dict(self.class_signal)
        if sorted(classes) != list(SEVERITY_CLASSES):
            raise ConfigError("class_signal: must cover severity classes 1..4")

    @property
    def signals(self) -> dict[int, BlobSignal]:
        return dict(self.class_signal)

    @property
    def n_train_per_class(self) -> int:
        n_train = max(1, round(TRAIN_FRACTION * self.n_scans_per_class))
        return min(n_train, self.n_scans_per_class - 1)

    @property
    def n_validation_per_class(self) -> int:
        return self.n_scans_per_class - self.n_train_per_class


def _synth_volume(rng: np.random.Generator, dims: tuple[int, int, int],
                  signal: BlobSignal | None) -> np.ndarray:
    """One synthetic scan: a noisy body ellipsoid, plus bright blobs if positive."""
    d, h, w = dims
    zz, yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, d), np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
        indexing="ij",
    )
    body = (zz / 0.95) ** 2 + (yy / 0.85) ** 2 + (xx / 0.85) ** 2 <= 1.0
    vol = np.full(dims, 0.05)
    vol[body] = 0.28
    vol += rng.normal(0.0, 0.035, size=dims)
    if signal is not None:
        for _ in range(signal.count):
            center = rng.uniform(-0.55, 0.55, size=3)
            radii = signal.radius_frac * rng.uniform(0.8, 1.2, size=3)
            blob = (
                ((zz - center[0]) / radii[0]) ** 2
                + ((yy - center[1]) / radii[1]) ** 2
                + ((xx - center[2]) / radii[2]) ** 2
            ) <= 1.0
            vol[blob & body] = signal.intensity
    return np.clip(vol, 0.0, 1.0)


def _write_scan(scan_dir: Path, volume: np.ndarray, quality: int) -> None:
    scan_dir.mkdir(parents=True, exist_ok=True)
    stack = (np.round(volume * 255.0)).astype(np.uint8)
    for i, slice_ in enumerate(stack, start=1):
        Image.fromarray(slice_, mode="L").save(scan_dir / f"{i}.jpg", quality=quality)


def generate_synthetic_dataset(spec: SyntheticSpec, out_root) -> AnnotationSet:
    """Write a deterministic synthetic dataset and return its manifest.

    Negative scans carry background noise only; positive scans carry bright
    ellipsoidal blobs whose count/extent/intensity increase with the severity
    class, so the five classes are separable by construction.
    """
    out_root = Path(out_root)
    rng = np.random.default_rng(spec.seed)
    signals = spec.signals
    try:
        for part in PARTITIONS:
            (out_root / part / "covid").mkdir(parents=True, exist_ok=True)
            (out_root / part / "non-covid").mkdir(parents=True, exist_ok=True)

        records: list[ScanRecord] = []
        severity_rows: list[tuple[str, str, int]] = []
        counter = 0
        class_order: list[int | None] = [None, 1, 2, 3, 4]
        for part, n_scans in (("train", spec.n_train_per_class),
                              ("validation", spec.n_validation_per_class)):
            for cls in class_order:
                for _ in range(n_scans):
                    scan_id = f"scan{counter:04d}"
                    counter += 1
                    dims = (
                        int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1)),
                        int(rng.integers(spec.side_range[0], spec.side_range[1] + 1)),
                        int(rng.integers(spec.side_range[0], spec.side_range[1] + 1)),
                    )
                    signal = signals[cls] if cls is not None else None
                    volume = _synth_volume(rng, dims, signal)
                    label_dir = "covid" if cls is not None else "non-covid"
                    _write_scan(out_root / part / label_dir / scan_id, volume, spec.jpeg_quality)
                    records.append(ScanRecord(scan_id, part, cls is not None,
                                              cls if cls is not None else None))
                    if cls is not None:
                        severity_rows.append((scan_id, part, cls))
        for _ in range(spec.n_test_scans):
            scan_id = f"scan{counter:04d}"
            counter += 1
            dims = (
                int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1)),
                int(rng.integers(spec.side_range[0], spec.side_range[1] + 1)),
                int(rng.integers(spec.side_range[0], spec.side_range[1] + 1)),
            )
            cls = class_order[int(rng.integers(0, len(class_order)))]
            volume = _synth_volume(rng, dims, signals[cls] if cls is not None else None)
            _write_scan(out_root / "test" / scan_id, volume, spec.jpeg_quality)
            records.append(ScanRecord(scan_id, "test", None))

        severity_rows.sort(key=lambda row: row[0])
        with open(out_root / SEVERITY_TABLE, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scan_id", "partition", "severity"])
            writer.writerows(severity_rows)
    except OSError as exc:
        raise DataError(f"i/o error: cannot write synthetic dataset under {out_root}: {exc}") from exc
    return AnnotationSet(_sorted_records(records))
