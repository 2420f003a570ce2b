"""SemanticKITTI-style scan, label and prediction I/O.

Scans are ``.bin`` files of little-endian float32 records ``(x, y, z, remission)``;
labels are ``.label`` files of little-endian uint32 with the semantic class in
the low 16 bits and the instance id in the high 16 bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from kprnet.errors import ConfigError, DataError, FormatError

IGNORE = 255
NUM_CLASSES = 19

# raw_id train_id name; the first line naming a train id is its canonical raw id.
DEFAULT_LABEL_MAP_TEXT = """\
# SemanticKITTI 19-class reduction
10  0   car
11  1   bicycle
15  2   motorcycle
18  3   truck
20  4   other-vehicle
30  5   person
31  6   bicyclist
32  7   motorcyclist
40  8   road
44  9   parking
48  10  sidewalk
49  11  other-ground
50  12  building
51  13  fence
70  14  vegetation
71  15  trunk
72  16  terrain
80  17  pole
81  18  traffic-sign
# folded into the classes above
13  4   bus
16  4   on-rails
60  8   lane-marking
252 0   moving-car
253 6   moving-bicyclist
254 5   moving-person
255 7   moving-motorcyclist
256 4   moving-on-rails
257 4   moving-bus
258 3   moving-truck
259 4   moving-other-vehicle
# ignored
0   ignore  unlabeled
1   ignore  outlier
52  ignore  other-structure
99  ignore  other-object
"""


@dataclass(frozen=True)
class PointCloud:
    """Points in capture order with their remission values."""

    points: np.ndarray  # (N, 3) float32, sensor frame, meters
    remission: np.ndarray  # (N,) float32

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"points must be N x 3, got shape {self.points.shape}")
        if self.remission.shape != (self.points.shape[0],):
            raise DataError("points and remission lengths differ")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RawLabels:
    raw: np.ndarray  # (N,) uint32

    @property
    def semantic(self) -> np.ndarray:
        return (self.raw & 0xFFFF).astype(np.uint32)

    @property
    def instance(self) -> np.ndarray:
        return (self.raw >> 16).astype(np.uint32)

    def __len__(self) -> int:
        return self.raw.shape[0]


@dataclass(frozen=True)
class LabelMap:
    """Raw semantic id <-> train id mapping for the 19 evaluated classes."""

    forward: dict[int, int]
    inverse: dict[int, int]
    names: list[str]

    def __post_init__(self):
        if sorted(self.inverse) != list(range(NUM_CLASSES)):
            raise ConfigError(
                f"label map must define train ids 0..{NUM_CLASSES - 1}, got {sorted(self.inverse)}"
            )
        if len(self.names) != NUM_CLASSES:
            raise ConfigError("label map needs one name per train id")
        for train_id, raw in self.inverse.items():
            if self.forward.get(raw) != train_id:
                raise ConfigError(f"canonical raw id {raw} does not map back to {train_id}")
        for raw, train_id in self.forward.items():
            if not 0 <= raw <= 0xFFFF:
                raise ConfigError(f"raw id {raw} does not fit in 16 bits")
            if train_id != IGNORE and not 0 <= train_id < NUM_CLASSES:
                raise ConfigError(f"train id {train_id} out of range")

    @classmethod
    def from_text(cls, text: str) -> "LabelMap":
        """Parse ``raw_id train_id name`` lines; ``train_id`` may be ``ignore``."""
        forward: dict[int, int] = {}
        inverse: dict[int, int] = {}
        names: dict[int, str] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 2)
            if len(parts) != 3:
                raise ConfigError(f"label map line {lineno}: expected 'raw_id train_id name'")
            try:
                raw = int(parts[0])
                train_id = IGNORE if parts[1].lower() == "ignore" else int(parts[1])
            except ValueError as exc:
                raise ConfigError(f"label map line {lineno}: {exc}") from None
            if raw in forward:
                raise ConfigError(f"label map line {lineno}: raw id {raw} listed twice")
            forward[raw] = train_id
            if train_id != IGNORE and train_id not in inverse:
                inverse[train_id] = raw
                names[train_id] = parts[2].strip()
        return cls(forward, inverse, [names.get(i, "") for i in range(NUM_CLASSES)])

    def lookup_table(self) -> np.ndarray:
        table = np.full(1 << 16, IGNORE, dtype=np.uint8)
        for raw, train_id in self.forward.items():
            table[raw] = train_id
        return table


def default_label_map() -> LabelMap:
    return LabelMap.from_text(DEFAULT_LABEL_MAP_TEXT)


def load_label_map(path: str | Path) -> LabelMap:
    return LabelMap.from_text(Path(path).read_text())


@dataclass(frozen=True)
class SequenceSplit:
    train: frozenset[int] = field(
        default_factory=lambda: frozenset({0, 1, 2, 3, 4, 5, 6, 7, 9, 10})
    )
    val: frozenset[int] = field(default_factory=lambda: frozenset({8}))
    test: frozenset[int] = field(default_factory=lambda: frozenset(range(11, 22)))

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ConfigError("train/val/test sequence sets must be pairwise disjoint")


def read_point_cloud(data: bytes) -> PointCloud:
    if len(data) % 16:
        raise FormatError(f"scan byte length {len(data)} is not a multiple of 16")
    records = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(records).all(axis=1)
    if bad.any():
        raise DataError(f"non-finite value in point {int(np.flatnonzero(bad)[0])}")
    records = records.astype(np.float32)
    return PointCloud(np.ascontiguousarray(records[:, :3]), np.ascontiguousarray(records[:, 3]))


def point_cloud_to_bytes(cloud: PointCloud) -> bytes:
    records = np.empty((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.points
    records[:, 3] = cloud.remission
    return records.tobytes()


def read_labels(data: bytes) -> RawLabels:
    if len(data) % 4:
        raise FormatError(f"label byte length {len(data)} is not a multiple of 4")
    return RawLabels(np.frombuffer(data, dtype="<u4").astype(np.uint32))


def labels_to_bytes(labels: RawLabels) -> bytes:
    return labels.raw.astype("<u4").tobytes()


def remap(labels: RawLabels, label_map: LabelMap) -> np.ndarray:
    """Map raw semantic ids to train ids; unknown ids become ``IGNORE``."""
    return label_map.lookup_table()[labels.semantic]


def write_predictions(train_ids: np.ndarray, label_map: LabelMap) -> bytes:
    train_ids = np.asarray(train_ids)
    inverse = np.zeros(256, dtype=np.uint32)
    for train_id, raw in label_map.inverse.items():
        inverse[train_id] = raw
    valid = (train_ids == IGNORE) | ((train_ids >= 0) & (train_ids < NUM_CLASSES))
    if not valid.all():
        bad = int(np.flatnonzero(~valid)[0])
        raise ValueError(f"train id {int(train_ids[bad])} at index {bad} is out of range")
    return inverse[train_ids.astype(np.int64)].astype("<u4").tobytes()


def load_scan(path: str | Path) -> PointCloud:
    path = Path(path)
    try:
        return read_point_cloud(path.read_bytes())
    except (FormatError, DataError) as exc:
        raise type(exc)(f"{path}: {exc}") from None


def load_labels(path: str | Path) -> RawLabels:
    path = Path(path)
    try:
        return read_labels(path.read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class ScanRef:
    """One scan on disk. ``name`` is ``NN/ID`` for dataset scans or the file stem."""

    name: str
    scan_path: Path
    label_path: Path | None = None

    @property
    def prediction_relpath(self) -> Path:
        if "/" in self.name:
            seq, frame = self.name.split("/")
            return Path("sequences") / seq / "predictions" / f"{frame}.label"
        return Path(f"{self.name}.label")


def discover_scans(root: str | Path, sequences: Iterable[int]) -> list[ScanRef]:
    """List scans under ``<root>/sequences/<NN>/velodyne`` in sorted order."""
    root = Path(root)
    refs = []
    for seq in sorted(sequences):
        seq_dir = root / "sequences" / f"{seq:02d}"
        velodyne = seq_dir / "velodyne"
        if not velodyne.is_dir():
            raise FileNotFoundError(f"missing scan directory {velodyne}")
        for scan_path in sorted(velodyne.glob("*.bin")):
            label_path = seq_dir / "labels" / f"{scan_path.stem}.label"
            refs.append(
                ScanRef(
                    f"{seq:02d}/{scan_path.stem}",
                    scan_path,
                    label_path if label_path.exists() else None,
                )
            )
    return refs
