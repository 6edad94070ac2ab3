"""Per-action metric vectors and action-window aggregation.

Each disk action becomes a 25-feature record: 8 block-device counters plus
17 filesystem-derived features.  Records are aggregated into fixed-size
action windows which are the unit the classifier consumes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import ext4
from .errors import EmptyBuffer, LengthMismatch, WrongCount

ENTROPY_CHUNK = 4096

NBD_FEATURES = (
    "reads_completed",
    "reads_merged",
    "sectors_read",
    "time_spent_reading",
    "writes_completed",
    "writes_merged",
    "sectors_written",
    "time_spent_writing",
)

FS_FEATURES = (
    "total_reads",
    "total_writes",
    "size",
    "bytes_changed",
    "sum_delta_entropy",
    "avg_delta_entropy",
    "superblock_reads",
    "superblock_writes",
    "gdt_reads",
    "gdt_writes",
    "inode_table_reads",
    "inode_table_writes",
    "data_block_reads",
    "data_block_writes",
    "inodes_accessed",
    "inodes_allocated",
    "inodes_deallocated",
)

FEATURES = NBD_FEATURES + FS_FEATURES

# Region kinds that contribute to a *_reads / *_writes feature pair.
_REGION_FEATURE = {
    ext4.RegionKind.SUPERBLOCK: "superblock",
    ext4.RegionKind.GDT: "gdt",
    ext4.RegionKind.RESERVED_GDT: "gdt",
    ext4.RegionKind.INODE_TABLE: "inode_table",
    ext4.RegionKind.DATA: "data_block",
}


def compute_entropy(block: bytes) -> float:
    """Shannon entropy of the byte histogram, in bits per byte [0, 8]."""
    if len(block) == 0:
        raise EmptyBuffer("entropy of empty buffer")
    counts = np.bincount(np.frombuffer(block, dtype=np.uint8), minlength=256)
    probs = counts[counts > 0] / len(block)
    return float(-(probs * np.log2(probs)).sum())


def compute_delta_entropy(old: bytes, new: bytes) -> float:
    if len(old) != len(new):
        raise LengthMismatch(f"{len(old)} != {len(new)}")
    if len(old) == 0:
        raise EmptyBuffer("delta entropy of empty buffers")
    return compute_entropy(new) - compute_entropy(old)


@dataclass
class NbdCounters:
    """Cumulative block-device statistics, /proc/diskstats style."""

    reads_completed: int = 0
    reads_merged: int = 0
    sectors_read: int = 0
    time_spent_reading: int = 0  # microseconds
    writes_completed: int = 0
    writes_merged: int = 0
    sectors_written: int = 0
    time_spent_writing: int = 0  # microseconds

    _last_read_end: int | None = field(default=None, repr=False, compare=False)
    _last_write_end: int | None = field(default=None, repr=False, compare=False)

    def snapshot(self) -> "NbdCounters":
        return replace(self)

    def record(self, op: str, offset: int, length: int, duration_us: int) -> None:
        """Account one completed request.  A request is 'merged' when it starts
        exactly where the previous same-direction request ended."""
        sectors = length // 512
        if op == "read":
            self.reads_completed += 1
            if self._last_read_end is not None and offset == self._last_read_end:
                self.reads_merged += 1
            self.sectors_read += sectors
            self.time_spent_reading += duration_us
            self._last_read_end = offset + length
        elif op == "write":
            self.writes_completed += 1
            if self._last_write_end is not None and offset == self._last_write_end:
                self.writes_merged += 1
            self.sectors_written += sectors
            self.time_spent_writing += duration_us
            self._last_write_end = offset + length
        else:
            raise ValueError(op)

    def delta(self, earlier: "NbdCounters") -> dict[str, int]:
        return {name: getattr(self, name) - getattr(earlier, name)
                for name in NBD_FEATURES}


@dataclass
class ActionRecord:
    op: str  # read | write
    offset: int
    length: int
    nbd_snapshot: NbdCounters  # cumulative, at completion
    nbd_delta: dict[str, int]  # this action's contribution to the counters
    total_reads: int = 0
    total_writes: int = 0
    size: int = 0
    bytes_changed: int = 0
    sum_delta_entropy: float = 0.0
    avg_delta_entropy: float = 0.0
    superblock_reads: int = 0
    superblock_writes: int = 0
    gdt_reads: int = 0
    gdt_writes: int = 0
    inode_table_reads: int = 0
    inode_table_writes: int = 0
    data_block_reads: int = 0
    data_block_writes: int = 0
    inodes_accessed: frozenset[int] = frozenset()
    inodes_allocated: int = 0
    inodes_deallocated: int = 0
    label: str = "benign"
    strain_id: str = ""
    timestamp_us: int = 0

    def feature(self, name: str) -> float:
        if name in self.nbd_delta:
            return float(self.nbd_delta[name])
        if name == "inodes_accessed":
            return float(len(self.inodes_accessed))
        return float(getattr(self, name))

    def feature_values(self) -> list[float]:
        return [self.feature(name) for name in FEATURES]


def _inodes_for_table_range(catalog: ext4.FilesystemCatalog, start: int,
                            end: int) -> set[int]:
    """Inode numbers whose table entries overlap [start, end)."""
    sb = catalog.superblock
    bs = sb.block_size
    touched: set[int] = set()
    for d in catalog.descriptors:
        t0 = d.inode_table_block * bs
        t1 = t0 + d.inode_table_span * bs
        lo, hi = max(start, t0), min(end, t1)
        if lo >= hi:
            continue
        first = (lo - t0) // sb.inode_size
        last = -(-(hi - t0) // sb.inode_size)
        base = d.group_index * sb.inodes_per_group + 1
        for slot in range(first, last):
            number = base + slot
            if number <= sb.inodes_count:
                touched.add(number)
    return touched


def build_action_record(op: str, offset: int, length: int,
                        catalog: ext4.FilesystemCatalog,
                        nbd: NbdCounters, nbd_before: NbdCounters,
                        old_bytes: bytes | None = None,
                        new_bytes: bytes | None = None,
                        timestamp_us: int = 0,
                        label: str = "benign",
                        strain_id: str = "",
                        compute_entropy_deltas: bool = True) -> ActionRecord:
    """Build the metric vector for one completed request.

    For writes, call after the data has been committed to the backend so the
    catalog update can resolve extent trees against the post-write device.
    Classification failures degrade to Unclassified; they never raise.
    """
    record = ActionRecord(
        op=op,
        offset=offset,
        length=length,
        nbd_snapshot=nbd.snapshot(),
        nbd_delta=nbd.delta(nbd_before),
        size=length,
        label=label,
        strain_id=strain_id,
        timestamp_us=timestamp_us,
    )
    if op == "read":
        record.total_reads = 1
    else:
        record.total_writes = 1

    spans = ext4.classify_offset(catalog, offset, length)
    suffix = "reads" if op == "read" else "writes"
    kinds_seen: set[str] = set()
    accessed: set[int] = set()
    for span in spans:
        feature = _REGION_FEATURE.get(span.kind)
        if feature is not None:
            kinds_seen.add(feature)
        if span.kind is ext4.RegionKind.DATA and span.owner is not None:
            accessed.add(span.owner)
        if span.kind is ext4.RegionKind.INODE_TABLE:
            accessed |= _inodes_for_table_range(catalog, span.start, span.end)
    for feature in kinds_seen:
        name = f"{feature}_{suffix}"
        setattr(record, name, getattr(record, name) + 1)

    if op == "write" and old_bytes is not None and new_bytes is not None:
        diff = np.frombuffer(old_bytes, dtype=np.uint8) != np.frombuffer(
            new_bytes, dtype=np.uint8
        )
        record.bytes_changed = int(diff.sum())
        if compute_entropy_deltas and length > 0:
            chunks = 0
            total = 0.0
            for pos in range(0, length, ENTROPY_CHUNK):
                o = old_bytes[pos : pos + ENTROPY_CHUNK]
                n = new_bytes[pos : pos + ENTROPY_CHUNK]
                total += compute_delta_entropy(o, n)
                chunks += 1
            record.sum_delta_entropy = total
            record.avg_delta_entropy = total / chunks if chunks else 0.0
        delta = ext4.apply_write_update(catalog, offset, old_bytes, new_bytes)
        record.inodes_allocated = len(delta.inodes_allocated)
        record.inodes_deallocated = len(delta.inodes_deallocated)

    record.inodes_accessed = frozenset(accessed)
    return record


@dataclass(frozen=True)
class WindowConfig:
    window: int
    stride: int

    def __post_init__(self):
        if not (1 <= self.stride <= self.window):
            raise ValueError(f"stride {self.stride} not in [1, {self.window}]")

    @classmethod
    def from_overlap_notation(cls, window: int, overlap: int,
                              complement: bool = False) -> "WindowConfig":
        """Map a window/overlap (W/O) pair onto an explicit (window, stride).

        Sample-count arithmetic under W/O notation matches a stride of O
        when O > 0 and W when O = 0.  ``complement`` selects the alternative
        reading where the stride is W - O.
        """
        if complement:
            stride = window - overlap if overlap else window
        else:
            stride = overlap if overlap else window
        return cls(window=window, stride=stride)


@dataclass
class WindowVector:
    values: list[float]  # in FEATURES order
    label: str
    strain_id: str
    first_action_index: int
    last_action_index: int

    def feature(self, name: str) -> float:
        return self.values[FEATURES.index(name)]


def aggregate_window(records: list[ActionRecord],
                     expected_count: int | None = None) -> WindowVector:
    """Aggregate consecutive action records into one classifier sample."""
    if not records:
        raise WrongCount("empty window")
    if expected_count is not None and len(records) != expected_count:
        raise WrongCount(f"got {len(records)} records, expected {expected_count}")

    values: dict[str, float] = {name: 0.0 for name in FEATURES}
    inode_union: set[int] = set()
    writes = 0
    label = "benign"
    strain_id = ""
    for r in records:
        for name in NBD_FEATURES:
            values[name] += r.nbd_delta[name]
        for name in FS_FEATURES:
            if name in ("inodes_accessed", "avg_delta_entropy"):
                continue
            values[name] += r.feature(name)
        inode_union |= r.inodes_accessed
        writes += r.total_writes
        if r.label == "malicious":
            label = "malicious"
            if r.strain_id:
                strain_id = r.strain_id
    values["inodes_accessed"] = float(len(inode_union))
    values["avg_delta_entropy"] = (
        values["sum_delta_entropy"] / writes if writes else 0.0
    )
    return WindowVector(
        values=[values[name] for name in FEATURES],
        label=label,
        strain_id=strain_id,
        first_action_index=0,
        last_action_index=len(records) - 1,
    )


def window_count(n: int, config: WindowConfig) -> int:
    return max(0, (n - config.window) // config.stride + 1)


def stream_windows(records: list[ActionRecord],
                   config: WindowConfig) -> list[WindowVector]:
    """Windows at start indices 0, S, 2S, ...; only full windows are emitted."""
    out = []
    for start in range(0, len(records) - config.window + 1, config.stride):
        vec = aggregate_window(records[start : start + config.window])
        vec.first_action_index = start
        vec.last_action_index = start + config.window - 1
        out.append(vec)
    return out


# ---------------------------------------------------------------------------
# CSV wire formats
# ---------------------------------------------------------------------------

ACTION_LOG_HEADER = list(FEATURES) + ["label", "strain_id", "timestamp_us",
                                      "inode_set"]
WINDOW_CSV_HEADER = list(FEATURES) + ["label", "strain_id"]


def _format_value(name: str, value: float) -> str:
    if name in ("sum_delta_entropy", "avg_delta_entropy"):
        return repr(value)
    return str(int(value))


def write_action_log(path, records: list[ActionRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ACTION_LOG_HEADER)
        for r in records:
            row = [_format_value(n, r.feature(n)) for n in FEATURES]
            row += [
                "1" if r.label == "malicious" else "0",
                r.strain_id,
                str(r.timestamp_us),
                ";".join(str(i) for i in sorted(r.inodes_accessed)),
            ]
            writer.writerow(row)


def read_action_log(path) -> list[ActionRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[: len(FEATURES)] != list(FEATURES):
            raise ValueError(f"{path}: unexpected action-log header")
        has_set = "inode_set" in header
        for lineno, row in enumerate(reader, start=2):
            try:
                feats = {n: float(v) for n, v in zip(FEATURES, row)}
                label = "malicious" if row[len(FEATURES)] == "1" else "benign"
                strain = row[len(FEATURES) + 1]
                ts = int(row[len(FEATURES) + 2])
                if has_set and len(row) > len(FEATURES) + 3 and row[len(FEATURES) + 3]:
                    inode_set = frozenset(
                        int(x) for x in row[len(FEATURES) + 3].split(";")
                    )
                else:
                    inode_set = frozenset()
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from exc
            rec = ActionRecord(
                op="write" if feats["total_writes"] else "read",
                offset=0,
                length=int(feats["size"]),
                nbd_snapshot=NbdCounters(),
                nbd_delta={n: int(feats[n]) for n in NBD_FEATURES},
                label=label,
                strain_id=strain,
                timestamp_us=ts,
                inodes_accessed=inode_set,
            )
            for name in FS_FEATURES:
                if name == "inodes_accessed":
                    continue
                if name in ("sum_delta_entropy", "avg_delta_entropy"):
                    setattr(rec, name, feats[name])
                else:
                    setattr(rec, name, int(feats[name]))
            records.append(rec)
    return records


def write_window_csv(path, windows: list[WindowVector],
                     feature_names: list[str] | None = None) -> None:
    names = list(feature_names) if feature_names else list(FEATURES)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + ["label", "strain_id"])
        for w in windows:
            row = [repr(w.feature(n)) for n in names]
            row += ["1" if w.label == "malicious" else "0", w.strain_id]
            writer.writerow(row)


def read_window_csv(path) -> tuple[list[str], np.ndarray, np.ndarray, list[str]]:
    """Returns (feature_names, X, y, strain_ids)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "strain_id"]:
            raise ValueError(f"{path}: unexpected window CSV header")
        names = header[:-2]
        rows, labels, strains = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row[: len(names)]])
                labels.append(int(row[len(names)]))
                strains.append(row[len(names) + 1])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row: {exc}") from exc
    X = np.array(rows, dtype=np.float64)
    if np.isnan(X).any():
        raise ValueError(f"{path}: NaN feature value")
    return names, X, np.array(labels, dtype=np.int64), strains
