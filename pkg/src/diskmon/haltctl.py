"""Rolling-buffer halt vote and session detection statistics.

The disk halts once at least ``malicious_threshold`` of the last
``buffer_capacity`` classifications were malicious.  The halt is a latch:
it never clears within a session.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

from .errors import OutOfRange


@dataclass(frozen=True)
class HaltPolicy:
    buffer_capacity: int = 5
    malicious_threshold: int = 4
    probability_cutoff: float = 0.5

    def __post_init__(self):
        if not 1 <= self.malicious_threshold <= self.buffer_capacity:
            raise ValueError(
                f"threshold {self.malicious_threshold} not in "
                f"[1, {self.buffer_capacity}]"
            )


@dataclass
class DecisionBuffer:
    policy: HaltPolicy = field(default_factory=HaltPolicy)
    halted: bool = False
    decisions_total: int = 0
    malicious_total: int = 0
    decisions_at_halt: int | None = None
    malicious_at_halt: int | None = None
    max_ring_malicious: int = 0

    def __post_init__(self):
        self._ring: deque[bool] = deque(maxlen=self.policy.buffer_capacity)

    def record_decision(self, probability: float) -> bool:
        """Push one classification; returns the (possibly newly set) latch."""
        if not 0.0 <= probability <= 1.0:
            raise OutOfRange(f"probability {probability}")
        decision = probability >= self.policy.probability_cutoff
        self._ring.append(decision)
        self.decisions_total += 1
        if decision:
            self.malicious_total += 1
        self.max_ring_malicious = max(self.max_ring_malicious, sum(self._ring))
        if not self.halted and sum(self._ring) >= self.policy.malicious_threshold:
            self.halted = True
            self.decisions_at_halt = self.decisions_total
            self.malicious_at_halt = self.malicious_total
        return self.halted

    @property
    def ring_malicious(self) -> int:
        return sum(self._ring)


@dataclass
class FileDamageTracker:
    """Per-inode damage accounting for the detection-latency report.

    ``record_write`` is fed every data-block write span before the halt,
    with the number of bytes actually changed in that span.
    """

    file_sizes: dict[int, int] = field(default_factory=dict)
    bytes_overwritten: dict[int, int] = field(default_factory=dict)

    def record_write(self, inode: int, bytes_changed: int) -> None:
        if bytes_changed > 0:
            self.bytes_overwritten[inode] = (
                self.bytes_overwritten.get(inode, 0) + bytes_changed
            )

    @property
    def files_affected(self) -> int:
        return len(self.bytes_overwritten)

    @property
    def ma_hw(self) -> int:
        return sum(self.bytes_overwritten.values())

    @property
    def ma_os(self) -> int:
        return sum(
            self.file_sizes.get(inode, 0) for inode in self.bytes_overwritten
        )


@dataclass
class DetectionStats:
    halted: bool
    dtd: int | None  # decisions until halt
    db: int | None   # benign decisions before halt
    dm: int | None   # malicious decisions before halt
    atd: int | None  # actions observed before halt (stride accounting)
    atd_window: int | None  # DTD x window, the published accounting
    reads: int
    writes: int
    files_affected: int
    ma_os: int
    ma_hw: int
    ttd_ms: float | None

    def summary(self) -> str:
        def fmt(v):
            return "-" if v is None else (f"{v:.1f}" if isinstance(v, float) else str(v))

        cols = [
            ("halted", "yes" if self.halted else "no"),
            ("DTD", fmt(self.dtd)),
            ("DB", fmt(self.db)),
            ("DM", fmt(self.dm)),
            ("ATD", fmt(self.atd)),
            ("ATD(DTDxW)", fmt(self.atd_window)),
            ("reads", fmt(self.reads)),
            ("writes", fmt(self.writes)),
            ("FA", fmt(self.files_affected)),
            ("MA-OS", fmt(self.ma_os)),
            ("MA-HW", fmt(self.ma_hw)),
            ("TTD_ms", fmt(self.ttd_ms)),
        ]
        return "\n".join(f"{k}: {v}" for k, v in cols)


def detection_stats(buffer: DecisionBuffer, tracker: FileDamageTracker,
                    reads: int, writes: int, window: int, stride: int,
                    first_action_time: float | None = None,
                    halt_time: float | None = None) -> DetectionStats:
    """Assemble the end-of-session detection report."""
    if buffer.halted:
        dtd = buffer.decisions_at_halt
        dm = buffer.malicious_at_halt
        db = dtd - dm
        atd = dtd * stride
        atd_window = dtd * window
        ttd = None
        if first_action_time is not None and halt_time is not None:
            ttd = (halt_time - first_action_time) * 1000.0
    else:
        dtd = db = dm = atd = atd_window = ttd = None
    return DetectionStats(
        halted=buffer.halted,
        dtd=dtd,
        db=db,
        dm=dm,
        atd=atd,
        atd_window=atd_window,
        reads=reads,
        writes=writes,
        files_affected=tracker.files_affected,
        ma_os=tracker.ma_os,
        ma_hw=tracker.ma_hw,
        ttd_ms=ttd,
    )


def wall_clock() -> float:
    return time.monotonic()
