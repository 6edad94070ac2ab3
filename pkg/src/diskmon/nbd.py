"""Userspace NBD endpoint with per-request filesystem monitoring.

Serves a disk image over the Network Block Device protocol (fixed-newstyle
negotiation, simple replies), feeding every request through the metric
pipeline.  In deploy mode the pipeline scores action windows and a latched
halt flag makes the server refuse further writes.

Wire format per the public NBD protocol specification; all integers are
big-endian on the wire.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from . import ext4, haltctl, metrics
from .detector import EnsembleModel, predict_score
from .errors import AbortedByClient, ProtocolViolation

NBDMAGIC = 0x4E42444D41474943  # b"NBDMAGIC"
IHAVEOPT = 0x49484156454F5054  # b"IHAVEOPT"
OPT_REPLY_MAGIC = 0x3E889045565A9
REQUEST_MAGIC = 0x25609513
SIMPLE_REPLY_MAGIC = 0x67446698

FLAG_FIXED_NEWSTYLE = 1 << 0
FLAG_NO_ZEROES = 1 << 1
CLIENT_FLAG_FIXED_NEWSTYLE = 1 << 0
CLIENT_FLAG_NO_ZEROES = 1 << 1

OPT_EXPORT_NAME = 1
OPT_ABORT = 2
OPT_LIST = 3

REP_ACK = 1
REP_SERVER = 2
REP_ERR_UNSUP = (1 << 31) | 1

CMD_READ = 0
CMD_WRITE = 1
CMD_DISC = 2
CMD_FLUSH = 3

EXPORT_FLAG_HAS_FLAGS = 1 << 0
EXPORT_FLAG_SEND_FLUSH = 1 << 2

EPERM = 1
EIO = 5
EINVAL = 22


class MemoryBackend:
    """In-memory disk backend; read-after-write returns the written bytes."""

    def __init__(self, data: bytearray):
        self._data = data

    @property
    def capacity(self) -> int:
        return len(self._data)

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self._data[offset : offset + length])

    def write(self, offset: int, data: bytes) -> None:
        self._data[offset : offset + len(data)] = data

    def flush(self) -> None:
        pass

    def snapshot(self) -> bytes:
        return bytes(self._data)


@dataclass
class PipelineConfig:
    mode: str = "test"  # test | deploy
    window: metrics.WindowConfig = field(
        default_factory=lambda: metrics.WindowConfig(1, 1)
    )
    model: EnsembleModel | None = None
    policy: haltctl.HaltPolicy = field(default_factory=haltctl.HaltPolicy)
    compute_entropy: bool = True
    halt_reads: bool = False
    timing: str = "synthetic"  # synthetic | measured


def synthetic_duration(op: str, length: int) -> int:
    """Deterministic per-request service time in microseconds.

    A size-proportional stand-in for measured latency so seeded runs
    produce identical timing counters.  Writes cost about twice reads.
    """
    if op == "read":
        return 10 + length // 1024
    return 15 + length // 512


class MonitorPipeline:
    """Serialized per-session monitoring state: catalog, counters, windows,
    halt vote, and damage accounting."""

    def __init__(self, catalog: ext4.FilesystemCatalog, config: PipelineConfig):
        self.catalog = catalog
        self.config = config
        self.counters = metrics.NbdCounters()
        self.records: list[metrics.ActionRecord] = []
        self.buffer = haltctl.DecisionBuffer(policy=config.policy)
        self.tracker = haltctl.FileDamageTracker(
            file_sizes={
                n: r.size_bytes
                for n, r in catalog.inodes.items()
                if (r.mode & ext4.S_IFMT) == ext4.S_IFREG
            }
        )
        self.reads = 0
        self.writes = 0
        self.first_action_time: float | None = None
        self.halt_time: float | None = None
        self._label = "benign"
        self._strain = ""
        self._pending: list[metrics.ActionRecord] = []
        self._actions_seen = 0
        if config.mode == "deploy" and config.model is None:
            raise ValueError("deploy mode requires a model")

    @property
    def halted(self) -> bool:
        return self.buffer.halted

    def set_label(self, label: str, strain_id: str = "") -> None:
        self._label = label
        self._strain = strain_id

    def on_action(self, op: str, offset: int, length: int,
                  old_bytes: bytes | None, new_bytes: bytes | None,
                  duration_us: int) -> metrics.ActionRecord:
        now = haltctl.wall_clock()
        if self.first_action_time is None:
            self.first_action_time = now
        before = self.counters.snapshot()
        self.counters.record(op, offset, length, duration_us)
        if op == "read":
            self.reads += 1
        else:
            self.writes += 1

        damage = None
        if op == "write" and old_bytes is not None:
            damage = self._span_damage(offset, old_bytes, new_bytes)
        record = metrics.build_action_record(
            op, offset, length, self.catalog, self.counters, before,
            old_bytes=old_bytes, new_bytes=new_bytes,
            timestamp_us=int(now * 1e6),
            label=self._label, strain_id=self._strain,
            compute_entropy_deltas=self.config.compute_entropy,
        )
        self.records.append(record)
        if damage:
            for inode, changed in damage.items():
                self.tracker.record_write(inode, changed)

        self._actions_seen += 1
        if self.config.mode == "deploy":
            self._pending.append(record)
            w, s = self.config.window.window, self.config.window.stride
            if len(self._pending) > w:
                del self._pending[: len(self._pending) - w]
            if (
                self._actions_seen >= w
                and (self._actions_seen - w) % s == 0
                and not self.halted
            ):
                vec = metrics.aggregate_window(list(self._pending))
                score = predict_score(self.config.model, vec.values)
                if self.buffer.record_decision(score):
                    self.halt_time = haltctl.wall_clock()
        return record

    def _span_damage(self, offset, old_bytes, new_bytes) -> dict[int, int]:
        """Bytes actually changed per owning inode, span by span."""
        damage: dict[int, int] = {}
        for span in ext4.classify_offset(self.catalog, offset, len(new_bytes)):
            if span.kind is not ext4.RegionKind.DATA or span.owner is None:
                continue
            lo = span.start - offset
            hi = lo + span.length
            changed = sum(
                a != b for a, b in zip(old_bytes[lo:hi], new_bytes[lo:hi])
            )
            if changed:
                damage[span.owner] = damage.get(span.owner, 0) + changed
        return damage

    def stats(self) -> haltctl.DetectionStats:
        return haltctl.detection_stats(
            self.buffer, self.tracker, self.reads, self.writes,
            self.config.window.window, self.config.window.stride,
            self.first_action_time, self.halt_time,
        )


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

def _duration(pipeline: MonitorPipeline, op: str, length: int, t0: float) -> int:
    if pipeline.config.timing == "measured":
        return int((time.monotonic() - t0) * 1e6)
    return synthetic_duration(op, length)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return buf


@dataclass
class SessionSummary:
    requests: int
    halted: bool
    stats: haltctl.DetectionStats | None


class NbdServer:
    """Single-export, single-session NBD server."""

    def __init__(self, backend: MemoryBackend, pipeline: MonitorPipeline | None,
                 export_name: str = "disk", host: str = "127.0.0.1",
                 port: int = 0):
        self.backend = backend
        self.pipeline = pipeline
        self.export_name = export_name
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(2)
        self.address = self._listener.getsockname()
        self._thread: threading.Thread | None = None
        self.summary: SessionSummary | None = None
        self.error: BaseException | None = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def join(self, timeout: float = 30.0) -> None:
        if self._thread:
            self._thread.join(timeout)
        self._listener.close()
        if self.error is not None:
            raise self.error

    def _run(self) -> None:
        try:
            conn, _addr = self._listener.accept()
            # One client at a time: refuse a second connection outright.
            refuser = threading.Thread(
                target=self._refuse_extra_connections, daemon=True
            )
            refuser.start()
            with conn:
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                try:
                    self.negotiate(conn)
                except AbortedByClient:
                    self.summary = SessionSummary(0, False, None)
                    return
                self.summary = self.serve(conn)
        except BaseException as exc:  # surfaced on join()
            self.error = exc

    def _refuse_extra_connections(self) -> None:
        try:
            while True:
                extra, _ = self._listener.accept()
                extra.close()
        except OSError:
            pass

    def negotiate(self, conn: socket.socket) -> None:
        conn.sendall(struct.pack(">QQH", NBDMAGIC, IHAVEOPT,
                                 FLAG_FIXED_NEWSTYLE | FLAG_NO_ZEROES))
        (client_flags,) = struct.unpack(">I", _recv_exact(conn, 4))
        no_zeroes = bool(client_flags & CLIENT_FLAG_NO_ZEROES)
        while True:
            magic, option, length = struct.unpack(">QII", _recv_exact(conn, 16))
            if magic != IHAVEOPT:
                raise ProtocolViolation(f"bad option magic 0x{magic:016X}")
            data = _recv_exact(conn, length) if length else b""
            if option == OPT_EXPORT_NAME:
                flags = EXPORT_FLAG_HAS_FLAGS | EXPORT_FLAG_SEND_FLUSH
                reply = struct.pack(">QH", self.backend.capacity, flags)
                if not no_zeroes:
                    reply += bytes(124)
                conn.sendall(reply)
                return
            if option == OPT_ABORT:
                self._opt_reply(conn, option, REP_ACK)
                raise AbortedByClient("client aborted negotiation")
            if option == OPT_LIST:
                name = self.export_name.encode()
                self._opt_reply(conn, option, REP_SERVER,
                                struct.pack(">I", len(name)) + name)
                self._opt_reply(conn, option, REP_ACK)
            else:
                self._opt_reply(conn, option, REP_ERR_UNSUP)

    @staticmethod
    def _opt_reply(conn, option: int, rep: int, data: bytes = b"") -> None:
        conn.sendall(struct.pack(">QIII", OPT_REPLY_MAGIC, option, rep,
                                 len(data)) + data)

    def serve(self, conn: socket.socket) -> SessionSummary:
        requests = 0
        capacity = self.backend.capacity
        pipeline = self.pipeline
        while True:
            header = _recv_exact(conn, 28)
            magic, _cmd_flags, cmd, handle, offset, length = struct.unpack(
                ">IHHQQI", header
            )
            if magic != REQUEST_MAGIC:
                raise ProtocolViolation(f"bad request magic 0x{magic:08X}")
            requests += 1
            if cmd == CMD_DISC:
                break
            if cmd == CMD_FLUSH:
                self.backend.flush()
                self._simple_reply(conn, handle, 0)
                continue
            if cmd == CMD_READ:
                if offset + length > capacity:
                    self._simple_reply(conn, handle, EINVAL)
                    continue
                if pipeline and pipeline.halted and pipeline.config.halt_reads:
                    self._simple_reply(conn, handle, EPERM)
                    continue
                t0 = time.monotonic()
                data = self.backend.read(offset, length)
                if pipeline:
                    dur = _duration(pipeline, "read", length, t0)
                    pipeline.on_action("read", offset, length, None, None, dur)
                self._simple_reply(conn, handle, 0, data)
            elif cmd == CMD_WRITE:
                payload = _recv_exact(conn, length)
                if offset + length > capacity:
                    self._simple_reply(conn, handle, EINVAL)
                    continue
                if pipeline and pipeline.halted:
                    self._simple_reply(conn, handle, EPERM)
                    continue
                t0 = time.monotonic()
                old = self.backend.read(offset, length) if pipeline else None
                self.backend.write(offset, payload)
                if pipeline:
                    dur = _duration(pipeline, "write", length, t0)
                    pipeline.on_action("write", offset, length, old, payload, dur)
                self._simple_reply(conn, handle, 0)
            else:
                self._simple_reply(conn, handle, EINVAL)
        stats = pipeline.stats() if pipeline else None
        return SessionSummary(requests, pipeline.halted if pipeline else False,
                              stats)

    @staticmethod
    def _simple_reply(conn, handle: int, error: int, data: bytes = b"") -> None:
        conn.sendall(struct.pack(">IIQ", SIMPLE_REPLY_MAGIC, error, handle) + data)


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class NbdClient:
    """Minimal fixed-newstyle client used by tests and the scenario runner."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._handle = 0
        self.export_size: int | None = None

    def negotiate(self, export_name: str = "disk") -> int:
        magic, ihaveopt, flags = struct.unpack(">QQH", _recv_exact(self._sock, 18))
        if magic != NBDMAGIC or ihaveopt != IHAVEOPT:
            raise ProtocolViolation("bad server greeting")
        if not flags & FLAG_FIXED_NEWSTYLE:
            raise ProtocolViolation("server is not fixed-newstyle")
        self._sock.sendall(struct.pack(
            ">I", CLIENT_FLAG_FIXED_NEWSTYLE | CLIENT_FLAG_NO_ZEROES
        ))
        name = export_name.encode()
        self._sock.sendall(struct.pack(">QII", IHAVEOPT, OPT_EXPORT_NAME,
                                       len(name)) + name)
        size, _eflags = struct.unpack(">QH", _recv_exact(self._sock, 10))
        self.export_size = size
        return size

    def abort(self) -> None:
        self._sock.sendall(struct.pack(">I", CLIENT_FLAG_FIXED_NEWSTYLE))
        # consume greeting is the caller's job when using abort() directly

    def _request(self, cmd: int, offset: int, length: int,
                 payload: bytes = b"") -> tuple[int, bytes]:
        self._handle += 1
        self._sock.sendall(struct.pack(">IHHQQI", REQUEST_MAGIC, 0, cmd,
                                       self._handle, offset, length) + payload)
        magic, error, handle = struct.unpack(">IIQ", _recv_exact(self._sock, 16))
        if magic != SIMPLE_REPLY_MAGIC or handle != self._handle:
            raise ProtocolViolation("bad simple reply")
        data = b""
        if cmd == CMD_READ and error == 0:
            data = _recv_exact(self._sock, length)
        return error, data

    def read(self, offset: int, length: int) -> tuple[int, bytes]:
        return self._request(CMD_READ, offset, length)

    def write(self, offset: int, data: bytes) -> int:
        error, _ = self._request(CMD_WRITE, offset, len(data), data)
        return error

    def flush(self) -> int:
        error, _ = self._request(CMD_FLUSH, 0, 0)
        return error

    def disconnect(self) -> None:
        try:
            self._sock.sendall(struct.pack(">IHHQQI", REQUEST_MAGIC, 0,
                                           CMD_DISC, 0, 0, 0))
        finally:
            self._sock.close()


# ---------------------------------------------------------------------------
# Throughput benchmark
# ---------------------------------------------------------------------------

def bench_throughput(image, pattern: str, total_bytes: int, request_size: int,
                     model: EnsembleModel | None = None,
                     config: metrics.WindowConfig | None = None,
                     repeats: int = 1) -> dict[str, float]:
    """MB/s for raw serving, serving + logging, and + logging & inference.

    Runs the request path in-process (no socket) so the measurement isolates
    the metric pipeline cost.  Every mode starts from an identical pristine
    copy of ``image`` so the three figures are comparable: replaying the same
    writes over already-written state would make later modes artificially
    cheap (unchanged bytes short-circuit the catalog update).  With
    ``repeats`` above one each mode reports its best pass, which damps
    scheduler noise.
    """
    if total_bytes <= 0:
        return {"raw": 0.0, "logging": 0.0, "logging_inference": 0.0}
    op = "read" if pattern == "read" else "write"
    window = config or metrics.WindowConfig(20, 20)
    payload = bytes(range(256)) * (request_size // 256 + 1)
    payload = payload[:request_size]
    pristine = bytes(image)

    def run_once(config: PipelineConfig | None) -> float:
        backend = MemoryBackend(bytearray(pristine))
        pipeline = None
        if config is not None:
            pipeline = MonitorPipeline(ext4.load_catalog(backend), config)
        offset = 0
        done = 0
        start = time.perf_counter()
        while done < total_bytes:
            if offset + request_size > backend.capacity:
                offset = 0
            if op == "read":
                t0 = time.monotonic()
                backend.read(offset, request_size)
                if pipeline:
                    pipeline.on_action("read", offset, request_size, None, None,
                                       int((time.monotonic() - t0) * 1e6))
            else:
                old = backend.read(offset, request_size) if pipeline else None
                backend.write(offset, payload)
                if pipeline:
                    pipeline.on_action("write", offset, request_size, old,
                                       payload, 0)
            offset += request_size
            done += request_size
        elapsed = time.perf_counter() - start
        return total_bytes / elapsed / 1e6

    def run(config: PipelineConfig | None) -> float:
        return max(run_once(config) for _ in range(max(1, repeats)))

    results = {"raw": run(None)}
    results["logging"] = run(PipelineConfig(mode="test", window=window))
    if model is not None:
        results["logging_inference"] = run(
            PipelineConfig(mode="deploy", window=window, model=model)
        )
    else:
        results["logging_inference"] = results["logging"]
    return results
