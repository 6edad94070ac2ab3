"""Deterministic synthetic disk workloads.

A workload is a seeded trace of NBD requests against a fixture image:
benign profiles read files, rewrite them with text, or copy them into new
inodes; malicious profiles emulate ransomware by reading a file and
overwriting it with high-entropy bytes, fully, partially, or interleaved
with benign reads.  Traces replay through a real NBD client connection in
``run_scenario``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ext4, fixtures, haltctl, metrics, nbd
from .errors import EmptyManifest

PROFILES = (
    "benign-read",
    "benign-copy",
    "benign-mixed",
    "encrypt-full",
    "encrypt-partial",
    "encrypt-intermittent",
)

BENIGN_PROFILES = tuple(p for p in PROFILES if p.startswith("benign"))
MALICIOUS_PROFILES = tuple(p for p in PROFILES if p.startswith("encrypt"))

MAX_REQUEST = 65536
PARTIAL_HEAD_BYTES = 65536


@dataclass(frozen=True)
class TraceOp:
    op: str  # read | write
    offset: int
    length: int
    payload: bytes | None = None
    label: str = "benign"
    strain_id: str = ""


@dataclass
class _TraceBuilder:
    image: bytearray
    manifest: fixtures.FixtureManifest
    rng: np.random.Generator
    ops: list[TraceOp] = field(default_factory=list)

    def __post_init__(self):
        self.sb = ext4.parse_superblock(self.image)
        self.descriptors = ext4.parse_group_descriptors(self.image, self.sb)
        self.bs = self.sb.block_size
        self._alloc = fixtures._Allocator(list(self.manifest.free_blocks))
        self._free_inodes = list(self.manifest.free_inodes)
        self._shadow: dict[int, bytearray] = {}
        self._dirents = [
            (f.inode_number, b"f%04d" % i)
            for i, f in enumerate(self.manifest.files)
        ]
        self._copies = 0

    def _emit(self, op, offset, length, payload=None, label="benign", strain=""):
        self.ops.append(TraceOp(op, offset, length, payload, label, strain))

    def _shadow_block(self, block: int) -> bytearray:
        if block not in self._shadow:
            self._shadow[block] = bytearray(
                self.image[block * self.bs : (block + 1) * self.bs]
            )
        return self._shadow[block]

    def mount_preamble(self) -> None:
        self._emit("read", ext4.SUPERBLOCK_OFFSET, ext4.SUPERBLOCK_SIZE)
        gdt_start = (self.sb.first_data_block + 1) * self.bs
        self._emit("read", gdt_start, self.bs)

    def _file_ranges(self, f: fixtures.ManifestFile, limit: int | None = None):
        """(device_offset, length) chunks covering the file's extents."""
        remaining = f.size if limit is None else min(f.size, limit)
        for e in f.extents:
            if remaining <= 0:
                break
            span = min(e.length * self.bs, remaining)
            start = e.physical_start * self.bs
            pos = 0
            while pos < span:
                n = min(MAX_REQUEST, span - pos)
                yield start + pos, n
                pos += n
            remaining -= span

    def read_file(self, f, limit=None, label="benign", strain=""):
        for off, n in self._file_ranges(f, limit):
            self._emit("read", off, n, label=label, strain=strain)

    def rewrite_file_text(self, f, seed: int):
        """Benign in-place rewrite with fresh low-entropy content."""
        payload = fixtures.file_payload(f.size, seed, "text")
        pos = 0
        for off, n in self._file_ranges(f):
            self._emit("write", off, n, payload[pos : pos + n])
            pos += n

    def encrypt_file(self, f, strain: str, limit: int | None = None):
        """Read-then-overwrite with high-entropy bytes, chunk by chunk."""
        for off, n in self._file_ranges(f, limit):
            self._emit("read", off, n, label="malicious", strain=strain)
            blob = self.rng.integers(0, 256, n, dtype=np.uint8).tobytes()
            self._emit("write", off, n, blob, label="malicious", strain=strain)

    def copy_file(self, src: fixtures.ManifestFile, label="benign", strain=""):
        """Benign copy: new data blocks, inode entry, bitmap bits, dirent."""
        if not self._free_inodes:
            return
        ino = self._free_inodes.pop(0)
        nblocks = -(-src.size // self.bs)
        try:
            run = self._alloc.take_run(nblocks)
        except Exception:
            self._free_inodes.insert(0, ino)
            return
        extents = [ext4.Extent(0, run[0], nblocks)]
        payload = fixtures.file_payload(src.size, src.content_seed,
                                        src.content_kind)

        self.read_file(src, label=label, strain=strain)
        pos = 0
        base = run[0] * self.bs
        while pos < src.size:
            n = min(MAX_REQUEST, src.size - pos)
            self._emit("write", base + pos, n, payload[pos : pos + n],
                       label=label, strain=strain)
            pos += n

        entry, _ = fixtures.pack_file_inode(extents, src.size, self.bs)
        entry = entry.ljust(self.sb.inode_size, b"\0")
        table_off = ext4._inode_location(self.sb, self.descriptors, ino)
        self._emit("write", table_off, len(entry), entry, label=label,
                   strain=strain)

        group = (ino - 1) // self.sb.inodes_per_group
        slot = (ino - 1) % self.sb.inodes_per_group
        ib = self.descriptors[group].inode_bitmap_block
        bitmap = self._shadow_block(ib)
        bitmap[slot >> 3] |= 1 << (slot & 7)
        self._emit("write", ib * self.bs, self.bs, bytes(bitmap), label=label,
                   strain=strain)

        for blk in run:
            g = (blk - self.sb.first_data_block) // self.sb.blocks_per_group
            bslot = (blk - self.sb.first_data_block) % self.sb.blocks_per_group
            bb = self.descriptors[g].block_bitmap_block
            bmap = self._shadow_block(bb)
            bmap[bslot >> 3] |= 1 << (bslot & 7)
        groups = {(blk - self.sb.first_data_block) // self.sb.blocks_per_group
                  for blk in run}
        for g in sorted(groups):
            bb = self.descriptors[g].block_bitmap_block
            self._emit("write", bb * self.bs, self.bs,
                       bytes(self._shadow_block(bb)), label=label,
                       strain=strain)

        self._copies += 1
        self._dirents.append((ino, b"c%04d" % self._copies))
        dir_block = fixtures._root_dir_block(self.bs, self._dirents)
        self._emit("write", self.manifest.root_dir_block * self.bs, self.bs,
                   dir_block, label=label, strain=strain)


def generate_trace(image: bytearray, manifest: fixtures.FixtureManifest,
                   profile: str, seed: int = 0,
                   repeats: int = 1) -> list[TraceOp]:
    """Deterministic request trace for one workload profile.

    ``repeats`` loops the profile body with a fresh file permutation each
    pass, for traces long enough to fill large action windows.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    if not manifest.files:
        raise EmptyManifest("fixture has no files to act on")
    rng = np.random.default_rng(seed)
    b = _TraceBuilder(image, manifest, rng)
    b.mount_preamble()
    files = list(manifest.files)
    strain = profile if profile.startswith("encrypt") else ""

    for _ in range(repeats):
        order = list(rng.permutation(len(files)))
        if profile == "benign-read":
            for _ in range(3):
                for i in rng.permutation(len(files)):
                    b.read_file(files[i])
        elif profile == "benign-copy":
            for i in order:
                b.copy_file(files[i])
        elif profile == "benign-mixed":
            for k, i in enumerate(order):
                f = files[i]
                kind = k % 3
                if kind == 0:
                    b.read_file(f)
                elif kind == 1:
                    b.rewrite_file_text(f, seed=int(rng.integers(1 << 30)))
                else:
                    b.copy_file(f)
        elif profile == "encrypt-full":
            for i in order:
                b.encrypt_file(files[i], strain)
        elif profile == "encrypt-partial":
            for i in order:
                b.encrypt_file(files[i], strain, limit=PARTIAL_HEAD_BYTES)
        elif profile == "encrypt-intermittent":
            for k, i in enumerate(order):
                b.encrypt_file(files[i], strain)
                victim = files[int(order[(k + 1) % len(order)])]
                b.read_file(victim, limit=2 * b.bs)
    return b.ops


DEFAULT_FIXTURE = fixtures.FixtureSpec(
    device_size=32 << 20,
    files=tuple(
        fixtures.FileSpec(
            size=12288 + 4096 * (i % 7),
            content_seed=100 + i,
            fragments=1 + i % 3,
            content_kind="text" if i % 4 else "random",
        )
        for i in range(12)
    ),
    seed=7,
)


@dataclass
class ScenarioResult:
    profile: str
    trace_length: int
    requests_sent: int
    writes_refused: int
    pipeline: nbd.MonitorPipeline
    manifest: fixtures.FixtureManifest

    @property
    def records(self) -> list[metrics.ActionRecord]:
        return self.pipeline.records

    @property
    def halted(self) -> bool:
        return self.pipeline.halted

    def windows(self, config: metrics.WindowConfig) -> list[metrics.WindowVector]:
        return metrics.stream_windows(self.records, config)

    def stats(self) -> haltctl.DetectionStats:
        return self.pipeline.stats()


def run_scenario(profile: str, *, spec: fixtures.FixtureSpec = DEFAULT_FIXTURE,
                 seed: int = 0, repeats: int = 1, mode: str = "test",
                 model=None, window: metrics.WindowConfig | None = None,
                 policy: haltctl.HaltPolicy | None = None,
                 compute_entropy: bool = True,
                 prelude_profile: str | None = None,
                 prelude_actions: int = 0,
                 prelude_repeats: int = 1) -> ScenarioResult:
    """Replay one profile against a pristine fixture over a live NBD session.

    ``prelude_profile`` prepends the first ``prelude_actions`` requests of
    another profile's trace, e.g. benign warm-up traffic before an attack.
    """
    image, manifest = fixtures.build_fixture_image(spec)
    trace = generate_trace(image, manifest, profile, seed=seed, repeats=repeats)
    if prelude_profile:
        prelude = generate_trace(image, manifest, prelude_profile,
                                 seed=seed + 1, repeats=prelude_repeats)
        trace = prelude[:prelude_actions] + trace

    backend = nbd.MemoryBackend(image)
    catalog = ext4.load_catalog(backend)
    config = nbd.PipelineConfig(
        mode=mode,
        window=window or metrics.WindowConfig(1, 1),
        model=model,
        policy=policy or haltctl.HaltPolicy(),
        compute_entropy=compute_entropy,
    )
    pipeline = nbd.MonitorPipeline(catalog, config)
    server = nbd.NbdServer(backend, pipeline)
    server.start()
    client = nbd.NbdClient(*server.address)
    client.negotiate()

    refused = 0
    sent = 0
    try:
        for op in trace:
            pipeline.set_label(op.label, op.strain_id)
            if op.op == "read":
                err, _ = client.read(op.offset, op.length)
            else:
                err = client.write(op.offset, op.payload)
                if err == nbd.EPERM:
                    refused += 1
            sent += 1
    finally:
        client.disconnect()
        server.join()

    return ScenarioResult(
        profile=profile,
        trace_length=len(trace),
        requests_sent=sent,
        writes_refused=refused,
        pipeline=pipeline,
        manifest=manifest,
    )
