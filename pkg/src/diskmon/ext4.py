"""ext4 on-disk structure parsing and the live filesystem catalog.

Implements the active phase (full scan of superblock, group descriptors and
inode tables) and the passive phase (incremental catalog updates driven by
observed writes).  Only extent-mapped inodes are supported; legacy
indirect-block inodes raise :class:`UnsupportedFeature` during the active
scan and degrade to metadata-only deltas during passive updates.

All multi-byte fields are little-endian, per the ext4 on-disk convention.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .errors import (
    BadMagic,
    ExtentCorrupt,
    InconsistentDescriptor,
    Truncated,
    UnsupportedFeature,
)

SUPERBLOCK_OFFSET = 1024
SUPERBLOCK_SIZE = 1024
EXT4_MAGIC = 0xEF53

INCOMPAT_FILETYPE = 0x0002
INCOMPAT_EXTENTS = 0x0040
INCOMPAT_64BIT = 0x0080
SUPPORTED_INCOMPAT = INCOMPAT_FILETYPE | INCOMPAT_EXTENTS | INCOMPAT_64BIT

EXTENT_HEADER_MAGIC = 0xF30A
EXTENTS_FLAG = 0x00080000
MAX_EXTENT_DEPTH = 5

S_IFMT = 0xF000
S_IFREG = 0x8000
S_IFDIR = 0x4000

ROOT_INODE = 2
JOURNAL_INODE = 8


class RegionKind(enum.Enum):
    SUPERBLOCK = "superblock"
    GDT = "gdt"
    RESERVED_GDT = "reserved_gdt"
    BLOCK_BITMAP = "block_bitmap"
    INODE_BITMAP = "inode_bitmap"
    INODE_TABLE = "inode_table"
    DATA = "data"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class Span:
    """A maximal run of bytes sharing one region label."""

    start: int
    length: int
    kind: RegionKind
    owner: int | None = None  # owning inode for DATA spans, when known

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class SuperblockInfo:
    block_size: int
    blocks_count: int
    inodes_count: int
    blocks_per_group: int
    inodes_per_group: int
    inode_size: int
    first_data_block: int
    group_count: int
    magic: int
    feature_incompat: int
    descriptor_size: int
    reserved_gdt_blocks: int
    first_inode: int

    @property
    def device_size(self) -> int:
        return self.blocks_count * self.block_size


@dataclass
class GroupDescriptor:
    group_index: int
    block_bitmap_block: int
    inode_bitmap_block: int
    inode_table_block: int
    inode_table_span: int


@dataclass(frozen=True)
class Extent:
    logical_block: int
    physical_start: int
    length: int


@dataclass
class InodeRecord:
    inode_number: int
    allocated: bool
    size_bytes: int
    mode: int
    links_count: int
    uses_extents: bool
    extents: list[Extent] = field(default_factory=list)

    def same_state(self, other: "InodeRecord") -> bool:
        return (
            self.allocated == other.allocated
            and self.size_bytes == other.size_bytes
            and self.mode == other.mode
            and self.links_count == other.links_count
            and self.uses_extents == other.uses_extents
            and self.extents == other.extents
        )


@dataclass
class CatalogDelta:
    inodes_allocated: list[int] = field(default_factory=list)
    inodes_deallocated: list[int] = field(default_factory=list)
    inodes_metadata_changed: list[int] = field(default_factory=list)
    blocks_reowned: int = 0

    def is_empty(self) -> bool:
        return not (
            self.inodes_allocated
            or self.inodes_deallocated
            or self.inodes_metadata_changed
            or self.blocks_reowned
        )


class _ByteReader:
    """Adapts a bytes-like object to the read(offset, length) interface."""

    def __init__(self, data):
        self._data = data

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self._data[offset : offset + length])

    @property
    def capacity(self) -> int:
        return len(self._data)


def _as_reader(image):
    if hasattr(image, "read") and hasattr(image, "capacity"):
        return image
    return _ByteReader(image)


def _is_power_of(n: int, p: int) -> bool:
    if n < 1:
        return False
    while n % p == 0:
        n //= p
    return n == 1


def group_has_super(group: int) -> bool:
    """sparse_super placement: backups live in groups 0, 1 and powers of 3, 5, 7."""
    if group in (0, 1):
        return True
    return _is_power_of(group, 3) or _is_power_of(group, 5) or _is_power_of(group, 7)


def parse_superblock(image) -> SuperblockInfo:
    reader = _as_reader(image)
    if reader.capacity < SUPERBLOCK_OFFSET + SUPERBLOCK_SIZE:
        raise Truncated(
            f"image is {reader.capacity} bytes, need at least "
            f"{SUPERBLOCK_OFFSET + SUPERBLOCK_SIZE}"
        )
    raw = reader.read(SUPERBLOCK_OFFSET, SUPERBLOCK_SIZE)

    (magic,) = struct.unpack_from("<H", raw, 0x38)
    if magic != EXT4_MAGIC:
        raise BadMagic(f"superblock magic 0x{magic:04X} != 0x{EXT4_MAGIC:04X}")

    inodes_count, blocks_count = struct.unpack_from("<II", raw, 0x0)
    (first_data_block,) = struct.unpack_from("<I", raw, 0x14)
    (log_block_size,) = struct.unpack_from("<I", raw, 0x18)
    (blocks_per_group,) = struct.unpack_from("<I", raw, 0x20)
    (inodes_per_group,) = struct.unpack_from("<I", raw, 0x28)
    (first_inode,) = struct.unpack_from("<I", raw, 0x54)
    (inode_size,) = struct.unpack_from("<H", raw, 0x58)
    (feature_incompat,) = struct.unpack_from("<I", raw, 0x60)
    (reserved_gdt_blocks,) = struct.unpack_from("<H", raw, 0xCE)
    (desc_size,) = struct.unpack_from("<H", raw, 0xFE)

    unsupported = feature_incompat & ~SUPPORTED_INCOMPAT
    if unsupported:
        raise UnsupportedFeature(f"incompat feature bits 0x{unsupported:X}")

    block_size = 1024 << log_block_size
    if block_size not in (1024, 2048, 4096):
        raise UnsupportedFeature(f"block size {block_size}")
    if inode_size < 128 or inode_size & (inode_size - 1):
        raise UnsupportedFeature(f"inode size {inode_size}")
    if blocks_per_group == 0 or inodes_per_group == 0:
        raise BadMagic("zero blocks_per_group or inodes_per_group")

    if feature_incompat & INCOMPAT_64BIT:
        descriptor_size = desc_size if desc_size >= 64 else 64
    else:
        descriptor_size = desc_size if desc_size else 32

    group_count = -(-(blocks_count - first_data_block) // blocks_per_group)
    return SuperblockInfo(
        block_size=block_size,
        blocks_count=blocks_count,
        inodes_count=inodes_count,
        blocks_per_group=blocks_per_group,
        inodes_per_group=inodes_per_group,
        inode_size=inode_size,
        first_data_block=first_data_block,
        group_count=group_count,
        magic=magic,
        feature_incompat=feature_incompat,
        descriptor_size=descriptor_size,
        reserved_gdt_blocks=reserved_gdt_blocks,
        first_inode=first_inode if first_inode else 11,
    )


def gdt_block_count(sb: SuperblockInfo) -> int:
    return -(-(sb.group_count * sb.descriptor_size) // sb.block_size)


def parse_group_descriptors(image, sb: SuperblockInfo) -> list[GroupDescriptor]:
    reader = _as_reader(image)
    gdt_start = (sb.first_data_block + 1) * sb.block_size
    table_len = sb.group_count * sb.descriptor_size
    if gdt_start + table_len > reader.capacity:
        raise Truncated("group descriptor table extends past end of image")
    raw = reader.read(gdt_start, table_len)

    span = -(-(sb.inodes_per_group * sb.inode_size) // sb.block_size)
    descriptors = []
    for g in range(sb.group_count):
        base = g * sb.descriptor_size
        block_bitmap, inode_bitmap, inode_table = struct.unpack_from("<III", raw, base)
        if sb.descriptor_size >= 64:
            hi = struct.unpack_from("<III", raw, base + 0x20)
            if any(hi):
                raise UnsupportedFeature(
                    f"group {g} uses 64-bit block addresses above 2^32"
                )
        for name, blk in (
            ("block bitmap", block_bitmap),
            ("inode bitmap", inode_bitmap),
            ("inode table", inode_table),
        ):
            if blk >= sb.blocks_count:
                raise InconsistentDescriptor(
                    f"group {g} {name} block {blk} >= blocks_count {sb.blocks_count}"
                )
        if inode_table + span > sb.blocks_count:
            raise InconsistentDescriptor(f"group {g} inode table runs off the device")
        descriptors.append(
            GroupDescriptor(
                group_index=g,
                block_bitmap_block=block_bitmap,
                inode_bitmap_block=inode_bitmap,
                inode_table_block=inode_table,
                inode_table_span=span,
            )
        )
    return descriptors


def _parse_extent_node(reader, raw: bytes, block_size: int, depth_left: int,
                       visited: set[int]) -> list[Extent]:
    magic, entries, _max, depth = struct.unpack_from("<HHHH", raw, 0)
    if magic != EXTENT_HEADER_MAGIC:
        raise ExtentCorrupt(f"extent header magic 0x{magic:04X}")
    if depth_left < 0 or depth > MAX_EXTENT_DEPTH:
        raise ExtentCorrupt("extent tree too deep")
    max_entries = (len(raw) - 12) // 12
    if entries > max_entries:
        raise ExtentCorrupt(f"extent node claims {entries} entries, fits {max_entries}")

    extents: list[Extent] = []
    if depth == 0:
        for i in range(entries):
            off = 12 + i * 12
            logical, length, start_hi, start_lo = struct.unpack_from("<IHHI", raw, off)
            if start_hi:
                raise ExtentCorrupt("extent physical block above 2^32")
            length &= 0x7FFF  # high bit marks an unwritten extent
            if length == 0:
                raise ExtentCorrupt("zero-length extent")
            extents.append(Extent(logical, start_lo, length))
    else:
        for i in range(entries):
            off = 12 + i * 12
            logical, leaf_lo, leaf_hi, _ = struct.unpack_from("<IIHH", raw, off)
            if leaf_hi:
                raise ExtentCorrupt("extent index block above 2^32")
            if leaf_lo in visited:
                raise ExtentCorrupt("extent tree cycle")
            visited.add(leaf_lo)
            child = reader.read(leaf_lo * block_size, block_size)
            if len(child) < block_size:
                raise ExtentCorrupt("extent index points past end of device")
            extents.extend(
                _parse_extent_node(reader, child, block_size, depth_left - 1, visited)
            )
    return extents


def parse_inode(reader, sb: SuperblockInfo, inode_number: int, raw: bytes,
                allocated: bool = True) -> InodeRecord:
    """Parse one inode-table entry.  Extent trees deeper than the inline node
    are resolved through ``reader``."""
    mode, = struct.unpack_from("<H", raw, 0x0)
    size_lo, = struct.unpack_from("<I", raw, 0x4)
    links, = struct.unpack_from("<H", raw, 0x1A)
    flags, = struct.unpack_from("<I", raw, 0x20)
    size_hi, = struct.unpack_from("<I", raw, 0x6C)
    size_bytes = (size_hi << 32) | size_lo

    uses_extents = bool(flags & EXTENTS_FLAG)
    record = InodeRecord(
        inode_number=inode_number,
        allocated=allocated,
        size_bytes=size_bytes,
        mode=mode,
        links_count=links,
        uses_extents=uses_extents,
    )
    ftype = mode & S_IFMT
    if allocated and ftype in (S_IFREG, S_IFDIR) and size_bytes > 0:
        if not uses_extents:
            raise UnsupportedFeature(
                f"inode {inode_number} uses legacy indirect block mapping"
            )
        i_block = raw[0x28 : 0x28 + 60]
        record.extents = _parse_extent_node(
            reader, i_block, sb.block_size, MAX_EXTENT_DEPTH, set()
        )
    return record


@dataclass
class FilesystemCatalog:
    superblock: SuperblockInfo
    descriptors: list[GroupDescriptor]
    inodes: dict[int, InodeRecord]
    block_owner: dict[int, int]
    meta_regions: dict[int, RegionKind]
    device: object  # read(offset, length) source for extent-tree traversal
    corruption_events: int = 0

    def allocated_inodes(self) -> list[int]:
        return sorted(n for n, r in self.inodes.items() if r.allocated)

    def file_inodes(self) -> list[int]:
        return sorted(
            n
            for n, r in self.inodes.items()
            if r.allocated and n >= self.superblock.first_inode
            and (r.mode & S_IFMT) == S_IFREG
        )


def _static_meta_regions(sb: SuperblockInfo,
                         descriptors: list[GroupDescriptor]) -> dict[int, RegionKind]:
    """Block-number -> region map for all non-data blocks, tiling the device."""
    regions: dict[int, RegionKind] = {}
    gdt_blocks = gdt_block_count(sb)
    for g in range(sb.group_count):
        if not group_has_super(g):
            continue
        base = sb.first_data_block + g * sb.blocks_per_group
        regions[base] = RegionKind.SUPERBLOCK
        for b in range(base + 1, base + 1 + gdt_blocks):
            regions[b] = RegionKind.GDT
        for b in range(base + 1 + gdt_blocks,
                       base + 1 + gdt_blocks + sb.reserved_gdt_blocks):
            regions[b] = RegionKind.RESERVED_GDT
    for d in descriptors:
        regions[d.block_bitmap_block] = RegionKind.BLOCK_BITMAP
        regions[d.inode_bitmap_block] = RegionKind.INODE_BITMAP
        for b in range(d.inode_table_block, d.inode_table_block + d.inode_table_span):
            regions[b] = RegionKind.INODE_TABLE
    return regions


def _inode_location(sb: SuperblockInfo, descriptors: list[GroupDescriptor],
                    inode_number: int) -> int:
    """Byte offset of an inode-table entry on the device."""
    idx = inode_number - 1
    group = idx // sb.inodes_per_group
    slot = idx % sb.inodes_per_group
    table = descriptors[group].inode_table_block
    return table * sb.block_size + slot * sb.inode_size


def scan_inode_tables(image, sb: SuperblockInfo,
                      descriptors: list[GroupDescriptor]) -> FilesystemCatalog:
    reader = _as_reader(image)
    catalog = FilesystemCatalog(
        superblock=sb,
        descriptors=descriptors,
        inodes={},
        block_owner={},
        meta_regions=_static_meta_regions(sb, descriptors),
        device=reader,
    )
    for d in descriptors:
        bitmap = reader.read(d.inode_bitmap_block * sb.block_size, sb.block_size)
        base_inode = d.group_index * sb.inodes_per_group + 1
        table_off = d.inode_table_block * sb.block_size
        for slot in range(sb.inodes_per_group):
            if not bitmap[slot >> 3] & (1 << (slot & 7)):
                continue
            inode_number = base_inode + slot
            if inode_number > sb.inodes_count:
                break
            raw = reader.read(table_off + slot * sb.inode_size, sb.inode_size)
            record = parse_inode(reader, sb, inode_number, raw)
            catalog.inodes[inode_number] = record
            for ext in record.extents:
                for blk in range(ext.physical_start, ext.physical_start + ext.length):
                    catalog.block_owner[blk] = inode_number
    return catalog


def load_catalog(image) -> FilesystemCatalog:
    """Parse superblock, descriptors and inode tables in one step."""
    sb = parse_superblock(image)
    descriptors = parse_group_descriptors(image, sb)
    return scan_inode_tables(image, sb, descriptors)


def _block_region(catalog: FilesystemCatalog, block: int) -> tuple[RegionKind, int | None]:
    kind = catalog.meta_regions.get(block)
    if kind is not None:
        return kind, None
    if block >= catalog.superblock.blocks_count:
        return RegionKind.UNCLASSIFIED, None
    return RegionKind.DATA, catalog.block_owner.get(block)


def classify_offset(catalog: FilesystemCatalog, offset: int, length: int) -> list[Span]:
    """Partition [offset, offset+length) into maximal labeled spans."""
    if length <= 0:
        return []
    bs = catalog.superblock.block_size
    spans: list[Span] = []
    pos = offset
    end = offset + length
    while pos < end:
        block = pos // bs
        kind, owner = _block_region(catalog, block)
        chunk_end = min((block + 1) * bs, end)
        if spans and spans[-1].kind is kind and spans[-1].owner == owner:
            prev = spans[-1]
            spans[-1] = Span(prev.start, chunk_end - prev.start, kind, owner)
        else:
            spans.append(Span(pos, chunk_end - pos, kind, owner))
        pos = chunk_end
    return spans


def _set_inode_state(catalog: FilesystemCatalog, record: InodeRecord,
                     delta: CatalogDelta) -> None:
    """Install a re-parsed inode record, reporting the transition in the delta."""
    number = record.inode_number
    old = catalog.inodes.get(number)
    was_allocated = old is not None and old.allocated

    if old is not None and record.same_state(old):
        return

    reowned = 0
    if old is not None:
        for ext in old.extents:
            for blk in range(ext.physical_start, ext.physical_start + ext.length):
                if catalog.block_owner.get(blk) == number:
                    del catalog.block_owner[blk]
                    reowned += 1
    if record.allocated:
        for ext in record.extents:
            for blk in range(ext.physical_start, ext.physical_start + ext.length):
                if catalog.block_owner.get(blk) != number:
                    reowned += 1
                catalog.block_owner[blk] = number
        catalog.inodes[number] = record
    elif number in catalog.inodes:
        del catalog.inodes[number]

    delta.blocks_reowned += reowned
    if record.allocated and not was_allocated:
        delta.inodes_allocated.append(number)
    elif was_allocated and not record.allocated:
        delta.inodes_deallocated.append(number)
    else:
        delta.inodes_metadata_changed.append(number)


def _reparse_inode_from_bytes(catalog: FilesystemCatalog, inode_number: int,
                              raw: bytes, delta: CatalogDelta) -> None:
    sb = catalog.superblock
    entry_is_live = any(raw[:2]) or any(raw[0x1A:0x1C])  # nonzero mode or links
    if not entry_is_live:
        record = InodeRecord(inode_number, False, 0, 0, 0, False)
        _set_inode_state(catalog, record, delta)
        return
    try:
        record = parse_inode(catalog.device, sb, inode_number, raw)
    except (ExtentCorrupt, UnsupportedFeature):
        # Hostile or legacy data: keep monitoring, record a metadata-only change.
        catalog.corruption_events += 1
        old = catalog.inodes.get(inode_number)
        record = InodeRecord(
            inode_number,
            True,
            old.size_bytes if old else 0,
            struct.unpack_from("<H", raw, 0)[0],
            struct.unpack_from("<H", raw, 0x1A)[0],
            False,
        )
        if old is None or not record.same_state(old):
            catalog.inodes[inode_number] = record
            if old is None or not old.allocated:
                delta.inodes_allocated.append(inode_number)
            else:
                delta.inodes_metadata_changed.append(inode_number)
        return
    _set_inode_state(catalog, record, delta)


def apply_write_update(catalog: FilesystemCatalog, offset: int, old_bytes: bytes,
                       new_bytes: bytes) -> CatalogDelta:
    """Update the catalog for one observed write and report inode transitions.

    Call after the write has been committed, so extent-tree traversal through
    the attached device sees the post-write state.  ``old_bytes`` is the
    device content the write replaced.
    """
    assert len(old_bytes) == len(new_bytes)
    sb = catalog.superblock
    bs = sb.block_size
    delta = CatalogDelta()
    if old_bytes == new_bytes:
        return delta

    end = offset + len(new_bytes)
    bitmap_alloc: list[int] = []
    bitmap_dealloc: list[int] = []
    # Pass 1: inode table overlaps reparse whole entries contained in the write.
    for d in catalog.descriptors:
        table_start = d.inode_table_block * bs
        table_end = table_start + d.inode_table_span * bs
        lo = max(offset, table_start)
        hi = min(end, table_end)
        if lo >= hi:
            continue
        first_slot = -(-(lo - table_start) // sb.inode_size)
        last_slot = (hi - table_start) // sb.inode_size  # exclusive
        # Partially covered leading entry degrades to metadata_changed.
        if (lo - table_start) % sb.inode_size and lo > table_start:
            part = (lo - table_start) // sb.inode_size
            number = d.group_index * sb.inodes_per_group + part + 1
            o = (table_start + part * sb.inode_size) - offset
            if old_bytes[max(o, 0) : hi - offset] != new_bytes[max(o, 0) : hi - offset]:
                if number not in delta.inodes_metadata_changed:
                    delta.inodes_metadata_changed.append(number)
        for slot in range(first_slot, last_slot):
            number = d.group_index * sb.inodes_per_group + slot + 1
            if number > sb.inodes_count:
                break
            o = (table_start + slot * sb.inode_size) - offset
            raw_new = new_bytes[o : o + sb.inode_size]
            raw_old = old_bytes[o : o + sb.inode_size]
            if raw_new == raw_old:
                continue
            _reparse_inode_from_bytes(catalog, number, raw_new, delta)

    # Pass 2: inode bitmap overlaps; the bitmap is authoritative on conflict.
    for d in catalog.descriptors:
        bm_start = d.inode_bitmap_block * bs
        lo = max(offset, bm_start)
        hi = min(end, bm_start + bs)
        if lo >= hi:
            continue
        base_inode = d.group_index * sb.inodes_per_group + 1
        for byte_off in range(lo - bm_start, hi - bm_start):
            ob = old_bytes[byte_off + (bm_start - offset)]
            nb = new_bytes[byte_off + (bm_start - offset)]
            if ob == nb:
                continue
            for bit in range(8):
                slot = byte_off * 8 + bit
                if slot >= sb.inodes_per_group:
                    break
                number = base_inode + slot
                if number > sb.inodes_count:
                    break
                was = bool(ob & (1 << bit))
                now = bool(nb & (1 << bit))
                if was == now:
                    continue
                existing = catalog.inodes.get(number)
                cat_allocated = existing is not None and existing.allocated
                if now == cat_allocated:
                    continue  # catalog already agrees (e.g. table write seen first)
                if now:
                    loc = _inode_location(sb, catalog.descriptors, number)
                    raw = catalog.device.read(loc, sb.inode_size)
                    bitmap_delta = CatalogDelta()
                    _reparse_inode_from_bytes(catalog, number, raw, bitmap_delta)
                    existing = catalog.inodes.get(number)
                    if existing is None:
                        catalog.inodes[number] = InodeRecord(
                            number, True, 0, 0, 0, False
                        )
                    delta.blocks_reowned += bitmap_delta.blocks_reowned
                    bitmap_alloc.append(number)
                else:
                    freed = InodeRecord(number, False, 0, 0, 0, False)
                    bitmap_delta = CatalogDelta()
                    _set_inode_state(catalog, freed, bitmap_delta)
                    delta.blocks_reowned += bitmap_delta.blocks_reowned
                    bitmap_dealloc.append(number)

    # Bitmap wins within one write: its transitions override the table pass.
    allocated = [
        n for n in dict.fromkeys(delta.inodes_allocated + bitmap_alloc)
        if n not in bitmap_dealloc
    ]
    deallocated = [
        n for n in dict.fromkeys(delta.inodes_deallocated + bitmap_dealloc)
        if n not in bitmap_alloc
    ]
    delta.inodes_allocated = allocated
    delta.inodes_deallocated = deallocated
    delta.inodes_metadata_changed = [
        n for n in dict.fromkeys(delta.inodes_metadata_changed)
        if n not in allocated and n not in deallocated
    ]
    return delta
