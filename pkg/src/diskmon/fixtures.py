"""Deterministic construction of small, valid ext4 disk images.

The builder emits a flat byte image plus a ground-truth manifest (inode
numbers, sizes, extent layouts) so parser results can be checked exactly.
Images are MB-scale: enough structure to exercise multi-group layouts,
fragmented extent trees and directory data without gigabyte fixtures.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ext4
from .errors import SpecTooLarge

INODE_SIZE = 256
DESC_SIZE = 32
RESERVED_GDT_BLOCKS = 4
INODES_PER_GROUP = 1024
FIRST_NON_RESERVED_INODE = 11

_MODE_REG = ext4.S_IFREG | 0o644
_MODE_DIR = ext4.S_IFDIR | 0o755


@dataclass(frozen=True)
class FileSpec:
    size: int
    content_seed: int = 0
    fragments: int = 1
    content_kind: str = "text"  # zeros | text | random


@dataclass(frozen=True)
class FixtureSpec:
    device_size: int
    block_size: int = 4096
    files: tuple[FileSpec, ...] = ()
    seed: int = 0


@dataclass
class ManifestFile:
    inode_number: int
    size: int
    extents: list[ext4.Extent]
    content_kind: str
    content_seed: int

    @property
    def block_list(self) -> list[int]:
        blocks = []
        for ext in self.extents:
            blocks.extend(range(ext.physical_start, ext.physical_start + ext.length))
        return blocks


@dataclass
class FixtureManifest:
    spec: FixtureSpec
    block_size: int
    blocks_count: int
    group_count: int
    inodes_count: int
    root_dir_block: int
    files: list[ManifestFile] = field(default_factory=list)
    free_blocks: list[int] = field(default_factory=list)
    free_inodes: list[int] = field(default_factory=list)

    def file_by_inode(self, inode_number: int) -> ManifestFile:
        for f in self.files:
            if f.inode_number == inode_number:
                return f
        raise KeyError(inode_number)


def pack_extent_tree_inline(extents: list[ext4.Extent]) -> bytes:
    """Inline (depth 0) extent node for an inode's 60-byte block area."""
    assert len(extents) <= 4
    out = struct.pack("<HHHHI", ext4.EXTENT_HEADER_MAGIC, len(extents), 4, 0, 0)
    for e in extents:
        out += struct.pack("<IHHI", e.logical_block, e.length, 0, e.physical_start)
    return out.ljust(60, b"\0")


def pack_extent_index_root(index_block: int, first_logical: int) -> bytes:
    out = struct.pack("<HHHHI", ext4.EXTENT_HEADER_MAGIC, 1, 4, 1, 0)
    out += struct.pack("<IIHH", first_logical, index_block, 0, 0)
    return out.ljust(60, b"\0")


def pack_extent_leaf_block(extents: list[ext4.Extent], block_size: int) -> bytes:
    max_entries = (block_size - 12) // 12
    assert len(extents) <= max_entries
    out = struct.pack("<HHHHI", ext4.EXTENT_HEADER_MAGIC, len(extents),
                      max_entries, 0, 0)
    for e in extents:
        out += struct.pack("<IHHI", e.logical_block, e.length, 0, e.physical_start)
    return out.ljust(block_size, b"\0")


def pack_inode(mode: int, size: int, links: int, i_block: bytes = b"",
               uses_extents: bool = True) -> bytes:
    raw = bytearray(INODE_SIZE)
    struct.pack_into("<H", raw, 0x0, mode)
    struct.pack_into("<I", raw, 0x4, size & 0xFFFFFFFF)
    struct.pack_into("<H", raw, 0x1A, links)
    struct.pack_into("<I", raw, 0x20, ext4.EXTENTS_FLAG if uses_extents else 0)
    raw[0x28 : 0x28 + len(i_block)] = i_block
    struct.pack_into("<I", raw, 0x6C, size >> 32)
    return bytes(raw)


def pack_file_inode(extents: list[ext4.Extent], size: int, block_size: int,
                    mode: int = _MODE_REG) -> tuple[bytes, bytes | None]:
    """Inode entry bytes, plus a leaf extent block when the tree needs depth 1.

    When a leaf block is needed its physical location is extents[-1] metadata;
    the caller allocates the index block and passes it via pack_inode_indexed.
    """
    if len(extents) <= 4:
        return pack_inode(mode, size, 1, pack_extent_tree_inline(extents)), None
    raise ValueError("use pack_inode_indexed for more than 4 extents")


def pack_inode_indexed(extents: list[ext4.Extent], size: int, block_size: int,
                       index_block: int, mode: int = _MODE_REG) -> tuple[bytes, bytes]:
    root = pack_extent_index_root(index_block, extents[0].logical_block)
    leaf = pack_extent_leaf_block(extents, block_size)
    return pack_inode(mode, size, 1, root), leaf


def file_payload(size: int, seed: int, kind: str) -> bytes:
    """Deterministic file content. 'text' is low-entropy, 'random' is ~8 bits."""
    rng = np.random.default_rng(seed)
    if kind == "zeros":
        return bytes(size)
    if kind == "random":
        return rng.integers(0, 256, size, dtype=np.uint8).tobytes()
    if kind == "text":
        alphabet = np.frombuffer(b" etaoinshrdlucmfwypvbgkjqxz.,\n01", dtype=np.uint8)
        weights = np.linspace(8.0, 1.0, len(alphabet))
        weights /= weights.sum()
        idx = rng.choice(len(alphabet), size=size, p=weights)
        return alphabet[idx].tobytes()
    raise ValueError(f"unknown content kind {kind!r}")


def _pack_dirent(inode: int, name: bytes, rec_len: int, ftype: int) -> bytes:
    return struct.pack("<IHBB", inode, rec_len, len(name), ftype) + name.ljust(
        rec_len - 8, b"\0"
    )


def _root_dir_block(block_size: int, files: list[tuple[int, bytes]]) -> bytes:
    out = b""
    out += _pack_dirent(ext4.ROOT_INODE, b".", 12, 2)
    entries = [(ext4.ROOT_INODE, b"..", 2)] + [(ino, nm, 1) for ino, nm in files]
    for i, (ino, name, ftype) in enumerate(entries):
        need = 8 + len(name)
        rec_len = (need + 3) & ~3
        remaining = block_size - len(out)
        if i == len(entries) - 1 or remaining - rec_len < 12:
            # Last entry absorbs the rest of the block.
            out += _pack_dirent(ino, name, remaining, ftype)
            break
        out += _pack_dirent(ino, name, rec_len, ftype)
    return out.ljust(block_size, b"\0")


class _Allocator:
    """First-fit block allocator over the data regions of all groups."""

    def __init__(self, free_blocks: list[int]):
        self._free = sorted(free_blocks)

    def take_run(self, length: int) -> list[int]:
        """Allocate `length` contiguous blocks; raises SpecTooLarge if none fit."""
        free = self._free
        i = 0
        while i < len(free):
            j = i
            while (
                j + 1 < len(free)
                and free[j + 1] == free[j] + 1
                and j + 1 - i < length
            ):
                j += 1
            if j - i + 1 >= length:
                run = free[i : i + length]
                del free[i : i + length]
                return run
            i = j + 1
        raise SpecTooLarge("no contiguous run of %d free blocks" % length)

    def take_one(self) -> int:
        if not self._free:
            raise SpecTooLarge("out of free blocks")
        return self._free.pop(0)

    def skip_one(self) -> None:
        """Burn one block to force a gap between extents."""
        if self._free:
            self._free.pop(0)

    def remaining(self) -> list[int]:
        return list(self._free)


def _superblock_bytes(blocks_count, inodes_count, first_data_block, log_block_size,
                      blocks_per_group, inodes_per_group, backup_group=0) -> bytes:
    raw = bytearray(ext4.SUPERBLOCK_SIZE)
    struct.pack_into("<I", raw, 0x0, inodes_count)
    struct.pack_into("<I", raw, 0x4, blocks_count)
    struct.pack_into("<I", raw, 0x14, first_data_block)
    struct.pack_into("<I", raw, 0x18, log_block_size)
    struct.pack_into("<I", raw, 0x20, blocks_per_group)
    struct.pack_into("<I", raw, 0x28, inodes_per_group)
    struct.pack_into("<H", raw, 0x38, ext4.EXT4_MAGIC)
    struct.pack_into("<I", raw, 0x54, FIRST_NON_RESERVED_INODE)
    struct.pack_into("<H", raw, 0x58, INODE_SIZE)
    struct.pack_into("<H", raw, 0x5A, backup_group)
    struct.pack_into("<I", raw, 0x60, ext4.INCOMPAT_FILETYPE | ext4.INCOMPAT_EXTENTS)
    struct.pack_into("<H", raw, 0xCE, RESERVED_GDT_BLOCKS)
    struct.pack_into("<H", raw, 0xFE, DESC_SIZE)
    return bytes(raw)


def build_fixture_image(spec: FixtureSpec) -> tuple[bytearray, FixtureManifest]:
    bs = spec.block_size
    if bs not in (1024, 2048, 4096):
        raise ValueError(f"block size {bs}")
    blocks_count = spec.device_size // bs
    first_data_block = 1 if bs == 1024 else 0
    blocks_per_group = bs * 8
    group_count = -(-(blocks_count - first_data_block) // blocks_per_group)
    inodes_per_group = INODES_PER_GROUP
    inodes_count = group_count * inodes_per_group
    gdt_blocks = -(-(group_count * DESC_SIZE) // bs)
    table_span = inodes_per_group * INODE_SIZE // bs

    image = bytearray(blocks_count * bs)

    # Per-group layout: [super + GDT + reserved GDT]? bitmap, bitmap, inode table.
    descriptors = []
    free_blocks: list[int] = []
    used = set(range(first_data_block))  # boot block, when present
    for g in range(group_count):
        base = first_data_block + g * blocks_per_group
        cursor = base
        if ext4.group_has_super(g):
            cursor += 1 + gdt_blocks + RESERVED_GDT_BLOCKS
        block_bitmap = cursor
        inode_bitmap = cursor + 1
        inode_table = cursor + 2
        cursor = inode_table + table_span
        if cursor > blocks_count:
            raise SpecTooLarge("device too small for group metadata")
        descriptors.append((g, block_bitmap, inode_bitmap, inode_table))
        used.update(range(base, cursor))
        group_end = min(base + blocks_per_group, blocks_count)
        free_blocks.extend(range(cursor, group_end))

    alloc = _Allocator(free_blocks)

    # Root directory data block.
    root_dir_block = alloc.take_one()

    # Files.
    manifest_files: list[ManifestFile] = []
    inode_images: dict[int, bytes] = {}
    next_inode = FIRST_NON_RESERVED_INODE
    dirents: list[tuple[int, bytes]] = []
    for i, fs in enumerate(spec.files):
        if next_inode > inodes_count:
            raise SpecTooLarge("out of inodes")
        nblocks = -(-fs.size // bs) if fs.size else 0
        fragments = max(1, min(fs.fragments, nblocks)) if nblocks else 0
        extents: list[ext4.Extent] = []
        if nblocks:
            per = nblocks // fragments
            sizes = [per] * fragments
            for k in range(nblocks - per * fragments):
                sizes[k] += 1
            logical = 0
            for length in sizes:
                run = alloc.take_run(length)
                extents.append(ext4.Extent(logical, run[0], length))
                logical += length
                alloc.skip_one()
        payload = file_payload(fs.size, fs.content_seed, fs.content_kind)
        pos = 0
        for e in extents:
            chunk = payload[pos : pos + e.length * bs]
            start = e.physical_start * bs
            image[start : start + len(chunk)] = chunk
            pos += e.length * bs
        if len(extents) <= 4:
            entry, _ = pack_file_inode(extents, fs.size, bs)
        else:
            index_block = alloc.take_one()
            entry, leaf = pack_inode_indexed(extents, fs.size, bs, index_block)
            image[index_block * bs : (index_block + 1) * bs] = leaf
        inode_images[next_inode] = entry
        manifest_files.append(
            ManifestFile(next_inode, fs.size, extents, fs.content_kind,
                         fs.content_seed)
        )
        dirents.append((next_inode, b"f%04d" % i))
        next_inode += 1

    image[root_dir_block * bs : (root_dir_block + 1) * bs] = _root_dir_block(
        bs, dirents
    )

    # Reserved inodes: minimal live entries; root gets the directory block.
    for ino in range(1, FIRST_NON_RESERVED_INODE):
        if ino == ext4.ROOT_INODE:
            root_extents = [ext4.Extent(0, root_dir_block, 1)]
            inode_images[ino] = pack_inode(
                _MODE_DIR, bs, 2, pack_extent_tree_inline(root_extents)
            )
        else:
            inode_images[ino] = pack_inode(0, 0, 1, b"", uses_extents=False)

    # Inode tables and inode bitmaps.
    allocated_inodes = sorted(inode_images)
    for g, _bb, ib, it in descriptors:
        bitmap = bytearray(bs)
        lo = g * inodes_per_group + 1
        for ino in allocated_inodes:
            if lo <= ino < lo + inodes_per_group:
                slot = ino - lo
                bitmap[slot >> 3] |= 1 << (slot & 7)
                off = it * bs + slot * INODE_SIZE
                image[off : off + INODE_SIZE] = inode_images[ino]
        # Pad bits beyond the inode count of this group.
        for slot in range(inodes_per_group, bs * 8):
            bitmap[slot >> 3] |= 1 << (slot & 7)
        image[ib * bs : (ib + 1) * bs] = bitmap

    # Block bitmaps: used = everything the allocator no longer holds free.
    remaining = set(alloc.remaining())
    for g, bb, _ib, _it in descriptors:
        base = first_data_block + g * blocks_per_group
        bitmap = bytearray(bs)
        for slot in range(bs * 8):
            blk = base + slot
            if blk >= blocks_count or slot >= blocks_per_group:
                bitmap[slot >> 3] |= 1 << (slot & 7)
            elif blk not in remaining:
                bitmap[slot >> 3] |= 1 << (slot & 7)
        image[bb * bs : (bb + 1) * bs] = bitmap

    # Superblock and GDT, primary plus backups in the sparse_super groups.
    log_block_size = {1024: 0, 2048: 1, 4096: 2}[bs]
    gdt = bytearray(gdt_blocks * bs)
    for g, bb, ib, it in descriptors:
        struct.pack_into("<III", gdt, g * DESC_SIZE, bb, ib, it)
    for g in range(group_count):
        if not ext4.group_has_super(g):
            continue
        base = first_data_block + g * blocks_per_group
        sb_bytes = _superblock_bytes(
            blocks_count, inodes_count, first_data_block, log_block_size,
            blocks_per_group, inodes_per_group, backup_group=g,
        )
        if g == 0:
            image[ext4.SUPERBLOCK_OFFSET : ext4.SUPERBLOCK_OFFSET + len(sb_bytes)] = (
                sb_bytes
            )
        else:
            image[base * bs : base * bs + len(sb_bytes)] = sb_bytes
        image[(base + 1) * bs : (base + 1) * bs + len(gdt)] = gdt

    manifest = FixtureManifest(
        spec=spec,
        block_size=bs,
        blocks_count=blocks_count,
        group_count=group_count,
        inodes_count=inodes_count,
        root_dir_block=root_dir_block,
        files=manifest_files,
        free_blocks=alloc.remaining(),
        free_inodes=list(range(next_inode, min(next_inode + 4096, inodes_count + 1))),
    )
    return image, manifest
