import pytest

from diskmon import ext4, fixtures, metrics
from diskmon.errors import SpecTooLarge


def test_build_is_deterministic():
    spec = fixtures.FixtureSpec(
        device_size=16 << 20,
        files=(fixtures.FileSpec(size=10000, content_seed=9),),
        seed=5,
    )
    a, _ = fixtures.build_fixture_image(spec)
    b, _ = fixtures.build_fixture_image(spec)
    assert bytes(a) == bytes(b)


def test_payload_entropy_by_kind():
    zeros = fixtures.file_payload(8192, 1, "zeros")
    text = fixtures.file_payload(8192, 1, "text")
    rand = fixtures.file_payload(8192, 1, "random")
    assert metrics.compute_entropy(zeros) == 0.0
    assert metrics.compute_entropy(text) < 5.2
    assert metrics.compute_entropy(rand) > 7.9


def test_payload_unknown_kind():
    with pytest.raises(ValueError):
        fixtures.file_payload(16, 0, "executable")


def test_file_content_lands_on_extents(small_image, small_manifest):
    f = small_manifest.files[0]
    payload = fixtures.file_payload(f.size, f.content_seed, f.content_kind)
    pos = 0
    for e in f.extents:
        chunk = payload[pos : pos + e.length * 4096]
        start = e.physical_start * 4096
        assert bytes(small_image[start : start + len(chunk)]) == chunk
        pos += e.length * 4096


def test_fragment_count_honored(small_manifest):
    by_inode = {f.inode_number: f for f in small_manifest.files}
    sizes = {f.inode_number: len(f.extents) for f in small_manifest.files}
    # File 5 asked for 6 fragments over 30 blocks.
    f5 = small_manifest.files[4]
    assert sizes[f5.inode_number] == 6
    # Fragments are non-adjacent on disk.
    for f in by_inode.values():
        for a, b in zip(f.extents, f.extents[1:]):
            assert b.physical_start > a.physical_start + a.length


def test_backup_superblocks_present():
    # 1024-byte blocks give blocks_per_group=8192, so a 96 MiB device spans
    # 12 groups and backups land in groups 1, 3, 5, 7 and 9.
    spec = fixtures.FixtureSpec(device_size=96 << 20, block_size=1024)
    image, manifest = fixtures.build_fixture_image(spec)
    assert manifest.group_count == 12
    sb = ext4.parse_superblock(image)
    for g in range(manifest.group_count):
        base = (sb.first_data_block + g * sb.blocks_per_group) * 1024
        if ext4.group_has_super(g):
            backup = ext4.parse_superblock(
                bytes(1024) + image[base : base + 64 * 1024]
                if g else image
            )
            assert backup.blocks_count == sb.blocks_count


def test_free_lists_are_consistent(small_image, small_manifest):
    catalog = ext4.load_catalog(small_image)
    allocated = set(catalog.block_owner)
    assert not allocated & set(small_manifest.free_blocks)
    assert not set(catalog.inodes) & set(small_manifest.free_inodes)


def test_root_directory_lists_files(small_image, small_manifest):
    block = bytes(
        small_image[small_manifest.root_dir_block * 4096 :][:4096]
    )
    for i in range(len(small_manifest.files)):
        assert b"f%04d" % i in block


def test_too_many_blocks_rejected():
    spec = fixtures.FixtureSpec(
        device_size=1 << 20,
        files=(fixtures.FileSpec(size=8 << 20),),
    )
    with pytest.raises(SpecTooLarge):
        fixtures.build_fixture_image(spec)


def test_bad_block_size_rejected():
    with pytest.raises(ValueError):
        fixtures.build_fixture_image(fixtures.FixtureSpec(
            device_size=1 << 20, block_size=512))
