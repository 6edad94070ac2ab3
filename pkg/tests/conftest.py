import pytest

from diskmon import ext4, fixtures


SMALL_SPEC = fixtures.FixtureSpec(
    device_size=64 << 20,
    block_size=4096,
    files=(
        fixtures.FileSpec(size=50000, content_seed=1, fragments=1,
                          content_kind="text"),
        fixtures.FileSpec(size=30000, content_seed=2, fragments=3,
                          content_kind="text"),
        fixtures.FileSpec(size=8192, content_seed=3, fragments=2,
                          content_kind="random"),
        fixtures.FileSpec(size=0, content_seed=4, content_kind="zeros"),
        fixtures.FileSpec(size=120000, content_seed=5, fragments=6,
                          content_kind="text"),
        fixtures.FileSpec(size=4096, content_seed=6, content_kind="zeros"),
    ),
    seed=42,
)


@pytest.fixture(scope="session")
def small_fixture():
    image, manifest = fixtures.build_fixture_image(SMALL_SPEC)
    return image, manifest


@pytest.fixture()
def small_image(small_fixture):
    image, _ = small_fixture
    return bytearray(image)  # private mutable copy


@pytest.fixture(scope="session")
def small_manifest(small_fixture):
    return small_fixture[1]


@pytest.fixture()
def small_catalog(small_image):
    return ext4.load_catalog(small_image)
