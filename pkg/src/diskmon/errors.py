"""Exception hierarchy shared across the package."""


class DiskmonError(Exception):
    """Base class for all package errors."""


class BadMagic(DiskmonError):
    """The image does not carry the ext4 superblock signature."""


class Truncated(DiskmonError):
    """The image is shorter than a structure it must contain."""


class UnsupportedFeature(DiskmonError):
    """The filesystem uses an on-disk feature this parser does not implement."""


class InconsistentDescriptor(DiskmonError):
    """A group descriptor references blocks outside the device."""


class ExtentCorrupt(DiskmonError):
    """An extent tree has a bad header magic or a depth cycle."""


class EmptyBuffer(DiskmonError):
    """An entropy computation was attempted on zero bytes."""


class LengthMismatch(DiskmonError):
    """Paired buffers differ in length."""


class WrongCount(DiskmonError):
    """A window aggregation received the wrong number of records."""


class FeatureMismatch(DiskmonError):
    """A vector's feature layout does not match the model's."""


class DegenerateDataset(DiskmonError):
    """Training data contains a single class."""


class SchemaViolation(DiskmonError):
    """A model file has unknown fields or out-of-range indices."""


class VersionMismatch(DiskmonError):
    """A model file was written by an incompatible format version."""


class OutOfRange(DiskmonError):
    """A probability or index fell outside its valid range."""


class ProtocolViolation(DiskmonError):
    """An NBD peer sent a malformed handshake or request."""


class AbortedByClient(DiskmonError):
    """The NBD client aborted negotiation before selecting an export."""


class SpecTooLarge(DiskmonError):
    """A fixture spec does not fit in the requested device size."""


class EmptyManifest(DiskmonError):
    """A workload was asked to run against a fixture with no files."""
