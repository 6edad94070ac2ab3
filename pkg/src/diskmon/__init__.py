"""Off-host block device monitoring with filesystem-aware detection."""

from . import detector, errors, ext4, fixtures, haltctl, metrics, nbd

__all__ = [
    "detector",
    "errors",
    "ext4",
    "fixtures",
    "haltctl",
    "metrics",
    "nbd",
]

__version__ = "0.1.0"
