"""Offline classifier sweep over action-window datasets.

Reads window CSVs produced by the monitoring pipeline, grid-searches six
classifier families, and exports boosted-tree winners to the portable
JSON model format the inference engine loads.
"""

from .data import WindowDataset, read_window_csv, split_dataset
from .export import NotExportable, export_model
from .grids import FAMILIES, GRIDS, grid_cells, grid_size
from .sweep import (
    CellResult,
    SweepSpec,
    best_cell,
    build_estimator,
    run_sweep,
    write_results_csv,
)

__all__ = [
    "CellResult",
    "FAMILIES",
    "GRIDS",
    "NotExportable",
    "SweepSpec",
    "WindowDataset",
    "best_cell",
    "build_estimator",
    "export_model",
    "grid_cells",
    "grid_size",
    "read_window_csv",
    "run_sweep",
    "split_dataset",
    "write_results_csv",
]
