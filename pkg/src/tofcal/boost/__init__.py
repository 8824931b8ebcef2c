from .engine import (
    DEPTH_GRID, LR_GRID, BinMapper, GridEntry, HyperParams, TrainLog, Tree, TreeEnsemble,
    default_grid, grid_search, predict, select_best, train,
)
from .io import dumps, load, loads, save

__all__ = [
    "DEPTH_GRID", "LR_GRID", "BinMapper", "GridEntry", "HyperParams", "TrainLog", "Tree",
    "TreeEnsemble", "default_grid", "grid_search", "predict", "select_best", "train",
    "dumps", "load", "loads", "save",
]
