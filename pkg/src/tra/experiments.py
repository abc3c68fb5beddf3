"""Data preparation, fitting and scoring shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .core import RouterConfig, TRAModel
from .dataprep import (
    Panel,
    WindowSet,
    generate_synthetic,
    load_dataset,
    load_regimes,
    make_windows,
    split_by_fraction,
    temporal_split,
)
from .evaluation import assignment_accuracy, ranking_metrics
from .numerics import make_rng
from .ot import SinkhornConfig
from .trainer import (
    InferenceResult,
    TrainConfig,
    TrainReport,
    build_memory,
    refresh_memory,
    run_training,
    sequential_inference,
)

# test-time noise for the Random input mode is drawn from its own seed offset
INFER_NOISE_OFFSET = 7919


@dataclass
class Prepared:
    panel: Panel
    sets: dict[str, WindowSet]
    regime_grid: np.ndarray | None  # (n_stocks, n_days) ground truth, -1 where unknown


def regime_grid_from_days(panel: Panel, regimes_by_day) -> np.ndarray:
    grid = np.full((panel.n_stocks, panel.n_days), -1, dtype=np.int64)
    grid[panel.stock_idx, panel.day_idx] = np.asarray(regimes_by_day)[panel.day_idx]
    return grid


def regime_grid_from_rows(panel: Panel, regimes_by_row) -> np.ndarray:
    grid = np.full((panel.n_stocks, panel.n_days), -1, dtype=np.int64)
    grid[panel.stock_idx, panel.day_idx] = regimes_by_row
    return grid


def split_windows(panel: Panel, window_len: int, split_cfg) -> dict[str, WindowSet]:
    ws = make_windows(panel, window_len)
    spec = split_cfg.explicit() or split_by_fraction(panel.dates, tuple(split_cfg.fractions), split_cfg.gap_days)
    return temporal_split(ws, spec)


def prepare_synthetic(synth_spec, window_len: int, split_cfg) -> Prepared:
    panel, regimes = generate_synthetic(synth_spec)
    return Prepared(panel, split_windows(panel, window_len, split_cfg), regime_grid_from_days(panel, regimes))


def prepare_from_files(data_path, regimes_path, window_len: int, split_cfg) -> Prepared:
    panel = load_dataset(data_path)
    grid = None
    if regimes_path is not None and regimes_path.exists():
        grid = regime_grid_from_rows(panel, load_regimes(regimes_path, panel))
    return Prepared(panel, split_windows(panel, window_len, split_cfg), grid)


def infer_test_range(model: TRAModel, sets: dict[str, WindowSet], seed: int, log_reads: bool = False):
    """Refresh memory with training and validation errors, then run the test range in time order."""
    mem = build_memory(model.K, sets["train"], sets["valid"], sets["test"])
    refresh_memory(model, sets["train"], mem)
    refresh_memory(model, sets["valid"], mem)
    if log_reads:
        mem.enable_read_log()
    res = sequential_inference(model, mem, sets["test"], noise_rng=make_rng(seed + INFER_NOISE_OFFSET))
    return res, mem


@dataclass
class FitResult:
    model: TRAModel
    report: TrainReport
    inference: InferenceResult
    test_mse: float
    test_ic: float | None
    accuracy: float | None
    final_max_share: float


def fit_and_score(
    train_cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    router_cfg: RouterConfig,
    prepared: Prepared,
    sinkhorn: SinkhornConfig | None = None,
) -> FitResult:
    sets = prepared.sets
    model, report = run_training(train_cfg, backbone_cfg, router_cfg, sets, sinkhorn)
    res, _ = infer_test_range(model, sets, train_cfg.seed)
    te = sets["test"]
    rm = ranking_metrics(res.p_hat, te.labels, te.day_idx)
    acc = None
    if prepared.regime_grid is not None:
        truth = prepared.regime_grid[te.stock_idx, te.day_idx]
        if np.all(truth >= 0) and model.K <= 6:
            acc = assignment_accuracy(res.chosen, truth)
    share = max(report.epochs[-1].shares)
    return FitResult(model, report, res, rm.mse, rm.ic_mean, acc, share)
