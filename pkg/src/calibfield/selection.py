"""Hyperparameter selection by corrected validation Brier, plus oracle diagnostics.

The proxy never touches the true field: it scores the additively corrected
forecast f + delta_hat on held-out labels, which is enough to rank bandwidth
and regularization choices. When a ground-truth field is available (synthetic
data), the oracle correlation per grid cell supports regret and agreement
diagnostics; it plays no part in selection itself.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from calibfield import geometry
from calibfield.dataio import Dataset, sample_bank
from calibfield.field import (
    FieldEstimate,
    KernelConfig,
    LossConfig,
    TrainConfig,
    corrected_brier,
    field_on,
    train,
)
from calibfield.metrics import pearson, spearman


@dataclass(frozen=True)
class HyperGrid:
    bandwidths: tuple = (0.05, 0.1, 0.3, 1.0)
    lambdas: tuple = (0.0, 1e-3, 1e-2)
    m_min: float = 20.0

    def __post_init__(self):
        if len(self.bandwidths) == 0 or len(self.lambdas) == 0:
            raise ValueError("grid axes must be nonempty")
        if any(s <= 0 for s in self.bandwidths):
            raise ValueError("all bandwidths must be positive")
        if any(l < 0 for l in self.lambdas):
            raise ValueError("all lambdas must be nonnegative")


@dataclass(frozen=True)
class CellResult:
    sigma: float
    lam: float
    proxy: float
    oracle_corr: Optional[float] = None


@dataclass(frozen=True)
class Diagnostics:
    spearman: Optional[float]
    spread: float
    regret: float


@dataclass
class SelectionResult:
    cells: list[CellResult]
    chosen: tuple[float, float]               # (sigma, lambda)
    diagnostics: Optional[Diagnostics]
    best_params: geometry.NetParams

    def to_csv(self) -> str:
        lines = ["sigma,lambda,proxy,oracle_corr"]
        for c in self.cells:
            oc = "" if c.oracle_corr is None else repr(c.oracle_corr)
            lines.append(f"{c.sigma!r},{c.lam!r},{c.proxy!r},{oc}")
        return "\n".join(lines) + "\n"


def proxy_brier(val_ds: Dataset, field_on_val: FieldEstimate) -> float:
    """Corrected validation Brier (1/n) sum (y - (f + delta_hat))^2, unclipped."""
    if field_on_val.values.shape[0] != val_ds.n:
        raise ValueError("field length does not match the validation split")
    return corrected_brier(val_ds.confidences, val_ds.outcomes, field_on_val.values)


def _run_cell(args):
    (train_ds, val_ds, arch, sigma, lam, m_min, tcfg, bank_cap, oracle_ds) = args
    kcfg = KernelConfig(bandwidth=sigma)
    lcfg = LossConfig(lam=lam, m_min=m_min)
    try:
        params, hist = train(train_ds, val_ds, arch, kcfg, lcfg, tcfg, bank_cap=bank_cap)
    except Exception as exc:
        exc.args = (f"grid cell (sigma={sigma}, lambda={lam}): {exc}",)
        raise
    proxy = min(hist.val_proxy)
    oracle = None
    if oracle_ds is not None and oracle_ds.true_field is not None:
        raw_bank = sample_bank(train_ds, cap=bank_cap, seed=tcfg.seed)
        est = field_on(params, oracle_ds, raw_bank, kcfg)
        oracle = pearson(est.values, oracle_ds.true_field)
    return CellResult(sigma=sigma, lam=lam, proxy=proxy, oracle_corr=oracle), params


def grid_search(
    train_ds: Dataset,
    val_ds: Dataset,
    arch: geometry.NetArch,
    grid: HyperGrid,
    tcfg: TrainConfig,
    bank_cap: int = 20000,
    oracle_ds: Optional[Dataset] = None,
    jobs: int = 1,
) -> SelectionResult:
    """One full training run per grid cell, all with the same seed.

    The cell minimizing the proxy wins; exact ties go to the larger bandwidth,
    then the larger lambda. Passing a dataset with a known true field as
    ``oracle_ds`` adds per-cell oracle correlations and regret diagnostics.
    """
    cells_spec = [
        (train_ds, val_ds, arch, float(s), float(l), grid.m_min, tcfg, bank_cap, oracle_ds)
        for s in sorted(grid.bandwidths)
        for l in sorted(grid.lambdas)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_cell, cells_spec))
    else:
        outcomes = [_run_cell(spec) for spec in cells_spec]

    cells = [c for c, _ in outcomes]
    # Ascending (sigma, lambda) order plus <= makes later (larger) cells win ties.
    best_i = 0
    for i, c in enumerate(cells):
        if c.proxy <= cells[best_i].proxy:
            best_i = i
    chosen_cell, best_params = outcomes[best_i]

    diagnostics = None
    if all(c.oracle_corr is not None for c in cells):
        diagnostics = selection_diagnostics(cells)
    return SelectionResult(
        cells=cells,
        chosen=(chosen_cell.sigma, chosen_cell.lam),
        diagnostics=diagnostics,
        best_params=best_params,
    )


def selection_diagnostics(cells: list[CellResult]) -> Diagnostics:
    """Spearman(-proxy, oracle), oracle spread, and regret of the chosen cell.

    Spearman is absent (None) for a single cell or a flat oracle surface.
    """
    if not cells:
        raise ValueError("diagnostics need at least 1 cell")
    if any(c.oracle_corr is None for c in cells):
        raise ValueError("diagnostics need an oracle value for every cell")
    proxies = np.array([c.proxy for c in cells])
    oracles = np.array([c.oracle_corr for c in cells])
    best_i = 0
    for i in range(len(cells)):
        if proxies[i] <= proxies[best_i]:
            best_i = i
    rho = spearman(-proxies, oracles) if len(cells) >= 2 else None
    spread = float(oracles.max() - oracles.min())
    regret = float(oracles.max() - oracles[best_i])
    return Diagnostics(spearman=rho, spread=spread, regret=regret)
