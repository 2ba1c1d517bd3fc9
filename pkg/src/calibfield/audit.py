"""Regime audits: slicing, gaps, bootstrap, permutation nulls, seed stability.

Everything here consumes a field estimate on an evaluation split and asks
whether the structure it claims is real: how big the worst signed regime's
calibration gap is, whether it survives bootstrap resampling, whether it
vanishes when labels are permuted, and whether it is stable across seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field, replace
from typing import Optional

import numpy as np

from calibfield import geometry
from calibfield.dataio import Dataset, NeighbourBank, sample_bank
from calibfield.field import (
    FieldEstimate,
    KernelConfig,
    LossConfig,
    TrainConfig,
    corrected_brier,
    estimate_field,
    field_on,
    train,
)
from calibfield.metrics import brier, pearson, smece

OVER = "over"
UNDER = "under"
GOOD = "good"
SIGNED = (OVER, UNDER)

GAP_ATTENTION_THRESHOLD = 0.06  # gaps at least this large flag hidden structure


@dataclass(frozen=True)
class RegimeConfig:
    epsilon: float = 0.05
    sweep: tuple = (0.01, 0.05, 0.10, 0.15)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if len(self.sweep) == 0 or any(e < 0 for e in self.sweep):
            raise ValueError("sweep must be nonempty with nonnegative thresholds")


@dataclass(frozen=True)
class RegimeSlices:
    """Per-example regime labels: over (delta < -eps), under (delta > eps), good."""

    labels: np.ndarray        # (n,) of {"over", "under", "good"}
    epsilon: float

    def mask(self, label: str) -> np.ndarray:
        return self.labels == label

    @property
    def counts(self) -> dict[str, int]:
        return {lab: int(np.sum(self.labels == lab)) for lab in (OVER, GOOD, UNDER)}

    @property
    def fractions(self) -> dict[str, float]:
        n = self.labels.shape[0]
        return {lab: c / n for lab, c in self.counts.items()}

    def present(self, label: str) -> bool:
        return bool(np.any(self.labels == label))


def slice_regimes(field_est: FieldEstimate, cfg: RegimeConfig) -> RegimeSlices:
    v = field_est.values
    labels = np.full(v.shape[0], GOOD, dtype="<U5")
    labels[v < -cfg.epsilon] = OVER
    labels[v > cfg.epsilon] = UNDER
    return RegimeSlices(labels=labels, epsilon=cfg.epsilon)


def _slice_metric(f: np.ndarray, y: np.ndarray, metric: str) -> Optional[float]:
    """Metric on one slice; absent when the slice is too small to score."""
    if metric == "brier":
        return brier(f, y) if f.shape[0] >= 1 else None
    if metric == "smece":
        return smece(f, y).value if f.shape[0] >= 2 else None
    raise ValueError(f"unknown metric {metric!r}")


def worst_slice_gap(test_ds: Dataset, slices: RegimeSlices, metric: str = "smece") -> Optional[float]:
    """max(signed-slice metric) - global metric; None when no signed slice scores."""
    got = _gap_details(test_ds, slices, metric)
    return None if got is None else got[0]


def _gap_details(test_ds, slices, metric):
    """(gap, worst_label, worst_value, global_value) or None."""
    f, y = test_ds.confidences, test_ds.outcomes
    per = {}
    for lab in SIGNED:
        m = slices.mask(lab)
        val = _slice_metric(f[m], y[m], metric) if np.any(m) else None
        if val is not None:
            per[lab] = val
    if not per:
        return None
    worst_label = max(per, key=per.get)
    g = _slice_metric(f, y, metric)
    return per[worst_label] - g, worst_label, per[worst_label], g


def heterogeneity_stats(field_est: FieldEstimate) -> tuple[float, float]:
    """Sample mean and (population) standard deviation of the field values."""
    v = field_est.values
    if v.shape[0] == 0:
        raise ValueError("empty field")
    return float(np.mean(v)), float(np.std(v))


@dataclass(frozen=True)
class BootstrapCI:
    point: dict[str, Optional[float]]
    lo: dict[str, Optional[float]]
    hi: dict[str, Optional[float]]
    worst_label: Optional[str]
    absent_replicates: int
    B: int


def _bootstrap_replicate(test_ds, slices, worst_label, metric, idx):
    """Global, fixed-worst-slice, gap, and slice fraction on one index draw."""
    f = test_ds.confidences[idx]
    y = test_ds.outcomes[idx]
    g = _slice_metric(f, y, metric)
    in_worst = slices.labels[idx] == worst_label
    frac = float(np.mean(in_worst))
    w = _slice_metric(f[in_worst], y[in_worst], metric) if np.any(in_worst) else None
    gap = None if w is None else w - g
    return g, w, gap, frac


def bootstrap_ci(
    test_ds: Dataset,
    slices: RegimeSlices,
    metric: str = "smece",
    B: int = 1000,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile 95% intervals with the field and slice labels held fixed.

    Each replicate resamples test indices with replacement and rescoring uses
    the original slice membership of the drawn rows. Replicates that lose the
    worst slice entirely are recorded as absent for the slice statistics.
    """
    if B < 100:
        raise ValueError(f"need B >= 100 bootstrap replicates, got {B}")
    details = _gap_details(test_ds, slices, metric)
    if details is None:
        point = {"global": _slice_metric(test_ds.confidences, test_ds.outcomes, metric),
                 "worst": None, "gap": None, "fraction": None}
        return BootstrapCI(point=point, lo={}, hi={}, worst_label=None,
                           absent_replicates=0, B=B)
    gap0, worst_label, worst0, global0 = details
    point = {
        "global": global0,
        "worst": worst0,
        "gap": gap0,
        "fraction": float(np.mean(slices.mask(worst_label))),
    }
    rng = np.random.default_rng(seed)
    n = test_ds.n
    stats = {"global": [], "worst": [], "gap": [], "fraction": []}
    absent = 0
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        g, w, gap, frac = _bootstrap_replicate(test_ds, slices, worst_label, metric, idx)
        stats["global"].append(g)
        stats["fraction"].append(frac)
        if w is None:
            absent += 1
        else:
            stats["worst"].append(w)
            stats["gap"].append(gap)
    lo, hi = {}, {}
    for key, vals in stats.items():
        if vals:
            lo[key] = float(np.percentile(vals, 2.5))
            hi[key] = float(np.percentile(vals, 97.5))
        else:
            lo[key] = hi[key] = None
    return BootstrapCI(point=point, lo=lo, hi=hi, worst_label=worst_label,
                       absent_replicates=absent, B=B)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to rerun representation learning end to end."""

    arch: geometry.NetArch
    kcfg: KernelConfig
    lcfg: LossConfig
    tcfg: TrainConfig
    regime: RegimeConfig = RegimeConfig()
    bank_cap: int = 20000


def run_pipeline(train_ds: Dataset, val_ds: Dataset, test_ds: Dataset, cfg: PipelineConfig):
    """Train, evaluate the field on test (train bank only), slice regimes."""
    params, hist = train(train_ds, val_ds, cfg.arch, cfg.kcfg, cfg.lcfg, cfg.tcfg,
                         bank_cap=cfg.bank_cap)
    raw_bank = sample_bank(train_ds, cap=cfg.bank_cap, seed=cfg.tcfg.seed)
    est = field_on(params, test_ds, raw_bank, cfg.kcfg)
    slices = slice_regimes(est, cfg.regime)
    return params, est, slices, hist


@dataclass(frozen=True)
class NullSummary:
    real_std: float
    real_gap: Optional[float]
    null_stds: np.ndarray
    null_gaps: np.ndarray      # absent gaps recorded as 0.0
    P: int

    @property
    def null_std_mean(self) -> float:
        return float(np.mean(self.null_stds))

    @property
    def null_std_std(self) -> float:
        return float(np.std(self.null_stds))

    @property
    def null_gap_mean(self) -> float:
        return float(np.mean(self.null_gaps))

    @property
    def null_gap_std(self) -> float:
        return float(np.std(self.null_gaps))


def _permute_labels(ds: Dataset, rng: np.random.Generator) -> Dataset:
    perm = rng.permutation(ds.n)
    return Dataset(
        embeddings=ds.embeddings,
        confidences=ds.confidences,
        outcomes=ds.outcomes[perm],
        true_field=ds.true_field,
        group_labels=ds.group_labels,
        group_names=ds.group_names,
    )


def permutation_null_audit(
    train_ds: Dataset,
    val_ds: Dataset,
    test_ds: Dataset,
    cfg: PipelineConfig,
    P: int = 20,
    seed: int = 0,
) -> NullSummary:
    """Field std and worst-slice gap under label permutation, vs the real run.

    Labels are shuffled within train and within val separately (marginal rates
    preserved); the test split is never touched. Gaps that come back absent
    under the null count as 0 in the summary.
    """
    if P < 2:
        raise ValueError(f"need P >= 2 permutations, got {P}")
    _, real_est, real_slices, _ = run_pipeline(train_ds, val_ds, test_ds, cfg)
    real_std = heterogeneity_stats(real_est)[1]
    real_gap = worst_slice_gap(test_ds, real_slices)

    null_stds = np.empty(P)
    null_gaps = np.empty(P)
    for p in range(P):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
        try:
            perm_train = _permute_labels(train_ds, rng)
            perm_val = _permute_labels(val_ds, rng)
            _, est, slices, _ = run_pipeline(perm_train, perm_val, test_ds, cfg)
        except Exception as exc:
            exc.args = (f"permutation {p}: {exc}",)
            raise
        null_stds[p] = heterogeneity_stats(est)[1]
        gap = worst_slice_gap(test_ds, slices)
        null_gaps[p] = 0.0 if gap is None else gap
    return NullSummary(real_std=real_std, real_gap=real_gap,
                       null_stds=null_stds, null_gaps=null_gaps, P=P)


@dataclass(frozen=True)
class StabilitySummary:
    seeds: tuple
    pairwise_corr: np.ndarray        # one value per seed pair
    sign_agreement: np.ndarray       # one value per seed pair
    per_seed_std: np.ndarray
    per_seed_gap: list               # Optional[float] per seed

    @property
    def mean_corr(self) -> float:
        return float(np.mean(self.pairwise_corr))

    @property
    def std_corr(self) -> float:
        return float(np.std(self.pairwise_corr))

    @property
    def mean_sign_agreement(self) -> float:
        return float(np.mean(self.sign_agreement))


def sign_agreement_rate(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of matching field signs, over entries where both are nonzero."""
    both = (a != 0.0) & (b != 0.0)
    if not np.any(both):
        return float("nan")
    return float(np.mean(np.sign(a[both]) == np.sign(b[both])))


def seed_stability_audit(
    train_ds: Dataset,
    val_ds: Dataset,
    test_ds: Dataset,
    cfg: PipelineConfig,
    seeds: tuple,
) -> StabilitySummary:
    """Train one field per seed and compare them pairwise on the test split."""
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds")
    fields = []
    per_std = []
    per_gap = []
    for s in seeds:
        run_cfg = replace(cfg, tcfg=replace(cfg.tcfg, seed=int(s)))
        _, est, slices, _ = run_pipeline(train_ds, val_ds, test_ds, run_cfg)
        fields.append(est.values)
        per_std.append(heterogeneity_stats(est)[1])
        per_gap.append(worst_slice_gap(test_ds, slices))
    corrs = []
    signs = []
    for i in range(len(seeds)):
        for j in range(i + 1, len(seeds)):
            c = pearson(fields[i], fields[j])
            corrs.append(1.0 if c is None and np.array_equal(fields[i], fields[j]) else c)
            signs.append(sign_agreement_rate(fields[i], fields[j]))
    return StabilitySummary(
        seeds=tuple(int(s) for s in seeds),
        pairwise_corr=np.array(corrs, dtype=np.float64),
        sign_agreement=np.array(signs, dtype=np.float64),
        per_seed_std=np.array(per_std),
        per_seed_gap=per_gap,
    )


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    smece_gap: Optional[float]
    brier_gap_on_worst: Optional[float]
    worst_fraction: Optional[float]
    worst_label: Optional[str]


def threshold_sweep(test_ds: Dataset, field_est: FieldEstimate, sweep) -> list[SweepRow]:
    """Gap, Brier gap on the smECE-worst slice, and slice fraction per threshold."""
    rows = []
    for eps in sweep:
        slices = slice_regimes(field_est, RegimeConfig(epsilon=float(eps), sweep=(0.0,)))
        details = _gap_details(test_ds, slices, "smece")
        if details is None:
            rows.append(SweepRow(float(eps), None, None, None, None))
            continue
        gap, worst_label, _, _ = details
        m = slices.mask(worst_label)
        b_slice = brier(test_ds.confidences[m], test_ds.outcomes[m])
        b_global = brier(test_ds.confidences, test_ds.outcomes)
        rows.append(SweepRow(
            epsilon=float(eps),
            smece_gap=gap,
            brier_gap_on_worst=b_slice - b_global,
            worst_fraction=float(np.mean(m)),
            worst_label=worst_label,
        ))
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    lines = ["epsilon,smece_gap,brier_gap_on_worst,worst_fraction,worst_label"]
    for r in rows:
        def fmt(v):
            return "" if v is None else (v if isinstance(v, str) else repr(v))
        lines.append(",".join(fmt(v) for v in
                              (r.epsilon, r.smece_gap, r.brier_gap_on_worst,
                               r.worst_fraction, r.worst_label)))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GeometryComparison:
    raw_sigma: float
    raw_stats: tuple[float, float]
    raw_gap: Optional[float]
    learned_stats: tuple[float, float]
    learned_gap: Optional[float]

    @property
    def paired_gap_difference(self) -> Optional[float]:
        if self.raw_gap is None or self.learned_gap is None:
            return None
        return self.learned_gap - self.raw_gap


def raw_vs_learned(
    train_ds: Dataset,
    val_ds: Dataset,
    test_ds: Dataset,
    cfg: PipelineConfig,
    sigma_grid,
) -> GeometryComparison:
    """Field audit with raw input geometry vs the learned representation.

    The raw route uses the identity representation; its bandwidth is chosen
    from ``sigma_grid`` by the same validation proxy (ties to the larger
    bandwidth). The learned route runs the full pipeline config.
    """
    if len(sigma_grid) == 0:
        raise ValueError("sigma grid is empty")
    raw_bank = sample_bank(train_ds, cap=cfg.bank_cap, seed=cfg.tcfg.seed)
    best = None
    for s in sorted(float(s) for s in sigma_grid):
        kc = KernelConfig(bandwidth=s)
        est_val = estimate_field(val_ds.embeddings, raw_bank, kc)
        proxy = corrected_brier(val_ds.confidences, val_ds.outcomes, est_val.values)
        if best is None or proxy <= best[0]:
            best = (proxy, s)
    raw_sigma = best[1]
    raw_est = estimate_field(test_ds.embeddings, raw_bank, KernelConfig(bandwidth=raw_sigma))
    raw_slices = slice_regimes(raw_est, cfg.regime)

    _, learned_est, learned_slices, _ = run_pipeline(train_ds, val_ds, test_ds, cfg)
    return GeometryComparison(
        raw_sigma=raw_sigma,
        raw_stats=heterogeneity_stats(raw_est),
        raw_gap=worst_slice_gap(test_ds, raw_slices),
        learned_stats=heterogeneity_stats(learned_est),
        learned_gap=worst_slice_gap(test_ds, learned_slices),
    )


@dataclass
class AuditReport:
    """Aggregate audit output, serializable for the CLI."""

    epsilon: float
    global_smece: float
    slice_smece: dict[str, Optional[float]]
    slice_counts: dict[str, int]
    worst_slice_gap: Optional[float]
    field_mean: float
    field_std: float
    sweep: list[SweepRow] = dc_field(default_factory=list)
    bootstrap: Optional[BootstrapCI] = None
    null: Optional[NullSummary] = None
    stability: Optional[StabilitySummary] = None
    config: dict = dc_field(default_factory=dict)

    def to_json(self) -> str:
        def clean(obj):
            if isinstance(obj, (np.floating, np.integer)):
                return obj.item()
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, dict):
                return {k: clean(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [clean(v) for v in obj]
            if hasattr(obj, "__dataclass_fields__"):
                return {k: clean(getattr(obj, k)) for k in obj.__dataclass_fields__}
            return obj

        return json.dumps(clean(self), indent=1, sort_keys=True)


def build_report(
    test_ds: Dataset,
    field_est: FieldEstimate,
    cfg: RegimeConfig,
    config_echo: Optional[dict] = None,
) -> AuditReport:
    """Slice at the default threshold and assemble the core report body."""
    slices = slice_regimes(field_est, cfg)
    f, y = test_ds.confidences, test_ds.outcomes
    per = {}
    for lab in (OVER, GOOD, UNDER):
        m = slices.mask(lab)
        per[lab] = _slice_metric(f[m], y[m], "smece") if np.any(m) else None
    mean, std = heterogeneity_stats(field_est)
    return AuditReport(
        epsilon=cfg.epsilon,
        global_smece=smece(f, y).value,
        slice_smece=per,
        slice_counts=slices.counts,
        worst_slice_gap=worst_slice_gap(test_ds, slices),
        field_mean=mean,
        field_std=std,
        sweep=threshold_sweep(test_ds, field_est, cfg.sweep),
        config=config_echo or {},
    )
