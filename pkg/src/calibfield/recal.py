"""Recalibrators: range-aware field correction, temperature and isotonic
scaling, and a residual-regression baseline.

The range-aware correction moves each confidence toward the boundary the
field points at, scaled by how much room is left on that side:

    f_tilde = f - f * tanh(alpha |d|)        when d < 0 (overconfident)
    f_tilde = f + (1 - f) * tanh(alpha |d|)  when d >= 0 (underconfident)

so outputs stay in [0, 1] without hard clipping. Temperature and isotonic
scaling are the standard global baselines, fit on the train split.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logit

from calibfield import geometry
from calibfield.dataio import Dataset
from calibfield.field import FieldEstimate, NumericalError, TrainConfig
from calibfield.metrics import brier, smece
from calibfield.optim import Adam, clip_global_norm

CONF_CLAMP = 1e-6
LOG_T_LO = np.log(0.05)
LOG_T_HI = np.log(20.0)
DEFAULT_ALPHA_GRID = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class CorrectionConfig:
    alpha: float = 1.0
    alpha_grid: tuple = DEFAULT_ALPHA_GRID

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if len(self.alpha_grid) == 0 or any(a <= 0 for a in self.alpha_grid):
            raise ValueError("alpha_grid must be nonempty and positive")


def range_aware_correct(f: np.ndarray, delta: np.ndarray, alpha: float) -> np.ndarray:
    """Apply the bounded correction; sign follows the field, output in [0, 1]."""
    f = np.asarray(f, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any((f < 0.0) | (f > 1.0)):
        raise ValueError("confidences outside [0, 1]")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t = np.tanh(alpha * np.abs(delta))
    shift = np.where(delta < 0.0, -f * t, (1.0 - f) * t)
    return f + shift


def select_alpha(val_ds: Dataset, field_on_val: FieldEstimate, alpha_grid=DEFAULT_ALPHA_GRID) -> float:
    """Pick alpha by validation smECE; ties go to lower Brier, then smaller alpha."""
    if len(alpha_grid) == 0:
        raise ValueError("alpha grid is empty")
    f = val_ds.confidences
    y = val_ds.outcomes
    best = None
    for alpha in sorted(alpha_grid):
        corrected = range_aware_correct(f, field_on_val.values, alpha)
        key = (smece(corrected, y).value, brier(corrected, y), alpha)
        if best is None or key < best:
            best = key
    return best[2]


@dataclass(frozen=True)
class TempScaler:
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    def to_json(self) -> str:
        return json.dumps({"type": "temperature", "temperature": self.temperature})

    @classmethod
    def from_json(cls, doc: str) -> "TempScaler":
        obj = json.loads(doc)
        if obj.get("type") != "temperature":
            raise ValueError("not a temperature-scaler document")
        return cls(temperature=obj["temperature"])


def _clamped_logit(f: np.ndarray) -> np.ndarray:
    return logit(np.clip(np.asarray(f, dtype=np.float64), CONF_CLAMP, 1.0 - CONF_CLAMP))


def fit_temperature(f: np.ndarray, y: np.ndarray) -> TempScaler:
    """Minimize binary NLL over T by golden-section search on log T.

    The objective is one-dimensional and smooth, so a bracketed golden-section
    search on log T in [log 0.05, log 20] (tolerance 1e-6) finds the same
    stationary point a quasi-Newton method would. Single-class labels leave
    the likelihood without an interior minimizer; that falls back to T=1
    with a warning.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.all(y == y[0]):
        warnings.warn("temperature fit needs both classes; falling back to T=1")
        return TempScaler(temperature=1.0)
    z = _clamped_logit(f)

    def nll(log_t: float) -> float:
        zt = z / np.exp(log_t)
        return float(-np.mean(y * log_expit(zt) + (1.0 - y) * log_expit(-zt)))

    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = LOG_T_LO, LOG_T_HI
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = nll(c), nll(d)
    while b - a > 1e-6:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = nll(d)
    return TempScaler(temperature=float(np.exp(0.5 * (a + b))))


def apply_temperature(f: np.ndarray, T: float) -> np.ndarray:
    if not T > 0:
        raise ValueError("temperature must be positive")
    return expit(_clamped_logit(f) / T)


@dataclass(frozen=True)
class IsotonicMap:
    breakpoints: np.ndarray   # strictly increasing confidences
    values: np.ndarray        # nondecreasing probabilities

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if bp.shape != v.shape or bp.ndim != 1 or bp.shape[0] < 1:
            raise ValueError("breakpoints and values must be equal-length 1-D arrays")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(v) < 0):
            raise ValueError("values must be nondecreasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", v)

    def to_json(self) -> str:
        return json.dumps({
            "type": "isotonic",
            "breakpoints": list(self.breakpoints),
            "values": list(self.values),
        })

    @classmethod
    def from_json(cls, doc: str) -> "IsotonicMap":
        obj = json.loads(doc)
        if obj.get("type") != "isotonic":
            raise ValueError("not an isotonic-map document")
        return cls(breakpoints=np.array(obj["breakpoints"]), values=np.array(obj["values"]))


def fit_isotonic(f: np.ndarray, y: np.ndarray) -> IsotonicMap:
    """Least-squares nondecreasing fit by pool-adjacent-violators.

    Equal confidences are aggregated into weighted level sets first, then
    violating adjacent blocks are merged until the block means are monotone.
    """
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if f.shape != y.shape or f.shape[0] < 1:
        raise ValueError("need equal-length nonempty vectors")
    order = np.argsort(f, kind="stable")
    fs, ys = f[order], y[order]
    uniq, start = np.unique(fs, return_index=True)
    counts = np.diff(np.append(start, fs.shape[0]))
    sums = np.add.reduceat(ys, start)

    # Blocks as (mean, weight) pairs; merge while the tail violates monotonicity.
    means: list[float] = []
    weights: list[float] = []
    for s, w in zip(sums, counts):
        mu, wt = s / w, float(w)
        while means and means[-1] > mu:
            mu = (means[-1] * weights[-1] + mu * wt) / (weights[-1] + wt)
            wt += weights[-1]
            means.pop()
            weights.pop()
        means.append(mu)
        weights.append(wt)

    return IsotonicMap(breakpoints=uniq, values=_per_level_values(means, weights, counts))


def _per_level_values(means, weights, counts) -> np.ndarray:
    """Spread block means back onto the unique-confidence level sets."""
    out = np.empty(counts.shape[0])
    i = 0
    for mu, wt in zip(means, weights):
        remaining = int(round(wt))
        while remaining > 0:
            out[i] = mu
            remaining -= int(counts[i])
            i += 1
    return out


def apply_isotonic(iso: IsotonicMap, f: np.ndarray) -> np.ndarray:
    """Interpolate linearly between breakpoints; clamp to the end values outside."""
    return np.interp(np.asarray(f, dtype=np.float64), iso.breakpoints, iso.values)


# ---------------------------------------------------------------------------
# Residual regression baseline
# ---------------------------------------------------------------------------

@dataclass
class ResRegModel:
    """Plain MLP x -> predicted residual; predictions are clamped to [-1, 1]."""

    params: geometry.NetParams


def resreg_arch(input_dim: int, width: int = 1024, layers: int = 3) -> geometry.NetArch:
    """Capacity ladder entry for the baseline; no dropout, scalar output."""
    return geometry.NetArch(
        input_dim=input_dim,
        hidden_width=width,
        hidden_layers=layers,
        output_dim=1,
        dropout_rate=0.0,
    )


def _resreg_forward(p: geometry.NetParams, X: np.ndarray, want_cache: bool = False):
    """Hidden GELU stack plus a linear scalar head; no output normalization."""
    inputs, preacts = [], []
    a = np.asarray(X, dtype=np.float64)
    for l in range(p.arch.hidden_layers):
        inputs.append(a)
        h = a @ p.weights[l] + p.biases[l]
        preacts.append(h)
        a = geometry.gelu(h)
    inputs.append(a)
    out = (a @ p.weights[-1] + p.biases[-1])[:, 0]
    if not want_cache:
        return out
    return out, (inputs, preacts)


def _resreg_backward(p: geometry.NetParams, cache, d_out: np.ndarray) -> None:
    inputs, preacts = cache
    du = d_out[:, None]
    p.g_weights[-1][...] = inputs[-1].T @ du
    p.g_biases[-1][...] = du.sum(axis=0)
    da = du @ p.weights[-1].T
    for l in range(p.arch.hidden_layers - 1, -1, -1):
        dh = da * geometry.gelu_grad(preacts[l])
        p.g_weights[l][...] = inputs[l].T @ dh
        p.g_biases[l][...] = dh.sum(axis=0)
        if l > 0:
            da = dh @ p.weights[l].T


def train_resreg(
    train_ds: Dataset,
    val_ds: Dataset,
    arch: geometry.NetArch,
    tcfg: TrainConfig,
) -> ResRegModel:
    """Fit the baseline by minibatch MSE on residual targets.

    Same optimizer contract as the field trainer (Adam, weight decay, global
    norm clip) with early stopping on validation MSE; the best checkpoint is
    restored.
    """
    if train_ds.n == 0 or val_ds.n == 0:
        raise ValueError("train and validation splits must be nonempty")
    s_init, s_shuffle = np.random.SeedSequence(tcfg.seed).generate_state(2)
    params = geometry.init(arch, seed=int(s_init))
    opt = Adam(params.param_arrays(), lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    shuffle_rng = np.random.default_rng(int(s_shuffle))
    r_train = train_ds.residuals
    r_val = val_ds.residuals

    def val_mse(p):
        pred = _resreg_forward(p, val_ds.embeddings)
        return float(np.mean((pred - r_val) ** 2))

    best = val_mse(params)
    best_params = params.copy()
    since_improve = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        order = shuffle_rng.permutation(train_ds.n)
        for batch_idx, lo in enumerate(range(0, train_ds.n, tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            if idx.shape[0] < 1:
                continue
            pred, cache = _resreg_forward(params, train_ds.embeddings[idx], want_cache=True)
            err = pred - r_train[idx]
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite baseline loss at epoch {epoch}, batch {batch_idx}"
                )
            _resreg_backward(params, cache, (2.0 / idx.shape[0]) * err)
            clip_global_norm(params.grad_arrays(), tcfg.grad_clip_norm)
            opt.step(params.grad_arrays())
        cur = val_mse(params)
        if cur < best:
            best = cur
            best_params = params.copy()
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= tcfg.patience:
            break
    best_params.zero_grad()
    return ResRegModel(params=best_params)


def predict_resreg(model: ResRegModel, X: np.ndarray) -> np.ndarray:
    """Predicted residuals, clamped to the feasible range [-1, 1]."""
    return np.clip(_resreg_forward(model.params, X), -1.0, 1.0)
