"""Kernel field estimator, discovery loss, and the training loop.

The estimator smooths residuals r = y - f over a bank of reference points
with a Gaussian kernel in representation space:

    delta_hat(x) = sum_j K(x, x_j) r_j / sum_j K(x, x_j),
    K(x, x') = exp(-||phi(x) - phi(x')||^2 / sigma^2),

and the denominator m(x) doubles as a neighbourhood-mass diagnostic.
Training pushes the representation to make the in-batch field large in
magnitude while penalizing starved neighbourhoods (mass below m_min).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from calibfield import geometry
from calibfield.dataio import Dataset, NeighbourBank, sample_bank
from calibfield.optim import Adam, clip_global_norm

CHUNK_ROWS = 1024
MASS_FLOOR = 1e-300


class NumericalError(RuntimeError):
    """Training or evaluation produced non-finite numbers."""


@dataclass(frozen=True)
class KernelConfig:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-2
    m_min: float = 20.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not self.m_min > 0:
            raise ValueError(f"m_min must be positive, got {self.m_min}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-5
    weight_decay: float = 7e-6
    batch_size: int = 1024
    grad_clip_norm: float = 1.0
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be nonnegative")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")


@dataclass(frozen=True)
class FieldEstimate:
    """Field values and neighbourhood masses at a set of query points."""

    values: np.ndarray    # (q,) in [-1, 1]
    masses: np.ndarray    # (q,) >= 0
    kernel: KernelConfig
    bank: NeighbourBank
    starved: np.ndarray = dc_field(default=None)  # (q,) bool

    def __post_init__(self):
        if self.starved is None:
            object.__setattr__(self, "starved", np.zeros(self.values.shape[0], dtype=bool))
        if np.any(np.abs(self.values) > 1.0):
            raise ValueError("field values must lie in [-1, 1]")
        if not np.all(np.isfinite(self.masses)):
            raise ValueError("masses must be finite")


def _sq_dists(Q: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances via the norm expansion, clamped >= 0."""
    qq = np.einsum("ij,ij->i", Q, Q)[:, None]
    bb = np.einsum("ij,ij->i", B, B)[None, :]
    d2 = qq + bb - 2.0 * (Q @ B.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def kernel_weights(Q: np.ndarray, B: np.ndarray, kcfg: KernelConfig) -> np.ndarray:
    """Gaussian kernel matrix W[i, j] = exp(-||Q_i - B_j||^2 / sigma^2)."""
    Q = np.asarray(Q, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if Q.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {Q.shape[1]} vs {B.shape[1]}")
    return np.exp(_sq_dists(Q, B) / -(kcfg.bandwidth ** 2))


def estimate_field(
    query_embs: np.ndarray,
    bank: NeighbourBank,
    kcfg: KernelConfig,
    chunk: int = CHUNK_ROWS,
) -> FieldEstimate:
    """Nadaraya-Watson field estimate over the bank, chunked over queries.

    Queries whose total kernel mass underflows get value 0 and a starvation
    flag instead of raising. Results are independent of the chunk size.
    """
    if bank.size == 0:
        raise ValueError("neighbour bank is empty")
    Q = np.asarray(query_embs, dtype=np.float64)
    q = Q.shape[0]
    values = np.empty(q)
    masses = np.empty(q)
    starved = np.zeros(q, dtype=bool)
    r = bank.residuals
    for lo in range(0, q, chunk):
        hi = min(lo + chunk, q)
        W = kernel_weights(Q[lo:hi], bank.embeddings, kcfg)
        m = W.sum(axis=1)
        num = W @ r
        bad = m < MASS_FLOOR
        safe_m = np.where(bad, 1.0, m)
        values[lo:hi] = np.where(bad, 0.0, num / safe_m)
        masses[lo:hi] = m
        starved[lo:hi] = bad
    np.clip(values, -1.0, 1.0, out=values)
    return FieldEstimate(values=values, masses=masses, kernel=kcfg, bank=bank, starved=starved)


def _loss_terms(Z: np.ndarray, r: np.ndarray, kcfg: KernelConfig, lcfg: LossConfig):
    """Loss, gradient w.r.t. embeddings, and in-batch masses. Self term included."""
    n = Z.shape[0]
    W = kernel_weights(Z, Z, kcfg)
    m = W.sum(axis=1)
    delta = (W @ r) / m
    h = np.maximum(0.0, lcfg.m_min - m)
    loss = -float(np.mean(delta * delta)) + lcfg.lam * float(np.mean(h * h))

    # dLoss/dW[k, j], then chain through W[k, j] = exp(-||z_k - z_j||^2 / s^2).
    G = (-2.0 / n) * (delta[:, None] * (r[None, :] - delta[:, None]) / m[:, None]
                      + lcfg.lam * h[:, None])
    M = G * W
    A = M + M.T
    s = A.sum(axis=1)
    dZ = (-2.0 / kcfg.bandwidth ** 2) * (s[:, None] * Z - A @ Z)
    return loss, dZ, m


def discovery_loss(
    batch_embs: np.ndarray,
    batch_residuals: np.ndarray,
    kcfg: KernelConfig,
    lcfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Minibatch discovery loss and its exact gradient w.r.t. the embeddings.

    loss = -mean(delta_hat_i^2) + lambda * mean(max(0, m_min - m_i)^2), with
    both the field and the mass computed within the batch, self term included.
    """
    Z = np.asarray(batch_embs, dtype=np.float64)
    r = np.asarray(batch_residuals, dtype=np.float64)
    if Z.shape[0] < 2:
        raise ValueError(f"batch must contain at least 2 points, got {Z.shape[0]}")
    if r.shape != (Z.shape[0],):
        raise ValueError("residual vector does not match batch")
    loss, dZ, _ = _loss_terms(Z, r, kcfg, lcfg)
    return loss, dZ


def corrected_brier(f: np.ndarray, y: np.ndarray, delta: np.ndarray) -> float:
    """Mean squared error of the additively corrected forecast f + delta, unclipped."""
    e = y - (f + delta)
    return float(np.mean(e * e))


@dataclass
class TrainHistory:
    """Per-epoch trace; epoch 0 is the untrained baseline (proxy only)."""

    epochs: list[int]
    train_loss: list[float]
    mean_mass: list[float]
    val_proxy: list[float]
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,mean_mass,val_proxy"]
        for e, tl, mm, vp in zip(self.epochs, self.train_loss, self.mean_mass, self.val_proxy):
            lines.append(f"{e},{tl!r},{mm!r},{vp!r}")
        return "\n".join(lines) + "\n"


def _epoch_proxy(params, raw_bank: NeighbourBank, val_ds: Dataset, kcfg: KernelConfig) -> float:
    bank_z = geometry.forward(params, raw_bank.embeddings, mode="eval")
    phi_bank = NeighbourBank(
        embeddings=bank_z,
        residuals=raw_bank.residuals,
        source_indices=raw_bank.source_indices,
        cap=raw_bank.cap,
    )
    val_z = geometry.forward(params, val_ds.embeddings, mode="eval")
    est = estimate_field(val_z, phi_bank, kcfg)
    return corrected_brier(val_ds.confidences, val_ds.outcomes, est.values)


def train(
    train_ds: Dataset,
    val_ds: Dataset,
    arch: geometry.NetArch,
    kcfg: KernelConfig,
    lcfg: LossConfig,
    tcfg: TrainConfig,
    bank_cap: int = 20000,
) -> tuple[geometry.NetParams, TrainHistory]:
    """Train the representation with Adam and proxy-based early stopping.

    Each epoch runs shuffled minibatches of the discovery loss with global
    gradient-norm clipping, then scores the corrected validation Brier using
    the capped train bank in eval mode. The parameters with the best proxy
    seen so far (including the untrained baseline) are restored at the end.
    """
    if train_ds.n == 0 or val_ds.n == 0:
        raise ValueError("train and validation splits must be nonempty")
    s_init, s_shuffle, s_drop = np.random.SeedSequence(tcfg.seed).generate_state(3)
    params = geometry.init(arch, seed=int(s_init))
    opt = Adam(params.param_arrays(), lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay)
    shuffle_rng = np.random.default_rng(int(s_shuffle))
    raw_bank = sample_bank(train_ds, cap=bank_cap, seed=tcfg.seed)
    residuals = train_ds.residuals

    history = TrainHistory(epochs=[0], train_loss=[float("nan")],
                           mean_mass=[float("nan")], val_proxy=[])
    best_proxy = _epoch_proxy(params, raw_bank, val_ds, kcfg)
    history.val_proxy.append(best_proxy)
    best_params = params.copy()
    best_epoch = 0
    since_improve = 0
    step = 0

    for epoch in range(1, tcfg.max_epochs + 1):
        order = shuffle_rng.permutation(train_ds.n)
        loss_sum = 0.0
        mass_sum = 0.0
        count = 0
        for batch_idx, lo in enumerate(range(0, train_ds.n, tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            if idx.shape[0] < 2:
                continue
            step += 1
            drop_seed = int(np.random.SeedSequence([int(s_drop), step]).generate_state(1)[0])
            Z, cache = geometry.forward(
                params, train_ds.embeddings[idx], mode="train",
                seed=drop_seed, return_cache=True,
            )
            loss, dZ, m = _loss_terms(Z, residuals[idx], kcfg, lcfg)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}: "
                    f"loss={loss}, max|dZ|={np.max(np.abs(dZ))}"
                )
            geometry.backward(params, cache, dZ)
            clip_global_norm(params.grad_arrays(), tcfg.grad_clip_norm)
            opt.step(params.grad_arrays())
            loss_sum += loss * idx.shape[0]
            mass_sum += float(m.sum())
            count += idx.shape[0]

        proxy = _epoch_proxy(params, raw_bank, val_ds, kcfg)
        history.epochs.append(epoch)
        history.train_loss.append(loss_sum / max(count, 1))
        history.mean_mass.append(mass_sum / max(count, 1))
        history.val_proxy.append(proxy)

        if proxy < best_proxy:
            best_proxy = proxy
            best_params = params.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
        if since_improve >= tcfg.patience:
            history.stopped_epoch = epoch
            break
    else:
        history.stopped_epoch = tcfg.max_epochs

    history.best_epoch = best_epoch
    best_params.zero_grad()
    return best_params, history


def field_on(
    params: geometry.NetParams,
    ds: Dataset,
    raw_bank: NeighbourBank,
    kcfg: KernelConfig,
) -> FieldEstimate:
    """Evaluate the learned field on a dataset using a raw-space train bank."""
    bank_z = geometry.forward(params, raw_bank.embeddings, mode="eval")
    phi_bank = NeighbourBank(
        embeddings=bank_z,
        residuals=raw_bank.residuals,
        source_indices=raw_bank.source_indices,
        cap=raw_bank.cap,
    )
    qz = geometry.forward(params, ds.embeddings, mode="eval")
    return estimate_field(qz, phi_bank, kcfg)
