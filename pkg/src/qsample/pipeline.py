"""Differentiable acquisition-reconstruction pipeline and joint training.

The forward model resamples a fully-sampled volume onto n trainable
directions through a spherical-harmonic fit (the acquisition emulator),
then a reconstruction operator maps the n channels back to the N target
channels.  Both the direction angles and the reconstruction parameters
receive analytic gradients of the un-squared L2 discrepancy, and Adam
updates them jointly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .design import DesignConfig, electrostatic_design
from .sphere import (
    DirectionSet,
    default_sh_order,
    sh_basis,
    sh_basis_derivatives,
    sh_fit_operator,
    uniform_hemisphere,
    wrap_angles,
)
from .volume import DwiVolume, brain_mask

__all__ = [
    "AdamState",
    "GradientReport",
    "ReconstructionParams",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "loss_gradients",
    "loss_l2",
    "reconstruct",
    "subsample",
    "train_joint",
]

RECON_MODES = ("identity", "sh-interp", "linear")
TRAIN_MODES = ("fixed", "learned")
LOSS_KINDS = ("l2", "mse")
ZERO_RESIDUAL_GUARD = 1e-12


@dataclass
class ReconstructionParams:
    """Reconstruction operator: identity, SH interpolation, or per-voxel affine map."""

    mode: str
    weights: np.ndarray | None = None  # (N, n) for linear mode
    bias: np.ndarray | None = None  # (N,) for linear mode

    def __post_init__(self):
        if self.mode not in RECON_MODES:
            raise ValueError(f"mode must be one of {RECON_MODES}")
        if self.mode == "linear":
            if self.weights is None or self.bias is None:
                raise ValueError("linear mode needs weights and bias")
            self.weights = np.asarray(self.weights, dtype=float)
            self.bias = np.asarray(self.bias, dtype=float)
            if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
                raise ValueError("weights must be (N, n) with bias of length N")
        elif self.weights is not None or self.bias is not None:
            raise ValueError(f"{self.mode} mode takes no parameters")


@dataclass(frozen=True)
class TrainConfig:
    """Joint-training settings; learning-rate defaults follow the training protocol."""

    af: float = 1.0
    mode: str = "learned"
    recon: str = "linear"
    lr_recon: float = 0.001
    lr_dirs: float = 0.0001
    epochs: int = 50
    batch_slices: int = 1
    seed: int = 0
    sh_order: int | None = None  # None: largest determined even order, capped at 8
    lam: float = 0.006
    loss: str = "l2"
    early_stop_patience: int = 10
    early_stop_delta: float = 1e-5

    def __post_init__(self):
        if self.af < 1:
            raise ValueError("af must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}")
        if self.recon not in RECON_MODES:
            raise ValueError(f"recon must be one of {RECON_MODES}")
        if self.lr_recon <= 0 or self.lr_dirs <= 0:
            raise ValueError("learning rates must be > 0")
        if self.epochs < 1 or self.batch_slices < 1:
            raise ValueError("epochs and batch_slices must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def subsample(
    x: DwiVolume,
    dirs_out: DirectionSet,
    order: int | None = None,
    lam: float = 0.006,
    clamp: bool = True,
) -> DwiVolume:
    """Emulate acquiring ``x`` at new directions via per-voxel SH fit and resample.

    Equivalent to applying the (n, N) matrix B(dirs_out) (B'B + lam L^2)^-1 B'
    to every voxel's channel vector; negative resampled values are clamped
    to zero unless ``clamp`` is disabled (which exposes the raw linear map).
    """
    order = default_sh_order(len(x.dirs)) if order is None else order
    basis_in = sh_basis(order, x.dirs)
    fit_op = sh_fit_operator(basis_in, lam)
    m = sh_basis(order, dirs_out) @ fit_op
    out = x.data.reshape(-1, len(x.dirs)) @ m.T
    if clamp:
        np.maximum(out, 0.0, out=out)
    return x.with_data(out.reshape(x.dims + (len(dirs_out),)), dirs_out)


def reconstruct(
    xt: DwiVolume,
    params: ReconstructionParams,
    target_dirs: DirectionSet,
    order: int | None = None,
    lam: float = 0.006,
) -> DwiVolume:
    """Map an n-channel volume back to the target directions.

    ``identity`` passes the data through untouched (channel count stays n),
    ``sh-interp`` fits at the volume's own directions and evaluates at the
    targets, and ``linear`` applies the learned per-voxel affine map.
    """
    if params.mode == "identity":
        return xt.with_data(xt.data.copy())
    n = len(xt.dirs)
    flat = xt.data.reshape(-1, n)
    if params.mode == "sh-interp":
        order = default_sh_order(n) if order is None else order
        fit_op = sh_fit_operator(sh_basis(order, xt.dirs), lam)
        g = sh_basis(order, target_dirs) @ fit_op
        out = flat @ g.T
    else:
        if params.weights.shape[1] != n:
            raise ValueError(
                f"linear weights expect {params.weights.shape[1]} channels, volume has {n}"
            )
        out = flat @ params.weights.T + params.bias
    np.maximum(out, 0.0, out=out)  # reconstructed volumes hold attenuations
    return xt.with_data(out.reshape(xt.dims + (len(target_dirs),)), target_dirs)


def loss_l2(xhat: DwiVolume, x: DwiVolume, mask: np.ndarray) -> float:
    """Un-squared Euclidean discrepancy over masked voxels and all channels."""
    if xhat.dims != x.dims or xhat.n_channels != x.n_channels:
        raise ValueError("volumes must share dims and channel count")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.dims:
        raise ValueError("mask shape must match the volume dims")
    r = xhat.data[mask] - x.data[mask]
    return float(np.sqrt(np.sum(r * r)))


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    """Loss value and its gradients for one forward/backward evaluation."""

    loss: float
    d_theta: np.ndarray
    d_phi: np.ndarray
    d_weights: np.ndarray | None = None
    d_bias: np.ndarray | None = None


class _Operators:
    """Direction-independent matrices shared across training steps."""

    def __init__(self, full_dirs: DirectionSet, order: int, lam: float):
        self.order = order
        self.lam = lam
        self.basis_full = sh_basis(order, full_dirs)
        self.fit_full = sh_fit_operator(self.basis_full, lam)  # (R, N)
        degrees = np.repeat(
            np.arange(0, order + 1, 2), [2 * l + 1 for l in range(0, order + 1, 2)]
        ).astype(float)
        self.reg = np.diag(self.lam * (degrees * (degrees + 1.0)) ** 2)


def _forward_backward(a, operators: _Operators, dirs: DirectionSet, params, loss_kind):
    """Loss + gradients of loss(reconstruct(subsample(a))) w.r.t. angles and params.

    ``a`` is a (V, N) matrix of masked voxel signals; the reconstruction
    target is ``a`` itself.  Returns a GradientReport.
    """
    basis_out, db_dt, db_dp = _basis_with_derivs(operators.order, dirs)
    coef = a @ operators.fit_full.T  # (V, R)
    xt_pre = coef @ basis_out.T  # (V, n)
    neg = xt_pre < 0
    xt = np.where(neg, 0.0, xt_pre)

    solve_cache = None
    if params.mode == "identity":
        if xt.shape[1] != a.shape[1]:
            raise ValueError("identity reconstruction requires n == N")
        xhat = xt
    elif params.mode == "linear":
        xhat = xt @ params.weights.T + params.bias
    else:
        k = basis_out.T @ basis_out + operators.reg
        p = np.linalg.solve(k, basis_out.T)  # (R, n)
        g = operators.basis_full @ p  # (N, n)
        solve_cache = (k, p, g)
        xhat = xt @ g.T

    r = xhat - a
    if loss_kind == "mse":
        loss = float(np.mean(r * r))
        rbar = (2.0 / r.size) * r
    else:
        loss = float(np.sqrt(np.sum(r * r)))
        rbar = np.zeros_like(r) if loss < ZERO_RESIDUAL_GUARD else r / loss

    d_weights = d_bias = None
    if params.mode == "identity":
        xt_bar = rbar
        b_bar = np.zeros_like(basis_out)
    elif params.mode == "linear":
        d_weights = rbar.T @ xt
        d_bias = rbar.sum(axis=0)
        xt_bar = rbar @ params.weights
        b_bar = np.zeros_like(basis_out)
    else:
        k, p, g = solve_cache
        xt_bar = rbar @ g
        p_bar = (rbar @ operators.basis_full).T @ xt  # (R, n)
        kinv_pbar = np.linalg.solve(k, p_bar)
        k_bar = -kinv_pbar @ p.T
        b_bar = kinv_pbar.T + basis_out @ (k_bar + k_bar.T)
    xt_pre_bar = np.where(neg, 0.0, xt_bar)
    b_bar = b_bar + xt_pre_bar.T @ coef
    d_theta = np.einsum("ij,ij->i", b_bar, db_dt)
    d_phi = np.einsum("ij,ij->i", b_bar, db_dp)
    return GradientReport(loss, d_theta, d_phi, d_weights, d_bias)


def _basis_with_derivs(order, dirs):
    from .sphere import _basis_arrays

    return _basis_arrays(order, dirs.thetas, dirs.phis, derivatives=True)


def loss_gradients(
    x: DwiVolume,
    dirs: DirectionSet,
    params: ReconstructionParams,
    cfg: TrainConfig,
    mask: np.ndarray | None = None,
) -> GradientReport:
    """Gradients of the reconstruction loss of ``x`` against itself.

    The forward path subsamples ``x`` at ``dirs`` and reconstructs at
    x.dirs; gradients cover the direction angles and, in linear mode, the
    reconstruction parameters.  Matches central finite differences.
    """
    mask = brain_mask(x) if mask is None else np.asarray(mask, dtype=bool)
    order = default_sh_order(len(x.dirs)) if cfg.sh_order is None else cfg.sh_order
    operators = _Operators(x.dirs, order, cfg.lam)
    a = x.data[mask]
    return _forward_backward(a, operators, dirs, params, cfg.loss)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments per parameter group with a shared step counter."""

    lrs: dict[str, float]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lrs: dict[str, float]) -> "AdamState":
        if set(params) != set(lrs):
            raise ValueError("parameter groups and learning rates must match")
        return cls(
            lrs=dict(lrs),
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """One Adam update with bias correction; returns (new params, new state)."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_params[name] = p - state.lrs[name] * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(
        state.lrs, new_m, new_v, t, state.beta1, state.beta2, state.eps
    )


# ---------------------------------------------------------------------------
# Joint training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    """Artifacts of one training run.

    ``dirs`` and ``params`` are the checkpoint of the epoch with the best
    monitored loss (validation when provided, else training); the final
    iterates are kept alongside for inspection.
    """

    dirs: DirectionSet
    params: ReconstructionParams
    train_history: list[float]
    val_history: list[float]
    dir_history: list[np.ndarray]  # per epoch: (n, 2) array of (theta, phi)
    best_epoch: int = 0
    final_dirs: DirectionSet | None = None
    final_params: ReconstructionParams | None = None


def _check_shared_acquisition(volumes):
    first = volumes[0]
    for v in volumes[1:]:
        if v.dirs != first.dirs or v.b_value != first.b_value:
            raise ValueError("all volumes must share directions and b-value")
        if v.dims != first.dims:
            raise ValueError("all volumes must share dims")


def _volume_loss(vol, mask, operators, dirs, params, loss_kind):
    a = vol.data[mask]
    report = _forward_backward(a, operators, dirs, params, loss_kind)
    return report.loss


def _warm_start_linear(operators: _Operators, dirs: DirectionSet) -> ReconstructionParams:
    # start the affine map at the SH-interpolation operator of the initial dirs
    basis_out = sh_basis(operators.order, dirs)
    k = basis_out.T @ basis_out + operators.reg
    g = operators.basis_full @ np.linalg.solve(k, basis_out.T)
    return ReconstructionParams("linear", g, np.zeros(operators.basis_full.shape[0]))


def train_joint(
    volumes: list[DwiVolume],
    cfg: TrainConfig,
    val_volumes: tuple[DwiVolume, ...] = (),
    fixed_dirs: DirectionSet | None = None,
) -> TrainResult:
    """Jointly optimize encoding directions and the reconstruction operator.

    ``mode="learned"`` starts the directions from a seeded uniform
    hemisphere sample and trains them; ``mode="fixed"`` freezes them at
    ``fixed_dirs`` (or an electrostatic design seeded by the run seed).
    Training walks one batch of axial slices per step in a seed-shuffled
    order, so runs are deterministic given the config and data.
    """
    volumes = list(volumes)
    if not volumes:
        raise ValueError("training needs at least one volume")
    _check_shared_acquisition(volumes + list(val_volumes))
    full_dirs = volumes[0].dirs
    n_full = len(full_dirs)
    n_out = max(1, round(n_full / cfg.af))
    if cfg.recon == "identity" and n_out != n_full:
        raise ValueError("identity reconstruction requires af == 1 (n == N)")

    order = default_sh_order(n_full) if cfg.sh_order is None else cfg.sh_order
    operators = _Operators(full_dirs, order, cfg.lam)
    rng = np.random.default_rng(cfg.seed)

    if cfg.mode == "fixed":
        dirs = fixed_dirs or electrostatic_design(DesignConfig(n=n_out, seed=cfg.seed))
        if len(dirs) != n_out:
            raise ValueError(f"fixed_dirs has {len(dirs)} directions, expected {n_out}")
    else:
        dirs = uniform_hemisphere(n_out, rng)

    params = (
        _warm_start_linear(operators, dirs)
        if cfg.recon == "linear"
        else ReconstructionParams(cfg.recon)
    )

    trainable: dict[str, np.ndarray] = {}
    lrs: dict[str, float] = {}
    if cfg.mode == "learned":
        trainable["theta"] = dirs.thetas.copy()
        trainable["phi"] = dirs.phis.copy()
        lrs["theta"] = lrs["phi"] = cfg.lr_dirs
    if cfg.recon == "linear":
        trainable["weights"] = params.weights.copy()
        trainable["bias"] = params.bias.copy()
        lrs["weights"] = lrs["bias"] = cfg.lr_recon
    adam = AdamState.for_params(trainable, lrs) if trainable else None

    masks = [brain_mask(v) for v in volumes]
    val_masks = [brain_mask(v) for v in val_volumes]
    steps = [(vi, z) for vi in range(len(volumes)) for z in range(volumes[0].dims[2])]

    def current_dirs():
        if "theta" in trainable:
            return DirectionSet(trainable["theta"], trainable["phi"])
        return dirs

    def current_params():
        if cfg.recon == "linear":
            return ReconstructionParams("linear", trainable["weights"], trainable["bias"])
        return params

    train_history: list[float] = []
    val_history: list[float] = []
    dir_history: list[np.ndarray] = []
    best = math.inf
    best_epoch = 0
    best_snapshot = (current_dirs(), current_params())
    stale = 0
    epochs = cfg.epochs if trainable else 1

    for _epoch in range(epochs):
        epoch_loss = 0.0
        order_idx = rng.permutation(len(steps))
        for start in range(0, len(order_idx), cfg.batch_slices):
            batch = [steps[i] for i in order_idx[start : start + cfg.batch_slices]]
            blocks = []
            for vi, z in batch:
                m = masks[vi][:, :, z]
                if m.any():
                    blocks.append(volumes[vi].data[:, :, z][m])
            if not blocks:
                continue
            a = np.concatenate(blocks, axis=0)
            report = _forward_backward(a, operators, current_dirs(), current_params(), cfg.loss)
            epoch_loss += report.loss
            if not trainable:
                continue
            grads = {}
            if "theta" in trainable:
                grads["theta"] = report.d_theta
                grads["phi"] = report.d_phi
            if cfg.recon == "linear":
                grads["weights"] = report.d_weights
                grads["bias"] = report.d_bias
            new_params, adam = adam_step(adam, trainable, grads)
            if "theta" in new_params:
                t, p = wrap_angles(new_params["theta"], new_params["phi"])
                new_params["theta"] = np.asarray(t)
                new_params["phi"] = np.asarray(p)
            trainable = new_params
        train_history.append(epoch_loss)

        d = current_dirs()
        dir_history.append(np.column_stack((d.thetas, d.phis)))
        if val_volumes:
            val_loss = sum(
                _volume_loss(v, m, operators, d, current_params(), cfg.loss)
                for v, m in zip(val_volumes, val_masks)
            )
            val_history.append(val_loss)
            monitored = val_loss
        else:
            monitored = epoch_loss
        if best - monitored > cfg.early_stop_delta:
            best = monitored
            best_epoch = _epoch
            best_snapshot = (d, current_params())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break

    return TrainResult(
        best_snapshot[0],
        best_snapshot[1],
        train_history,
        val_history,
        dir_history,
        best_epoch,
        current_dirs(),
        current_params(),
    )
