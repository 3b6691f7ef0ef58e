"""Electrostatic-repulsion design of diffusion-encoding direction sets.

Directions and their antipodes are treated as charged particle pairs on
the unit sphere; the design minimizes the summed inverse chord lengths by
gradient descent on the (theta, phi) parameterization with a backtracking
line search, so the energy of accepted iterates never increases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sphere import DirectionSet, cart_to_sph, canonicalize_hemisphere, uniform_hemisphere, wrap_angles

__all__ = ["DesignConfig", "coulomb_energy", "coulomb_gradient", "electrostatic_design"]

_MIN_CHORD = 1e-9
_MIN_SEPARATION = 1e-6  # radians, mod antipode, for designed sets
_MAX_HALVINGS = 30
_STALL_LIMIT = 50


@dataclass(frozen=True)
class DesignConfig:
    n: int
    seed: int = 0
    max_iters: int = 2000
    step_init: float = 0.1
    tol: float = 1e-10

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_init <= 0:
            raise ValueError("step_init must be > 0")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


def _pair_vectors(g: np.ndarray):
    i, j = np.triu_indices(g.shape[0], 1)
    return g[i] - g[j], g[i] + g[j]


def coulomb_energy(dirs: DirectionSet) -> float:
    """Sum over pairs of 1/|gi - gj| + 1/|gi + gj| for unit vectors gi."""
    if len(dirs) == 1:
        return 0.0
    d, s = _pair_vectors(dirs.to_cartesian())
    dn = np.linalg.norm(d, axis=1)
    sn = np.linalg.norm(s, axis=1)
    if min(dn.min(), sn.min()) < _MIN_CHORD:
        raise ValueError("coincident directions (mod antipode): energy is infinite")
    return float(np.sum(1.0 / dn) + np.sum(1.0 / sn))


def _energy_angles(thetas, phis):
    return coulomb_energy(DirectionSet(thetas, phis))


def coulomb_gradient(dirs: DirectionSet):
    """Analytic (dE/dtheta, dE/dphi) of :func:`coulomb_energy` per direction."""
    n = len(dirs)
    if n == 1:
        return np.zeros(1), np.zeros(1)
    g = dirs.to_cartesian()
    diff = g[:, None, :] - g[None, :, :]
    ssum = g[:, None, :] + g[None, :, :]
    dn = np.linalg.norm(diff, axis=2)
    sn = np.linalg.norm(ssum, axis=2)
    off = ~np.eye(n, dtype=bool)
    if min(dn[off].min(), sn[off].min()) < _MIN_CHORD:
        raise ValueError("coincident directions (mod antipode): energy is infinite")
    np.fill_diagonal(dn, np.inf)
    np.fill_diagonal(sn, np.inf)
    fcart = -(diff / dn[:, :, None] ** 3).sum(axis=1) - (ssum / sn[:, :, None] ** 3).sum(axis=1)
    st, ct = np.sin(dirs.thetas), np.cos(dirs.thetas)
    sp, cp = np.sin(dirs.phis), np.cos(dirs.phis)
    dg_dt = np.column_stack((ct * cp, ct * sp, -st))
    dg_dp = np.column_stack((-st * sp, st * cp, np.zeros(n)))
    return (fcart * dg_dt).sum(axis=1), (fcart * dg_dp).sum(axis=1)


def electrostatic_design(cfg: DesignConfig) -> DirectionSet:
    """Minimize the pairwise repulsion energy from a seeded hemisphere start.

    Deterministic given the config; the result is canonicalized to the
    upper hemisphere and sorted by (theta, phi).
    """
    rng = np.random.default_rng(cfg.seed)
    init = uniform_hemisphere(cfg.n, rng)
    thetas = init.thetas.copy()
    phis = init.phis.copy()
    if cfg.n > 1:
        energy = _energy_angles(thetas, phis)
        step = cfg.step_init
        stall = 0
        for _ in range(cfg.max_iters):
            gt, gp = coulomb_gradient(DirectionSet(thetas, phis))
            s = step
            accepted = False
            for _ in range(_MAX_HALVINGS):
                tt, pp = wrap_angles(thetas - s * gt, phis - s * gp)
                try:
                    new_energy = _energy_angles(tt, pp)
                except ValueError:
                    s *= 0.5
                    continue
                if new_energy < energy:
                    accepted = True
                    break
                s *= 0.5
            if accepted:
                rel_drop = (energy - new_energy) / max(energy, 1e-300)
                thetas, phis, energy = np.asarray(tt), np.asarray(pp), new_energy
                step = min(2.0 * s, cfg.step_init)
                stall = stall + 1 if rel_drop < cfg.tol else 0
            else:
                stall += 1
            if stall >= _STALL_LIMIT:
                break
    vecs = canonicalize_hemisphere(DirectionSet(thetas, phis).to_cartesian())
    ds = [cart_to_sph(v) for v in vecs]
    t = np.array([d.theta for d in ds])
    p = np.array([d.phi for d in ds])
    order = np.lexsort((p, t))
    out = DirectionSet(t[order], p[order])
    _check_separation(out)
    return out


def _check_separation(dirs: DirectionSet) -> None:
    if len(dirs) == 1:
        return
    g = dirs.to_cartesian()
    dots = np.abs(g @ g.T)
    np.fill_diagonal(dots, 0.0)
    min_angle = float(np.arccos(min(1.0, dots.max())))
    if min_angle < _MIN_SEPARATION:
        raise ValueError(
            f"design produced directions only {min_angle:.2e} rad apart (mod antipode); "
            "try another seed or a larger budget"
        )
