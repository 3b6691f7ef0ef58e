"""Spherical geometry and real symmetric spherical-harmonic (SH) regression.

Directions live on the unit sphere and are stored as elevation/azimuth
angle pairs (``theta`` in [0, pi], ``phi`` in [0, 2*pi)).  Diffusion
signals are antipodally symmetric, so every SH routine here uses the
real, even-order symmetric basis (see :func:`sh_basis` for the exact
convention).  The module also provides analytic derivatives of the basis
with respect to the angles, which is what makes direction sets trainable
by gradient descent further up the stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Direction",
    "DirectionSet",
    "ShExpansion",
    "angular_distance_antipodal",
    "canonicalize_hemisphere",
    "cart_to_sph",
    "default_sh_order",
    "eval_sh",
    "fit_sh",
    "load_directions_csv",
    "n_sh_coefficients",
    "order_from_n_coefficients",
    "save_directions_csv",
    "sh_basis",
    "sh_basis_derivatives",
    "sh_degrees",
    "sh_fit_operator",
    "sph_to_cart",
    "uniform_hemisphere",
    "wrap_angles",
]


def wrap_angles(theta, phi):
    """Map raw angles onto theta in [0, pi], phi in [0, 2*pi).

    Theta is wrapped modulo 2*pi and then reflected at the poles, adding
    pi to phi on reflection, so optimization steps can move through the
    poles without leaving the parameter domain.
    """
    theta = np.asarray(theta, dtype=float) % (2.0 * np.pi)
    phi = np.asarray(phi, dtype=float)
    over = theta > np.pi
    theta = np.where(over, 2.0 * np.pi - theta, theta)
    phi = np.where(over, phi + np.pi, phi) % (2.0 * np.pi)
    return theta, phi


@dataclass(frozen=True)
class Direction:
    """A single diffusion-encoding direction: elevation ``theta``, azimuth ``phi``."""

    theta: float
    phi: float

    def __post_init__(self):
        if not (math.isfinite(self.theta) and math.isfinite(self.phi)):
            raise ValueError("direction angles must be finite")
        t, p = wrap_angles(self.theta, self.phi)
        object.__setattr__(self, "theta", float(t))
        object.__setattr__(self, "phi", float(p))


class DirectionSet:
    """An ordered set of unit directions stored as (theta, phi) angle arrays.

    The angle arrays are read-only; build a new set to modify directions.
    """

    __slots__ = ("thetas", "phis")

    def __init__(self, thetas, phis):
        thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
        phis = np.atleast_1d(np.asarray(phis, dtype=float))
        if thetas.ndim != 1 or thetas.shape != phis.shape:
            raise ValueError("thetas and phis must be 1-D arrays of equal length")
        if thetas.size < 1:
            raise ValueError("a direction set needs at least one direction")
        if not (np.all(np.isfinite(thetas)) and np.all(np.isfinite(phis))):
            raise ValueError("direction angles must be finite")
        t, p = wrap_angles(thetas, phis)
        t = np.ascontiguousarray(t)
        p = np.ascontiguousarray(p)
        t.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "thetas", t)
        object.__setattr__(self, "phis", p)

    def __setattr__(self, name, value):
        raise AttributeError("DirectionSet is immutable")

    def __len__(self):
        return self.thetas.size

    def __getitem__(self, i) -> Direction:
        return Direction(float(self.thetas[i]), float(self.phis[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        return (
            isinstance(other, DirectionSet)
            and np.array_equal(self.thetas, other.thetas)
            and np.array_equal(self.phis, other.phis)
        )

    def __repr__(self):
        return f"DirectionSet(n={len(self)})"

    def to_cartesian(self) -> np.ndarray:
        """Return the directions as an (n, 3) array of unit vectors."""
        st = np.sin(self.thetas)
        return np.column_stack((st * np.cos(self.phis), st * np.sin(self.phis), np.cos(self.thetas)))

    @classmethod
    def from_cartesian(cls, vecs) -> "DirectionSet":
        vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
        ds = [cart_to_sph(v) for v in vecs]
        return cls([d.theta for d in ds], [d.phi for d in ds])

    @classmethod
    def from_directions(cls, directions) -> "DirectionSet":
        directions = list(directions)
        return cls([d.theta for d in directions], [d.phi for d in directions])


def sph_to_cart(d: Direction) -> np.ndarray:
    """Unit Cartesian vector (sin t cos p, sin t sin p, cos t) of a direction."""
    st = math.sin(d.theta)
    return np.array([st * math.cos(d.phi), st * math.sin(d.phi), math.cos(d.theta)])


def cart_to_sph(v) -> Direction:
    """Direction angles of a unit vector; inputs within 1e-3 of unit norm are normalized.

    At the poles (x = y = 0) the azimuth is fixed to 0.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValueError("expected a 3-vector")
    r = float(np.linalg.norm(v))
    if abs(r - 1.0) > 1e-3:
        raise ValueError(f"vector norm {r:.6g} too far from 1 to normalize")
    x, y, z = v / r
    theta = math.atan2(math.hypot(x, y), z)  # well-conditioned at the poles
    phi = 0.0 if (x == 0.0 and y == 0.0) else math.atan2(y, x) % (2.0 * math.pi)
    return Direction(theta, phi)


def canonicalize_hemisphere(v) -> np.ndarray:
    """Flip vectors into the canonical hemisphere.

    A vector is canonical when z > 0, or z = 0 and x > 0, or z = x = 0 and
    y > 0.  Works on a single vector or an (n, 3) array.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    w = np.atleast_2d(v).copy()
    x, y, z = w[:, 0], w[:, 1], w[:, 2]
    flip = (z < 0) | ((z == 0) & (x < 0)) | ((z == 0) & (x == 0) & (y < 0))
    w[flip] *= -1.0
    return w[0] if single else w


def angular_distance_antipodal(u, v) -> float:
    """Angle arccos(|u . v|) in [0, pi/2] between two unit vectors mod antipode."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.arccos(min(1.0, abs(float(np.dot(u, v))))))


# ---------------------------------------------------------------------------
# Real symmetric spherical harmonics
#
# Basis convention (the de facto standard in diffusion MRI): for each even
# degree l <= L and order m in [-l, l], with Y_l^m the complex spherical
# harmonic including the Condon-Shortley phase,
#     m < 0:  sqrt(2) * Im(Y_l^{|m|})
#     m = 0:  Y_l^0
#     m > 0:  sqrt(2) * Re(Y_l^m)
# Columns are ordered by (l, m) with l ascending and m from -l to l.
# ---------------------------------------------------------------------------


def n_sh_coefficients(order: int) -> int:
    """Number of basis functions, (L+1)(L+2)/2, for an even order L."""
    _check_order(order)
    return (order + 1) * (order + 2) // 2


def order_from_n_coefficients(r: int) -> int:
    """Inverse of :func:`n_sh_coefficients`; raises if ``r`` is not a valid count."""
    order = int((math.isqrt(1 + 8 * r) - 3) // 2)
    for cand in (order - 1, order, order + 1):
        if cand >= 0 and cand % 2 == 0 and (cand + 1) * (cand + 2) // 2 == r:
            return cand
    raise ValueError(f"{r} is not a coefficient count of an even-order symmetric basis")


def sh_degrees(order: int) -> np.ndarray:
    """Degree l of each basis column, as an int array of length R."""
    _check_order(order)
    return np.concatenate([np.full(2 * l + 1, l, dtype=int) for l in range(0, order + 1, 2)])


def default_sh_order(n_dirs: int, cap: int = 8) -> int:
    """Largest even order whose basis is no wider than ``n_dirs``, capped."""
    order = 0
    while order + 2 <= cap and n_sh_coefficients(order + 2) <= n_dirs:
        order += 2
    return order


@dataclass(frozen=True)
class ShExpansion:
    """Coefficients of the real symmetric SH basis of a given even order."""

    order: int
    coeffs: np.ndarray

    def __post_init__(self):
        _check_order(self.order)
        c = np.ascontiguousarray(np.asarray(self.coeffs, dtype=float))
        if c.ndim != 1 or c.size != n_sh_coefficients(self.order):
            raise ValueError(
                f"expected {n_sh_coefficients(self.order)} coefficients for order {self.order}, got shape {c.shape}"
            )
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)


def _check_order(order):
    if order < 0 or order % 2 != 0:
        raise ValueError(f"SH order must be even and non-negative, got {order}")


def _legendre_table(lmax: int, cos_t: np.ndarray, sin_t: np.ndarray) -> np.ndarray:
    """Associated Legendre values P_l^m(cos t) for 0 <= m <= l <= lmax.

    Standard three-term recurrence, Condon-Shortley phase included.  The
    returned array has shape (lmax+1, lmax+2, n); the extra m column stays
    zero so derivative formulas can index m+1 without bounds checks.
    """
    n = cos_t.shape[0]
    p = np.zeros((lmax + 1, lmax + 2, n))
    p[0, 0] = 1.0
    for m in range(1, lmax + 1):
        p[m, m] = -(2 * m - 1) * sin_t * p[m - 1, m - 1]
    for m in range(0, lmax):
        p[m + 1, m] = (2 * m + 1) * cos_t * p[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            p[l, m] = ((2 * l - 1) * cos_t * p[l - 1, m] - (l + m - 1) * p[l - 2, m]) / (l - m)
    return p


def _legendre_theta_derivative(lmax: int, p: np.ndarray) -> np.ndarray:
    """d/dt of P_l^m(cos t) via the order-shift identity.

    Uses dP_l^m/dt = ((P_l^{m+1}) - (l+m)(l-m+1) P_l^{m-1}) / 2 with the
    negative-order extension P_l^{-1} = -P_l^1 / (l (l+1)), so no division
    by sin(t) occurs and the pole values come out as exact polynomial
    limits.
    """
    dp = np.zeros_like(p)
    for l in range(1, lmax + 1):
        for m in range(0, l + 1):
            lower = -p[l, 1] / (l * (l + 1)) if m == 0 else p[l, m - 1]
            dp[l, m] = 0.5 * (p[l, m + 1] - (l + m) * (l - m + 1) * lower)
    return dp


_COLUMN_CACHE: dict[int, list] = {}


def _column_layout(order):
    """Cached (l, m, |m|, scale) per basis column."""
    if order not in _COLUMN_CACHE:
        layout = []
        for l in range(0, order + 1, 2):
            for m in range(-l, l + 1):
                am = abs(m)
                norm = math.sqrt(
                    (2 * l + 1) / (4.0 * math.pi) * math.factorial(l - am) / math.factorial(l + am)
                )
                scale = norm if m == 0 else math.sqrt(2.0) * norm
                layout.append((l, m, am, scale))
        _COLUMN_CACHE[order] = layout
    return _COLUMN_CACHE[order]


def _basis_arrays(order, thetas, phis, derivatives):
    cos_t = np.cos(thetas)
    sin_t = np.sin(thetas)
    p = _legendre_table(order, cos_t, sin_t)
    dp = _legendre_theta_derivative(order, p) if derivatives else None
    layout = _column_layout(order)
    n = thetas.shape[0]
    # trig factors for every |m| at once
    ms = np.arange(order + 1)
    cos_m = np.cos(ms[:, None] * phis[None, :])
    sin_m = np.sin(ms[:, None] * phis[None, :])
    b = np.empty((n, len(layout)))
    bt = np.empty_like(b) if derivatives else None
    bp = np.empty_like(b) if derivatives else None
    for j, (l, m, am, scale) in enumerate(layout):
        ang = sin_m[am] if m < 0 else cos_m[am]
        b[:, j] = scale * p[l, am] * ang
        if derivatives:
            bt[:, j] = scale * dp[l, am] * ang
            if m < 0:
                bp[:, j] = scale * am * p[l, am] * cos_m[am]
            elif m == 0:
                bp[:, j] = 0.0
            else:
                bp[:, j] = -scale * m * p[l, am] * sin_m[am]
    return b, bt, bp


def sh_basis(order: int, dirs: DirectionSet) -> np.ndarray:
    """Basis matrix B with B[i, j] the j-th basis function at direction i.

    Shape (n, R) with R = (L+1)(L+2)/2 for even order L.
    """
    _check_order(order)
    b, _, _ = _basis_arrays(order, dirs.thetas, dirs.phis, derivatives=False)
    return b


def sh_basis_derivatives(order: int, dirs: DirectionSet):
    """Entrywise partials (dB/dtheta, dB/dphi) of :func:`sh_basis`.

    Each derivative only involves the angles of its own row.
    """
    _check_order(order)
    _, dt, df = _basis_arrays(order, dirs.thetas, dirs.phis, derivatives=True)
    return dt, df


def sh_fit_operator(basis: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """The (R, n) operator mapping signals to Laplace-Beltrami regularized coefficients.

    Solves (B^T B + lam * diag((l(l+1))^2)) c = B^T s via a symmetric
    positive-definite factorization; raises a ValueError suggesting
    lam > 0 when the normal equations are rank-deficient.
    """
    basis = np.asarray(basis, dtype=float)
    if basis.ndim != 2:
        raise ValueError("basis must be a 2-D matrix")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    order = order_from_n_coefficients(basis.shape[1])
    ldeg = sh_degrees(order).astype(float)
    a = basis.T @ basis
    if lam > 0:
        a = a + lam * np.diag((ldeg * (ldeg + 1.0)) ** 2)
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise ValueError(
            "normal equations are rank-deficient (too few or degenerate directions); "
            "refit with lam > 0 or a lower order"
        ) from None
    return np.linalg.solve(a, basis.T)


def fit_sh(signals, basis: np.ndarray, lam: float = 0.0) -> ShExpansion:
    """Least-squares SH fit of sampled signals, optionally LB-regularized.

    ``signals`` has length n matching the basis rows; the expansion order
    is inferred from the basis width.
    """
    signals = np.asarray(signals, dtype=float)
    basis = np.asarray(basis, dtype=float)
    if signals.shape != (basis.shape[0],):
        raise ValueError("signal length must match basis rows")
    op = sh_fit_operator(basis, lam)
    return ShExpansion(order_from_n_coefficients(basis.shape[1]), op @ signals)


def eval_sh(expansion: ShExpansion, dirs: DirectionSet) -> np.ndarray:
    """Evaluate an expansion at each direction: B(dirs) @ coeffs."""
    return sh_basis(expansion.order, dirs) @ expansion.coeffs


def uniform_hemisphere(n: int, rng: np.random.Generator) -> DirectionSet:
    """Area-preserving uniform sample of n directions on the upper hemisphere.

    Draws z uniform in [0, 1) and phi uniform in [0, 2*pi).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.random(n)
    phi = 2.0 * np.pi * rng.random(n)
    return DirectionSet(np.arccos(z), phi)


def save_directions_csv(path, dirs: DirectionSet) -> None:
    """Write a direction set as CSV with header ``theta,phi``, radians, LF endings."""
    with open(path, "w", newline="\n") as f:
        f.write("theta,phi\n")
        for t, p in zip(dirs.thetas, dirs.phis):
            f.write(f"{float(t)!r},{float(p)!r}\n")


def load_directions_csv(path) -> DirectionSet:
    """Read a direction set written by :func:`save_directions_csv`."""
    with open(path, "r", newline="") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0].replace(" ", "") != "theta,phi":
        raise ValueError(f"{path}: expected header 'theta,phi'")
    thetas, phis = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}: malformed row {ln!r}")
        thetas.append(float(parts[0]))
        phis.append(float(parts[1]))
    return DirectionSet(thetas, phis)
