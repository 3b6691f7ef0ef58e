"""Synthetic multi-tensor DWI phantoms with known fiber geometry.

Bundles are tubes around polyline centerlines rasterized onto the voxel
grid; voxels inside one tube carry a single axisymmetric tensor aligned
with the local tangent, voxels inside several tubes carry an equal-weight
mixture, and everything else is isotropic background.  The resulting
signals are analytic, so the phantom doubles as an oracle for the
acquisition pipeline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .design import DesignConfig, electrostatic_design
from .sphere import DirectionSet
from .volume import DwiVolume

__all__ = [
    "Bundle",
    "PhantomSpec",
    "PhantomTruth",
    "TensorCompartment",
    "add_rician_noise",
    "generate_phantom",
    "load_truth",
    "save_truth",
    "synthesize_signals",
    "tensor_signal",
]

DEFAULT_EIGENVALUES = (1.7e-3, 0.3e-3, 0.3e-3)  # mm^2/s, typical white matter
DEFAULT_BACKGROUND_DIFFUSIVITY = 3.0e-3  # mm^2/s, free-water-like
PRESETS = ("straight", "crossing", "arc")


@dataclass(frozen=True)
class TensorCompartment:
    """One diffusion tensor: eigenvalues (descending), principal axis, volume fraction."""

    eigenvalues: tuple[float, float, float]
    axis: np.ndarray
    fraction: float

    def __post_init__(self):
        ev = tuple(float(v) for v in self.eigenvalues)
        if len(ev) != 3 or not (ev[0] >= ev[1] >= ev[2] > 0):
            raise ValueError("eigenvalues must satisfy l1 >= l2 >= l3 > 0")
        axis = np.asarray(self.axis, dtype=float)
        norm = np.linalg.norm(axis)
        if axis.shape != (3,) or abs(norm - 1.0) > 1e-6:
            raise ValueError("axis must be a unit 3-vector")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "axis", axis / norm)

    def tensor(self) -> np.ndarray:
        """The full 3x3 diffusion tensor with a deterministic eigenframe."""
        a = self.axis
        helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        b = np.cross(a, helper)
        b /= np.linalg.norm(b)
        c = np.cross(a, b)
        l1, l2, l3 = self.eigenvalues
        return l1 * np.outer(a, a) + l2 * np.outer(b, b) + l3 * np.outer(c, c)


def tensor_signal(g, b: float, compartments) -> float:
    """Attenuation sum(f_i * exp(-b g^T D_i g)) of a compartment mixture at one direction."""
    g = np.asarray(g, dtype=float)
    if abs(np.linalg.norm(g) - 1.0) > 1e-6:
        raise ValueError("g must be a unit vector")
    if b < 0:
        raise ValueError("b must be >= 0")
    compartments = list(compartments)
    total = sum(c.fraction for c in compartments)
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"compartment fractions sum to {total:.6g}, expected 1")
    return float(sum(c.fraction * math.exp(-b * float(g @ c.tensor() @ g)) for c in compartments))


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry preset plus acquisition parameters for :func:`generate_phantom`."""

    preset: str
    dims: tuple[int, int, int] = (32, 32, 32)
    n_dirs: int = 60
    seed: int = 0
    crossing_angle_deg: float = 90.0
    orientation_deg: float = 0.0  # rotates the whole geometry about the z axis
    b_value: float = 1000.0
    voxel_size: float = 2.0
    tube_radius: float | None = None
    roi_depth: float = 3.0
    eigenvalues: tuple[float, float, float] = DEFAULT_EIGENVALUES
    background_diffusivity: float = DEFAULT_BACKGROUND_DIFFUSIVITY

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 8:
            raise ValueError("dims must be three sizes of at least 8 voxels")
        if self.n_dirs < 6:
            raise ValueError("n_dirs must be >= 6")
        if not 0 < self.crossing_angle_deg < 180:
            raise ValueError("crossing angle must be in (0, 180) degrees")
        object.__setattr__(self, "dims", dims)

    @property
    def radius(self) -> float:
        if self.tube_radius is not None:
            return float(self.tube_radius)
        return max(1.5, 0.09 * min(self.dims))


@dataclass
class Bundle:
    """One ground-truth fiber bundle on the voxel grid."""

    name: str
    centerline: np.ndarray  # (P, 3) voxel coordinates
    radius: float
    mask: np.ndarray  # (X, Y, Z) bool, tube voxels
    roi_a: np.ndarray  # (X, Y, Z) bool, endpoint region at the start
    roi_b: np.ndarray  # (X, Y, Z) bool, endpoint region at the end
    axes: np.ndarray  # (X, Y, Z, 3) local tangents (only meaningful inside mask)


@dataclass
class PhantomTruth:
    """Ground-truth geometry and per-voxel compartments of a phantom."""

    dims: tuple[int, int, int]
    bundles: list[Bundle]
    eigenvalues: tuple[float, float, float] = DEFAULT_EIGENVALUES
    background_diffusivity: float = DEFAULT_BACKGROUND_DIFFUSIVITY

    def fiber_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        for b in self.bundles:
            mask |= b.mask
        return mask

    def compartments_at(self, x: int, y: int, z: int) -> list[TensorCompartment]:
        """The tensor mixture of one voxel (isotropic background if outside all tubes)."""
        inside = [b for b in self.bundles if b.mask[x, y, z]]
        if not inside:
            d = self.background_diffusivity
            return [TensorCompartment((d, d, d), np.array([0.0, 0.0, 1.0]), 1.0)]
        f = 1.0 / len(inside)
        return [TensorCompartment(self.eigenvalues, b.axes[x, y, z], f) for b in inside]


def _sample_polyline(points: np.ndarray, spacing: float = 0.25):
    """Resample a polyline at roughly uniform spacing; returns samples, tangents, arclengths."""
    seg = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    total = float(seg_len.sum())
    n = max(2, int(math.ceil(total / spacing)) + 1)
    s_nodes = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.linspace(0.0, total, n)
    samples = np.empty((n, 3))
    tangents = np.empty((n, 3))
    for k in range(3):
        samples[:, k] = np.interp(s, s_nodes, points[:, k])
    idx = np.clip(np.searchsorted(s_nodes, s, side="right") - 1, 0, len(seg) - 1)
    tangents = seg[idx] / seg_len[idx][:, None]
    return samples, tangents, s


def _rasterize_tube(dims, centerline, radius, roi_depth):
    """Tube mask, endpoint ROI masks, nearest-tangent field for one bundle."""
    samples, tangents, s = _sample_polyline(np.asarray(centerline, dtype=float))
    grid = np.stack(
        np.meshgrid(*(np.arange(d, dtype=float) for d in dims), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    nvox = grid.shape[0]
    nearest = np.empty(nvox, dtype=int)
    dist = np.empty(nvox)
    for start in range(0, nvox, 4096):  # chunked to bound the distance matrix
        block = grid[start : start + 4096]
        d2 = ((block[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
        arg = d2.argmin(axis=1)
        nearest[start : start + 4096] = arg
        dist[start : start + 4096] = np.sqrt(d2[np.arange(block.shape[0]), arg])
    inside = dist <= radius
    arc = s[nearest]
    mask = inside.reshape(dims)
    roi_a = (inside & (arc <= roi_depth)).reshape(dims)
    roi_b = (inside & (arc >= s[-1] - roi_depth)).reshape(dims)
    axes = tangents[nearest].reshape(dims + (3,))
    return mask, roi_a, roi_b, axes


def _preset_centerlines(spec: PhantomSpec):
    nx, ny, nz = spec.dims
    margin = 2.0 if min(spec.dims) >= 16 else 1.0
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    center = np.array([cx, cy, cz])
    tilt = math.radians(spec.orientation_deg)

    def in_plane_line(angle, name):
        # line through the volume center at `angle` from the y axis, extending
        # until the margin box is hit along either in-plane axis
        u = np.array([math.sin(angle), math.cos(angle), 0.0])
        tmax = min(
            (cx - margin) / max(abs(u[0]), 1e-12),
            (cy - margin) / max(abs(u[1]), 1e-12),
        )
        return name, np.array([center - tmax * u, center + tmax * u])

    if spec.preset == "straight":
        return [in_plane_line(tilt, "straight")]
    if spec.preset == "crossing":
        half = math.radians(spec.crossing_angle_deg) / 2.0
        return [in_plane_line(tilt + half, "cross-a"), in_plane_line(tilt - half, "cross-b")]
    # quarter-circle arc in the z = cz plane, optionally swung about the center
    rho = min(nx, ny) - 1 - 2 * margin
    t = np.linspace(0.0, math.pi / 2.0, 65)
    pts = np.column_stack(
        (margin + rho * np.cos(t), margin + rho * np.sin(t), np.full_like(t, cz))
    )
    if tilt:
        pts = _rotate_about_z(pts, center, spec.orientation_deg)
        if pts[:, :2].min() < 0 or pts[:, 0].max() > nx - 1 or pts[:, 1].max() > ny - 1:
            raise ValueError("arc orientation pushes the bundle outside the volume")
    return [("arc", pts)]


def _rotate_about_z(points: np.ndarray, center: np.ndarray, angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    rot = np.array([[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0], [0.0, 0.0, 1.0]])
    return (points - center) @ rot.T + center


def phantom_truth(spec: PhantomSpec) -> PhantomTruth:
    """Ground-truth geometry for a preset, without synthesizing any signal."""
    bundles = []
    for name, line in _preset_centerlines(spec):
        mask, roi_a, roi_b, axes = _rasterize_tube(spec.dims, line, spec.radius, spec.roi_depth)
        bundles.append(Bundle(name, np.asarray(line, dtype=float), spec.radius, mask, roi_a, roi_b, axes))
    rois = [m for b in bundles for m in (b.roi_a, b.roi_b)]
    for i in range(len(rois)):
        for j in range(i + 1, len(rois)):
            if np.any(rois[i] & rois[j]):
                raise ValueError("phantom geometry produced overlapping endpoint regions")
    return PhantomTruth(spec.dims, bundles, spec.eigenvalues, spec.background_diffusivity)


def synthesize_signals(truth: PhantomTruth, dirs: DirectionSet, b_value: float) -> np.ndarray:
    """Noiseless attenuation array (X, Y, Z, D) for arbitrary encoding directions.

    Bundle tensors are axisymmetric, so per-voxel attenuation reduces to
    exp(-b (l3 + (l1 - l3) (g . axis)^2)) mixed over the tubes covering
    the voxel.
    """
    l1, l2, l3 = truth.eigenvalues
    if abs(l2 - l3) > 1e-18:
        raise ValueError("bundle tensors must be axisymmetric (l2 == l3)")
    g = dirs.to_cartesian()
    dims = truth.dims
    counts = np.zeros(dims, dtype=int)
    for b in truth.bundles:
        counts += b.mask
    data = np.zeros(dims + (len(dirs),))
    background = math.exp(-b_value * truth.background_diffusivity)
    data[counts == 0] = background
    for b in truth.bundles:
        sel = b.mask
        proj = b.axes[sel] @ g.T  # (V, D)
        att = np.exp(-b_value * (l3 + (l1 - l3) * proj**2))
        data[sel] += att / counts[sel][:, None]
    return data


def generate_phantom(spec: PhantomSpec) -> tuple[DwiVolume, PhantomTruth]:
    """Build a noiseless phantom volume plus its ground truth.

    Encoding directions come from the electrostatic design seeded by the
    phantom seed; the b0 reference is 1 everywhere.
    """
    truth = phantom_truth(spec)
    dirs = electrostatic_design(DesignConfig(n=spec.n_dirs, seed=spec.seed))
    data = synthesize_signals(truth, dirs, spec.b_value)
    vol = DwiVolume(
        data,
        dirs,
        spec.b_value,
        (spec.voxel_size,) * 3,
        np.ones(spec.dims),
    )
    return vol, truth


# ---------------------------------------------------------------------------
# Rician noise from a counter-based generator
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x * _GAMMA + _GAMMA  # counter step; uint64 wrap-around intended
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _uniform01(bits: np.ndarray) -> np.ndarray:
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)


def counter_gaussian_pair(seed: int, counters: np.ndarray):
    """Two independent standard normals per counter, reproducible and order-free.

    Each counter (here: the flat (x, y, z, d) sample index) is hashed with
    the seed through splitmix64 and turned into a Box-Muller pair, so any
    subset of samples can be generated independently of the rest.
    """
    counters = np.asarray(counters, dtype=np.uint64)
    base = _splitmix64(np.uint64(seed % 2**64) + _GAMMA * counters)
    with np.errstate(over="ignore"):
        u1 = _uniform01(_splitmix64(base))
        u2 = _uniform01(_splitmix64(base ^ _MIX2))
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)


def add_rician_noise(vol: DwiVolume, snr: float, seed: int) -> DwiVolume:
    """Rician-corrupt a volume: S' = sqrt((S + e1)^2 + e2^2), e ~ N(0, (1/snr)^2).

    ``snr=inf`` returns an identical copy.  Noise is keyed by
    (seed, x, y, z, d), so every sample's noise is independent of volume
    traversal order.
    """
    if snr != math.inf and snr <= 0:
        raise ValueError("snr must be positive or inf")
    if snr == math.inf:
        return vol.with_data(vol.data.copy())
    sigma = 1.0 / snr
    counters = np.arange(vol.data.size, dtype=np.uint64)
    with np.errstate(over="ignore"):
        e1, e2 = counter_gaussian_pair(seed, counters)
    e1 = e1.reshape(vol.data.shape)
    e2 = e2.reshape(vol.data.shape)
    noisy = np.sqrt((vol.data + sigma * e1) ** 2 + (sigma * e2) ** 2)
    return vol.with_data(noisy)


# ---------------------------------------------------------------------------
# Ground-truth serialization (QTRUTH text schema; see README)
# ---------------------------------------------------------------------------


def _format_points(points: np.ndarray) -> str:
    return "; ".join(" ".join(repr(float(v)) for v in p) for p in points)


def _parse_points(text: str) -> np.ndarray:
    rows = [r for r in (chunk.strip() for chunk in text.split(";")) if r]
    return np.array([[float(v) for v in r.split()] for r in rows], dtype=float)


def _format_voxels(mask: np.ndarray) -> str:
    idx = np.argwhere(mask)
    return "; ".join(" ".join(str(int(v)) for v in row) for row in idx)


def _parse_voxels(text: str, dims) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        x, y, z = (int(v) for v in chunk.split())
        mask[x, y, z] = True
    return mask


def save_truth(truth: PhantomTruth, path) -> None:
    """Write ground truth as structured text: geometry, ROI and mask voxel lists."""
    lines = [
        "format: QTRUTH",
        "version: 1",
        "dims: " + " ".join(str(d) for d in truth.dims),
        "eigenvalues: " + " ".join(repr(float(v)) for v in truth.eigenvalues),
        "background_diffusivity: " + repr(float(truth.background_diffusivity)),
        f"bundles: {len(truth.bundles)}",
    ]
    for i, b in enumerate(truth.bundles):
        lines.append(f"bundle_{i}_name: {b.name}")
        lines.append(f"bundle_{i}_radius: {float(b.radius)!r}")
        lines.append(f"bundle_{i}_centerline: {_format_points(b.centerline)}")
        lines.append(f"bundle_{i}_roi_a: {_format_voxels(b.roi_a)}")
        lines.append(f"bundle_{i}_roi_b: {_format_voxels(b.roi_b)}")
        lines.append(f"bundle_{i}_mask: {_format_voxels(b.mask)}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def load_truth(path) -> PhantomTruth:
    """Read a QTRUTH file; tangent fields are recomputed from the centerlines."""
    fields = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, value = line.split(":", 1)
            fields[key.strip()] = value.strip()
    if fields.get("format") != "QTRUTH":
        raise ValueError(f"{path}: not a QTRUTH file")
    dims = tuple(int(v) for v in fields["dims"].split())
    eigenvalues = tuple(float(v) for v in fields["eigenvalues"].split())
    background = float(fields["background_diffusivity"])
    bundles = []
    for i in range(int(fields["bundles"])):
        centerline = _parse_points(fields[f"bundle_{i}_centerline"])
        radius = float(fields[f"bundle_{i}_radius"])
        _, _, _, axes = _rasterize_tube(dims, centerline, radius, roi_depth=0.0)
        bundles.append(
            Bundle(
                fields[f"bundle_{i}_name"],
                centerline,
                radius,
                _parse_voxels(fields[f"bundle_{i}_mask"], dims),
                _parse_voxels(fields[f"bundle_{i}_roi_a"], dims),
                _parse_voxels(fields[f"bundle_{i}_roi_b"], dims),
                axes,
            )
        )
    return PhantomTruth(dims, bundles, eigenvalues, background)
