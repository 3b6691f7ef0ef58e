"""ODF estimation, peak extraction, and deterministic streamline tracking.

The orientation distribution function is estimated per voxel with the
constant-solid-angle transform: fit spherical harmonics to
ln(-ln(S/S0)) and scale the coefficients by the Funk-Radon and
Laplace-Beltrami eigenvalues.  Tracking walks precomputed ODF peaks with
fixed Euler steps, bidirectionally from every seed, exactly in seed
order, so tractograms are bit-reproducible.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sphere import (
    DirectionSet,
    ShExpansion,
    canonicalize_hemisphere,
    default_sh_order,
    n_sh_coefficients,
    sh_basis,
    sh_degrees,
    sh_fit_operator,
)
from .util import default_threads, run_chunked
from .volume import DwiVolume

__all__ = [
    "OdfField",
    "PeakField",
    "SphereTessellation",
    "TrackParams",
    "Tractogram",
    "csa_odf",
    "default_tessellation",
    "find_peaks",
    "gfa",
    "gfa_map",
    "load_qtrk",
    "peak_field",
    "save_qtrk",
    "track_streamlines",
]

SIGNAL_CLAMP = 1e-4  # keeps the double logarithm finite
_ODF_DC = 1.0 / (2.0 * math.sqrt(math.pi))


# ---------------------------------------------------------------------------
# Sphere tessellation (subdivided icosahedron)
# ---------------------------------------------------------------------------


class SphereTessellation:
    """Unit-sphere triangulation with vertex adjacency for discrete peak finding."""

    def __init__(self, vertices: np.ndarray, faces: np.ndarray):
        self.vertices = np.asarray(vertices, dtype=float)
        self.faces = np.asarray(faces, dtype=int)
        nv = self.vertices.shape[0]
        neighbors = [set() for _ in range(nv)]
        for a, b, c in self.faces:
            neighbors[a].update((b, c))
            neighbors[b].update((a, c))
            neighbors[c].update((a, b))
        degree = max(len(s) for s in neighbors)
        idx = np.full((nv, degree), -1, dtype=int)
        for i, s in enumerate(neighbors):
            for k, j in enumerate(sorted(s)):
                idx[i, k] = j
        self.neighbor_index = idx
        self._basis_cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def basis(self, order: int) -> np.ndarray:
        if order not in self._basis_cache:
            self._basis_cache[order] = sh_basis(order, DirectionSet.from_cartesian(self.vertices))
        return self._basis_cache[order]


def _icosahedron():
    g = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0),
            (0, -1, g), (0, 1, g), (0, -1, -g), (0, 1, -g),
            (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1),
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=int,
    )
    return verts, faces


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            v = np.asarray(verts[i]) + np.asarray(verts[j])
            v /= np.linalg.norm(v)
            cache[key] = len(verts)
            verts.append(tuple(v))
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    return np.array(verts, dtype=float), np.array(out, dtype=int)


_DEFAULT_TESSELLATION: SphereTessellation | None = None


def default_tessellation(subdivisions: int = 4) -> SphereTessellation:
    """Icosahedron subdivided ``subdivisions`` times (2562 vertices at the default).

    Antipodally symmetric, so it covers a hemisphere with half its
    vertices; generated once per process and cached.
    """
    global _DEFAULT_TESSELLATION
    if subdivisions == 4 and _DEFAULT_TESSELLATION is not None:
        return _DEFAULT_TESSELLATION
    verts, faces = _icosahedron()
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    tess = SphereTessellation(verts, faces)
    if subdivisions == 4:
        _DEFAULT_TESSELLATION = tess
    return tess


# ---------------------------------------------------------------------------
# Constant-solid-angle ODF
# ---------------------------------------------------------------------------


@dataclass
class OdfField:
    """Per-voxel SH expansions of the ODF."""

    order: int
    coeffs: np.ndarray  # (X, Y, Z, R)

    def __post_init__(self):
        if self.order % 2 != 0:
            raise ValueError("ODF order must be even")
        if self.coeffs.shape[-1] != n_sh_coefficients(self.order):
            raise ValueError("coefficient count does not match order")

    @property
    def dims(self):
        return self.coeffs.shape[:3]

    def expansion_at(self, x: int, y: int, z: int) -> ShExpansion:
        return ShExpansion(self.order, self.coeffs[x, y, z])


def _csa_scale(order: int) -> np.ndarray:
    """Per-column factor -l(l+1) P_l(0) / (8 pi); the DC term is set separately."""
    degrees = sh_degrees(order)
    pl0 = np.zeros(order + 1)
    pl0[0] = 1.0
    for l in range(2, order + 1, 2):
        pl0[l] = -pl0[l - 2] * (l - 1) / l
    return np.where(
        degrees == 0, 0.0, -degrees * (degrees + 1) * pl0[degrees] / (8.0 * math.pi)
    )


def csa_odf(
    x: DwiVolume,
    order: int | None = None,
    lam: float = 0.006,
    threads: int | None = None,
) -> OdfField:
    """Constant-solid-angle ODF field of a b0-normalized volume.

    Per voxel the signal is clamped into (delta, 1-delta), passed through
    ln(-ln(.)), fit with spherical harmonics, and the coefficients are
    rescaled so the ODF integrates to one on the sphere.
    """
    n = len(x.dirs)
    order = default_sh_order(n) if order is None else order
    r = n_sh_coefficients(order)
    if n < r:
        raise ValueError(
            f"{n} directions cannot determine {r} coefficients; use a lower ODF order"
        )
    fit_op = sh_fit_operator(sh_basis(order, x.dirs), lam)
    scale = _csa_scale(order)
    flat = x.data.reshape(-1, n)
    out = np.empty((flat.shape[0], r))

    def work(start, stop):
        s = np.clip(flat[start:stop], SIGNAL_CLAMP, 1.0 - SIGNAL_CLAMP)
        t = np.log(-np.log(s))
        c = t @ fit_op.T
        block = c * scale
        block[:, 0] = _ODF_DC
        out[start:stop] = block
        return None

    run_chunked(work, flat.shape[0], 4096, threads)
    return OdfField(order, out.reshape(x.dims + (r,)))


def gfa(odf: ShExpansion) -> float:
    """Generalized fractional anisotropy sqrt(1 - c0^2 / |c|^2) of one expansion."""
    total = float(odf.coeffs @ odf.coeffs)
    if total == 0.0:
        return 0.0
    return math.sqrt(max(0.0, 1.0 - float(odf.coeffs[0]) ** 2 / total))


def gfa_map(field: OdfField) -> np.ndarray:
    """GFA of every voxel of an ODF field."""
    total = np.sum(field.coeffs**2, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(np.clip(1.0 - field.coeffs[..., 0] ** 2 / total, 0.0, 1.0))
    return np.where(total == 0.0, 0.0, out)


# ---------------------------------------------------------------------------
# Discrete peak extraction
# ---------------------------------------------------------------------------


@dataclass
class PeakField:
    """Up to K unit peak directions per voxel, sorted by descending ODF value."""

    dirs: np.ndarray  # (X, Y, Z, K, 3)
    values: np.ndarray  # (X, Y, Z, K)
    counts: np.ndarray  # (X, Y, Z)

    @property
    def dims(self):
        return self.counts.shape


def _select_peaks(vecs, vals, rel_threshold, min_sep, max_peaks):
    """Greedy antipodal-angle suppression of candidate maxima (already canonical)."""
    if len(vals) == 0:
        return [], []
    keep_order = np.lexsort((vecs[:, 2], vecs[:, 1], vecs[:, 0], -vals))
    cutoff = rel_threshold * vals[keep_order[0]]
    out_v, out_x = [], []
    for i in keep_order:
        if vals[i] < cutoff or vals[i] <= 0:
            continue
        ok = all(
            math.acos(min(1.0, abs(float(np.dot(vecs[i], w))))) >= min_sep for w in out_x
        )
        if ok:
            out_x.append(vecs[i])
            out_v.append(float(vals[i]))
            if len(out_x) == max_peaks:
                break
    return out_x, out_v


def _local_maxima_mask(vals, tess):
    """Boolean (..., V) mask of strict local maxima over the tessellation graph."""
    nbr = tess.neighbor_index
    mask = np.ones(vals.shape, dtype=bool)
    for k in range(nbr.shape[1]):
        col = nbr[:, k]
        valid = col >= 0
        comp = vals[..., np.where(valid, col, 0)]
        mask &= np.where(valid, vals > comp, True)
    return mask


def find_peaks(
    odf: ShExpansion,
    sphere: SphereTessellation | None = None,
    rel_threshold: float = 0.5,
    min_sep_angle_deg: float = 25.0,
    max_peaks: int = 3,
):
    """Discrete ODF maxima of one voxel as (direction, value) pairs.

    Maxima below ``rel_threshold`` times the global maximum are dropped and
    survivors are greedily thinned to at least ``min_sep_angle_deg`` apart
    (mod antipode), keeping at most ``max_peaks``.
    """
    tess = sphere or default_tessellation()
    vals = tess.basis(odf.order) @ odf.coeffs
    cand = np.nonzero(_local_maxima_mask(vals, tess))[0]
    vecs = canonicalize_hemisphere(tess.vertices[cand])
    dirs, values = _select_peaks(
        np.atleast_2d(vecs), vals[cand], rel_threshold, math.radians(min_sep_angle_deg), max_peaks
    )
    return list(zip(dirs, values))


def peak_field(
    field: OdfField,
    sphere: SphereTessellation | None = None,
    rel_threshold: float = 0.5,
    min_sep_angle_deg: float = 25.0,
    max_peaks: int = 3,
    threads: int | None = None,
) -> PeakField:
    """ODF peaks of every voxel; the vectorized counterpart of :func:`find_peaks`."""
    tess = sphere or default_tessellation()
    basis = tess.basis(field.order)
    dims = field.dims
    flat = field.coeffs.reshape(-1, field.coeffs.shape[-1])
    nvox = flat.shape[0]
    dirs = np.zeros((nvox, max_peaks, 3))
    values = np.zeros((nvox, max_peaks))
    counts = np.zeros(nvox, dtype=int)
    min_sep = math.radians(min_sep_angle_deg)

    def work(start, stop):
        vals = flat[start:stop] @ basis.T
        cand_mask = _local_maxima_mask(vals, tess)
        for row in range(vals.shape[0]):
            cand = np.nonzero(cand_mask[row])[0]
            if cand.size == 0:
                continue
            vecs = canonicalize_hemisphere(tess.vertices[cand])
            vx, vv = _select_peaks(
                np.atleast_2d(vecs), vals[row, cand], rel_threshold, min_sep, max_peaks
            )
            i = start + row
            counts[i] = len(vx)
            for k, (w, value) in enumerate(zip(vx, vv)):
                dirs[i, k] = w
                values[i, k] = value
        return None

    run_chunked(work, nvox, 1024, threads)
    return PeakField(
        dirs.reshape(dims + (max_peaks, 3)), values.reshape(dims + (max_peaks,)), counts.reshape(dims)
    )


# ---------------------------------------------------------------------------
# Deterministic streamline tracking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackParams:
    step_size: float = 0.5  # voxels
    angle_thresh_deg: float = 60.0
    gfa_thresh: float = 0.1
    max_len: int = 1000

    def __post_init__(self):
        if self.step_size <= 0 or self.max_len < 1:
            raise ValueError("step_size must be > 0 and max_len >= 1")


@dataclass
class Tractogram:
    """Streamlines as (P, 3) polylines in voxel coordinates, optionally labeled."""

    streamlines: list[np.ndarray]
    labels: list[str] | None = None

    def __len__(self) -> int:
        return len(self.streamlines)


def _walk(seeds, first_dirs, peaks: PeakField, stop_map, params: TrackParams):
    """March all seeds simultaneously in one orientation; returns per-seed polylines.

    Points are appended while they land in voxels above the GFA threshold;
    the walk then continues only if some peak at the new voxel stays within
    the turning-angle limit of the incoming direction.
    """
    dims = np.asarray(peaks.dims)
    nseeds = seeds.shape[0]
    history = np.zeros((nseeds, params.max_len + 1, 3))
    history[:, 0] = seeds
    lengths = np.ones(nseeds, dtype=int)
    pos = seeds.copy()
    direction = first_dirs.copy()
    active = np.linalg.norm(first_dirs, axis=1) > 0
    cos_limit = math.cos(math.radians(params.angle_thresh_deg))
    k = peaks.dirs.shape[3]
    for _ in range(params.max_len):
        if not active.any():
            break
        q = pos + params.step_size * direction
        vox_f = np.rint(q)
        inb = np.all((vox_f >= 0) & (vox_f <= dims - 1), axis=1)
        vox = np.clip(vox_f, 0, dims - 1).astype(int)
        vx, vy, vz = vox[:, 0], vox[:, 1], vox[:, 2]
        ok = active & inb & (stop_map[vx, vy, vz] >= params.gfa_thresh)
        idx = np.nonzero(ok)[0]
        history[idx, lengths[idx]] = q[idx]
        lengths[idx] += 1
        pos[idx] = q[idx]
        # choose the peak closest in angle to the incoming direction
        pk = peaks.dirs[vx, vy, vz]  # (S, K, 3)
        have = np.arange(k)[None, :] < peaks.counts[vx, vy, vz][:, None]
        dots = np.einsum("skj,sj->sk", pk, direction)
        adots = np.where(have, np.abs(dots), -1.0)
        best = adots.argmax(axis=1)
        rows = np.arange(nseeds)
        best_dot = dots[rows, best]
        best_abs = adots[rows, best]
        cont = ok & (best_abs >= cos_limit)
        chosen = pk[rows, best] * np.where(best_dot >= 0, 1.0, -1.0)[:, None]
        direction = np.where(cont[:, None], chosen, direction)
        active = cont
    return history, lengths


def track_streamlines(
    peaks: PeakField,
    stop_map: np.ndarray,
    seeds: np.ndarray,
    params: TrackParams = TrackParams(),
    threads: int | None = None,
) -> Tractogram:
    """EuDX-style deterministic tracking from every seed point.

    Each seed launches two walks along +/- its voxel's strongest peak; the
    halves are joined (seed point kept once) and streamlines shorter than
    two points are dropped.  Output order follows seed order exactly.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.shape[1] != 3:
        raise ValueError("seeds must be (S, 3)")
    stop_map = np.asarray(stop_map, dtype=float)
    if stop_map.shape != peaks.dims:
        raise ValueError("stop map dims must match the peak field")
    dims = np.asarray(peaks.dims)
    results: list[list[np.ndarray]] = []

    def work(start, stop):
        block = seeds[start:stop]
        vox_f = np.rint(block)
        inb = np.all((vox_f >= 0) & (vox_f <= dims - 1), axis=1)
        vox = np.clip(vox_f, 0, dims - 1).astype(int)
        vx, vy, vz = vox[:, 0], vox[:, 1], vox[:, 2]
        usable = (
            inb
            & (stop_map[vx, vy, vz] >= params.gfa_thresh)
            & (peaks.counts[vx, vy, vz] > 0)
        )
        first = np.where(usable[:, None], peaks.dirs[vx, vy, vz, 0], 0.0)
        fwd_hist, fwd_len = _walk(block, first, peaks, stop_map, params)
        bwd_hist, bwd_len = _walk(block, -first, peaks, stop_map, params)
        lines = []
        for i in range(block.shape[0]):
            if not usable[i]:
                continue
            back = bwd_hist[i, 1 : bwd_len[i]][::-1]
            fwd = fwd_hist[i, : fwd_len[i]]
            line = np.concatenate([back, fwd], axis=0)
            if line.shape[0] >= 2:
                lines.append(line.copy())
        return lines

    for block_lines in run_chunked(work, seeds.shape[0], 2048, threads):
        results.append(block_lines)
    return Tractogram([line for block in results for line in block])


# ---------------------------------------------------------------------------
# QTRK I/O
# ---------------------------------------------------------------------------

_QTRK_MAGIC = b"QTRK"


def _labels_path(path: Path) -> Path:
    return path.with_name(path.name + ".labels.csv")


def save_qtrk(tractogram: Tractogram, path) -> None:
    """Write streamlines as QTRK; labels go to a ``<name>.labels.csv`` sidecar."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_QTRK_MAGIC)
        f.write(struct.pack("<I", len(tractogram.streamlines)))
        for line in tractogram.streamlines:
            pts = np.ascontiguousarray(line, dtype="<f4")
            f.write(struct.pack("<I", pts.shape[0]))
            f.write(pts.tobytes())
    if tractogram.labels is not None:
        with open(_labels_path(path), "w", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["index", "label"])
            for i, label in enumerate(tractogram.labels):
                writer.writerow([i, label])


def load_qtrk(path) -> Tractogram:
    """Read a QTRK file, picking up the labels sidecar when present."""
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != _QTRK_MAGIC:
            raise ValueError(f"{path}: not a QTRK file")
        (count,) = struct.unpack("<I", f.read(4))
        lines = []
        for _ in range(count):
            (npts,) = struct.unpack("<I", f.read(4))
            buf = f.read(12 * npts)
            if len(buf) != 12 * npts:
                raise ValueError(f"{path}: truncated streamline data")
            lines.append(np.frombuffer(buf, dtype="<f4").astype(float).reshape(npts, 3))
    labels = None
    side = _labels_path(path)
    if side.exists():
        with open(side, newline="") as f:
            rows = list(csv.reader(f))
        if rows and rows[0] == ["index", "label"]:
            rows = rows[1:]
        labels = [""] * len(lines)
        for idx, label in rows:
            labels[int(idx)] = label
    return Tractogram(lines, labels)
