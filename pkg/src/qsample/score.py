"""Signal-space and tractography-space evaluation metrics.

PSNR compares reconstructed against reference volumes over a support
mask.  Tractograms are scored two ways: a Bhattacharyya distance between
per-axis marginal point histograms of matched bundles, and
tractometer-style connection metrics (valid/invalid/non-connecting
fractions, bundle counts, overlap/overreach/F1).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import PhantomTruth
from .tract import Tractogram
from .volume import DwiVolume

__all__ = [
    "BD_CAP",
    "ConnectionReport",
    "assign_bundles",
    "bhattacharyya_distance",
    "bundle_points",
    "connection_scores",
    "psnr",
    "write_report_csv",
    "write_report_text",
]

BD_CAP = 50.0
BD_VARIANT = "per-axis marginal histograms, mean coefficient"
_LABEL_NC = "nc"
_LABEL_INVALID = "invalid"


def psnr(xhat: DwiVolume, x: DwiVolume, mask: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over masked voxels and all channels.

    The peak is the maximum of the reference over the mask; a zero-error
    comparison returns the ``inf`` sentinel.
    """
    if xhat.dims != x.dims or xhat.n_channels != x.n_channels:
        raise ValueError("volumes must share dims and channel count")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.dims:
        raise ValueError("mask shape must match the volumes")
    if not mask.any():
        raise ValueError("mask selects no voxels")
    diff = xhat.data[mask] - x.data[mask]
    rmse = math.sqrt(float(np.mean(diff * diff)))
    peak = float(x.data[mask].max())
    if rmse == 0.0:
        return math.inf
    return 20.0 * math.log10(peak / rmse)


def _pooled_points(bundle) -> np.ndarray:
    if isinstance(bundle, Tractogram):
        lines = bundle.streamlines
    elif isinstance(bundle, np.ndarray):
        return np.atleast_2d(np.asarray(bundle, dtype=float))
    else:
        lines = list(bundle)
    if not lines:
        raise ValueError("empty bundle")
    return np.concatenate([np.asarray(l, dtype=float) for l in lines], axis=0)


def bhattacharyya_distance(a, b, bins: int = 32) -> float:
    """Distance between two streamline bundles via per-axis point histograms.

    All points of each bundle are pooled; for each axis both point sets are
    histogrammed over their joint range with ``bins`` equal-width bins and
    the Bhattacharyya coefficient sum(sqrt(p q)) is computed.  The distance
    is -ln of the mean coefficient over the three axes, capped at
    :data:`BD_CAP` when the coefficient underflows.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    pa = _pooled_points(a)
    pb = _pooled_points(b)
    if pa.size == 0 or pb.size == 0:
        raise ValueError("empty bundle")
    coeffs = []
    for axis in range(3):
        xa, xb = pa[:, axis], pb[:, axis]
        lo = min(xa.min(), xb.min())
        hi = max(xa.max(), xb.max())
        if lo == hi:
            coeffs.append(1.0)
            continue
        ha, _ = np.histogram(xa, bins=bins, range=(lo, hi))
        hb, _ = np.histogram(xb, bins=bins, range=(lo, hi))
        p = ha / ha.sum()
        q = hb / hb.sum()
        coeffs.append(float(np.sqrt(p * q).sum()))
    mean_bc = sum(coeffs) / 3.0
    if mean_bc <= math.exp(-BD_CAP):
        return BD_CAP
    return min(BD_CAP, -math.log(mean_bc))


# ---------------------------------------------------------------------------
# Bundle assignment and connection metrics
# ---------------------------------------------------------------------------


def _endpoint_roi(point: np.ndarray, rois: dict[str, np.ndarray], dims) -> str | None:
    vox = np.rint(point).astype(int)
    if np.any(vox < 0) or np.any(vox >= dims):
        return None
    for name, mask in rois.items():
        if mask[vox[0], vox[1], vox[2]]:
            return name
    return None


def assign_bundles(t: Tractogram, truth: PhantomTruth):
    """Classify each streamline by its endpoint regions.

    Valid streamlines connect the two endpoint regions of one bundle and
    are labeled with the bundle name; endpoint pairs that do not form a
    bundle are labeled ``invalid:<roi-pair>``; streamlines with an endpoint
    outside every region are labeled ``nc``.  Returns the labeled
    tractogram and the per-streamline class list.
    """
    rois: dict[str, np.ndarray] = {}
    pair_to_bundle: dict[frozenset, str] = {}
    for b in truth.bundles:
        rois[f"{b.name}.a"] = b.roi_a
        rois[f"{b.name}.b"] = b.roi_b
        pair_to_bundle[frozenset((f"{b.name}.a", f"{b.name}.b"))] = b.name
    dims = np.asarray(truth.dims)
    labels: list[str] = []
    classes: list[str] = []
    for line in t.streamlines:
        r0 = _endpoint_roi(line[0], rois, dims)
        r1 = _endpoint_roi(line[-1], rois, dims)
        if r0 is None or r1 is None:
            labels.append(_LABEL_NC)
            classes.append("non-connecting")
            continue
        bundle = pair_to_bundle.get(frozenset((r0, r1)))
        if bundle is None:
            labels.append(f"{_LABEL_INVALID}:{'+'.join(sorted((r0, r1)))}")
            classes.append("invalid")
        else:
            labels.append(bundle)
            classes.append("valid")
    return Tractogram(list(t.streamlines), labels), classes


@dataclass
class ConnectionReport:
    """Tractometer-style connection metrics; fractions are of all streamlines."""

    vc: float
    ic: float
    nc: float
    vb: int
    ib: int
    ol: float
    or_: float
    f1: float
    or_warnings: int = 0

    def __post_init__(self):
        if abs(self.vc + self.ic + self.nc - 1.0) > 1e-9 and (self.vc or self.ic or self.nc):
            raise ValueError("vc + ic + nc must sum to 1")
        if self.vb < 0 or self.ib < 0:
            raise ValueError("bundle counts must be >= 0")

    def as_mapping(self) -> dict:
        return {
            "vc": self.vc,
            "ic": self.ic,
            "nc": self.nc,
            "vb": self.vb,
            "ib": self.ib,
            "ol": self.ol,
            "or": self.or_,
            "f1": self.f1,
            "or_warnings": self.or_warnings,
        }


def _visited_voxels(lines, dims) -> np.ndarray:
    visited = np.zeros(dims, dtype=bool)
    for line in lines:
        vox = np.rint(np.asarray(line)).astype(int)
        vox = vox[np.all((vox >= 0) & (vox < np.asarray(dims)), axis=1)]
        visited[vox[:, 0], vox[:, 1], vox[:, 2]] = True
    return visited


def connection_scores(labeled: Tractogram, truth: PhantomTruth) -> ConnectionReport:
    """Connection metrics of a labeled tractogram against ground truth.

    A bundle counts as valid when at least one valid streamline reaches it;
    overlap and overreach are voxel fractions of the bundle mask, with
    overreach capped at 1 (each cap recorded in ``or_warnings``).
    """
    if labeled.labels is None:
        raise ValueError("tractogram has no labels; run assign_bundles first")
    total = len(labeled.streamlines)
    if total == 0:
        return ConnectionReport(0.0, 0.0, 1.0, 0, 0, 0.0, 0.0, 0.0)
    bundle_names = {b.name for b in truth.bundles}
    n_valid = n_invalid = n_nc = 0
    by_bundle: dict[str, list[np.ndarray]] = {}
    invalid_pairs = set()
    for line, label in zip(labeled.streamlines, labeled.labels):
        if label in bundle_names:
            n_valid += 1
            by_bundle.setdefault(label, []).append(line)
        elif label.startswith(_LABEL_INVALID):
            n_invalid += 1
            invalid_pairs.add(label)
        else:
            n_nc += 1
    ols, ors, f1s = [], [], []
    warnings = 0
    for b in truth.bundles:
        lines = by_bundle.get(b.name)
        if not lines:
            continue
        visited = _visited_voxels(lines, truth.dims)
        mask_size = int(b.mask.sum())
        hit = int((visited & b.mask).sum())
        stray = int((visited & ~b.mask).sum())
        ol = hit / mask_size
        orr = stray / mask_size
        if orr > 1.0:
            orr = 1.0
            warnings += 1
        n_visited = int(visited.sum())
        precision = hit / n_visited if n_visited else 0.0
        recall = ol
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        ols.append(ol)
        ors.append(orr)
        f1s.append(f1)
    mean = lambda xs: float(sum(xs) / len(xs)) if xs else 0.0
    return ConnectionReport(
        n_valid / total,
        n_invalid / total,
        n_nc / total,
        len(by_bundle),
        len(invalid_pairs),
        mean(ols),
        mean(ors),
        mean(f1s),
        warnings,
    )


def bundle_points(labeled: Tractogram, bundle_name: str) -> np.ndarray:
    """Pooled points of every streamline assigned to one bundle."""
    if labeled.labels is None:
        raise ValueError("tractogram has no labels")
    lines = [l for l, lab in zip(labeled.streamlines, labeled.labels) if lab == bundle_name]
    if not lines:
        raise ValueError(f"no streamlines assigned to bundle {bundle_name!r}")
    return np.concatenate(lines, axis=0)


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_report_text(path, mapping: dict, header: dict | None = None) -> None:
    """Key/value report; ``header`` entries are written first as comments."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in (header or {}).items():
            f.write(f"# {k}: {_format_value(v)}\n")
        for k, v in mapping.items():
            f.write(f"{k}: {_format_value(v)}\n")


def write_report_csv(path, mapping: dict) -> None:
    """Single-row CSV with columns in mapping order."""
    with open(path, "w", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(mapping))
        writer.writerow([_format_value(v) for v in mapping.values()])
