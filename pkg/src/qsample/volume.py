"""4-D diffusion-weighted volumes and the QVOL on-disk format.

A QVOL is a UTF-8 key/value header file plus a raw file of little-endian
32-bit floats laid out as index = ((x*Y + y)*Z + z)*D + d, i.e. C order
of an (X, Y, Z, D) array.  The b0 reference is stored alongside as a
D=1 QVOL referenced from the header.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sphere import DirectionSet

__all__ = [
    "DwiVolume",
    "brain_mask",
    "load_qvol",
    "load_scalar_qvol",
    "save_qvol",
    "save_scalar_qvol",
]


@dataclass
class DwiVolume:
    """An (X, Y, Z, D) stack of diffusion-encoded channels plus its b0 reference.

    Data is stored b0-normalized, so values are dimensionless attenuations.
    """

    data: np.ndarray
    dirs: DirectionSet
    b_value: float
    voxel_size: tuple[float, float, float]
    b0: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.b0 = np.asarray(self.b0, dtype=float)
        if self.data.ndim != 4:
            raise ValueError("data must be (X, Y, Z, D)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("data must be finite")
        if self.data.min() < 0:
            raise ValueError("data must be non-negative")
        if self.data.shape[3] != len(self.dirs):
            raise ValueError(
                f"channel count {self.data.shape[3]} does not match {len(self.dirs)} directions"
            )
        if self.b0.shape != self.data.shape[:3]:
            raise ValueError("b0 shape must match the spatial dims")
        if not np.all(np.isfinite(self.b0)):
            raise ValueError("b0 must be finite")
        if self.b_value < 0:
            raise ValueError("b_value must be >= 0")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError("voxel_size must be three positive lengths")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    def with_data(self, data: np.ndarray, dirs: DirectionSet | None = None) -> "DwiVolume":
        """A new volume sharing geometry and b0 but holding different channels."""
        return DwiVolume(data, dirs or self.dirs, self.b_value, self.voxel_size, self.b0)


def brain_mask(vol: DwiVolume, threshold_frac: float = 0.05) -> np.ndarray:
    """Support mask: voxels whose b0 exceeds ``threshold_frac`` of the b0 maximum."""
    return vol.b0 > threshold_frac * float(vol.b0.max())


# ---------------------------------------------------------------------------
# QVOL I/O
# ---------------------------------------------------------------------------


def _write_header(path: Path, fields: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for key, value in fields:
            f.write(f"{key}: {value}\n")


def _read_header(path: Path) -> dict:
    fields = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise ValueError(f"{path}: malformed header line {line!r}")
            key, value = line.split(":", 1)
            fields[key.strip()] = value.strip()
    if fields.get("format") != "QVOL":
        raise ValueError(f"{path}: not a QVOL header")
    if fields.get("byte_order", "little") != "little":
        raise ValueError(f"{path}: unsupported byte order")
    return fields


def _raw_name(header_path: Path) -> str:
    return header_path.stem + ".raw"


def _write_volume_files(path, data, dirs, b_value, voxel_size, extra=()):
    path = Path(path)
    raw = _raw_name(path)
    fields = [
        ("format", "QVOL"),
        ("version", "1"),
        ("dims", " ".join(str(d) for d in data.shape[:3])),
        ("voxel_size", " ".join(repr(float(v)) for v in voxel_size)),
        ("b_value", repr(float(b_value))),
        ("channels", str(data.shape[3])),
        ("byte_order", "little"),
        ("data_file", raw),
    ]
    fields.extend(extra)
    for i in range(len(dirs)):
        fields.append((f"dir_{i}", f"{float(dirs.thetas[i])!r} {float(dirs.phis[i])!r}"))
    _write_header(path, fields)
    np.ascontiguousarray(data, dtype="<f4").tofile(path.parent / raw)


def save_qvol(vol: DwiVolume, path) -> None:
    """Write a volume as <path> (header), its .raw payload, and a b0 QVOL."""
    path = Path(path)
    b0_name = path.stem + ".b0.qvol"
    _write_volume_files(
        path, vol.data, vol.dirs, vol.b_value, vol.voxel_size, extra=[("b0_file", b0_name)]
    )
    _write_volume_files(
        path.parent / b0_name,
        vol.b0[..., None],
        DirectionSet([0.0], [0.0]),
        0.0,
        vol.voxel_size,
    )


def _load_raw(path: Path, fields: dict) -> np.ndarray:
    dims = tuple(int(v) for v in fields["dims"].split())
    channels = int(fields["channels"])
    raw_path = path.parent / fields["data_file"]
    count = dims[0] * dims[1] * dims[2] * channels
    data = np.fromfile(raw_path, dtype="<f4", count=count)
    if data.size != count:
        raise ValueError(f"{raw_path}: expected {count} float32 samples, got {data.size}")
    return data.astype(float).reshape(dims + (channels,))


def _load_dirs(fields: dict) -> DirectionSet:
    channels = int(fields["channels"])
    thetas, phis = [], []
    for i in range(channels):
        key = f"dir_{i}"
        if key not in fields:
            raise ValueError(f"missing {key} in QVOL header")
        t, p = fields[key].split()
        thetas.append(float(t))
        phis.append(float(p))
    return DirectionSet(thetas, phis)


def load_qvol(path) -> DwiVolume:
    """Read a QVOL volume written by :func:`save_qvol`."""
    path = Path(path)
    fields = _read_header(path)
    data = _load_raw(path, fields)
    dirs = _load_dirs(fields)
    voxel_size = tuple(float(v) for v in fields["voxel_size"].split())
    b_value = float(fields["b_value"])
    if "b0_file" in fields:
        b0_fields = _read_header(path.parent / fields["b0_file"])
        b0 = _load_raw(path.parent / fields["b0_file"], b0_fields)[..., 0]
    elif data.shape[3] == 1 and b_value == 0.0:
        b0 = data[..., 0].copy()
    else:
        b0 = np.ones(data.shape[:3])
    return DwiVolume(data, dirs, b_value, voxel_size, b0)


def save_scalar_qvol(values: np.ndarray, voxel_size, path) -> None:
    """Write a 3-D scalar field (e.g. a mask or GFA map) as a D=1, b=0 QVOL."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 3:
        raise ValueError("expected a 3-D array")
    _write_volume_files(Path(path), values[..., None], DirectionSet([0.0], [0.0]), 0.0, voxel_size)


def load_scalar_qvol(path) -> np.ndarray:
    """Read a scalar field written by :func:`save_scalar_qvol`."""
    path = Path(path)
    fields = _read_header(path)
    data = _load_raw(path, fields)
    if data.shape[3] != 1:
        raise ValueError(f"{path}: expected a single channel")
    return data[..., 0]
