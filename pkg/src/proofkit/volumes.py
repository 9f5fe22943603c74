"""Chunked 3D volume data model: on-disk format, downsampling, subvolume extraction.

A volume is a dense 3D array indexed ``[x, y, z]`` plus metadata. On disk it is
a directory holding ``manifest.json`` and one raw little-endian file per chunk
named ``cx_cy_cz.raw``, written x-fastest (index = x + dims_x*(y + dims_y*z)).
Edge chunks are zero-padded to exactly chunk^3 voxels. Label 0 means
background/unsegmented and never participates in adjacency or merging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

FORMAT_VERSION = 1
DTYPE_LABEL = "label64"
DTYPE_GRAY = "gray8"
DEFAULT_CHUNK = 64
DEFAULT_VOXEL_NM = (8.0, 8.0, 8.0)

_NP_DTYPES = {DTYPE_LABEL: np.dtype("<u8"), DTYPE_GRAY: np.dtype("u1")}
VALID_FACTORS = (1, 2, 4, 8, 16)


class VolumeError(Exception):
    """Raised for malformed volume directories or invalid volume operations."""


class Voxel(NamedTuple):
    x: int
    y: int
    z: int


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    voxel_size_nm: tuple[float, float, float] = DEFAULT_VOXEL_NM
    dtype: str = DTYPE_LABEL
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise VolumeError(f"dims must be three values >= 1, got {self.dims}")
        if self.chunk < 8:
            raise VolumeError(f"chunk must be >= 8, got {self.chunk}")
        if any(v <= 0 for v in self.voxel_size_nm):
            raise VolumeError(f"voxel_size_nm must be positive, got {self.voxel_size_nm}")
        if self.dtype not in _NP_DTYPES:
            raise VolumeError(f"dtype must be one of {sorted(_NP_DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return _NP_DTYPES[self.dtype]

    def chunk_grid(self) -> tuple[int, int, int]:
        c = self.chunk
        return tuple(-(-d // c) for d in self.dims)  # type: ignore[return-value]


@dataclass
class Volume:
    """Dense in-memory volume; the chunk map is realized at the I/O boundary."""

    meta: VolumeMeta
    data: np.ndarray  # shape meta.dims, indexed [x, y, z]

    def __post_init__(self):
        if tuple(self.data.shape) != tuple(self.meta.dims):
            raise VolumeError(f"data shape {self.data.shape} != dims {self.meta.dims}")
        if self.data.dtype != self.meta.np_dtype:
            self.data = self.data.astype(self.meta.np_dtype)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.meta.dims)  # type: ignore[return-value]

    def chunks(self) -> Iterator[tuple[tuple[int, int, int], np.ndarray]]:
        """Yield (chunk coordinate, dense chunk^3 block), edge blocks zero-padded."""
        c = self.meta.chunk
        gx, gy, gz = self.meta.chunk_grid()
        for cz in range(gz):
            for cy in range(gy):
                for cx in range(gx):
                    block = np.zeros((c, c, c), dtype=self.meta.np_dtype)
                    sl = self.data[
                        cx * c : (cx + 1) * c, cy * c : (cy + 1) * c, cz * c : (cz + 1) * c
                    ]
                    block[: sl.shape[0], : sl.shape[1], : sl.shape[2]] = sl
                    yield (cx, cy, cz), block


class GrayVolume(Volume):
    @classmethod
    def from_array(cls, data, voxel_size_nm=DEFAULT_VOXEL_NM, chunk=DEFAULT_CHUNK) -> "GrayVolume":
        meta = VolumeMeta(tuple(data.shape), tuple(voxel_size_nm), DTYPE_GRAY, chunk)
        return cls(meta, np.asarray(data, dtype=meta.np_dtype))


class LabelVolume(Volume):
    @classmethod
    def from_array(cls, data, voxel_size_nm=DEFAULT_VOXEL_NM, chunk=DEFAULT_CHUNK) -> "LabelVolume":
        meta = VolumeMeta(tuple(data.shape), tuple(voxel_size_nm), DTYPE_LABEL, chunk)
        return cls(meta, np.asarray(data, dtype=meta.np_dtype))


def _volume_class(dtype: str):
    return GrayVolume if dtype == DTYPE_GRAY else LabelVolume


def write_volume(vol: Volume, path: str | Path) -> Path:
    """Write a volume directory: manifest.json plus one cx_cy_cz.raw per chunk."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": list(vol.meta.dims),
        "voxel_size_nm": list(vol.meta.voxel_size_nm),
        "dtype": vol.meta.dtype,
        "chunk": vol.meta.chunk,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    for (cx, cy, cz), block in vol.chunks():
        # tobytes in Fortran order serializes x-fastest
        (path / f"{cx}_{cy}_{cz}.raw").write_bytes(block.tobytes(order="F"))
    return path


def read_volume(path: str | Path) -> Volume:
    """Read a volume directory written by write_volume; round-trips bit-exactly."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise VolumeError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    meta = VolumeMeta(
        dims=tuple(manifest["dims"]),
        voxel_size_nm=tuple(manifest["voxel_size_nm"]),
        dtype=manifest["dtype"],
        chunk=int(manifest["chunk"]),
    )
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VolumeError(f"unsupported format_version {manifest.get('format_version')}")
    c = meta.chunk
    expected = c * c * c * meta.np_dtype.itemsize
    data = np.zeros(meta.dims, dtype=meta.np_dtype)
    gx, gy, gz = meta.chunk_grid()
    for cz in range(gz):
        for cy in range(gy):
            for cx in range(gx):
                chunk_path = path / f"{cx}_{cy}_{cz}.raw"
                if not chunk_path.is_file():
                    raise VolumeError(f"missing chunk file: {chunk_path}")
                raw = chunk_path.read_bytes()
                if len(raw) != expected:
                    raise VolumeError(
                        f"chunk size mismatch in {chunk_path}: "
                        f"expected {expected} bytes, got {len(raw)}"
                    )
                block = np.frombuffer(raw, dtype=meta.np_dtype).reshape((c, c, c), order="F")
                x0, y0, z0 = cx * c, cy * c, cz * c
                nx = min(c, meta.dims[0] - x0)
                ny = min(c, meta.dims[1] - y0)
                nz = min(c, meta.dims[2] - z0)
                data[x0 : x0 + nx, y0 : y0 + ny, z0 : z0 + nz] = block[:nx, :ny, :nz]
    return _volume_class(meta.dtype)(meta, data)


def _check_factor(factor: int) -> None:
    if factor not in VALID_FACTORS:
        raise VolumeError(f"downsample factor must be one of {VALID_FACTORS}, got {factor}")


def downsample(vol: Volume, factor: int) -> Volume:
    """Reduce a volume by a power-of-two factor; output dims = ceil(dims/factor).

    Labels reduce by per-block mode with ties broken to the smallest label id;
    gray reduces by per-block mean rounded half-up. Edge blocks aggregate only
    the voxels actually present.
    """
    _check_factor(factor)
    if factor == 1:
        return _volume_class(vol.meta.dtype)(vol.meta, vol.data.copy())
    out_dims = tuple(-(-d // factor) for d in vol.meta.dims)
    out_meta = VolumeMeta(
        out_dims,
        tuple(v * factor for v in vol.meta.voxel_size_nm),
        vol.meta.dtype,
        vol.meta.chunk,
    )
    X, Y, Z = vol.meta.dims
    bx = np.arange(X) // factor
    by = np.arange(Y) // factor
    bz = np.arange(Z) // factor
    # flat block index per voxel, x-fastest over the output grid
    block_idx = (
        bx[:, None, None]
        + out_dims[0] * (by[None, :, None] + out_dims[1] * bz[None, None, :])
    ).ravel()
    n_blocks = out_dims[0] * out_dims[1] * out_dims[2]

    if vol.meta.dtype == DTYPE_GRAY:
        flat = vol.data.ravel().astype(np.float64)
        sums = np.bincount(block_idx, weights=flat, minlength=n_blocks)
        counts = np.bincount(block_idx, minlength=n_blocks)
        means = sums / counts
        out = np.floor(means + 0.5).astype(np.uint8)
    else:
        labels = vol.data.ravel()
        # run-length count (block, label) pairs; smallest label wins mode ties
        order = np.lexsort((labels, block_idx))
        sb = block_idx[order]
        sl = labels[order]
        boundary = np.empty(sb.shape[0], dtype=bool)
        boundary[0] = True
        boundary[1:] = (sb[1:] != sb[:-1]) | (sl[1:] != sl[:-1])
        starts = np.flatnonzero(boundary)
        run_counts = np.diff(np.append(starts, sb.shape[0]))
        run_blocks = sb[starts]
        run_labels = sl[starts]
        # order runs by (block, count desc, label asc); the first run per
        # block is then its mode, ties resolved to the smallest label
        out = np.zeros(n_blocks, dtype=vol.meta.np_dtype)
        mode_order = np.lexsort((run_labels, -run_counts, run_blocks))
        ordered_blocks = run_blocks[mode_order]
        firsts = np.flatnonzero(np.append(True, ordered_blocks[1:] != ordered_blocks[:-1]))
        out[ordered_blocks[firsts]] = run_labels[mode_order[firsts]]
    out3d = out.reshape(out_dims, order="F")
    return _volume_class(vol.meta.dtype)(out_meta, np.ascontiguousarray(out3d))


def extract_subvolume(vol: Volume, center: Voxel | tuple[int, int, int], edge: int) -> np.ndarray:
    """Extract an edge^3 block centered at center; out-of-bounds voxels are 0."""
    if edge % 2 != 1:
        raise VolumeError(f"edge must be odd, got {edge}")
    cx, cy, cz = int(center[0]), int(center[1]), int(center[2])
    half = edge // 2
    out = np.zeros((edge, edge, edge), dtype=vol.meta.np_dtype)
    X, Y, Z = vol.meta.dims
    lo = [cx - half, cy - half, cz - half]
    src_lo = [max(0, lo[0]), max(0, lo[1]), max(0, lo[2])]
    src_hi = [min(X, lo[0] + edge), min(Y, lo[1] + edge), min(Z, lo[2] + edge)]
    if all(src_lo[i] < src_hi[i] for i in range(3)):
        dst_lo = [src_lo[i] - lo[i] for i in range(3)]
        dst_hi = [dst_lo[i] + (src_hi[i] - src_lo[i]) for i in range(3)]
        out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = vol.data[
            src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
        ]
    return out
