"""Reader for single-file NIfTI-1 volumes (``.nii`` and ``.nii.gz``).

Only the parts of the format needed to get a 3D intensity grid out of an
anatomical scan are interpreted; orientation (qform/sform) is carried along in
the raw header fields but never applied.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    BadDims,
    BadHeaderSize,
    BadMagic,
    NiftiError,
    OutOfBounds,
    Truncated,
    Unsupported4D,
    UnsupportedDatatype,
    UnsupportedFormat,
)

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# code -> (numpy type char, bits)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
}

# (name, struct format, count); count > 1 fields are unpacked into tuples
_LAYOUT = [
    ("sizeof_hdr", "i", 1),
    ("data_type", "10s", 1),
    ("db_name", "18s", 1),
    ("extents", "i", 1),
    ("session_error", "h", 1),
    ("regular", "1s", 1),
    ("dim_info", "B", 1),
    ("dim", "h", 8),
    ("intent_p1", "f", 1),
    ("intent_p2", "f", 1),
    ("intent_p3", "f", 1),
    ("intent_code", "h", 1),
    ("datatype", "h", 1),
    ("bitpix", "h", 1),
    ("slice_start", "h", 1),
    ("pixdim", "f", 8),
    ("vox_offset", "f", 1),
    ("scl_slope", "f", 1),
    ("scl_inter", "f", 1),
    ("slice_end", "h", 1),
    ("slice_code", "B", 1),
    ("xyzt_units", "B", 1),
    ("cal_max", "f", 1),
    ("cal_min", "f", 1),
    ("slice_duration", "f", 1),
    ("toffset", "f", 1),
    ("glmax", "i", 1),
    ("glmin", "i", 1),
    ("descrip", "80s", 1),
    ("aux_file", "24s", 1),
    ("qform_code", "h", 1),
    ("sform_code", "h", 1),
    ("quatern_b", "f", 1),
    ("quatern_c", "f", 1),
    ("quatern_d", "f", 1),
    ("qoffset_x", "f", 1),
    ("qoffset_y", "f", 1),
    ("qoffset_z", "f", 1),
    ("srow_x", "f", 4),
    ("srow_y", "f", 4),
    ("srow_z", "f", 4),
    ("intent_name", "16s", 1),
    ("magic", "4s", 1),
]

_FORMAT = "".join(f"{n}{f}" if n > 1 else f for _, f, n in _LAYOUT)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

_BYTE_ORDER = {"little": "<", "big": ">"}


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype_code: int
    bitpix: int
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes
    endianness: str
    fields: dict[str, Any] = field(repr=False, compare=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(max(int(d), 1) for d in self.dim[1:4])

    @property
    def numpy_dtype(self) -> np.dtype:
        return np.dtype(_BYTE_ORDER[self.endianness] + DATATYPES[self.datatype_code][0])

    def to_bytes(self, endianness: str | None = None) -> bytes:
        """Serialize back to the 348-byte on-disk layout."""
        order = _BYTE_ORDER[endianness or self.endianness]
        values = []
        for name, _, count in _LAYOUT:
            v = self.fields[name]
            values.extend(v if count > 1 else [v])
        return struct.pack(order + _FORMAT, *values)


def _unpack(buf: bytes, order: str) -> dict[str, Any]:
    flat = struct.unpack(order + _FORMAT, buf[:HEADER_SIZE])
    out, i = {}, 0
    for name, _, count in _LAYOUT:
        out[name] = tuple(flat[i:i + count]) if count > 1 else flat[i]
        i += count
    return out


def _detect_endianness(buf: bytes) -> str:
    for name, order in _BYTE_ORDER.items():
        (rank,) = struct.unpack_from(order + "h", buf, 40)
        if 1 <= rank <= 7:
            return name
    raise BadDims("dim[0] is outside [1, 7] under both byte orders")


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    endianness = _detect_endianness(buf)
    f = _unpack(buf, _BYTE_ORDER[endianness])

    dim = f["dim"]
    if any(d < 1 for d in dim[1:dim[0] + 1]):
        raise BadDims(f"non-positive extent in dim={dim}")
    if f["sizeof_hdr"] != HEADER_SIZE:
        raise BadHeaderSize(f"sizeof_hdr is {f['sizeof_hdr']}, expected {HEADER_SIZE}")
    if f["magic"] not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise BadMagic(f"unrecognised magic {f['magic']!r}")
    code = f["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code} is not one of {sorted(DATATYPES)}")
    if f["bitpix"] != DATATYPES[code][1]:
        raise UnsupportedDatatype(
            f"bitpix {f['bitpix']} inconsistent with datatype {code} ({DATATYPES[code][1]} bits)")

    return NiftiHeader(
        sizeof_hdr=f["sizeof_hdr"],
        dim=tuple(dim),
        datatype_code=code,
        bitpix=f["bitpix"],
        scl_slope=f["scl_slope"],
        scl_inter=f["scl_inter"],
        vox_offset=f["vox_offset"],
        magic=f["magic"],
        endianness=endianness,
        fields=f,
    )


@dataclass(frozen=True)
class NiftiVolume:
    header: NiftiHeader
    data: np.ndarray  # (x, y, z)
    source_path: str

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def voxel_at(self, x: int, y: int, z: int) -> float:
        return voxel_at(self, x, y, z)


def _read_bytes(path: Path) -> bytes:
    if path.name.endswith(".gz"):
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def decode_payload(header: NiftiHeader, payload: bytes, dtype=np.float32) -> np.ndarray:
    """Decode raw voxel bytes into an (x, y, z) array with scaling applied."""
    nx, ny, nz = header.shape
    count = nx * ny * nz
    nbytes = count * header.bitpix // 8
    if len(payload) < nbytes:
        raise Truncated(f"voxel payload has {len(payload)} bytes, need {nbytes}")
    raw = np.frombuffer(payload, dtype=header.numpy_dtype, count=count)
    # float64 intermediate keeps int32 exact before the final cast
    values = raw.astype(np.float64)
    slope, inter = header.scl_slope, header.scl_inter
    if slope != 0 and np.isfinite(slope):
        values = values * slope + (inter if np.isfinite(inter) else 0.0)
    values = np.nan_to_num(values, nan=0.0, posinf=0.0, neginf=0.0)
    # x varies fastest on disk
    return values.reshape((nx, ny, nz), order="F").astype(dtype)


def read_volume(path, dtype=np.float32) -> NiftiVolume:
    path = Path(path)
    if not (path.name.endswith(".nii") or path.name.endswith(".nii.gz")):
        raise UnsupportedFormat(f"{path}: only single-file .nii / .nii.gz volumes are supported")
    blob = _read_bytes(path)
    try:
        header = parse_header(blob)
    except NiftiError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    if header.magic != MAGIC_SINGLE:
        raise UnsupportedFormat(f"{path}: paired .hdr/.img NIfTI is not supported")
    rank = header.dim[0]
    if rank > 3 and any(d > 1 for d in header.dim[4:rank + 1]):
        raise Unsupported4D(f"{path}: dim={header.dim[:rank + 1]} has non-singleton extents beyond 3D")
    offset = int(header.vox_offset)
    try:
        data = decode_payload(header, blob[offset:], dtype=dtype)
    except NiftiError as exc:
        raise type(exc)(f"{path}: {exc}") from None
    return NiftiVolume(header=header, data=data, source_path=str(path))


def voxel_at(vol: NiftiVolume, x: int, y: int, z: int) -> float:
    for i, n in zip((x, y, z), vol.data.shape):
        if not 0 <= i < n:
            raise OutOfBounds(f"voxel ({x}, {y}, {z}) outside extents {vol.data.shape}")
    return float(vol.data[x, y, z])
