"""Volume file formats: the package's raw float32 format and NIfTI-1."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import GridGeometry, ScalarVolume

RAW_MAGIC = b"SREGVOL1"
GEOMETRY_HEADER = struct.Struct("<8s3I3f3f4x")  # 48 bytes

NIFTI_HEADER_SIZE = 348
# datatype code -> numpy dtype (little-endian; swapped on read if needed)
NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}


class VolumeFormatError(ValueError):
    """Base class for unreadable volume files."""


class MalformedHeader(VolumeFormatError):
    pass


class UnsupportedDatatype(VolumeFormatError):
    pass


class TruncatedPayload(VolumeFormatError):
    pass


def pack_geometry(magic: bytes, g: GridGeometry) -> bytes:
    return GEOMETRY_HEADER.pack(magic, *g.dims, *g.spacing, *g.origin)


def unpack_geometry(buf: bytes, magic: bytes) -> GridGeometry:
    if len(buf) < GEOMETRY_HEADER.size:
        raise MalformedHeader("file shorter than the 48-byte header")
    got, *vals = GEOMETRY_HEADER.unpack_from(buf)
    if got != magic:
        raise MalformedHeader(f"bad magic {got!r}, expected {magic!r}")
    try:
        return GridGeometry(tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:9]))
    except ValueError as exc:
        raise MalformedHeader(str(exc)) from exc


def _format_for(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("nifti1", "raw-f32"):
            raise ValueError(f"unknown volume format {fmt!r}")
        return fmt
    name = path.name.lower()
    return "nifti1" if name.endswith((".nii", ".nii.gz")) else "raw-f32"


def load_volume(path, fmt: str | None = None) -> ScalarVolume:
    path = Path(path)
    fmt = _format_for(path, fmt)
    raw = path.read_bytes()
    if fmt == "raw-f32":
        return _read_raw(raw)
    if path.name.lower().endswith(".gz"):
        raw = gzip.decompress(raw)
    return read_nifti(raw)


def save_volume(v: ScalarVolume, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _format_for(path, fmt)
    if fmt == "raw-f32":
        payload = pack_geometry(RAW_MAGIC, v.geometry) + v.flat().astype("<f4").tobytes()
    else:
        payload = write_nifti(v)
        if path.name.lower().endswith(".gz"):
            payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def _read_raw(raw: bytes) -> ScalarVolume:
    g = unpack_geometry(raw, RAW_MAGIC)
    need = GEOMETRY_HEADER.size + 4 * g.n_voxels
    if len(raw) < need:
        raise TruncatedPayload(f"payload has {len(raw) - GEOMETRY_HEADER.size} bytes, need {4 * g.n_voxels}")
    data = np.frombuffer(raw, dtype="<f4", count=g.n_voxels, offset=GEOMETRY_HEADER.size)
    return ScalarVolume.from_flat(g, data)


def read_nifti(raw: bytes) -> ScalarVolume:
    """Decode a single-file NIfTI-1 image (``n+1`` or ``ni1`` magic)."""
    if len(raw) < NIFTI_HEADER_SIZE:
        raise MalformedHeader("NIfTI header truncated")
    endian = "<"
    if struct.unpack_from("<i", raw, 0)[0] != NIFTI_HEADER_SIZE:
        endian = ">"
        if struct.unpack_from(">i", raw, 0)[0] != NIFTI_HEADER_SIZE:
            raise MalformedHeader("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise MalformedHeader(f"bad NIfTI magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = struct.unpack_from(endian + "f", raw, 108)[0]
    slope, inter = struct.unpack_from(endian + "2f", raw, 112)
    qoff = struct.unpack_from(endian + "3f", raw, 268)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise MalformedHeader(f"dim[0]={ndim} out of range")
    shape = [max(1, d) for d in dim[1:1 + ndim]]
    if ndim > 3 and any(d != 1 for d in shape[3:]):
        raise MalformedHeader("only 3D volumes are supported")
    shape = (shape + [1, 1, 1])[:3]
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDatatype(f"NIfTI datatype {datatype} is not supported")
    dtype = np.dtype(NIFTI_DTYPES[datatype]).newbyteorder(endian)
    offset = int(vox_offset) if magic == b"n+1\x00" else 0
    if magic == b"n+1\x00" and offset < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"vox_offset {vox_offset} inside the header")
    n = int(np.prod(shape))
    if len(raw) < offset + n * dtype.itemsize:
        raise TruncatedPayload(f"NIfTI payload needs {n * dtype.itemsize} bytes after offset {offset}")
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).astype(np.float64)
    if slope != 0 and np.isfinite(slope):
        data = data * slope + inter
    spacing = tuple(abs(p) if p > 0 else 1.0 for p in pixdim[1:4])
    if ndim < 3 or min(shape) < 2:
        raise MalformedHeader(f"volume shape {shape} has an axis shorter than 2")
    g = GridGeometry(tuple(shape), spacing, tuple(float(x) for x in qoff))
    return ScalarVolume.from_flat(g, data)


def write_nifti(v: ScalarVolume) -> bytes:
    """Encode as NIfTI-1 float32 with a scanner-space qform offset only."""
    g = v.geometry
    hdr = bytearray(NIFTI_HEADER_SIZE + 4)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *g.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)  # datatype float32, bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *g.spacing, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(NIFTI_HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 1, 0)  # qform_code scanner, sform unset
    struct.pack_into("<3f", hdr, 256, 0.0, 0.0, 0.0)  # quaternion b,c,d
    struct.pack_into("<3f", hdr, 268, *g.origin)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + v.flat().astype("<f4").tobytes()
