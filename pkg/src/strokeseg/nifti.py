"""Minimal NIfTI-1 file codec.

Reads and writes single-file NIfTI-1 images (.nii, optionally gzip-compressed
.nii.gz) with the standard 348-byte header. Only 3D scalar images are
supported; the affine is taken from the sform when set, else the qform, else
the pixdim diagonal. Loaded images are reoriented to LAS voxel order
(axis 0 -> left, axis 1 -> anterior, axis 2 -> superior).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
# single-file magic; "ni1\0" (header/image pairs) is rejected
MAGIC_SINGLE = b"n+1\x00"

_HDR_FMT = "<i10s18sihcB8h3fhhhh8ffffhBBffffii80s24shh6f4f4f4f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI content."""


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _write_bytes(path: Path, payload: bytes) -> None:
    if path.suffix == ".gz":
        # mtime=0 keeps byte-identical outputs for identical inputs
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(payload)
    else:
        path.write_bytes(payload)


def _qform_affine(fields: dict) -> np.ndarray:
    b, c, d = fields["quatern_b"], fields["quatern_c"], fields["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if fields["pixdim"][0] < 0 else 1.0
    scale = np.array([fields["pixdim"][1], fields["pixdim"][2], qfac * fields["pixdim"][3]])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = [fields["qoffset_x"], fields["qoffset_y"], fields["qoffset_z"]]
    return affine


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    vals = struct.unpack(_HDR_FMT, raw[:HEADER_SIZE])
    keys = (
        "sizeof_hdr data_type db_name extents session_error regular dim_info".split()
    )
    fields = dict(zip(keys, vals[:7]))
    fields["dim"] = vals[7:15]
    fields["intent_p"] = vals[15:18]
    (
        fields["intent_code"],
        fields["datatype"],
        fields["bitpix"],
        fields["slice_start"],
    ) = vals[18:22]
    fields["pixdim"] = vals[22:30]
    (
        fields["vox_offset"],
        fields["scl_slope"],
        fields["scl_inter"],
        fields["slice_end"],
        fields["slice_code"],
        fields["xyzt_units"],
        fields["cal_max"],
        fields["cal_min"],
        fields["slice_duration"],
        fields["toffset"],
        fields["glmax"],
        fields["glmin"],
        fields["descrip"],
        fields["aux_file"],
        fields["qform_code"],
        fields["sform_code"],
    ) = vals[30:46]
    (
        fields["quatern_b"],
        fields["quatern_c"],
        fields["quatern_d"],
        fields["qoffset_x"],
        fields["qoffset_y"],
        fields["qoffset_z"],
    ) = vals[46:52]
    fields["srow_x"] = vals[52:56]
    fields["srow_y"] = vals[56:60]
    fields["srow_z"] = vals[60:64]
    fields["intent_name"], fields["magic"] = vals[64:66]
    if fields["sizeof_hdr"] != HEADER_SIZE:
        raise NiftiError("bad sizeof_hdr; big-endian or non-NIfTI file not supported")
    if fields["magic"] != MAGIC_SINGLE:
        raise NiftiError(f"unsupported magic {fields['magic']!r}; only single-file .nii is handled")
    return fields


def read(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a 3D NIfTI-1 file.

    Returns (data, affine) with data in the on-disk voxel order, slope/intercept
    scaling applied. Raises NiftiError on anything malformed or non-3D.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    raw = _read_bytes(path)
    hdr = _parse_header(raw)

    ndim = hdr["dim"][0]
    shape = tuple(int(n) for n in hdr["dim"][1 : 1 + max(ndim, 0)])
    # tolerate trailing singleton dims (e.g. 4D with one volume)
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3 or any(n < 1 for n in shape):
        raise NiftiError(f"expected a 3D image, got dim={hdr['dim']}")

    try:
        dtype = np.dtype(_DTYPES[hdr["datatype"]])
    except KeyError:
        raise NiftiError(f"unsupported datatype code {hdr['datatype']}") from None

    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    end = offset + count * dtype.itemsize
    if len(raw) < end:
        raise NiftiError(f"truncated data section ({len(raw)} < {end} bytes)")
    flat = np.frombuffer(raw[offset:end], dtype=dtype)
    data = flat.reshape(shape, order="F").astype(np.float64)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0.0 and (slope, inter) != (1.0, 0.0):
        data = data * slope + inter

    if hdr["sform_code"] > 0:
        affine = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"], [0, 0, 0, 1]], dtype=float)
    elif hdr["qform_code"] > 0:
        affine = _qform_affine(hdr)
    else:
        affine = np.diag([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3], 1.0])
    return data, affine


def write(
    path: str | Path,
    data: np.ndarray,
    affine: np.ndarray,
    dtype: np.dtype | type = np.float32,
) -> None:
    """Write a 3D array as a single-file NIfTI-1 image (sform affine)."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"only 3D arrays can be written, got shape {data.shape}")
    dtype = np.dtype(dtype)
    if dtype not in _DTYPE_CODES:
        raise NiftiError(f"unsupported dtype {dtype}")
    affine = np.asarray(affine, dtype=float)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)

    dim = [3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1]
    pixdim = [1.0, float(spacing[0]), float(spacing[1]), float(spacing[2]), 0, 0, 0, 0]
    header = struct.pack(
        _HDR_FMT,
        HEADER_SIZE,
        b"", b"", 0, 0, b"r", 0,
        *dim,
        0.0, 0.0, 0.0,
        0,
        _DTYPE_CODES[dtype],
        dtype.itemsize * 8,
        0,
        *pixdim,
        352.0,          # vox_offset
        1.0, 0.0,       # scl_slope / scl_inter
        0, 0,
        2,              # xyzt_units: mm
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"strokeseg", b"",
        0, 1,           # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *[float(v) for v in affine[0]],
        *[float(v) for v in affine[1]],
        *[float(v) for v in affine[2]],
        b"",
        MAGIC_SINGLE,
    )
    payload = header + b"\x00" * 4 + np.asfortranarray(data.astype(dtype)).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_bytes(path, payload)


def to_las(data: np.ndarray, affine: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip/permute a 3D array so voxel axes run left, anterior, superior.

    World coordinates follow the NIfTI RAS+ convention, so the target is
    axis 0 dominant along -X, axes 1 and 2 dominant along +Y and +Z.
    """
    lin = np.asarray(affine, dtype=float)[:3, :3]
    if abs(np.linalg.det(lin)) < 1e-12:
        raise NiftiError("affine is singular; cannot derive orientation")

    # assign each voxel axis to its dominant world axis, greedily by magnitude
    assign = [-1, -1, -1]  # world axis -> voxel axis
    cols = [np.abs(lin[:, j]) / np.linalg.norm(lin[:, j]) for j in range(3)]
    order = sorted(range(3), key=lambda j: -np.max(cols[j]))
    taken: set[int] = set()
    for j in order:
        ranked = np.argsort(-cols[j])
        world = next(int(w) for w in ranked if int(w) not in taken)
        taken.add(world)
        assign[world] = j

    perm = tuple(assign)  # new axis k comes from old axis perm[k]
    data = np.transpose(data, perm)
    new_lin = lin[:, perm]
    new_affine = np.eye(4)
    new_affine[:3, :3] = new_lin
    new_affine[:3, 3] = affine[:3, 3]

    want_sign = (-1.0, 1.0, 1.0)  # L, A, S
    for axis in range(3):
        if np.sign(new_affine[axis, axis]) != want_sign[axis]:
            data = np.flip(data, axis=axis)
            n = data.shape[axis]
            new_affine[:3, 3] = new_affine[:3, 3] + new_affine[:3, axis] * (n - 1)
            new_affine[:3, axis] = -new_affine[:3, axis]
    return np.ascontiguousarray(data), new_affine
