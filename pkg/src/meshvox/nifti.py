"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer."""

from __future__ import annotations

import gzip
import os

import numpy as np

from .voxel import LabelMask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

DATATYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
DATATYPE_CODES = {"u8": 2, "i16": 4, "f32": 16}
TAGS = {2: "u8", 4: "i16", 16: "f32"}

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE


class NiftiError(ValueError):
    pass


def _open(path, mode="rb"):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, mode)
    return open(path, mode)


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise NiftiError(f"truncated NIfTI file: expected {n} bytes, got {len(buf)}")
    return buf


def parse_header(raw: bytes) -> tuple[np.void, str]:
    """Decode a 348-byte header. Returns the record and its byte order.

    Big-endian files are recognised by ``dim[0]`` falling outside 1..7 when
    read little-endian.
    """
    if len(raw) != HEADER_SIZE:
        raise NiftiError("truncated NIfTI header")
    order = "<"
    hdr = np.frombuffer(raw, dtype=HEADER_DTYPE.newbyteorder(order))[0]
    if not 1 <= hdr["dim"][0] <= 7:
        order = ">"
        hdr = np.frombuffer(raw, dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if not 1 <= hdr["dim"][0] <= 7:
            raise NiftiError("not a NIfTI-1 file (bad dim[0])")
    if hdr["magic"] != b"n+1" or raw[344:348] != b"n+1\x00":
        raise NiftiError("not a NIfTI-1 file")
    if hdr["sizeof_hdr"] != HEADER_SIZE:
        raise NiftiError("not a NIfTI-1 file (sizeof_hdr != 348)")
    return hdr, order


def quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a) if a > 1e-7 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    zooms[zooms == 0] = 1.0
    out = np.eye(4)
    out[:3, :3] = rot * zooms
    out[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return out


def header_affine(hdr) -> np.ndarray:
    """sform if set and invertible, else qform, else pixdim scaling."""
    if hdr["sform_code"] > 0:
        out = np.eye(4)
        out[0] = hdr["srow_x"]
        out[1] = hdr["srow_y"]
        out[2] = hdr["srow_z"]
        if abs(np.linalg.det(out[:3, :3])) > 0:
            return out
    if hdr["qform_code"] > 0:
        return quaternion_affine(hdr)
    zooms = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    zooms[zooms == 0] = 1.0
    return np.diag([*zooms, 1.0])


def _shape(hdr) -> tuple[int, int, int]:
    ndim = int(hdr["dim"][0])
    dims = [int(x) for x in hdr["dim"][1 : ndim + 1]]
    if ndim > 3 and any(x != 1 for x in dims[3:]):
        raise NiftiError(f"unsupported dimensionality: dim = {dims} (only 3D volumes)")
    dims = (dims + [1, 1, 1])[:3]
    if any(x < 1 for x in dims):
        raise NiftiError(f"invalid dimensions {dims}")
    return tuple(dims)


def read_volume(path) -> Volume:
    """Read a NIfTI-1 volume.

    Data are scaled by ``scl_slope``/``scl_inter`` when the slope is nonzero
    and not the identity (giving float32); otherwise the stored dtype is
    returned unchanged.
    """
    with _open(path) as f:
        hdr, order = parse_header(_read_exact(f, HEADER_SIZE))
        code = int(hdr["datatype"])
        if code not in DATATYPES:
            raise NiftiError(f"unsupported NIfTI datatype code {code} (supported: 2=u8, 4=i16, 16=f32)")
        shape = _shape(hdr)
        offset = int(hdr["vox_offset"])
        if offset < HEADER_SIZE:
            raise NiftiError(f"invalid vox_offset {offset}")
        _read_exact(f, offset - HEADER_SIZE)  # extensions: skipped
        dtype = DATATYPES[code].newbyteorder(order)
        data = np.empty(int(np.prod(shape)), dtype=dtype)
        view = memoryview(data).cast("B")
        got = 0
        while got < len(view):
            n = f.readinto(view[got:])
            if not n:
                raise NiftiError(f"truncated NIfTI payload: expected {len(view)} bytes, got {got}")
            got += n
    data = data.astype(DATATYPES[code], copy=False).reshape(shape, order="F")
    affine = header_affine(hdr)
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    tag = TAGS[code]
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        data = (data.astype(np.float64) * slope + inter).astype(np.float32)
        tag = "f32"
    return Volume(np.ascontiguousarray(data), affine, dtype_tag=tag)


def read_label_mask(path) -> LabelMask:
    v = read_volume(path)
    return LabelMask(np.rint(v.data).astype(np.uint8) if v.data.dtype.kind == "f" else v.data, v.affine)


def build_header(shape, affine, datatype: str) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    code = DATATYPE_CODES[datatype]
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = DATATYPES[code].itemsize * 8
    affine = np.asarray(affine, dtype=np.float64)
    hdr["pixdim"] = [1.0, *np.linalg.norm(affine[:3, :3], axis=0), 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 1
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = affine[:3, 3]
    hdr["magic"] = b"n+1"
    return hdr


def write_volume(v: Volume, path, datatype: str | None = None, gzip_output: bool | None = None) -> None:
    """Write ``v`` as little-endian NIfTI-1.

    ``datatype`` defaults to the volume's own tag; ``gzip_output`` defaults to
    whether ``path`` ends in ``.gz``.
    """
    datatype = datatype or v.dtype_tag
    if datatype not in DATATYPE_CODES:
        raise NiftiError(f"unsupported datatype {datatype!r}")
    if gzip_output is None:
        gzip_output = os.fspath(path).endswith(".gz")
    target = DATATYPES[DATATYPE_CODES[datatype]].newbyteorder("<")
    data = np.asarray(v.data)
    if data.dtype != target:
        if target.kind in "iu":
            info = np.iinfo(target)
            if np.any(data < info.min) or np.any(data > info.max) or np.any(data != np.rint(data)):
                raise NiftiError(f"data not representable as {datatype}")
        data = data.astype(target)
    hdr = build_header(v.shape, v.affine, datatype)
    opener = gzip.open if gzip_output else open
    with opener(path, "wb") as f:
        f.write(hdr.tobytes())
        f.write(b"\x00\x00\x00\x00")
        # Fortran order: x fastest; written slab by slab to bound memory
        for k in range(data.shape[2]):
            f.write(np.ascontiguousarray(data[:, :, k].T).tobytes())
