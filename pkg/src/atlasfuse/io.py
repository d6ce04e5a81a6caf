"""File formats: NIfTI-1 volumes, the MVOL fallback, affine matrices,
displacement fields, library manifests, and metrics reports.

NIfTI support is deliberately narrow: single-file uncompressed images,
datatypes uint8 / int16 / float32, honoring dim, pixdim, and the sform
rows for placement.  Data is converted to internal float scalars on read;
label maps are written as uint8.
"""

from __future__ import annotations

import csv
import os
import struct

import numpy as np

from .volume import AffineTransform, DisplacementField, LabelMap, Volume

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16),
                np.dtype(np.float32): (16, 32)}
_HDR_SIZE = 348
_VOX_OFFSET = 352


def _parse_nifti_header(raw: bytes):
    if len(raw) < _HDR_SIZE:
        raise ValueError("truncated NIfTI header")
    for endian in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(endian + "i", raw[0:4])
        if sizeof_hdr == _HDR_SIZE:
            break
    else:
        raise ValueError("not a NIfTI-1 file (bad sizeof_hdr)")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(endian + "f", raw[108:112])
    (sform_code,) = struct.unpack(endian + "h", raw[254:256])
    srow_x = struct.unpack(endian + "4f", raw[280:296])
    srow_y = struct.unpack(endian + "4f", raw[296:312])
    srow_z = struct.unpack(endian + "4f", raw[312:328])
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise ValueError("not a NIfTI-1 file (bad magic)")
    if magic == b"ni1\x00":
        raise ValueError("paired .hdr/.img NIfTI is not supported, use single-file n+1")
    return {
        "endian": endian,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(round(vox_offset)),
        "sform_code": sform_code,
        "srow": (srow_x, srow_y, srow_z),
    }


def _read_nifti_array(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    hdr = _parse_nifti_header(raw)
    ndim = hdr["dim"][0]
    nx, ny, nz = (max(int(d), 1) for d in hdr["dim"][1:4])
    ncomp = 1
    if ndim >= 5:
        ncomp = max(int(hdr["dim"][5]), 1)
    if hdr["datatype"] not in _NIFTI_DTYPES:
        raise ValueError(f"unsupported NIfTI datatype code {hdr['datatype']}")
    dtype = np.dtype(_NIFTI_DTYPES[hdr["datatype"]]).newbyteorder(hdr["endian"])
    count = nx * ny * nz * ncomp
    offset = hdr["vox_offset"] if hdr["vox_offset"] >= _HDR_SIZE else _VOX_OFFSET
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # NIfTI stores x fastest; dim[4] (time) is 1 for everything we accept
    arr = flat.reshape((nx, ny, nz, ncomp), order="F").astype(np.float64)
    spacing = tuple(float(abs(p)) or 1.0 for p in hdr["pixdim"][1:4])
    if hdr["sform_code"] > 0:
        origin = tuple(float(hdr["srow"][a][3]) for a in range(3))
    else:
        origin = (0.0, 0.0, 0.0)
    return arr, spacing, origin


def _write_nifti(path: str, arr: np.ndarray, spacing, origin, dtype, ncomp: int = 1):
    arr = np.asarray(arr)
    nx, ny, nz = arr.shape[:3]
    code, bitpix = _NIFTI_CODES[np.dtype(dtype)]
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<B", hdr, 38, ord("r"))
    if ncomp == 1:
        dim = (3, nx, ny, nz, 1, 1, 1, 1)
        intent = 0
    else:
        dim = (5, nx, ny, nz, 1, ncomp, 1, 1)
        intent = 1007  # vector-valued voxels
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 68, intent)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform none, sform scanner
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], origin[2])
    hdr[344:348] = b"n+1\x00"
    payload = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * (_VOX_OFFSET - _HDR_SIZE))
        fh.write(payload.tobytes(order="F"))


_MVOL_DTYPES = {"f32": np.float32, "u8": np.uint8}


def _read_mvol(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    pos = 0
    for _ in range(5):
        nl = raw.index(b"\n", pos)
        lines.append(raw[pos:nl].decode("ascii").strip())
        pos = nl + 1
    if lines[0] != "MVOL1":
        raise ValueError("not an MVOL file")
    fields = {}
    for line in lines[1:]:
        key, *rest = line.split()
        fields[key] = rest
    dims = tuple(int(v) for v in fields["dims"])
    spacing = tuple(float(v) for v in fields["spacing"])
    origin = tuple(float(v) for v in fields["origin"])
    dtype = np.dtype(_MVOL_DTYPES[fields["dtype"][0]]).newbyteorder("<")
    count = dims[0] * dims[1] * dims[2]
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    arr = flat.reshape(dims, order="F").astype(np.float64)
    return arr, spacing, origin


def _write_mvol(path: str, arr: np.ndarray, spacing, origin, dtype_tag: str):
    dims = arr.shape
    header = (
        f"MVOL1\n"
        f"dims {dims[0]} {dims[1]} {dims[2]}\n"
        f"spacing {spacing[0]:.17g} {spacing[1]:.17g} {spacing[2]:.17g}\n"
        f"origin {origin[0]:.17g} {origin[1]:.17g} {origin[2]:.17g}\n"
        f"dtype {dtype_tag}\n"
    )
    payload = np.ascontiguousarray(arr, dtype=_MVOL_DTYPES[dtype_tag])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.tobytes(order="F"))


def _is_mvol(path: str) -> bool:
    if path.endswith(".mvol") or path.endswith(".dx") or path.endswith(".dy") or path.endswith(".dz"):
        return True
    if path.endswith(".nii"):
        return False
    with open(path, "rb") as fh:
        return fh.read(5) == b"MVOL1"


def read_volume(path: str) -> Volume:
    if _is_mvol(path):
        arr, spacing, origin = _read_mvol(path)
    else:
        arr, spacing, origin = _read_nifti_array(path)
        if arr.shape[3] != 1:
            raise ValueError(f"{path}: expected a scalar volume, found {arr.shape[3]} components")
        arr = arr[..., 0]
    return Volume(arr, spacing, origin)


def read_labels(path: str) -> LabelMap:
    vol = read_volume(path)
    return LabelMap(vol.data != 0, vol.spacing, vol.origin)


def write_volume(path: str, vol: Volume) -> None:
    if path.endswith(".mvol"):
        _write_mvol(path, vol.data, vol.spacing, vol.origin, "f32")
    else:
        _write_nifti(path, vol.data, vol.spacing, vol.origin, np.float32)


def write_labels(path: str, lab: LabelMap) -> None:
    if path.endswith(".mvol"):
        _write_mvol(path, lab.data, lab.spacing, lab.origin, "u8")
    else:
        _write_nifti(path, lab.data, lab.spacing, lab.origin, np.uint8)


def _dfield_component_paths(path: str):
    base = path
    for suffix in (".dx", ".dy", ".dz"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
            break
    return [base + s for s in (".dx", ".dy", ".dz")]


def read_dfield(path: str) -> DisplacementField:
    """Read a displacement field: either a 3-component NIfTI (dim[5] = 3)
    or a trio of MVOL files suffixed .dx/.dy/.dz."""
    if path.endswith(".nii") or (os.path.exists(path) and not _is_mvol(path)):
        arr, spacing, origin = _read_nifti_array(path)
        if arr.shape[3] != 3:
            raise ValueError(f"{path}: displacement NIfTI must hold 3 components")
        return DisplacementField(arr, spacing, origin)
    comps = []
    spacing = origin = None
    for comp_path in _dfield_component_paths(path):
        arr, spacing, origin = _read_mvol(comp_path)
        comps.append(arr)
    return DisplacementField(np.stack(comps, axis=-1), spacing, origin)


def write_dfield(path: str, field: DisplacementField) -> None:
    if path.endswith(".nii"):
        _write_nifti(path, field.disp, field.spacing, field.origin, np.float32, ncomp=3)
        return
    for axis, comp_path in enumerate(_dfield_component_paths(path)):
        _write_mvol(comp_path, field.disp[..., axis], field.spacing, field.origin, "f32")


def read_affine(path: str) -> AffineTransform:
    rows = np.loadtxt(path, dtype=np.float64)
    if rows.shape != (4, 4):
        raise ValueError(f"{path}: affine file must hold 4 rows of 4 numbers")
    return AffineTransform(rows)


def write_affine(path: str, xform: AffineTransform) -> None:
    np.savetxt(path, xform.matrix, fmt="%.17g")


MANIFEST_FIELDS = ("id", "intensity_path", "label_path", "affine_path", "dfield_path")


def read_manifest(path: str):
    """Atlas library manifest: CSV with columns id, intensity_path,
    label_path, affine_path, dfield_path.  Relative paths are resolved
    against the manifest's directory.  Empty affine/dfield cells are
    allowed (identity transform, no precomputed registration)."""
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        if not p:
            return ""
        return p if os.path.isabs(p) else os.path.join(base, p)

    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest is missing columns {sorted(missing)}")
        for row in reader:
            entries.append({
                "id": row["id"].strip(),
                "intensity_path": resolve(row["intensity_path"].strip()),
                "label_path": resolve(row["label_path"].strip()),
                "affine_path": resolve(row["affine_path"].strip()),
                "dfield_path": resolve(row["dfield_path"].strip()),
            })
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def write_manifest(path: str, entries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            writer.writerow([e.get(k, "") for k in MANIFEST_FIELDS])


METRICS_FIELDS = ("roi", "method", "dice", "stage", "seconds")


def write_metrics(path: str, rows) -> None:
    """Metrics report: CSV with header roi,method,dice,stage,seconds."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for row in rows:
            writer.writerow([row.get(k, "") for k in METRICS_FIELDS])


def format_metrics(rows) -> str:
    lines = [",".join(METRICS_FIELDS)]
    for row in rows:
        lines.append(",".join(str(row.get(k, "")) for k in METRICS_FIELDS))
    return "\n".join(lines) + "\n"
