"""NIfTI-1 reading and writing (single-file ``.nii`` / ``.nii.gz``).

Only what volumetric CT work needs: 3D images, the common integer and float
datatypes, sform/qform geometry, and slope/intercept scaling.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DimensionalityError, FormatError, UnsupportedDatatypeError, WriteError
from .volume import LabelVolume, ScalarVolume, VolumeGeometry

HEADER_SIZE = 348
VOX_OFFSET = 352

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    512: np.dtype(np.uint16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}

_LABELS_PREFIX = "labels:"


def _open(path: Path, mode: str):
    if path.name.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _write_bytes(path: Path, chunks) -> None:
    with open(path, "wb") as raw:
        if path.name.endswith(".gz"):
            # fixed mtime and no embedded name: identical volumes give identical bytes
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0, compresslevel=6) as fh:
                for c in chunks:
                    fh.write(c)
        else:
            for c in chunks:
                raw.write(c)


def _quaternion_from_rotation(r: np.ndarray) -> tuple[float, float, float]:
    """(b, c, d) of a proper rotation, with a >= 0 as NIfTI requires."""
    trace = np.trace(r)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a = 0.25 / s
        b = (r[2, 1] - r[1, 2]) * s
        c = (r[0, 2] - r[2, 0]) * s
        d = (r[1, 0] - r[0, 1]) * s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a = (r[2, 1] - r[1, 2]) / s
        b = 0.25 * s
        c = (r[0, 1] + r[1, 0]) / s
        d = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a = (r[0, 2] - r[2, 0]) / s
        b = (r[0, 1] + r[1, 0]) / s
        c = 0.25 * s
        d = (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a = (r[1, 0] - r[0, 1]) / s
        b = (r[0, 2] + r[2, 0]) / s
        c = (r[1, 2] + r[2, 1]) / s
        d = 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return float(b), float(c), float(d)


def _rotation_from_quaternion(b: float, c: float, d: float) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])


def _build_header(geometry: VolumeGeometry, datatype: int, descrip: str = "") -> bytes:
    dtype = DATATYPES[datatype]
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, *geometry.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dtype.itemsize * 8)

    rot = geometry.direction
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot = rot * np.array([1.0, 1.0, -1.0])
    struct.pack_into("<8f", hdr, 76, qfac, *geometry.spacing, 0, 0, 0, 0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # mm
    text = descrip.encode("ascii", "replace")[:79]
    hdr[148:148 + len(text)] = text
    struct.pack_into("<hh", hdr, 252, 1, 1)
    struct.pack_into("<3f", hdr, 256, *_quaternion_from_rotation(rot))
    struct.pack_into("<3f", hdr, 268, *geometry.origin)
    aff = geometry.affine
    for row in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * row, *aff[row])
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_volume(vol: ScalarVolume | LabelVolume, path) -> None:
    """Write ``vol`` as NIfTI-1; float32 for scalar volumes, uint8 for labels.

    Label names survive the round trip through the header's description field.
    """
    path = Path(path)
    if isinstance(vol, LabelVolume):
        datatype = 2
        names = ",".join(f"{k}={v}" for k, v in vol.label_names.items())
        descrip = _LABELS_PREFIX + names
        if len(descrip) > 79:
            descrip = ""
    else:
        datatype = 16
        descrip = ""
    data = np.asarray(vol.data, dtype=DATATYPES[datatype])
    payload = _build_header(vol.geometry, datatype, descrip) + b"\x00" * 4
    try:
        _write_bytes(path, [payload, data.astype("<" + data.dtype.str[1:]).tobytes(order="F")])
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path: Path) -> bytes:
    try:
        with _open(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError, gzip.BadGzipFile) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _parse(path) -> tuple[np.ndarray, VolumeGeometry, str]:
    path = Path(path)
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: too short for a NIfTI-1 header")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if struct.unpack_from("<i", raw, 0)[0] == HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        end = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")

    def get(fmt, off):
        return struct.unpack_from(end + fmt, raw, off)

    dim = get("8h", 40)
    if dim[0] != 3 and not (dim[0] in (4, 5) and all(d == 1 for d in dim[4:dim[0] + 1])):
        raise DimensionalityError(f"{path}: expected a 3D image, dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    datatype = get("h", 70)[0]
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
    pixdim = get("8f", 76)
    vox_offset = int(get("f", 108)[0])
    slope, inter = get("ff", 112)
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("ascii", "replace")
    qform_code, sform_code = get("hh", 252)

    if magic == b"ni1\x00":
        img = path.with_name(path.name.replace(".hdr", ".img"))
        raw, vox_offset = _read_bytes(img), 0

    dtype = DATATYPES[datatype].newbyteorder(end)
    count = dims[0] * dims[1] * dims[2]
    if len(raw) < vox_offset + count * dtype.itemsize:
        raise FormatError(f"{path}: truncated voxel data")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))
    if np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0):
        data = data.astype(np.float64) * slope + inter

    if sform_code > 0:
        rows = np.array([get("4f", 280 + 16 * r) for r in range(3)], dtype=np.float64)
        cols = rows[:, :3]
        spacing = np.linalg.norm(cols, axis=0)
        direction = cols / spacing
        origin = rows[:, 3]
    elif qform_code > 0:
        rot = _rotation_from_quaternion(*get("3f", 256))
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        direction = rot * np.array([1.0, 1.0, qfac])
        spacing = np.abs(pixdim[1:4])
        origin = np.array(get("3f", 268), dtype=np.float64)
    else:
        direction = np.eye(3)
        spacing = np.abs(pixdim[1:4])
        origin = np.zeros(3)
    # header floats are single precision; snap the direction back onto O(3)
    u, _, vt = np.linalg.svd(direction)
    geometry = VolumeGeometry(dims, tuple(spacing), tuple(origin), u @ vt)
    return data, geometry, descrip


def read_volume(path) -> ScalarVolume:
    """Read a NIfTI-1 file as a float32 HU volume."""
    data, geometry, _ = _parse(path)
    data = np.asarray(data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite voxel values")
    return ScalarVolume(geometry, data)


def read_labels(path) -> LabelVolume:
    """Read a NIfTI-1 file as a label volume (values must be integers in 0..255)."""
    data, geometry, descrip = _parse(path)
    if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
        raise FormatError(f"{path}: label image has non-integer values")
    names = {}
    if descrip.startswith(_LABELS_PREFIX):
        for item in descrip[len(_LABELS_PREFIX):].split(","):
            if "=" in item:
                k, v = item.split("=", 1)
                names[int(k)] = v
    return LabelVolume(geometry, np.asarray(data).astype(np.int64), names)
