"""Binary persistence formats and exporters.

Two on-disk formats are defined here:

``.gstw`` tensor files
    A minimal self-describing container for one dense float64 array:

    ========  ========================================
    offset    content
    ========  ========================================
    0         magic bytes ``b"GSTW"``
    4         format version, uint32 LE (currently 1)
    8         dtype code, uint32 LE (1 = float64)
    12        rank, uint32 LE
    16        shape, rank x uint64 LE
    ...       payload, row-major (C order) float64
    end-4     CRC32 of everything before it, uint32 LE
    ========  ========================================

bundle files
    A zip archive with fixed (epoch) timestamps holding a
    ``manifest.json`` plus one ``.gstw`` entry per named tensor.  Used
    for surrogate checkpoints and PCA bases.  Timestamps and entry
    order are pinned so identical content produces identical bytes.

Both formats round-trip exactly and validate their checksums on read.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zipfile
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"GSTW"
FORMAT_VERSION = 1
DTYPE_F64 = 1

# zip entries get this fixed timestamp so archives are byte-reproducible
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class TensorFileError(Exception):
    """Raised for malformed, truncated or corrupted tensor files."""


def tensor_bytes(array: np.ndarray) -> bytes:
    """Serialize an array to the .gstw wire format."""
    a = np.ascontiguousarray(array, dtype=np.float64)
    head = MAGIC + struct.pack("<III", FORMAT_VERSION, DTYPE_F64, a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    body = head + a.tobytes()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 20:
        raise TensorFileError("file too short to be a tensor file")
    if blob[:4] != MAGIC:
        raise TensorFileError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise TensorFileError("checksum mismatch: file corrupted")
    version, dtype_code, rank = struct.unpack("<III", blob[4:16])
    if version != FORMAT_VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    if dtype_code != DTYPE_F64:
        raise TensorFileError(f"unsupported dtype code {dtype_code}")
    off = 16 + 8 * rank
    shape = struct.unpack(f"<{rank}Q", blob[16:off])
    n = int(np.prod(shape)) if rank else 1
    payload = blob[off:-4]
    if len(payload) != 8 * n:
        raise TensorFileError(
            f"payload length {len(payload)} != 8*prod(shape) = {8 * n}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_bundle(
    path: str | Path, manifest: dict, tensors: dict[str, np.ndarray]
) -> None:
    """Write a manifest + named tensors as one reproducible zip archive."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for name in sorted(tensors):
            info = zipfile.ZipInfo(f"tensors/{name}.gstw", date_time=_ZIP_EPOCH)
            zf.writestr(info, tensor_bytes(tensors[name]))
    Path(path).write_bytes(buf.getvalue())


def read_bundle(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    tensors: dict[str, np.ndarray] = {}
    try:
        with zipfile.ZipFile(Path(path)) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            for entry in zf.namelist():
                if entry.startswith("tensors/") and entry.endswith(".gstw"):
                    name = entry[len("tensors/") : -len(".gstw")]
                    tensors[name] = tensor_from_bytes(zf.read(entry))
    except (zipfile.BadZipFile, KeyError) as exc:
        raise TensorFileError(f"bad bundle file {path}: {exc}") from exc
    return manifest, tensors


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path: str | Path, header: list[str], rows) -> None:
    """Plain CSV writer with %.17g formatting so round trips are exact."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float | np.floating):
                cells.append(f"{v:.17g}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_vtk_structured_points(
    path: str | Path,
    fields: dict[str, np.ndarray],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> None:
    """Export cell fields to a legacy-ASCII VTK structured-points file.

    Every field must share one (nx, ny, nz) shape; 2D maps are passed
    as (nx, ny, 1).  Values are written as CELL_DATA in x-fastest order
    as the legacy format requires.
    """
    shapes = {f.shape for f in fields.values()}
    if len(shapes) != 1:
        raise ValueError(f"all fields must share one shape, got {shapes}")
    (nx, ny, nz) = shapes.pop()
    lines = [
        "# vtk DataFile Version 3.0",
        "gstw export",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        "ORIGIN {:.9g} {:.9g} {:.9g}".format(*origin),
        "SPACING {:.9g} {:.9g} {:.9g}".format(*spacing),
        f"CELL_DATA {nx * ny * nz}",
    ]
    for name, field in fields.items():
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        flat = np.asarray(field, dtype=np.float64).transpose(2, 1, 0).ravel()
        lines.extend(f"{v:.9g}" for v in flat)
    Path(path).write_text("\n".join(lines) + "\n")
