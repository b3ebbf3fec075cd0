"""Point-cloud files: a little-endian binary container and a CSV fallback.

Binary layout::

    magic    8 bytes  b"GAFPC\\x00\\x01\\n"
    count    uint64   number of points
    mlen     uint32   byte length of the manifest
    manifest mlen     UTF-8 JSON: {"channels": [{"name", "width", "dtype"}...], "meta": {...}}
    payload           one column block per channel, in manifest order, count*width values each

Channel names: ``positions``, ``features``, ``normals``, ``areas``,
``parts``, ``target:<name>`` and ``channel:<name>``.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .data import DataError
from .pointcloud import PointCloud

MAGIC = b"GAFPC\x00\x01\n"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8", "u1": "|u1"}


def _columns(pc: PointCloud, float_dtype: str):
    def fl(a):
        a = np.asarray(a)
        return a.reshape(len(pc), -1), float_dtype

    cols = [("positions",) + fl(pc.positions)]
    if pc.features is not None:
        cols.append(("features",) + fl(pc.features))
    if pc.normals is not None:
        cols.append(("normals",) + fl(pc.normals))
    if pc.areas is not None:
        cols.append(("areas",) + fl(pc.areas))
    if pc.parts is not None:
        cols.append(("parts", pc.parts.reshape(-1, 1), "i4"))
    for k, v in pc.targets.items():
        cols.append((f"target:{k}",) + fl(v))
    for k, v in pc.channels.items():
        v = np.asarray(v)
        kind = "u1" if v.dtype == bool else ("i8" if v.dtype.kind in "iu" else float_dtype)
        cols.append((f"channel:{k}", v.reshape(len(pc), -1), kind))
    return cols


def _assemble(n: int, arrays: dict[str, np.ndarray], meta: dict) -> PointCloud:
    def get(name, flat=False):
        a = arrays.get(name)
        return None if a is None else (a.reshape(-1) if flat else a)

    targets = {k[7:]: v for k, v in arrays.items() if k.startswith("target:")}
    channels = {k[8:]: (v.reshape(-1) if v.shape[1] == 1 else v) for k, v in arrays.items()
                if k.startswith("channel:")}
    if "positions" not in arrays:
        raise DataError("file has no positions channel")
    try:
        return PointCloud(positions=arrays["positions"].astype(float), features=get("features"),
                          normals=get("normals"), areas=get("areas", True), parts=get("parts", True),
                          targets=targets, channels=channels, meta=meta)
    except ValueError as e:
        raise DataError(str(e)) from e


def write_cloud(path, pc: PointCloud, float_dtype: str = "f4") -> None:
    """Write the binary container. Floats default to 32-bit; pass ``"f8"`` for lossless."""
    if float_dtype not in ("f4", "f8"):
        raise ValueError("float_dtype must be 'f4' or 'f8'")
    cols = _columns(pc, float_dtype)
    manifest = {"channels": [{"name": n, "width": int(a.shape[1]), "dtype": t} for n, a, t in cols],
                "meta": pc.meta}
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QI", len(pc), len(blob)))
        fh.write(blob)
        for _, a, t in cols:
            fh.write(np.ascontiguousarray(a, dtype=_DTYPES[t]).tobytes())


def read_cloud(path) -> PointCloud:
    """Read either format, chosen by suffix (``.csv``) or the magic bytes."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_csv(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a point-cloud container (bad magic)")
    try:
        n, mlen = struct.unpack_from("<QI", raw, 8)
        manifest = json.loads(raw[20:20 + mlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt header: {e}") from e
    off = 20 + mlen
    arrays = {}
    for ch in manifest["channels"]:
        dt = np.dtype(_DTYPES[ch["dtype"]])
        size = n * ch["width"] * dt.itemsize
        if off + size > len(raw):
            raise DataError(f"{path}: truncated payload in channel {ch['name']}")
        a = np.frombuffer(raw, dtype=dt, count=n * ch["width"], offset=off).reshape(n, ch["width"])
        off += size
        a = a.astype(bool) if ch["dtype"] == "u1" else a.astype(np.int64 if dt.kind == "i" else np.float64)
        arrays[ch["name"]] = a
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")
    return _assemble(n, arrays, manifest.get("meta", {}))


def write_csv(path, pc: PointCloud) -> None:
    """CSV with a ``# meta:`` JSON line, then a header of ``name[k]`` columns; floats as repr."""
    cols = _columns(pc, "f8")
    header, blocks = [], []
    for name, a, _ in cols:
        header += [f"{name}[{k}]" for k in range(a.shape[1])]
        blocks.append(a)
    with open(path, "w", newline="") as fh:
        fh.write("# meta: " + json.dumps(pc.meta, sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(pc)):
            row = []
            for a in blocks:
                row += [repr(v.item()) if isinstance(v, np.floating) else str(int(v)) for v in a[i]]
            w.writerow(row)


def read_csv(path) -> PointCloud:
    with open(path, newline="") as fh:
        first = fh.readline()
        meta = {}
        if first.startswith("# meta: "):
            meta = json.loads(first[8:])
        else:
            fh.seek(0)
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: missing header")
    header, body = rows[0], rows[1:]
    names: dict[str, list[int]] = {}
    for j, h in enumerate(header):
        base = h.rsplit("[", 1)[0] if h.endswith("]") else h
        names.setdefault(base, []).append(j)
    try:
        table = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from e
    arrays = {}
    for base, idx in names.items():
        a = table[:, idx]
        if base == "parts":
            a = a.astype(np.int64)
        arrays[base] = a
    # simple x,y,z headers from foreign tools
    if "positions" not in arrays and all(k in arrays for k in ("x", "y", "z")):
        arrays["positions"] = np.hstack([arrays.pop("x"), arrays.pop("y"), arrays.pop("z")])
    return _assemble(len(body), arrays, meta)
