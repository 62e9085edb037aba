"""Binary little-endian PLY point clouds with float64 x, y, z."""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_HEADER = ("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n"
           "property double x\nproperty double y\nproperty double z\nend_header\n")


def save_ply(points, path) -> None:
    pts = np.ascontiguousarray(points, dtype="<f8").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_HEADER.format(n=len(pts)).encode("ascii"))
        fh.write(pts.tobytes())


def load_ply(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: missing PLY header")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary_little_endian PLY is supported")
    n = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"] and len(parts) == 3:
            try:
                n = int(parts[2])
            except ValueError:
                raise FormatError(f"{path}: bad vertex count {parts[2]!r}") from None
        elif parts and parts[0] == "property":
            props.append(tuple(parts[1:]))
    if n is None or n < 0:
        raise FormatError(f"{path}: no vertex element")
    if props != [("double", "x"), ("double", "y"), ("double", "z")]:
        raise FormatError(f"{path}: expected double x, y, z properties, got {props}")
    body = blob[end + len(b"end_header\n"):]
    if len(body) != n * 24:
        raise FormatError(f"{path}: expected {n} vertices ({n * 24} bytes), found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(n, 3).astype(np.float64)
