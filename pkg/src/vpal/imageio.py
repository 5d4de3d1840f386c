"""Image export: 8-bit binary PGM and raw little-endian float64 with a JSON sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_pgm(path, pixels, height: int, width: int, peak: float = 1.0) -> None:
    """Write ``pixels`` (flat, row-major, nominally in [0, peak]) as P5 with maxval 255."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    img = np.clip(np.asarray(pixels, dtype=float).reshape(height, width) / peak, 0.0, 1.0)
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(raw[pos : pos + width * height], dtype=np.uint8).reshape(height, width)


def write_raw(path, pixels, height: int, width: int) -> Path:
    """Write ``<path>`` as f64le and ``<path>.json`` holding the shape; returns the sidecar path."""
    path = Path(path)
    arr = np.asarray(pixels, dtype="<f8").reshape(height * width)
    path.write_bytes(arr.tobytes())
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"height": height, "width": width, "dtype": "f64le"}) + "\n")
    return sidecar


def read_raw(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if meta.get("dtype") != "f64le":
        raise ValueError(f"unsupported dtype {meta.get('dtype')!r}")
    arr = np.frombuffer(path.read_bytes(), dtype="<f8")
    return arr.reshape(meta["height"], meta["width"])
