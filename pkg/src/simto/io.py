"""Flat-file formats: design grids, PGM images, optimizer logs, JSON configs."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .fem import DensityField, GridSpec


def write_design_csv(path, rho: DensityField) -> None:
    """One line per grid row, top row first, comma-separated with 6 decimals."""
    img = rho.image()[::-1]
    with open(path, "w") as fh:
        for row in img:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")


def read_design_csv(path, element_size: float = 1.0) -> DensityField:
    rows = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty design file")
    img = np.array([[float(v) for v in r.split(",")] for r in rows])
    nely, nelx = img.shape
    return DensityField(img[::-1].ravel(), GridSpec(nelx, nely, element_size))


def pgm_bytes(rho: DensityField) -> bytes:
    img = np.rint(rho.image()[::-1] * 255).astype(np.uint8)
    head = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    return head + img.tobytes()


def write_pgm(path, rho: DensityField) -> None:
    """8-bit binary PGM, 255 = solid, top row first."""
    Path(path).write_bytes(pgm_bytes(rho))


def read_pgm(path) -> np.ndarray:
    """(rows, cols) uint8 image as stored (top row first)."""
    data = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(p) for p in parts[1:])
    if maxval > 255:
        raise ValueError("16-bit PGM not supported")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return pixels.reshape(h, w)


def write_log_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "objective", "max_change", "volume"])
        for r in history.records:
            w.writerow([r.iteration, f"{r.objective:.10g}", f"{r.max_change:.10g}", f"{r.volume:.10g}"])


def to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    return obj


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def config_hash(obj) -> str:
    blob = json.dumps(to_jsonable(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
