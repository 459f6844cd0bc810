"""On-disk dataset formats.

Depth sequences (one directory each)::

    frame_000000.pgm   8-bit binary grayscale image
    depth_000000.f32   little-endian float32 depth, row-major, no header
    frame_000000.json  {"depth_kind", "K": {fx, fy, cx, cy}, "R": [9], "t": [3]}

Homography-pair datasets::

    pair_000000_a.pgm, pair_000000_b.pgm
    pair_000000.json   {"h_ab": [9], optional "labels_a"/"labels_b": per-cell ints}
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .geometry import CameraFrame, CameraIntrinsics, DepthKind, GeometryError
from .model import CELL
from .training import HomographyPair


class DataError(Exception):
    """A dataset file is missing or malformed; ``path`` names it."""

    def __init__(self, path, message: str):
        super().__init__(f"{path}: {message}")
        self.path = Path(path)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (or uint8) as binary 8-bit PGM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM as float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(path, "file not found")
    buf = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(path, "truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataError(path, "only binary 8-bit PGM (P5, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos) if len(buf) - pos >= w * h else None
    if data is None:
        raise DataError(path, f"expected {w * h} pixel bytes")
    return data.reshape(h, w).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# depth sequences


def write_frame(directory, index: int, frame: CameraFrame) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / f"frame_{index:06d}.pgm", frame.image)
    (d / f"depth_{index:06d}.f32").write_bytes(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
    K = frame.intrinsics
    meta = {
        "depth_kind": frame.depth_kind.value,
        "K": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy},
        "R": [float(x) for x in frame.R.ravel()],
        "t": [float(x) for x in frame.t],
    }
    (d / f"frame_{index:06d}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def write_sequence(directory, frames) -> None:
    for i, f in enumerate(frames):
        write_frame(directory, i, f)


def read_frame(directory, index: int) -> CameraFrame:
    d = Path(directory)
    image = read_pgm(d / f"frame_{index:06d}.pgm")
    depth_path = d / f"depth_{index:06d}.f32"
    if not depth_path.exists():
        raise DataError(depth_path, "file not found")
    raw = depth_path.read_bytes()
    if len(raw) != image.size * 4:
        raise DataError(depth_path, f"expected {image.size * 4} bytes for a {image.shape[1]}x{image.shape[0]} image, got {len(raw)}")
    depth = np.frombuffer(raw, dtype="<f4").reshape(image.shape).astype(np.float32)
    meta_path = d / f"frame_{index:06d}.json"
    meta = _read_json(meta_path)
    try:
        K = CameraIntrinsics(*(float(meta["K"][k]) for k in ("fx", "fy", "cx", "cy")))
        R = np.array(meta["R"], dtype=np.float64)
        t = np.array(meta["t"], dtype=np.float64)
        if R.size != 9 or t.size != 3:
            raise DataError(meta_path, "field 'R' needs 9 floats and 't' 3 floats")
        return CameraFrame(image, depth, DepthKind(meta["depth_kind"]), K, R.reshape(3, 3), t)
    except KeyError as exc:
        raise DataError(meta_path, f"missing field {exc.args[0]!r}") from None
    except (GeometryError, ValueError) as exc:
        raise DataError(meta_path, str(exc)) from None


def frame_indices(directory) -> list[int]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(d, "dataset directory not found")
    return sorted(int(m.group(1)) for p in d.iterdir() if (m := re.fullmatch(r"frame_(\d{6})\.pgm", p.name)))


def read_sequence(directory) -> list[CameraFrame]:
    return [read_frame(directory, i) for i in frame_indices(directory)]


# --------------------------------------------------------------------------
# homography pairs


def write_pair(directory, index: int, pair: HomographyPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pgm(d / f"pair_{index:06d}_a.pgm", pair.image_a)
    write_pgm(d / f"pair_{index:06d}_b.pgm", pair.image_b)
    meta = {
        "h_ab": [float(x) for x in pair.h_ab.ravel()],
        "labels_a": pair.labels_a.ravel().tolist(),
        "labels_b": pair.labels_b.ravel().tolist(),
    }
    (d / f"pair_{index:06d}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def write_pairs(directory, pairs) -> None:
    for i, p in enumerate(pairs):
        write_pair(directory, i, p)


def read_pair(directory, index: int) -> HomographyPair:
    d = Path(directory)
    a = read_pgm(d / f"pair_{index:06d}_a.pgm")
    b = read_pgm(d / f"pair_{index:06d}_b.pgm")
    meta_path = d / f"pair_{index:06d}.json"
    meta = _read_json(meta_path)
    if "h_ab" not in meta or len(meta["h_ab"]) != 9:
        raise DataError(meta_path, "field 'h_ab' needs 9 floats")
    hc, wc = a.shape[0] // CELL, a.shape[1] // CELL
    labels = {}
    for key in ("labels_a", "labels_b"):
        if key in meta:
            arr = np.asarray(meta[key], dtype=np.int64)
            if arr.size != hc * wc:
                raise DataError(meta_path, f"field {key!r} needs {hc * wc} cell labels")
            labels[key] = arr.reshape(hc, wc)
        else:
            labels[key] = np.full((hc, wc), CELL * CELL, dtype=np.int64)
    try:
        return HomographyPair(a, b, np.array(meta["h_ab"], dtype=np.float64), labels["labels_a"], labels["labels_b"])
    except ValueError as exc:
        raise DataError(meta_path, str(exc)) from None


def pair_indices(directory) -> list[int]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(d, "dataset directory not found")
    return sorted(int(m.group(1)) for p in d.iterdir() if (m := re.fullmatch(r"pair_(\d{6})\.json", p.name)))


def read_pairs(directory) -> list[HomographyPair]:
    return [read_pair(directory, i) for i in pair_indices(directory)]


def dataset_kind(directory) -> str:
    """'pairs' or 'sequence' depending on which file family the directory holds."""
    if pair_indices(directory):
        return "pairs"
    if frame_indices(directory):
        return "sequence"
    raise DataError(directory, "no frame_*.pgm or pair_*.json files found")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(path, "file not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(path, f"invalid JSON: {exc}") from None
