"""Small readers/writers: PFM images, TUM trajectories, key = value text, binary PLY."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .lie import PoseSE3


class DataError(ValueError):
    """Malformed or missing input data."""


class ConfigError(KeyError):
    """Missing or invalid configuration key."""

    def __str__(self):
        return str(self.args[0]) if self.args else "configuration error"


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; rows stored bottom to top as the format requires."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    elif image.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError("PFM holds HxW or HxWx3 images")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 3)
    if len(lines) < 4 or lines[0] not in (b"PF", b"Pf"):
        raise DataError(f"{path}: not a PFM file")
    try:
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PFM header") from exc
    channels = 3 if lines[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = lines[3]
    if len(body) != w * h * channels * 4:
        raise DataError(f"{path}: PFM payload size mismatch")
    img = np.frombuffer(body, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return img[::-1].astype(np.float64)


def write_tum(path, timestamps_ns, poses) -> None:
    with open(path, "w") as fh:
        for t, p in zip(timestamps_ns, poses):
            t = int(t)
            vals = list(p.trans) + list(p.quat)
            fh.write(f"{t // 1_000_000_000}.{t % 1_000_000_000:09d} " + " ".join(f"{v:.17g}" for v in vals) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[PoseSE3]]:
    ts, poses = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{lineno}: expected 8 columns, got {len(parts)}")
        sec, _, frac = parts[0].partition(".")
        try:
            ts.append(int(sec) * 1_000_000_000 + int((frac + "000000000")[:9]))
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad number") from exc
        poses.append(PoseSE3(vals[3:], vals[:3]))
    return np.asarray(ts, dtype=np.int64), poses


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, values: dict, header: str = "") -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for k, v in values.items():
            if isinstance(v, (list, tuple, np.ndarray)):
                v = " ".join(f"{float(x):.17g}" for x in np.ravel(v))
            elif isinstance(v, float):
                v = f"{v:.17g}"
            fh.write(f"{k} = {v}\n")


def parse_floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in re.split(r"[\s,]+", text.strip()) if x])


def write_ply(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Binary little-endian PLY with float32 vertices and int32 triangle indices."""
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(vertices)}\nproperty float x\nproperty float y\nproperty float z\n"
              f"element face {len(faces)}\nproperty list uchar int vertex_indices\nend_header\n")
    face_rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
    face_rec["n"] = 3
    face_rec["idx"] = faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vertices.tobytes())
        fh.write(face_rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii")
    if "binary_little_endian" not in header:
        raise DataError(f"{path}: only binary little-endian PLY is supported")
    nv = int(re.search(r"element vertex (\d+)", header).group(1))
    nf = int(re.search(r"element face (\d+)", header).group(1))
    off = end + len(b"end_header\n")
    verts = np.frombuffer(data, dtype="<f4", count=nv * 3, offset=off).reshape(nv, 3)
    off += nv * 12
    faces = np.frombuffer(data, dtype=[("n", "u1"), ("idx", "<i4", 3)], count=nf, offset=off)
    return verts.astype(np.float64), faces["idx"].astype(np.int64)
