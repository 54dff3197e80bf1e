"""PFM image files (single channel 'Pf' and color 'PF'), little-endian.

Multi-channel feature stacks are stored as a single 'Pf' file whose height is
H * channels (channel planes stacked top to bottom) with a sidecar text
header carrying the channel count and resolution scale; see
write_feature_stack.
"""

from __future__ import annotations

import numpy as np


def write_pfm(path, data):
    """Write (H, W) or (H, W, 3) float data as little-endian PFM.

    Rows are stored bottom-up per the format; scale -1 marks little-endian.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM stores 1- or 3-channel images")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    """Read a PFM file; returns float64 (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"PF":
            channels = 3
        elif magic == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: magic {magic!r}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        data = np.frombuffer(fh.read(count * 4), dtype=dtype).astype(np.float64)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).copy()


def write_feature_stack(path, features, scale=1.0):
    """Write (H, W, C) features as a stacked 'Pf' PFM plus sidecar header."""
    features = np.asarray(features)
    if features.ndim != 3:
        raise ValueError("feature stack must be (H, W, C)")
    h, w, c = features.shape
    planes = np.transpose(features, (2, 0, 1)).reshape(c * h, w)
    write_pfm(path, planes)
    with open(str(path) + ".meta", "w", encoding="ascii") as fh:
        fh.write(f"channels {c}\nscale {scale}\n")


def read_feature_stack(path):
    """Inverse of write_feature_stack; returns (features (H, W, C), scale)."""
    meta = {}
    with open(str(path) + ".meta", "r", encoding="ascii") as fh:
        for line in fh:
            key, val = line.split()
            meta[key] = val
    c = int(meta["channels"])
    scale = float(meta["scale"])
    planes = read_pfm(path)
    ch, w = planes.shape
    h = ch // c
    features = np.transpose(planes.reshape(c, h, w), (1, 2, 0))
    return features, scale
