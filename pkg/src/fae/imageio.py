"""Binary PNM (P5 grayscale / P6 color) reading and writing.

Images are float arrays in [0, 1] with shape (h, w, c); masks are (h, w).
Values are quantized to ``maxval`` on write and clipped to [0, 1] first.
"""

import os
import re

import numpy as np

_HEADER = re.compile(rb"(P[56])\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def write_pnm(path, image, maxval=65535):
    """Write ``image`` as P5 (1 channel or 2-D) or P6 (3 channels)."""
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {a.shape} as PNM")
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = a.shape[:2]
    header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.astype(dtype).tobytes())


def read_pnm(path):
    """Read a binary PGM/PPM file into a float array in [0, 1].

    Returns shape (h, w, 1) for P5 and (h, w, 3) for P6.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    c = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = h * w * c
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    return data.reshape(h, w, c).astype(np.float64) / maxval


def list_pnm(directory):
    """Sorted list of PNM files in ``directory``."""
    exts = (".pgm", ".ppm", ".pnm")
    return sorted(
        os.path.join(directory, f) for f in os.listdir(directory)
        if f.lower().endswith(exts))
