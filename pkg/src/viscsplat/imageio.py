"""Binary PPM (P6, maxval 255) read and write."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(image) -> np.ndarray:
    """Clip to [0, 1] and round to the nearest of 256 levels."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image) -> None:
    data = to_bytes(image)
    h, w = data.shape[:2]
    header = b"P6\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(data[..., :3]).tobytes())


def _tokens(buf: bytes, count: int):
    """First ``count`` header tokens (skipping comments) and the data offset."""
    out = []
    i = 0
    while len(out) < count:
        while buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while buf[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not buf[j:j + 1].isspace():
            j += 1
        out.append(buf[i:j])
        i = j
    return out, i + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic != b"P6":
        raise ValueError("%s: not a binary PPM" % path)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError("%s: 16-bit PPM is not supported" % path)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=offset)
    return data.reshape(h, w, 3).astype(np.float64) / maxval
