"""Binary netpbm image dumps: P6 color and 16-bit P5 depth (millimeters)."""

from __future__ import annotations

import numpy as np


class BadImage(ValueError):
    pass


def save_ppm(path, rgb: np.ndarray) -> None:
    """Write float RGB in [0, 1] as a binary P6 file with maxval 255."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise BadImage(f"expected [H, W, 3], got {rgb.shape}")
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (rgb.shape[1], rgb.shape[0]))
        f.write(data.tobytes())


def save_pgm16(path, depth_m: np.ndarray) -> None:
    """Write depth in meters as a 16-bit binary P5 file in millimeters.

    16-bit netpbm samples are most-significant byte first. Zero stays zero
    (no return); anything past 65.535 m saturates.
    """
    depth_m = np.asarray(depth_m)
    if depth_m.ndim != 2:
        raise BadImage(f"expected [H, W], got {depth_m.shape}")
    mm = np.clip(np.rint(depth_m * 1000.0), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n65535\n" % (depth_m.shape[1], depth_m.shape[0]))
        f.write(mm.tobytes())


def save_pgm8(path, gray: np.ndarray) -> None:
    """Write a uint8 grayscale image as a binary P5 file with maxval 255."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise BadImage(f"expected [H, W], got {gray.shape}")
    data = gray.astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        f.write(data.tobytes())


def _read_header(f, magic: bytes, values: int) -> list:
    if f.read(2) != magic:
        raise BadImage(f"not a {magic.decode()} file")
    out = []
    token = b""
    while len(out) < values:
        c = f.read(1)
        if c == b"":
            raise BadImage("truncated header")
        if c == b"#":  # comment runs to end of line
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        if c.isspace():
            if token:
                out.append(int(token))
                token = b""
            continue
        token += c
    return out


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to float RGB in [0, 1]."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P6", 3)
        if maxval != 255:
            raise BadImage(f"unsupported maxval {maxval}")
        raw = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    if raw.size != w * h * 3:
        raise BadImage("truncated pixel data")
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def load_pgm8(path) -> np.ndarray:
    """Read a binary 8-bit P5 file back to a uint8 array."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P5", 3)
        if maxval != 255:
            raise BadImage(f"unsupported maxval {maxval}")
        raw = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if raw.size != w * h:
        raise BadImage("truncated pixel data")
    return raw.reshape(h, w).copy()


def load_pgm16(path) -> np.ndarray:
    """Read a 16-bit binary P5 file back to depth in meters."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P5", 3)
        if maxval != 65535:
            raise BadImage(f"unsupported maxval {maxval}")
        raw = np.frombuffer(f.read(w * h * 2), dtype=">u2")
    if raw.size != w * h:
        raise BadImage("truncated pixel data")
    return raw.reshape(h, w).astype(np.float64) / 1000.0
