"""Synthetic head-like volumes and a bare NIfTI-1 writer for the demos."""
import struct

import numpy as np


def phantom(shape=(96, 112, 80), seed=0):
    """Ellipsoidal 'skull' with a brighter core and some texture, int16."""
    rng = np.random.default_rng(seed)
    axes = [np.linspace(-1, 1, n) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    r = (x / 0.8) ** 2 + (y / 0.9) ** 2 + (z / 0.75) ** 2
    vol = np.where(r < 1, 400 + 300 * np.cos(5 * x) * np.sin(4 * y), 0.0)
    vol = np.where(r < 0.35, vol + 500, vol)
    vol += rng.normal(0, 15, shape) * (r < 1)
    return np.clip(vol, 0, None).astype(np.int16)


def write_nifti(path, data):
    """Minimal single-file NIfTI-1 (int16, little-endian, data right after the header)."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 4, 16)
    struct.pack_into("<8f", hdr, 76, 1, 1, 1, 1, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as fh:
        fh.write(hdr + b"\x00" * 4 + data.astype("<i2").tobytes(order="F"))
