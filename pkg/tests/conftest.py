import gzip
import struct

import numpy as np
import pytest

# Independent NIfTI-1 fixture writer: places each field at its documented
# byte offset rather than reusing the package's layout table.
_NP_CODE = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
_BITS = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}


def nifti_header_bytes(dims, datatype=16, slope=0.0, inter=0.0, endian="<",
                       magic=b"n+1\x00", vox_offset=352.0, bitpix=None, rank=None):
    buf = bytearray(348)
    rank = len(dims) if rank is None else rank
    dim = [rank] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into(endian + "i", buf, 0, 348)
    struct.pack_into(endian + "8h", buf, 40, *dim)
    struct.pack_into(endian + "h", buf, 70, datatype)
    struct.pack_into(endian + "h", buf, 72, _BITS.get(datatype, 16) if bitpix is None else bitpix)
    struct.pack_into(endian + "8f", buf, 76, 1.0, 1.0, 1.0, 1.2, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "f", buf, 108, vox_offset)
    struct.pack_into(endian + "f", buf, 112, slope)
    struct.pack_into(endian + "f", buf, 116, inter)
    buf[148:148 + 11] = b"fixture t1w"
    struct.pack_into(endian + "hh", buf, 252, 1, 1)
    struct.pack_into(endian + "4f", buf, 280, 1.0, 0.0, 0.0, -90.0)
    buf[344:348] = magic
    return bytes(buf)


def nifti_file_bytes(data, datatype=16, slope=0.0, inter=0.0, endian="<", **kw):
    """`data` is indexed (x, y, z); written x-fastest after a 4-byte extension gap."""
    hdr = nifti_header_bytes(data.shape, datatype, slope, inter, endian, **kw)
    payload = np.asarray(data).astype(endian + _NP_CODE[datatype]).ravel(order="F").tobytes()
    return hdr + b"\x00" * 4 + payload


@pytest.fixture
def write_nifti(tmp_path):
    def _write(name, data, gz=False, **kw):
        blob = nifti_file_bytes(data, **kw)
        path = tmp_path / name
        if gz:
            path.write_bytes(gzip.compress(blob, mtime=0))
        else:
            path.write_bytes(blob)
        return path
    return _write


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines at the end of the run."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
