"""
From a NIfTI volume to a packed training tensor
===============================================

Walks the preprocessing chain on synthetic volumes: read, locate the middle
slices, take the 15 central sagittal slices, fix orientation, bring every
slice to 256x256, normalize to [-1, 1] and pack.

    python demos/01_volume_to_dataset.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from mrigan.nifti import read_volume
from mrigan.slices import (conform, export_png, extract_slices, middle_index, normalize,
                           pack_dataset, read_dataset, rotate, verify_sizes)

from _phantom import phantom, write_nifti

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

# two volumes with different extents, like scans from different sites
paths = []
for i, shape in enumerate([(96, 112, 80), (120, 140, 300)]):
    p = out / f"sub-{i:02d}_T1w.nii"
    write_nifti(p, phantom(shape, seed=i))
    paths.append(p)

vol = read_volume(paths[0])
print("header dims:", vol.header.dim[:4], "datatype code", vol.header.datatype_code)
print("middle indices:", [middle_index(n) for n in vol.shape])

# %% 15 central sagittal slices per volume, rotated upright
slices = []
for p in paths:
    for s in extract_slices(read_volume(p), "sagittal", 15):
        slices.append(rotate(s, "rot90ccw"))
print("before conform:", dict(verify_sizes(slices).counts))

# %% pad the small ones, crop the large ones (crop refuses to cut real content)
conformed = [normalize(conform(s, 256)) for s in slices]
print("after conform: ", dict(verify_sizes(conformed).counts))
lo = min(float(s.pixels.min()) for s in conformed)
hi = max(float(s.pixels.max()) for s in conformed)
print(f"value range after normalize: [{lo}, {hi}]")

export_png(conformed[7], out / "middle_slice.png")
ds = pack_dataset(conformed, out / "sagittal.mrit")
print("packed:", ds.values.shape, "->", out / "sagittal.mrit",
      f"({(out / 'sagittal.mrit').stat().st_size} bytes)")
assert np.array_equal(read_dataset(out / "sagittal.mrit").values, ds.values)
