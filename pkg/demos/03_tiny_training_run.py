"""
A desk-scale training run
=========================

Trains the DCGAN at 32x32 on a handful of synthetic slices, writes sample
grids and checkpoints, then shows that resuming from a checkpoint lands on
exactly the same weights as an uninterrupted run.

    python demos/03_tiny_training_run.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from mrigan.checkpoint import load_checkpoint, to_bytes
from mrigan.slices import DatasetTensor, conform, extract_slices, normalize, rotate
from mrigan.nifti import read_volume
from mrigan.training import TrainConfig, train

from _phantom import phantom, write_nifti

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
out.mkdir(parents=True, exist_ok=True)

# %% a small dataset: 15 slices from one synthetic volume
write_nifti(out / "vol.nii", phantom((64, 200, 180)))
slices = [normalize(conform(rotate(s, "rot90ccw"), 256))
          for s in extract_slices(read_volume(out / "vol.nii"), "sagittal", 15)]
data = DatasetTensor(np.stack([s.pixels for s in slices]))

# %% six epochs, grids every two, checkpoint every three
config = dict(image_size=32, batch_size=5, seed=7, sample_every=2, checkpoint_every=3,
              sample_grid=(3, 3), deterministic=True)
full = train(TrainConfig(epochs=6, run_dir=str(out / "full"), **config), data)
for log in full.logs:
    print(f"epoch {log.epoch}: d_real {log.d_real:.4f}  d_fake {log.d_fake:.4f}  g {log.g:.4f}")
print("grids:", sorted(p.name for p in (out / "full").glob("epoch_*.png")))

# %% stop at 3, resume to 6
train(TrainConfig(epochs=3, run_dir=str(out / "part"), **config), data)
resumed = train(TrainConfig(epochs=6, run_dir=str(out / "part"), **config), data,
                resume=load_checkpoint(out / "part" / "ckpt_epoch_3.mrck"))
same = to_bytes(resumed.checkpoint) == to_bytes(full.checkpoint)
print("resumed run matches uninterrupted run:", same)
