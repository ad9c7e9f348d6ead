"""From-scratch numpy toolkit: NIfTI slices to a trained DCGAN.

Modules
-------
nifti       NIfTI-1 header parsing and volume decoding
slices      slice extraction, orientation, conform, normalization, dataset files
layers      forward/backward layers on channel-last arrays
model       generator/discriminator stacks, BCE losses, Adam
training    training loop, sample grids, checkpoint state
checkpoint  binary checkpoint format
verify      finite-difference gradient suites
cli         ``mrigan`` command line entry point
"""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"
