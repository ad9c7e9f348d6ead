"""
Checking every backward pass against finite differences
=======================================================

Each layer's analytic gradients are compared to central differences in
double precision, then the full generator -> discriminator chain is checked.

    python demos/02_gradient_checks.py [--full]

The end-to-end part takes a couple of minutes, so it only runs with --full.
"""
import sys

import numpy as np

from mrigan.gradcheck import finite_diff_check
from mrigan.layers import Conv2D
from mrigan.verify import end_to_end, layer_suite, summarize

# %% one layer by hand: a 4x4 convolution with asymmetric same-padding
rng = np.random.default_rng(0)
conv = Conv2D(2, 3, 4, dtype=np.float64)
conv.params["kernel"][...] = rng.normal(size=conv.params["kernel"].shape)
print(finite_diff_check(conv, rng.normal(size=(1, 6, 6, 2)), name="conv k=4"))

# %% the whole suite, worst case per layer kind over five seeds
for report in summarize(layer_suite(range(5))).values():
    print(report)

# %% full stacks at 32 px; probes that straddle a ReLU kink are redrawn
if "--full" in sys.argv:
    for report in end_to_end(image_size=32, batch=2):
        print(report)
