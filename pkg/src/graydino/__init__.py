"""Self-distillation pretraining for single-channel images, desk scale.

Content-guided multi-crop augmentation feeds a student/teacher ViT pair
trained with an image-level distillation loss, a masked patch loss, and a
uniformity regularizer; a frozen-backbone linear probe evaluates the result.
"""

import os

# Bitwise-deterministic runs need a fixed BLAS reduction order.  These only
# take effect if numpy has not been imported yet, which holds whenever this
# package is imported first (the CLI guarantees it).
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del os, _var

__version__ = "0.1.0"
