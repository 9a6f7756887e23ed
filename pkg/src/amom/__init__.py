"""Adaptive masking over masking (AMOM) for non-autoregressive seq2seq.

CMLM training, the two-pass adaptive masking strategy, mask-predict
inference, knowledge distillation and metrics, all on a small numpy
autodiff core.  Importing this package before numpy honors AMOM_THREADS.
"""

import os

# Must run before numpy is first imported anywhere in the process.
_threads = os.environ.get("AMOM_THREADS")
if _threads and _threads.isdigit():
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"
