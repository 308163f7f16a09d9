"""Zero-shot quantization toolkit for toy CNNs.

ZSQ_THREADS, when set before the first import, caps the BLAS thread pool
(intra-op parallelism); results are bit-identical at any thread count.
"""

import os as _os

_threads = _os.environ.get("ZSQ_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

__version__ = "0.1.0"
