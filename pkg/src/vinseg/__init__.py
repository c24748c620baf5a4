"""Boundary-aware residual FCNs for vehicle instance segmentation, from scratch in numpy."""
import os as _os
import sys as _sys

__version__ = "0.1.0"

# VINSEG_THREADS caps BLAS worker threads; it only takes effect if set before numpy loads
if _os.environ.get("VINSEG_THREADS") and "numpy" not in _sys.modules:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["VINSEG_THREADS"])
