"""Offline-to-online reinforcement learning with balanced replay and pessimistic Q-ensembles."""
import os as _os

# OFF2ON_THREADS caps the BLAS worker pool; it only takes effect when set
# before numpy is first imported.
if "OFF2ON_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["OFF2ON_THREADS"])

__version__ = "0.1.0"
