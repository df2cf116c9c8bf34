"""One-shot tract segmentation from registration-synthesised pseudo subjects
and uncertainty-weighted pseudo labels, on synthetic peak volumes."""

__version__ = "0.1.0"

from ._accel import HAS_NUMBA, USE_NUMBA, backend_name  # noqa: F401
