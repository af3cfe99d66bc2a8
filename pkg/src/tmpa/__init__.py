"""Desk-scale visible-infrared person re-identification with region-based
cross-modality mixing and attention/convolution feature transfer, on a
self-contained numpy autodiff core."""

from .errors import ContractViolation

__version__ = "0.1.0"
__all__ = ["ContractViolation", "__version__"]
