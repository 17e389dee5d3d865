"""Structure-guided EEG-to-image generation at desk scale."""

from sgdm.errors import IntegrityError, InvalidInput, InvalidState, SgdmError

__version__ = "0.1.0"

__all__ = ["IntegrityError", "InvalidInput", "InvalidState", "SgdmError", "__version__"]
