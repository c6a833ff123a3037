"""Few-shot object detection with a sparse context transformer, at desk scale."""
from .numkit import NonFiniteError
from .sct import PriorScores, SctParams, build_contextual_fields, sct_backward, sct_forward

__version__ = "0.1.0"

__all__ = ["NonFiniteError", "PriorScores", "SctParams", "build_contextual_fields",
           "sct_backward", "sct_forward", "__version__"]
