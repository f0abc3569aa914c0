"""Find, measure and cancel an activation-independent calling offset in tool-use gating.

The pipeline runs on cached residual-stream vectors: train a TopK sparse
autoencoder, rank features that separate CALL from NO_CALL decisions, fit a
one-dimensional logistic model of decisions on the signed feature margin, and
steer with a vector that shifts the margin by the diagnosed offset.
"""

from .errors import ConfigError, DataError, FormatError, GateBiasError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "FormatError", "GateBiasError", "NumericError", "__version__"]
