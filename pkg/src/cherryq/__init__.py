"""Cherry-parameter analysis and mixed-precision quantization-aware training
for a byte-level toy language model, on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .errors import (CherryQError, ConfigError, ConfigMismatchError, CorruptCheckpointError, DataError,
                     NumericError, UsageError)
from .quant import QuantConfig, avg_bits
from .model import ModelConfig, ToyLM, perplexity

__all__ = ["CherryQError", "ConfigError", "ConfigMismatchError", "CorruptCheckpointError", "DataError",
           "NumericError", "UsageError", "QuantConfig", "avg_bits", "ModelConfig", "ToyLM", "perplexity",
           "__version__"]
