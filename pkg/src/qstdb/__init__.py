"""Quantized spiking networks for hyperspectral patch classification.

Pipeline: ANN training -> ANN-to-SNN conversion with percentile threshold
calibration -> quantization-aware BPTT (Q-STDB) -> OA/AA/Kappa evaluation and
MAC/AC compute-energy estimation.
"""

from qstdb.errors import ConfigurationError, InputError, InternalError, RunError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "InputError", "InternalError", "RunError", "__version__"]
