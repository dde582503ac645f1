"""Encrypted 1:m representation search over Fan-Vercauteren ciphertexts."""

from .ring import ParameterError, RingParams, production_params, testing_params
from .codec import PRECISION, quantize

__version__ = "0.1.0"
