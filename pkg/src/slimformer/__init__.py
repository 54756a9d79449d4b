"""slimformer: a small transformer-encoder inference and compression engine."""
from slimformer._backend import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
