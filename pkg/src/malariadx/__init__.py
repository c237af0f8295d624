"""Malaria cell classification on a small from-scratch autodiff stack.

Submodules: ``tensor``/``ops`` (reverse-mode autodiff), ``model`` (residual
and plain conv nets), ``augment`` (MixUp/CutMix), ``training``, ``metrics``,
``baselines``, ``data`` and ``cli``.
"""

from .errors import MalariaDxError

__version__ = "0.1.0"

__all__ = ["MalariaDxError", "__version__"]
