"""Mask-ensemble Bayesian IVIM fitting with a fixed-point accelerator model.

The heavy lifting lives in the compiled ``_uivim`` extension; this package
re-exports its public surface.
"""

from ._uivim import *  # noqa: F401,F403
from ._uivim import __doc__ as _core_doc

__doc__ = _core_doc
__version__ = "0.1.0"
