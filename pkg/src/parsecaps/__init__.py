"""ParseCaps: a capsule network engine with sparse axial attention routing.

A from-scratch float64 autodiff core (``tensor``), alpha-entmax sparse
normalization (``entmax``), capsule layers and routing (``layers``,
``routing``), the training objectives (``losses``), the assembled model
(``model``), and a desk-scale experiment harness (``data``, ``metrics``,
``analysis``, ``train``, ``cli``).
"""

from .tensor import Tensor, gradcheck, no_grad
from .entmax import entmax, entmax_forward, entmax_backward, sparsemax_reference

__version__ = "0.1.0"
