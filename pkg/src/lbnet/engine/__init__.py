"""Minimal NCHW tensor library with tape-based reverse-mode autodiff."""
from lbnet.engine.tensor import Tape, Tensor, backward, current_tape, grad_enabled, no_grad
from lbnet.engine.gradcheck import check_gradients
from lbnet.engine import functional

__all__ = ["Tape", "Tensor", "backward", "current_tape", "grad_enabled", "no_grad",
           "check_gradients", "functional"]
