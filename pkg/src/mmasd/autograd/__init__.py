from mmasd.autograd.tensor import Parameter, Tensor, backward, no_grad
from mmasd.autograd import functional
from mmasd.autograd.gradcheck import grad_check

__all__ = ["Tensor", "Parameter", "backward", "no_grad", "functional", "grad_check"]
