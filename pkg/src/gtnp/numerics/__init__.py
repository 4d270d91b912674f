from .tensor import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    log_softmax,
    max_pool2d,
    no_grad,
    parameter,
    softmax,
    stack,
    where,
)
from .gaussian import DiagGaussian, InvalidDistributionError, kl_diag_gaussians, reparam_sample
from .optim import NonFiniteGradientError, OptimizerState, optimizer_step
from .gradcheck import gradient_check
from .kde import kde_estimate, silverman_bandwidth

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "conv2d",
    "log_softmax",
    "max_pool2d",
    "no_grad",
    "parameter",
    "softmax",
    "stack",
    "where",
    "DiagGaussian",
    "InvalidDistributionError",
    "kl_diag_gaussians",
    "reparam_sample",
    "NonFiniteGradientError",
    "OptimizerState",
    "optimizer_step",
    "gradient_check",
    "kde_estimate",
    "silverman_bandwidth",
]
