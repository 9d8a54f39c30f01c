"""Infinite-width kernels of ReLU hypernetworks and finite-width checks."""

__version__ = "0.1.0"

from .duals import CovPair, dual_relu, dual_relu_dot, mc_dual
from .kernels import (HyperKernelConfig, fourier_features, fourier_limit_kernel, hyper_gram, hyper_nngp, hyper_ntk,
                      mlp_nngp, mlp_ntk)
from .hypernet import (HypernetWeights, MlpWeights, empirical_kernels, forward_hypernet, forward_mlp, init_hypernet,
                       init_mlp, jacobian_mlp, sgd_train)
from .regression import GramSystem, HyperKernel, ensemble_predict, fit_predict

__all__ = [
    "CovPair", "dual_relu", "dual_relu_dot", "mc_dual",
    "HyperKernelConfig", "fourier_features", "fourier_limit_kernel", "hyper_gram", "hyper_nngp", "hyper_ntk",
    "mlp_nngp", "mlp_ntk",
    "HypernetWeights", "MlpWeights", "empirical_kernels", "forward_hypernet", "forward_mlp", "init_hypernet",
    "init_mlp", "jacobian_mlp", "sgd_train",
    "GramSystem", "HyperKernel", "ensemble_predict", "fit_predict",
]
