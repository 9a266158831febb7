"""
Gaussian-process package for learning control-affine dynamics.
Kernels, matrix-variate Gaussians and the dynamics posterior live here.
"""

from .kernels import DimensionError, HyperparameterError, KernelKind, KernelOrder, ScalarKernel, gram_matrix, kernel_eval
from .mvg import (
    CovarianceFactorizationError,
    GaussianVec,
    MatrixNormal,
    mvg_linear_transform,
    mvg_logpdf,
    mvg_sample,
    mvg_vectorize,
    psd_factor,
)
from .dyn_gp import (
    Dataset,
    DynamicsPosterior,
    DynamicsPrior,
    GramFactorizationError,
    approx_state_derivatives,
    cross_cov_B,
    drift_moments,
    fit_posterior,
    joint_matrix_normal,
    posterior_mean_batch,
    posterior_moments,
    predict_xdot,
)

__all__ = [
    'DimensionError',
    'HyperparameterError',
    'KernelKind',
    'KernelOrder',
    'ScalarKernel',
    'gram_matrix',
    'kernel_eval',
    'CovarianceFactorizationError',
    'GaussianVec',
    'MatrixNormal',
    'mvg_linear_transform',
    'mvg_logpdf',
    'mvg_sample',
    'mvg_vectorize',
    'psd_factor',
    'Dataset',
    'DynamicsPosterior',
    'DynamicsPrior',
    'GramFactorizationError',
    'approx_state_derivatives',
    'cross_cov_B',
    'drift_moments',
    'fit_posterior',
    'joint_matrix_normal',
    'posterior_mean_batch',
    'posterior_moments',
    'predict_xdot',
]
