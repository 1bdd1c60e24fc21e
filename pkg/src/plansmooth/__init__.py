"""Marginal-preserving Gaussian smoothing of multi-marginal transport plans."""
from .grids import (AtomicPlan, AxisGrid, DensityField, MarginalSet, ProductGrid, gaussian,
                    gaussian_plan, marginal, marginal_atoms, mass, mixture_plan, product_plan,
                    quantile_coupling)
from .kernel import KernelConstants, KernelSpec, convolve, convolve_atoms, eta, grad_eta, kernel_constants, tail_mass
from .smoothing import (BoundCertificate, SmoothedPlan, SmoothingConfig, lambda_eps, theta_eps,
                        theta_gradient, verify_marginals)
from .sobolev import GradientField, SobolevConfig, d1p_distance, energy, finite_integral_check, gradient

__version__ = "0.1.0"

__all__ = [
    "AtomicPlan", "AxisGrid", "BoundCertificate", "DensityField", "GradientField", "KernelConstants",
    "KernelSpec", "MarginalSet", "ProductGrid", "SmoothedPlan", "SmoothingConfig", "SobolevConfig",
    "convolve", "convolve_atoms", "d1p_distance", "energy", "eta", "finite_integral_check",
    "gaussian", "gaussian_plan", "grad_eta", "gradient", "kernel_constants", "lambda_eps",
    "marginal", "marginal_atoms", "mass", "mixture_plan", "product_plan", "quantile_coupling",
    "tail_mass", "theta_eps", "theta_gradient", "verify_marginals",
]
