"""Posterior samplers: HMC, SVGD and projected SVGD."""

from .hmc import HmcConfig, HmcResult, hmc_chains, hmc_sample, kinetic, leapfrog
from .subspace import (ActiveSubspace, build_active_subspace, lanczos, lhs_normal,
                       psvgd_sample)
from .svgd import (ParticleEnsemble, SvgdConfig, init_particles, kernel_metric,
                   median_bandwidth, pairwise_sq_dist, rbf_kernel, run_svgd,
                   svgd_direction, svgd_sample, svgd_step)

__all__ = [
    "HmcConfig", "HmcResult", "hmc_chains", "hmc_sample", "kinetic", "leapfrog",
    "ActiveSubspace", "build_active_subspace", "lanczos", "lhs_normal", "psvgd_sample",
    "ParticleEnsemble", "SvgdConfig", "init_particles", "kernel_metric",
    "median_bandwidth", "pairwise_sq_dist", "rbf_kernel", "run_svgd",
    "svgd_direction", "svgd_sample", "svgd_step",
]
