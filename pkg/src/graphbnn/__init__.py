"""Particle-based Bayesian inference for small graph neural networks.

Modules:

- ``autodiff``: reverse-mode tape with gradients, Hessian-vector products and
  Gauss-Newton products.
- ``models``: GCN / GRU / hybrid neural-ODE networks on graphs.
- ``posterior``: Gaussian prior and likelihood, MAP training, normalization.
- ``samplers``: HMC, SVGD and projected SVGD.
- ``benchmarks``: analytic 3-D test posteriors.
- ``datagen``: Voronoi grain networks and ground-truth traces.
- ``diagnostics``: KSS, distance correlation, push-forward summaries, embeddings.
- ``cli``: the ``graphbnn`` command.
"""

from .errors import (DegenerateChannel, DegenerateTessellation, DimensionMismatch,
                     DisconnectedGraph, Diverged, EigenFailure, EmptyGraph, GraphBNNError,
                     InvalidConfig, LayoutMismatch, LengthMismatch, NonFiniteValue,
                     NumericalError, SingularAtAxis)
from .models import GraphSample, ModelSpec, ParamVector, forward, init_params
from .posterior import (GaussianPrior, MapConfig, NormalizationRecord, ObservationModel,
                        PosteriorModel, normalize_dataset, train_map)

__version__ = "0.1.0"
