"""Space-time Gaussian processes with Kronecker-structured marginals.

Two model variants share one fitting surface: Model I places a separable
product covariance on the mean field and learns time-varying spatial
eigenvalues through it; Model II moves the spatial dependence into the
noise via a Kronecker-sum marginal, which keeps every MCMC step free of
dense space-time matrices.  The package covers dataset I/O, kernel and
basis construction, the structured linear algebra, Metropolis-within-Gibbs
posterior inference, estimation and prediction of the time-varying spatial
covariance, a synthetic-truth simulation harness, and a batch CLI.
"""
from .data import (SpaceGrid, SpatioTemporalDataset, SufficientStats,
                   TimeGrid, load_dataset, save_dataset, sufficient_stats,
                   vec_index, vectorize_trial)
from .errors import CapacityError, NumericalError, ParseError
from .inference import (HyperState, PosteriorSamples, PriorConfig,
                        TesdEstimate, estimate_tesd, fit, gibbs_step,
                        load_samples, logpost_m1, logpost_m2, save_samples)
from .kernels import (DynamicEigenvalues, GraphLaplacian, MercerBasis,
                      StationaryKernelParams, assemble_Cxt,
                      dynamic_eigenvalues, graph_laplacian_precision,
                      graph_scaling, grid_graph_laplacian, mercer_basis,
                      stationary_cross, stationary_kernel)
from .kronalg import (Model1Marginal, Model2Marginal, m1_assemble,
                      m1_solve_logdet, m2_inverse_apply, m2_logdet,
                      m2_posterior_mean_cov_apply)
from .predict import (MeanPrediction, TesdPrediction, predict_mean,
                      predict_tesd_future, predict_tesd_neighbor,
                      save_prediction_csv)
from .samplers import (RngState, SliceConfig, ess_update,
                       inverse_gamma_draw, slice_sample_1d)
from .simulate import (SimParams, TruthOracle, generate,
                       image_demo_dataset, tesd_error, true_mean,
                       true_tesd)
from .cli import ConnectionGraph, connection_graph

__version__ = "0.1.0"

__all__ = [
    "SpaceGrid", "TimeGrid", "SpatioTemporalDataset", "SufficientStats",
    "load_dataset", "save_dataset", "sufficient_stats", "vec_index",
    "vectorize_trial",
    "ParseError", "CapacityError", "NumericalError",
    "StationaryKernelParams", "MercerBasis", "DynamicEigenvalues",
    "GraphLaplacian", "stationary_kernel", "stationary_cross",
    "mercer_basis", "dynamic_eigenvalues", "assemble_Cxt",
    "grid_graph_laplacian", "graph_laplacian_precision", "graph_scaling",
    "Model1Marginal", "Model2Marginal", "m1_assemble", "m1_solve_logdet",
    "m2_inverse_apply", "m2_logdet", "m2_posterior_mean_cov_apply",
    "RngState", "SliceConfig", "slice_sample_1d", "ess_update",
    "inverse_gamma_draw",
    "PriorConfig", "HyperState", "PosteriorSamples", "TesdEstimate",
    "logpost_m1", "logpost_m2", "gibbs_step", "fit", "estimate_tesd",
    "save_samples", "load_samples",
    "MeanPrediction", "TesdPrediction", "predict_mean",
    "predict_tesd_future", "predict_tesd_neighbor", "save_prediction_csv",
    "SimParams", "TruthOracle", "true_mean", "true_tesd", "generate",
    "image_demo_dataset", "tesd_error",
    "ConnectionGraph", "connection_graph",
    "__version__",
]
