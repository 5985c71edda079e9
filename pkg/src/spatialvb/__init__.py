"""Variational Bayes and MCMC for spatial generalized linear mixed models."""

from .approx import jj_bound, jj_lambda, laplace_fit
from .config import ConfigError, ExperimentConfig
from .fit_basis import BasisModelState, fit_hybrid_mfvb, fit_infvb_sigma
from .fit_full import FitConfig, FullFitResult, fit_infvb_phi, fit_infvb_phi_sigma, phi_grid, sigma2_grid
from .mcmc import McmcResult, batch_means_se, mh_sample
from .metrics import ScoreReport, auc, coverage95, crps_samples, rmspe, score_predictions
from .model import Dataset, Kind, PriorSpec, SimulatedData, SyntheticSpec, load_csv, save_csv, simulate_dataset
from .pipeline import compare, run_experiment, run_table_reproduction
from .predict import LinearPredictorSummary, predict_response, sample_linear_predictor
from .spatial import BasisMatrix, MaternParams, matern, matern_correlation, matern_eigenbasis
from .variational import GaussianVariational, InverseGammaVariational, WeightedMixture, normalize_weights

__version__ = "0.1.0"
