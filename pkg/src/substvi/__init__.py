"""Variational estimation of local evolutionary parameters under nucleotide
substitution models, with a matching ground-truth sequence simulator."""

__version__ = "0.1.0"

from .seq_io import Alignment, EncodedAlignment, decode, encode, parse_fasta, write_fasta
from .subst_models import (
    GTR,
    JC69,
    K80,
    RateMatrixDecomposition,
    SubstitutionParams,
    TransitionMatrix,
    build_rate_matrix,
    closed_form_transition,
    spectral_decompose,
    transition_matrix,
)
from .distributions import CategoricalSpec, DirichletSpec, GammaSpec
from .encoders import PriorConfig, VariationalParameters, init_variational_parameters
from .elbo import ElboBreakdown, LatentSampleBatch, elbo_estimate, sample_latent_batch
from .trainer import (
    AdamState,
    ParameterEstimates,
    TrainConfig,
    TrainReport,
    TrainingDivergedError,
    adam_step,
    estimate_point_parameters,
    train,
)
from .simulator import SimulatedDataset, SimulationSpec, simulate, true_log_likelihood
from .metrics import RecoveryScore, euclidean, kappa_ratio, pearson

__all__ = [
    "Alignment",
    "AdamState",
    "CategoricalSpec",
    "DirichletSpec",
    "ElboBreakdown",
    "EncodedAlignment",
    "GammaSpec",
    "GTR",
    "JC69",
    "K80",
    "LatentSampleBatch",
    "ParameterEstimates",
    "PriorConfig",
    "RateMatrixDecomposition",
    "RecoveryScore",
    "SimulatedDataset",
    "SimulationSpec",
    "SubstitutionParams",
    "TrainConfig",
    "TrainReport",
    "TrainingDivergedError",
    "TransitionMatrix",
    "VariationalParameters",
    "adam_step",
    "build_rate_matrix",
    "closed_form_transition",
    "decode",
    "elbo_estimate",
    "encode",
    "estimate_point_parameters",
    "euclidean",
    "init_variational_parameters",
    "kappa_ratio",
    "parse_fasta",
    "pearson",
    "sample_latent_batch",
    "simulate",
    "spectral_decompose",
    "train",
    "transition_matrix",
    "true_log_likelihood",
    "write_fasta",
]
