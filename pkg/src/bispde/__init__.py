"""Bivariate SPDE random-field models for co-observed temperature and humidity."""

__version__ = "0.1.0"

from .mesh import Mesh, assemble_fem, build_mesh, projector
from .model import ModelKind, ModelSpec, Observation, ObservationTable, Problem
from .spde import BiParams, UniParams, bi_precision, uni_precision
from .inference import FitResult, log_posterior, optimize, predict, sample_latent

__all__ = [
    "BiParams", "FitResult", "Mesh", "ModelKind", "ModelSpec", "Observation",
    "ObservationTable", "Problem", "UniParams", "assemble_fem", "bi_precision",
    "build_mesh", "log_posterior", "optimize", "predict", "projector",
    "sample_latent", "uni_precision",
]
