"""Soft-routed mixture-of-experts feature-learning simulator.

Student and teacher are sums of sigmoid-gated cubic Hermite experts on
Gaussian inputs. The package provides exact (series-truncated) population
losses and gradients, Monte-Carlo estimators, an SGD loop that tracks
alignments, greedy pruning and fine-tuning, and CLI orchestration.
"""

from softmoe.hermite import (
    IDENTITY,
    SIGMOID,
    Activation,
    ActivationProfile,
    corr_series,
    enumerate_degree_matrices,
    gaussian_hermite_moment,
    he_eval,
    hermite_coeffs,
    sigmoid_profile,
)
from softmoe.model import (
    GaussianBatch,
    ModelParams,
    TeacherSpec,
    forward,
    init_student,
    make_teacher,
    renormalize,
)

__all__ = [
    "IDENTITY",
    "SIGMOID",
    "Activation",
    "ActivationProfile",
    "GaussianBatch",
    "ModelParams",
    "TeacherSpec",
    "corr_series",
    "enumerate_degree_matrices",
    "forward",
    "gaussian_hermite_moment",
    "he_eval",
    "hermite_coeffs",
    "init_student",
    "make_teacher",
    "renormalize",
    "sigmoid_profile",
]
