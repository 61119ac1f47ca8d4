"""Greedy expert pruning, post-prune fine-tuning and a Hessian spot check."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from softmoe.dynamics import PairingMap, alignment_snapshot, greedy_select
from softmoe.errors import NumericalFailure
from softmoe.hermite import ActivationProfile, sigmoid_profile
from softmoe.mc import mc_grad
from softmoe.model import ModelParams, TeacherSpec, draw_batch, expert_terms, renormalize
from softmoe.oracle import build_lambda_tables, grad_from_tables, population_grad

# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class LossEstimate:
    value: float
    std_error: float


class AnalyticEstimator:
    """Exact sub-model losses from the pairwise Gram series.

    With ``q_i = g(vbar_i.x) He_3(wbar_i.x)``, ``G_ij = E[q_i q_j]`` and
    ``h_i = sum_j E[q_i q*_j]`` the loss of the kept set ``K`` is
    ``1^T G_KK 1 / 2 - sum_K h + E[f*^2] / 2``.
    """

    default_margin = 1e-9

    def __init__(self, profile: ActivationProfile | None = None):
        self.profile = sigmoid_profile() if profile is None else profile

    def prepare(self, params: ModelParams, teacher: TeacherSpec) -> "_AnalyticContext":
        t = build_lambda_tables(params, teacher, self.profile, with_gradient=False)
        return _AnalyticContext(t.gram, t.cross.sum(axis=1), float(t.teacher_gram.sum()))


@dataclass
class _AnalyticContext:
    gram: np.ndarray
    h: np.ndarray
    c: float

    def loss(self, keep: np.ndarray) -> LossEstimate:
        k = keep.astype(float)
        return LossEstimate(float(0.5 * k @ self.gram @ k - k @ self.h + 0.5 * self.c), 0.0)

    def diff_se(self, keep_a: np.ndarray, keep_b: np.ndarray) -> float:
        return 0.0


class McEstimator:
    """Sample losses on one fixed evaluation batch (common random numbers)."""

    def __init__(self, batch: int = 2**16, seed: int = 0, index: int = 0):
        self.batch = batch
        self.seed = seed
        self.index = index

    def prepare(self, params: ModelParams, teacher: TeacherSpec) -> "_McContext":
        X = draw_batch(self.seed, self.batch, params.d, "prune", self.index).samples
        return _McContext(expert_terms(params, X)[3], expert_terms(teacher, X)[3].sum(axis=1))


@dataclass
class _McContext:
    q: np.ndarray
    y: np.ndarray

    def _half_sq(self, keep):
        return 0.5 * (self.q @ keep.astype(float) - self.y) ** 2

    def loss(self, keep: np.ndarray) -> LossEstimate:
        h = self._half_sq(keep)
        return LossEstimate(float(h.mean()), float(h.std(ddof=1) / math.sqrt(h.size)))

    def diff_se(self, keep_a: np.ndarray, keep_b: np.ndarray) -> float:
        diff = self._half_sq(keep_a) - self._half_sq(keep_b)
        return float(diff.std(ddof=1) / math.sqrt(diff.size))


def submodel_loss(params: ModelParams, teacher: TeacherSpec, S, estimator=None) -> LossEstimate:
    """Loss of the model with the experts in ``S`` removed."""
    estimator = AnalyticEstimator() if estimator is None else estimator
    S = set(int(i) for i in S)
    if not S <= set(range(params.m)):
        raise ValueError("removed set must be a subset of the expert indices")
    keep = np.ones(params.m, dtype=bool)
    keep[list(S)] = False
    return estimator.prepare(params, teacher).loss(keep)


# ---------------------------------------------------------------- pruning


@dataclass
class PruneResult:
    """Accepted removals in order, with the loss after each one."""

    removal_order: list[int]
    losses: list[LossEstimate]
    initial_loss: LossEstimate
    tau_star: int
    kept: list[int]
    pruned_params: ModelParams | None
    margins: list[float] = field(default_factory=list)


def greedy_prune(
    params: ModelParams,
    teacher: TeacherSpec,
    estimator=None,
    margin: float | None = None,
) -> PruneResult:
    """Remove experts one at a time while the best removal lowers the loss.

    At each step every remaining expert is tried; the one whose removal
    gives the smallest loss (smallest index on ties) is removed unless that
    loss is not below ``current - margin``. Without an explicit ``margin``
    the analytic estimator uses ``1e-9`` and the Monte-Carlo one twice the
    standard error of the paired loss difference.
    """
    estimator = AnalyticEstimator() if estimator is None else estimator
    ctx = estimator.prepare(params, teacher)
    keep = np.ones(params.m, dtype=bool)
    current = ctx.loss(keep)
    initial = current
    order: list[int] = []
    losses: list[LossEstimate] = []
    margins: list[float] = []
    while keep.any():
        best_r, best = -1, None
        for r in np.nonzero(keep)[0]:
            trial = keep.copy()
            trial[r] = False
            est = ctx.loss(trial)
            if best is None or est.value < best.value:
                best_r, best = int(r), est
        trial = keep.copy()
        trial[best_r] = False
        if margin is not None:
            tol = margin
        elif isinstance(estimator, AnalyticEstimator):
            tol = AnalyticEstimator.default_margin
        else:
            tol = 2.0 * ctx.diff_se(trial, keep)
        margins.append(tol)
        if best.value >= current.value - tol:
            break
        keep = trial
        order.append(best_r)
        losses.append(best)
        current = best
    kept = [int(i) for i in np.nonzero(keep)[0]]
    pruned = params.subset(kept) if kept else None
    return PruneResult(order, losses, initial, len(order), kept, pruned, margins)


# ---------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    eta: float = 0.05
    steps: int = 2000
    gradient: str = "analytic"
    batch: int = 4096
    record_every: int = 1
    max_row_distance: float = 0.5
    noise_floor: float | None = None
    divergence_factor: float = 1.5

    def __post_init__(self):
        if not self.eta > 0 or self.steps < 0 or self.record_every < 1:
            raise ValueError("invalid fine-tuning schedule")
        if self.gradient not in ("mc", "analytic"):
            raise ValueError(f"gradient must be 'mc' or 'analytic', got {self.gradient!r}")


@dataclass
class FinetuneReport:
    """Distance to the teacher over time and the fitted exponential rate.

    ``dist_sq`` sums ``|vbar_i - vbar*_j|^2 + |wbar_i - wbar*_j|^2`` over the
    pairing; ``kappa_hat = -2 * slope`` of ``log dist_sq`` against ``t``
    over ``fit_window`` (record indices, end exclusive).
    """

    times: np.ndarray
    dist_sq: np.ndarray
    kappa_hat: float
    fit_r2: float
    fit_window: tuple[int, int]
    noise_floor: float
    at_optimum: bool
    diverged: bool
    pairing: PairingMap
    fallback_pairing: PairingMap
    final_params: ModelParams | None = None

    @property
    def pairings_agree(self) -> bool:
        return sorted(self.pairing.pairs) == sorted(self.fallback_pairing.pairs)


def distance_sq(params: ModelParams, teacher: TeacherSpec, pairing: PairingMap) -> float:
    V, W = params.Vbar, params.Wbar
    tp = teacher.as_params()
    total = 0.0
    for i, j in pairing.pairs:
        total += float(np.sum((V[i] - tp.Vbar[j]) ** 2) + np.sum((W[i] - tp.Wbar[j]) ** 2))
    return total


def row_distances(params: ModelParams, teacher: TeacherSpec, pairing: PairingMap) -> np.ndarray:
    V, W = params.Vbar, params.Wbar
    tp = teacher.as_params()
    return np.array(
        [max(np.linalg.norm(V[i] - tp.Vbar[j]), np.linalg.norm(W[i] - tp.Wbar[j])) for i, j in pairing.pairs]
    )


def log_linear_fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``log y = intercept + slope * t``; returns ``(slope, intercept, r2)``."""
    ly = np.log(y)
    A = np.vstack([t, np.ones_like(t)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * t + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else float("nan")
    return float(slope), float(intercept), r2


def finetune(
    pruned_params: ModelParams,
    teacher: TeacherSpec,
    pairing: PairingMap | None = None,
    config: FinetuneConfig = FinetuneConfig(),
    seed: int = 0,
    profile: ActivationProfile | None = None,
) -> FinetuneReport:
    """Continue training the pruned model and measure its convergence rate.

    ``pairing`` maps pruned-row index to teacher index; the greedy match on
    the current expert alignments is always computed as a fallback and used
    when no pairing is given. The run aborts with :class:`NumericalFailure`
    (report attached) if ``dist_sq`` exceeds ``divergence_factor`` times its
    starting value.
    """
    if pruned_params.m != teacher.m_star:
        raise ValueError(f"pruned model has {pruned_params.m} experts, teacher has {teacher.m_star}")
    profile = sigmoid_profile() if profile is None else profile
    fallback = greedy_select(alignment_snapshot(pruned_params, teacher).gamma2)
    pairing = fallback if pairing is None else pairing
    dist0 = row_distances(pruned_params, teacher, pairing)
    if np.any(dist0 > config.max_row_distance):
        raise ValueError(
            f"row distance {dist0.max():.3g} exceeds the fine-tuning radius {config.max_row_distance}"
        )
    a0, b0 = pruned_params.norms_v.copy(), pruned_params.norms_w.copy()
    params = pruned_params
    times = [0.0]
    dists = [distance_sq(params, teacher, pairing)]
    start = dists[0]
    diverged = False
    for step in range(config.steps):
        if config.gradient == "analytic":
            gv, gw = grad_from_tables(params, teacher, build_lambda_tables(params, teacher, profile))
        else:
            g = mc_grad(params, teacher, draw_batch(seed, config.batch, params.d, "finetune", step), with_se=False)
            gv, gw = g.grad_v, g.grad_w
        V = params.V - config.eta * gv
        W = params.W - config.eta * gw
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(W))):
            diverged = True
            break
        params = renormalize(ModelParams(V, W, np.linalg.norm(V, axis=1), np.linalg.norm(W, axis=1)), a0, b0)
        if (step + 1) % config.record_every == 0 or step + 1 == config.steps:
            times.append((step + 1) * config.eta)
            dists.append(distance_sq(params, teacher, pairing))
            if dists[-1] > config.divergence_factor * start and start > 0:
                diverged = True
                break
    times_a = np.array(times)
    dists_a = np.array(dists)
    floor = _noise_floor(dists_a, config)
    at_opt = bool(start <= floor)
    kappa, r2, window = float("nan"), float("nan"), (0, 0)
    if not at_opt and not diverged:
        below = np.nonzero(dists_a < floor)[0]
        end = int(below[0]) if below.size else len(dists_a)
        if end >= 3:
            slope, _, r2 = log_linear_fit(times_a[:end], dists_a[:end])
            kappa = -2.0 * slope
            window = (0, end)
    report = FinetuneReport(
        times_a, dists_a, kappa, r2, window, floor, at_opt, diverged, pairing, fallback, params
    )
    if diverged:
        raise NumericalFailure("fine-tuning diverged", state=report)
    return report


def _noise_floor(dists: np.ndarray, config: FinetuneConfig) -> float:
    if config.noise_floor is not None:
        return config.noise_floor
    if config.gradient == "analytic":
        return 1e-12
    # SGD settles at a stationary spread; use twice its late-time average
    tail = dists[-max(1, len(dists) // 4) :]
    return 2.0 * float(np.mean(tail))


def perturb_teacher(teacher: TeacherSpec, distance: float, seed: int, stream_index: int = 0) -> ModelParams:
    """Unit-norm student rows at exactly ``distance`` from their teacher rows."""
    from softmoe.rng import generator

    if not 0 <= distance < 2:
        raise ValueError("distance must lie in [0, 2)")
    rng = generator(seed, "aux", stream_index)
    out = []
    for R in (teacher.Vstar, teacher.Wstar):
        R = R / np.linalg.norm(R, axis=1, keepdims=True)
        D = rng.standard_normal(R.shape)
        D -= np.sum(D * R, axis=1, keepdims=True) * R
        D /= np.linalg.norm(D, axis=1, keepdims=True)
        # |cos(a) r + sin(a) e - r| = 2 sin(a / 2)
        ang = 2.0 * math.asin(distance / 2.0)
        out.append(math.cos(ang) * R + math.sin(ang) * D)
    return ModelParams.from_rows(*out)


# ---------------------------------------------------------------- hessian


def random_tangent_direction(params: ModelParams, seed: int, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian direction with each row projected orthogonal to its own parameter row."""
    from softmoe.rng import generator

    rng = generator(seed, "aux", index)
    U = rng.standard_normal(params.V.shape)
    Q = rng.standard_normal(params.W.shape)
    U -= np.sum(U * params.Vbar, axis=1, keepdims=True) * params.Vbar
    Q -= np.sum(Q * params.Wbar, axis=1, keepdims=True) * params.Wbar
    return U, Q


def hessian_quadratic_form(
    params: ModelParams,
    teacher: TeacherSpec,
    direction: tuple[np.ndarray, np.ndarray],
    fd_step: float = 1e-4,
    profile: ActivationProfile | None = None,
    tangent_tol: float = 1e-10,
) -> float:
    """Rayleigh quotient ``u^T H u / |u|^2`` by central differences of the exact gradient.

    Warns when repeating the difference at twice the step changes the value
    by more than ``1e-3`` relative, a sign that the step is either too
    small (series noise) or too large (curvature).
    """
    U, Q = (np.asarray(x, dtype=float) for x in direction)
    if U.shape != params.V.shape or Q.shape != params.W.shape:
        raise ValueError("direction shape does not match parameters")
    norm2 = float(np.sum(U * U) + np.sum(Q * Q))
    if norm2 == 0.0:
        raise ValueError("direction must be nonzero")
    tv = np.abs(np.sum(U * params.V, axis=1)) / (np.linalg.norm(U, axis=1) * params.norms_v + 1e-300)
    tw = np.abs(np.sum(Q * params.W, axis=1)) / (np.linalg.norm(Q, axis=1) * params.norms_w + 1e-300)
    if max(tv.max(), tw.max()) > tangent_tol:
        raise ValueError("direction rows must be orthogonal to their parameter rows")

    def quotient(eps):
        gp = population_grad(ModelParams.from_rows(params.V + eps * U, params.W + eps * Q), teacher, profile)
        gm = population_grad(ModelParams.from_rows(params.V - eps * U, params.W - eps * Q), teacher, profile)
        return float(np.sum((gp[0] - gm[0]) * U) + np.sum((gp[1] - gm[1]) * Q)) / (2.0 * eps * norm2)

    value = quotient(fd_step)
    check = quotient(2.0 * fd_step)
    if abs(value - check) > 1e-3 * abs(value) + 1e-10:
        warnings.warn(
            f"finite-difference curvature unstable: {value:.6g} at step {fd_step} vs {check:.6g} at {2 * fd_step}",
            RuntimeWarning,
            stacklevel=2,
        )
    return value
