"""Fast oracle-equivalence checks used by ``softmoe verify``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from softmoe.hermite import assumption_sigmoid_check, cs_ratio_check, gaussian_hermite_moment
from softmoe.mc import mc_loss, per_sample_grad
from softmoe.model import ModelParams, draw_batch, make_teacher
from softmoe.oracle import population_grad, population_loss
from softmoe.rng import generator


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def random_params(m: int, d: int, seed: int, index: int = 0, scale_range=(0.5, 2.0)) -> ModelParams:
    """Gaussian rows with random norms, for checks that must see norm dependence."""
    rng = generator(seed, "aux", index)
    V = rng.standard_normal((m, d)) * rng.uniform(*scale_range, (m, 1))
    W = rng.standard_normal((m, d)) * rng.uniform(*scale_range, (m, 1))
    return ModelParams.from_rows(V, W)


def fd_gradient(params: ModelParams, teacher, h: float = 1e-5, profile=None):
    """Central differences of the population loss in every coordinate."""
    V, W = params.V, params.W
    out = []
    for which in (0, 1):
        base = (V, W)[which]
        G = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            args_p = (plus, W) if which == 0 else (V, plus)
            args_m = (minus, W) if which == 0 else (V, minus)
            lp = population_loss(ModelParams.from_rows(*args_p), teacher, profile)
            lm = population_loss(ModelParams.from_rows(*args_m), teacher, profile)
            G[idx] = (lp - lm) / (2 * h)
        out.append(G)
    return out[0], out[1]


def check_pairwise_identity() -> CheckResult:
    worst = 0.0
    for k in range(7):
        for l in range(7):
            for rho in np.linspace(-1, 1, 21):
                cov = np.array([[1.0, rho], [rho, 1.0]])
                want = math.factorial(k) * rho**k if k == l else 0.0
                worst = max(worst, abs(gaussian_hermite_moment((k, l), cov) - want))
    return CheckResult("pairwise Hermite identity", worst <= 1e-12, f"max error {worst:.2e}")


def check_gradient_fd(n_configs: int = 3, seed: int = 0) -> CheckResult:
    teacher = make_teacher(1, 8)
    worst = 0.0
    for c in range(n_configs):
        p = random_params(2, 8, seed, c)
        gv, gw = population_grad(p, teacher)
        fv, fw = fd_gradient(p, teacher)
        scale = max(np.abs(fv).max(), np.abs(fw).max())
        worst = max(worst, np.abs(gv - fv).max() / scale, np.abs(gw - fw).max() / scale)
    return CheckResult("analytic gradient vs finite differences", worst <= 1e-5, f"max relative error {worst:.2e}")


def check_mc_loss(seed: int = 0) -> CheckResult:
    teacher = make_teacher(1, 8)
    p = random_params(2, 8, seed, 99)
    exact = population_loss(p, teacher)
    est = mc_loss(p, teacher, draw_batch(seed, 2**18, 8, "aux", 1))
    z = abs(est.value - exact) / est.std_error
    return CheckResult("Monte-Carlo loss vs analytic loss", z <= 3.0, f"|z| = {z:.2f}")


def check_tangency(seed: int = 0) -> CheckResult:
    teacher = make_teacher(2, 10)
    p = random_params(3, 10, seed, 7)
    X = draw_batch(seed, 20, 10, "aux", 2).samples
    worst = 0.0
    for x in X:
        gv, gw = per_sample_grad(p, teacher, x)
        worst = max(worst, np.abs(np.sum(gv * p.V, axis=1)).max(), np.abs(np.sum(gw * p.W, axis=1)).max())
    gv, gw = population_grad(p, teacher)
    worst = max(worst, np.abs(np.sum(gv * p.V, axis=1)).max(), np.abs(np.sum(gw * p.W, axis=1)).max())
    return CheckResult("gradient tangency", worst <= 1e-12, f"max |g_i . row_i| {worst:.2e}")


def check_sigmoid() -> CheckResult:
    a = assumption_sigmoid_check()
    r = cs_ratio_check()
    ok = a.passed and r.passed
    return CheckResult("sigmoid properties", ok, f"max cross moment {a.max_value:.4g}, cs0/cs1 = {r.ratio:.4g}")


def run_all() -> list[CheckResult]:
    return [
        check_pairwise_identity(),
        check_gradient_fd(),
        check_mc_loss(),
        check_tangency(),
        check_sigmoid(),
    ]
