"""Exact population loss and gradient through Hermite series.

For a pair of experts ``(i, j)`` the four Gaussian projections
``vbar_i.x, vbar_j.x, wbar_i.x, wbar_j.x`` have a unit-diagonal covariance
with six free entries. Every quantity needed here has the form

    S = sum_{k,l<=K} wt(k,l) / (k! l!) * E[He_k He_l He_a He_b]

with ``(a, b)`` in ``{2, 3}``. Substituting the multigraph moment formula
turns ``S`` into a fixed polynomial in the six covariance entries; the
polynomial is compiled once per (coefficients, series kind) and evaluated
for all pairs at once.

Series kinds (``c`` are gate coefficients, ``(a, b)`` the expert degrees):

======  ====================  ======
kind    wt(k, l)              (a, b)
======  ====================  ======
loss    c_k c_l               (3, 3)
1       c_{k+1} c_{l+1}       (3, 3)
2       c_{k+1} c_l           (2, 3)
3       c_k c_{l+1}           (2, 3)
4       c_{k+1} c_l           (3, 2)
5       c_k c_l               (2, 2)
======  ====================  ======

so ``lam1[i, j] = E[g'(z_i) g'(z_j) He3(u_i) He3(u_j)]`` and so on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from softmoe.hermite import ActivationProfile, _enumerate_upper, gaussian_hermite_moment, sigmoid_profile
from softmoe.model import ModelParams, TeacherSpec

SERIES = {
    "loss": (0, 0, 3, 3),
    1: (1, 1, 3, 3),
    2: (1, 0, 2, 3),
    3: (0, 1, 2, 3),
    4: (1, 0, 3, 2),
    5: (0, 0, 2, 2),
}
"""kind -> (shift_k, shift_l, a, b)."""

W_SCALES = ("w", "v")


@dataclass(frozen=True)
class CompiledSeries:
    coef: np.ndarray  # (T,)
    exps: np.ndarray  # (T, 6) exponents of s01, s02, s03, s12, s13, s23
    max_exp: int


@lru_cache(maxsize=64)
def _compile(coeffs: tuple[float, ...], K: int, kind) -> CompiledSeries:
    sk, sl, a, b = SERIES[kind]
    c = np.asarray(coeffs)
    coef, exps = [], []
    for k in range(K + 1):
        ck = c[k + sk]
        if ck == 0.0:
            continue
        for l in range(K + 1):
            cl = c[l + sl]
            if cl == 0.0 or (k + l + a + b) % 2 or abs(k - l) > a + b:
                continue
            w = ck * cl * math.factorial(a) * math.factorial(b)
            for upper in _enumerate_upper((k, l, a, b)):
                denom = math.prod(math.factorial(e) for e in upper)
                coef.append(w / denom)
                exps.append(upper)
    exps = np.array(exps, dtype=np.int64).reshape(-1, 6)
    return CompiledSeries(np.array(coef), exps, int(exps.max()) if exps.size else 0)


def _significant(profile: ActivationProfile) -> tuple[float, ...]:
    # coefficients that vanish by symmetry come out of quadrature at ~1e-14;
    # zeroing them halves the compiled polynomial without changing its value
    c = profile.coeffs.copy()
    scale = np.sqrt([float(math.factorial(k)) for k in range(len(c))])
    c[np.abs(c) / scale < 1e-12] = 0.0
    return tuple(float(x) for x in c)


def compiled(profile: ActivationProfile, kind) -> CompiledSeries:
    return _compile(_significant(profile), profile.truncation_order, kind)


def pair_covariances(Vi, Wi, Vj, Wj) -> np.ndarray:
    """Six covariance entries for every pair ``(i, j)``; rows must be unit norm.

    Node order is ``vbar_i, vbar_j, wbar_i, wbar_j``; the result has shape
    ``(m_i, m_j, 6)`` in the order ``s01, s02, s03, s12, s13, s23``.
    """
    mi, mj = Vi.shape[0], Vj.shape[0]
    s = np.empty((mi, mj, 6))
    s[..., 0] = Vi @ Vj.T
    s[..., 1] = np.sum(Vi * Wi, axis=1)[:, None]
    s[..., 2] = Vi @ Wj.T
    s[..., 3] = (Wi @ Vj.T)
    s[..., 4] = np.sum(Vj * Wj, axis=1)[None, :]
    s[..., 5] = Wi @ Wj.T
    return np.clip(s, -1.0, 1.0)


def evaluate(series: CompiledSeries, s: np.ndarray) -> np.ndarray:
    """Evaluate a compiled series at covariance entries ``s`` of shape ``(..., 6)``."""
    if series.coef.size == 0:
        return np.zeros(s.shape[:-1])
    n = series.max_exp + 1
    powers = np.ones(s.shape + (n,))
    for e in range(1, n):
        powers[..., e] = powers[..., e - 1] * s
    flat = powers.reshape(-1, 6, n)
    out = np.ones((flat.shape[0], series.coef.size))
    for e in range(6):
        out *= flat[:, e, series.exps[:, e]]
    return (out @ series.coef).reshape(s.shape[:-1])


@dataclass(frozen=True)
class LambdaTable:
    """Series tables for one parameter state.

    ``lam[k-1]`` is the ``m x m`` student-student table of kind ``k`` and
    ``lamhat[k-1]`` the ``m x m*`` student-teacher table. ``gram`` and
    ``cross`` are the loss-kind series (``E[q_i q_j]`` and ``E[q_i q*_j]``).
    """

    lam: np.ndarray
    lamhat: np.ndarray
    gram: np.ndarray
    cross: np.ndarray
    teacher_gram: np.ndarray
    cov_ss: np.ndarray
    cov_st: np.ndarray
    truncation_order: int

    def raw_moment(self, i: int, j: int, degrees, teacher: bool = False) -> float:
        """``C^{i,j}_{k,l,a,b}`` (or the student-teacher version) from the stored covariances."""
        s = (self.cov_st if teacher else self.cov_ss)[i, j]
        cov = np.eye(4)
        for (p, q), val in zip(((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)), s):
            cov[p, q] = cov[q, p] = val
        return gaussian_hermite_moment(degrees, cov)


def _unit_rows(params: ModelParams, teacher: TeacherSpec):
    tp = teacher.as_params()
    return params.Vbar, params.Wbar, tp.Vbar, tp.Wbar


def build_lambda_tables(
    params: ModelParams,
    teacher: TeacherSpec,
    profile: ActivationProfile | None = None,
    with_gradient: bool = True,
) -> LambdaTable:
    profile = sigmoid_profile() if profile is None else profile
    if params.d != teacher.d:
        raise ValueError("student and teacher dimensions differ")
    V, W, Vs, Ws = _unit_rows(params, teacher)
    s_ss = pair_covariances(V, W, V, W)
    s_st = pair_covariances(V, W, Vs, Ws)
    s_tt = pair_covariances(Vs, Ws, Vs, Ws)
    loss = compiled(profile, "loss")
    gram = evaluate(loss, s_ss)
    cross = evaluate(loss, s_st)
    tgram = evaluate(loss, s_tt)
    m, ms = V.shape[0], Vs.shape[0]
    if with_gradient:
        lam = np.stack([evaluate(compiled(profile, k), s_ss) for k in range(1, 6)])
        lamhat = np.stack([evaluate(compiled(profile, k), s_st) for k in range(1, 6)])
    else:
        lam = np.full((5, m, m), np.nan)
        lamhat = np.full((5, m, ms), np.nan)
    return LambdaTable(lam, lamhat, gram, cross, tgram, s_ss, s_st, profile.truncation_order)


def loss_from_tables(tables: LambdaTable) -> float:
    return float(0.5 * tables.gram.sum() - tables.cross.sum() + 0.5 * tables.teacher_gram.sum())


def population_loss(params: ModelParams, teacher: TeacherSpec, profile: ActivationProfile | None = None) -> float:
    """``E[(f - f*)**2] / 2`` for ``x ~ N(0, I)``, as a truncated Hermite series."""
    return loss_from_tables(build_lambda_tables(params, teacher, profile, with_gradient=False))


def grad_from_tables(
    params: ModelParams, teacher: TeacherSpec, tables: LambdaTable, w_scale: str = "w"
) -> tuple[np.ndarray, np.ndarray]:
    if w_scale not in W_SCALES:
        raise ValueError(f"w_scale must be one of {W_SCALES}")
    V, W, Vs, Ws = _unit_rows(params, teacher)
    l1, l2, l3, l4, l5 = tables.lam
    h1, h2, h3, h4, h5 = tables.lamhat
    # unprojected directions, one row per student
    gv = (
        l1 @ V
        + 3.0 * l2.sum(axis=1)[:, None] * W
        + 3.0 * l4 @ W
        - h1 @ Vs
        - 3.0 * h2.sum(axis=1)[:, None] * W
        - 3.0 * h4 @ Ws
    )
    gw = (
        (l2.sum(axis=1) - h2.sum(axis=1))[:, None] * V
        + l3 @ V
        + 3.0 * l5 @ W
        - h3 @ Vs
        - 3.0 * h5 @ Ws
    )
    gv = gv - np.sum(gv * V, axis=1, keepdims=True) * V
    gw = gw - np.sum(gw * W, axis=1, keepdims=True) * W
    w_norm = params.norms_w if w_scale == "w" else params.norms_v
    return gv / params.norms_v[:, None], 3.0 * gw / w_norm[:, None]


def population_grad(
    params: ModelParams,
    teacher: TeacherSpec,
    profile: ActivationProfile | None = None,
    w_scale: str = "w",
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`population_loss` with respect to ``(V, W)``.

    ``w_scale="v"`` divides the expert gradient by the router norm instead
    of the expert norm; it exists only so tests can show it disagrees with
    finite differences.
    """
    tables = build_lambda_tables(params, teacher, profile)
    return grad_from_tables(params, teacher, tables, w_scale)


def loss_and_grad(params, teacher, profile=None):
    tables = build_lambda_tables(params, teacher, profile)
    return loss_from_tables(tables), grad_from_tables(params, teacher, tables)
