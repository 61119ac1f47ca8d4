"""Monte-Carlo estimators of the population loss and gradient.

Every estimate reduces over fixed chunks of 256 samples in a fixed
order, so results are bit-reproducible for a given batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from softmoe.model import GaussianBatch, ModelParams, TeacherSpec, expert_terms, he2, he3

CHUNK = 256


def _samples(batch) -> np.ndarray:
    X = batch.samples if isinstance(batch, GaussianBatch) else np.asarray(batch, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be a nonempty 2-D array")
    return X


@dataclass(frozen=True)
class McEstimate:
    value: float
    std_error: float
    batch_size: int


@dataclass(frozen=True)
class McGradient:
    """Batch-mean gradient with entrywise and per-row standard errors."""

    grad_v: np.ndarray
    grad_w: np.ndarray
    se_v: np.ndarray
    se_w: np.ndarray
    batch_size: int

    @property
    def row_se_v(self) -> np.ndarray:
        return np.sqrt(np.sum(self.se_v**2, axis=1))

    @property
    def row_se_w(self) -> np.ndarray:
        return np.sqrt(np.sum(self.se_w**2, axis=1))


def residuals(params: ModelParams, teacher: TeacherSpec, X: np.ndarray) -> np.ndarray:
    """``f(theta, x) - f*(x)`` per sample."""
    return expert_terms(params, X)[3].sum(axis=1) - expert_terms(teacher, X)[3].sum(axis=1)


def mc_loss(params: ModelParams, teacher: TeacherSpec, batch) -> McEstimate:
    """Sample mean of ``(f - f*)**2 / 2`` and its standard error."""
    X = _samples(batch)
    s1 = 0.0
    s2 = 0.0
    for start in range(0, X.shape[0], CHUNK):
        h = 0.5 * residuals(params, teacher, X[start : start + CHUNK]) ** 2
        s1 += float(h.sum())
        s2 += float((h * h).sum())
    B = X.shape[0]
    mean = s1 / B
    var = max(s2 / B - mean * mean, 0.0) * B / (B - 1) if B > 1 else 0.0
    return McEstimate(mean, float(np.sqrt(var / B)), B)


def _coefficients(params: ModelParams, teacher: TeacherSpec, X: np.ndarray):
    z, u, gate, q = expert_terms(params, X)
    r = q.sum(axis=1) - expert_terms(teacher, X)[3].sum(axis=1)
    cv = r[:, None] * gate * (1.0 - gate) * he3(u)
    cw = r[:, None] * gate * 3.0 * he2(u)
    return z, u, cv, cw


def per_sample_grad(params: ModelParams, teacher: TeacherSpec, x) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of ``(f - f*)**2 / 2`` at one input.

    Row ``i`` of the router gradient is ``c_i (x - z_i vbar_i) / a_i``, which
    is orthogonal to ``v_i`` by construction; the expert gradient is analogous.
    """
    x = np.asarray(x, dtype=float)
    z, u, cv, cw = _coefficients(params, teacher, x[None, :])
    gv = cv[0][:, None] * (x[None, :] - z[0][:, None] * params.Vbar) / params.norms_v[:, None]
    gw = cw[0][:, None] * (x[None, :] - u[0][:, None] * params.Wbar) / params.norms_w[:, None]
    return gv, gw


def mc_grad(params: ModelParams, teacher: TeacherSpec, batch, with_se: bool = True) -> McGradient:
    """Batch mean of :func:`per_sample_grad`, computed with matrix products."""
    X = _samples(batch)
    B, d = X.shape
    m = params.m
    Vbar, Wbar = params.Vbar, params.Wbar
    # first moments: sum_b c_bi x_b and sum_b c_bi z_bi
    sv_x = np.zeros((m, d))
    sw_x = np.zeros((m, d))
    sv_z = np.zeros(m)
    sw_u = np.zeros(m)
    if with_se:
        qv = [np.zeros((m, d)), np.zeros((m, d)), np.zeros(m)]
        qw = [np.zeros((m, d)), np.zeros((m, d)), np.zeros(m)]
    for start in range(0, B, CHUNK):
        Xc = X[start : start + CHUNK]
        z, u, cv, cw = _coefficients(params, teacher, Xc)
        sv_x += cv.T @ Xc
        sw_x += cw.T @ Xc
        sv_z += np.sum(cv * z, axis=0)
        sw_u += np.sum(cw * u, axis=0)
        if with_se:
            X2 = Xc * Xc
            for acc, c, s in ((qv, cv, z), (qw, cw, u)):
                c2 = c * c
                acc[0] += c2.T @ X2
                acc[1] += (c2 * s).T @ Xc
                acc[2] += np.sum(c2 * s * s, axis=0)
    gv = (sv_x - sv_z[:, None] * Vbar) / (B * params.norms_v[:, None])
    gw = (sw_x - sw_u[:, None] * Wbar) / (B * params.norms_w[:, None])
    if with_se:
        se_v = _entry_se(qv, Vbar, params.norms_v, gv, B)
        se_w = _entry_se(qw, Wbar, params.norms_w, gw, B)
    else:
        se_v = np.full_like(gv, np.nan)
        se_w = np.full_like(gw, np.nan)
    return McGradient(gv, gw, se_v, se_w, B)


def _entry_se(acc, bar, norms, mean, B):
    # E[(c (x - s bar))^2] entrywise, expanded into the accumulated moments
    second = (acc[0] - 2.0 * acc[1] * bar + acc[2][:, None] * bar * bar) / (B * norms[:, None] ** 2)
    if B < 2:
        return np.zeros_like(mean)
    var = np.maximum(second - mean * mean, 0.0) * B / (B - 1)
    return np.sqrt(var / B)
