"""Student and teacher mixture-of-experts models.

A model with rows ``(v_i, w_i)`` computes

    f(x) = sum_i sigmoid(vbar_i . x) * He_3(wbar_i . x)

where bars denote unit-normalized rows. Only directions matter for the
output; norms are cached because gradients scale with their inverses.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from softmoe.rng import generator


def he3(u):
    return u * u * u - 3.0 * u


def he2(u):
    return u * u - 1.0


@dataclass(frozen=True)
class ModelParams:
    """Router rows ``V`` and expert rows ``W`` (both ``m x d``) with cached norms."""

    V: np.ndarray
    W: np.ndarray
    norms_v: np.ndarray
    norms_w: np.ndarray

    @classmethod
    def from_rows(cls, V, W) -> "ModelParams":
        V = np.array(V, dtype=float, ndmin=2)
        W = np.array(W, dtype=float, ndmin=2)
        if V.shape != W.shape:
            raise ValueError(f"router shape {V.shape} differs from expert shape {W.shape}")
        a = np.linalg.norm(V, axis=1)
        b = np.linalg.norm(W, axis=1)
        if np.any(a == 0) or np.any(b == 0):
            raise ValueError("rows must be nonzero")
        V.setflags(write=False)
        W.setflags(write=False)
        return cls(V, W, a, b)

    @property
    def m(self) -> int:
        return self.V.shape[0]

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def Vbar(self) -> np.ndarray:
        return self.V / self.norms_v[:, None]

    @property
    def Wbar(self) -> np.ndarray:
        return self.W / self.norms_w[:, None]

    def subset(self, keep) -> "ModelParams":
        keep = np.asarray(keep, dtype=int)
        return ModelParams.from_rows(self.V[keep], self.W[keep])


@dataclass(frozen=True)
class TeacherSpec:
    """Teacher rows forming an orthonormal list of ``2 m*`` vectors."""

    Vstar: np.ndarray
    Wstar: np.ndarray
    mode: str = "canonical"

    @property
    def m_star(self) -> int:
        return self.Vstar.shape[0]

    @property
    def d(self) -> int:
        return self.Vstar.shape[1]

    def as_params(self) -> ModelParams:
        return ModelParams.from_rows(self.Vstar, self.Wstar)

    def gram(self) -> np.ndarray:
        rows = np.vstack([self.Vstar, self.Wstar])
        return rows @ rows.T


TEACHER_MODES = ("canonical", "random_orthogonal")


def make_teacher(m_star: int, d: int, mode: str = "canonical", seed: int = 0) -> TeacherSpec:
    """Teacher with ``vbar*_j = e_j`` and ``wbar*_j = e_{m*+j}``, optionally rotated.

    ``random_orthogonal`` applies a Haar rotation (QR of a Gaussian matrix,
    sign-corrected diagonal of R) drawn from the ``teacher`` stream.
    """
    if m_star < 1:
        raise ValueError("m_star must be positive")
    if 2 * m_star > d:
        raise ValueError(f"need 2*m_star <= d, got m_star={m_star}, d={d}")
    eye = np.eye(d)
    Vs = eye[:m_star].copy()
    Ws = eye[m_star : 2 * m_star].copy()
    if mode == "random_orthogonal":
        g = generator(seed, "teacher").standard_normal((d, d))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        Vs = Vs @ q.T
        Ws = Ws @ q.T
    elif mode != "canonical":
        raise ValueError(f"unknown teacher mode {mode!r}")
    return TeacherSpec(Vs, Ws, mode)


def init_student(m: int, d: int, seed: int) -> ModelParams:
    """Draw ``vhat_i, w_i ~ N(0, I/d)`` and project ``v_i`` off ``wbar_i``."""
    if m < 1 or d < 2:
        raise ValueError("need m >= 1 and d >= 2")
    rng = generator(seed, "init")
    scale = 1.0 / np.sqrt(d)
    Vhat = rng.standard_normal((m, d)) * scale
    W = rng.standard_normal((m, d)) * scale
    Wbar = W / np.linalg.norm(W, axis=1, keepdims=True)
    V = Vhat - np.sum(Vhat * Wbar, axis=1, keepdims=True) * Wbar
    return ModelParams.from_rows(V, W)


def _as_params(model) -> ModelParams:
    return model.as_params() if isinstance(model, TeacherSpec) else model


def expert_terms(model, X: np.ndarray):
    """Per-expert pre-activations and outputs on a batch.

    Returns ``(z, u, gate, q)`` with ``z = X vbar^T``, ``u = X wbar^T``,
    ``gate = sigmoid(z)`` and ``q = gate * He_3(u)``.
    """
    p = _as_params(model)
    if X.shape[-1] != p.d:
        raise ValueError(f"input dimension {X.shape[-1]} does not match model dimension {p.d}")
    z = X @ p.Vbar.T
    u = X @ p.Wbar.T
    gate = expit(z)
    return z, u, gate, gate * he3(u)


def forward(model, x):
    """Model output for one input (``d``) or a batch (``B x d``)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    q = expert_terms(model, X)[3]
    out = q.sum(axis=1)
    return float(out[0]) if single else out


def renormalize(params: ModelParams, target_v, target_w) -> ModelParams:
    """Rescale every row to the given norms, leaving directions unchanged."""
    target_v = np.asarray(target_v, dtype=float)
    target_w = np.asarray(target_w, dtype=float)
    if np.any(target_v <= 0) or np.any(target_w <= 0):
        raise ValueError("target norms must be positive")
    a = np.linalg.norm(params.V, axis=1)
    b = np.linalg.norm(params.W, axis=1)
    if np.any(a == 0) or np.any(b == 0):
        raise ValueError("cannot renormalize a zero row")
    V = params.V * (target_v / a)[:, None]
    W = params.W * (target_w / b)[:, None]
    V.setflags(write=False)
    W.setflags(write=False)
    return ModelParams(V, W, target_v.copy(), target_w.copy())


@dataclass(frozen=True)
class GaussianBatch:
    """Standard Gaussian inputs tagged with the stream they came from."""

    samples: np.ndarray
    seed: int
    stream: str
    index: int

    @property
    def size(self) -> int:
        return self.samples.shape[0]


def draw_batch(seed: int, size: int, d: int, stream: str = "data", index: int = 0) -> GaussianBatch:
    """Deterministic batch of ``size`` draws from ``N(0, I_d)``."""
    if size < 1:
        raise ValueError("batch size must be positive")
    X = generator(seed, stream, index).standard_normal((size, d))
    return GaussianBatch(X, seed, stream, index)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: ModelParams, m_star: int, seed: int, step: int) -> None:
    """Write a text checkpoint.

    Line 1 is ``m m_star d seed step``; the next ``m`` lines are the router
    rows and the following ``m`` lines the expert rows, each entry in
    ``%.17g`` so the round trip is exact.
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{params.m} {m_star} {params.d} {seed} {step}\n")
        np.savetxt(fh, params.V, fmt="%.17g")
        np.savetxt(fh, params.W, fmt="%.17g")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        m, m_star, d, seed, step = (int(h) for h in header)
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (2 * m, d):
        raise ValueError(f"checkpoint body has shape {data.shape}, expected {(2 * m, d)}")
    params = ModelParams.from_rows(data[:m], data[m:])
    return params, {"m": m, "m_star": m_star, "d": d, "seed": seed, "step": step}
