"""Probabilist's Hermite machinery.

Covers polynomial evaluation, Hermite coefficients of a gate by
Gauss-Hermite quadrature, the Gaussian moment of a product of Hermite
polynomials at correlated arguments (a sum over degree-constrained
multigraphs), and the correlation series used for the gate checks.

All polynomials use the probabilist's convention, ``He_3(x) = x**3 - 3x``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, roots_hermitenorm

HE_MAX = 64
"""Largest polynomial degree accepted by :func:`he_eval`."""

SMALL_N_DEGREE_CAP = 128
"""Degree-sum cap for moments with at most four factors."""

LARGE_N_DEGREE_CAP = 16
"""Degree-sum cap for moments with more than four factors."""

DEFAULT_K = 40
DEFAULT_QUAD_ORDER = 200
CONVERGENCE_TOL = 1e-9


# ---------------------------------------------------------------- polynomials


def he_eval(k: int, x):
    """Evaluate ``He_k`` at ``x`` (scalar or array) by the three-term recurrence."""
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise ValueError(f"degree must be a nonnegative integer, got {k!r}")
    if k > HE_MAX:
        raise ValueError(f"degree {k} exceeds cap {HE_MAX}")
    x = np.asarray(x, dtype=float)
    prev = np.ones_like(x)
    if k == 0:
        return prev if prev.ndim else float(prev)
    cur = x.copy()
    for n in range(1, k):
        prev, cur = cur, x * cur - n * prev
    return cur if cur.ndim else float(cur)


def he_all(kmax: int, x) -> np.ndarray:
    """Return ``He_0(x) .. He_kmax(x)`` stacked along a new leading axis."""
    if kmax < 0 or kmax > HE_MAX:
        raise ValueError(f"degree {kmax} outside [0, {HE_MAX}]")
    x = np.asarray(x, dtype=float)
    out = np.empty((kmax + 1,) + x.shape)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = x
    for n in range(1, kmax):
        out[n + 1] = x * out[n] - n * out[n - 1]
    return out


# ---------------------------------------------------------------- activations


@dataclass(frozen=True)
class Activation:
    """A smooth scalar gate with its first three derivatives."""

    name: str
    derivs: tuple[Callable[[np.ndarray], np.ndarray], ...]

    def __call__(self, x):
        return self.derivs[0](x)

    def deriv(self, order: int, x):
        return self.derivs[order](x)


def _sig0(x):
    return expit(x)


def _sig1(x):
    s = expit(x)
    return s * (1.0 - s)


def _sig2(x):
    s = expit(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _sig3(x):
    s = expit(x)
    return s * (1.0 - s) * (1.0 - 6.0 * s + 6.0 * s * s)


SIGMOID = Activation("sigmoid", (_sig0, _sig1, _sig2, _sig3))
IDENTITY = Activation(
    "identity",
    (
        lambda x: np.asarray(x, dtype=float),
        lambda x: np.ones_like(np.asarray(x, dtype=float)),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        lambda x: np.zeros_like(np.asarray(x, dtype=float)),
    ),
)


@lru_cache(maxsize=8)
def gauss_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the standard normal density."""
    nodes, weights = roots_hermitenorm(order)
    return nodes, weights / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ActivationProfile:
    """Hermite coefficients of a gate plus derived constants.

    ``coeffs`` holds ``c_0 .. c_{K+3}``: series truncate at ``K`` but the
    derivative series need the shifted coefficients ``c_{k+1} .. c_{k+3}``.
    """

    name: str
    coeffs: np.ndarray
    truncation_order: int
    cs0: float
    cs1: float
    cs2: float
    deriv_sq_moments: np.ndarray
    quad_order: int
    converged: bool = True
    max_coeff_change: float = 0.0
    extra: dict = field(default_factory=dict, compare=False)

    def c(self, k: int) -> float:
        return float(self.coeffs[k])

    def shifted(self, shift: int) -> np.ndarray:
        """Return ``c_{shift} .. c_{shift+K}`` (length ``K + 1``)."""
        K = self.truncation_order
        return self.coeffs[shift : shift + K + 1]

    def sq_sum(self, shift: int = 0) -> float:
        """``sum_{k<=K} c_{k+shift}**2 / k!``."""
        c = self.shifted(shift)
        return float(np.sum(c * c / _factorials(self.truncation_order)))


def _factorials(K: int) -> np.ndarray:
    return np.array([float(math.factorial(k)) for k in range(K + 1)])


def _raw_coeffs(activation: Activation, kmax: int, order: int) -> np.ndarray:
    nodes, weights = gauss_rule(order)
    vals = activation(nodes) * weights
    return he_all(kmax, nodes) @ vals


def hermite_coeffs(
    activation: Activation = SIGMOID,
    K: int = DEFAULT_K,
    order: int = DEFAULT_QUAD_ORDER,
) -> ActivationProfile:
    """Compute ``c_k = E[act(x) He_k(x)]`` for ``k <= K + 3`` by quadrature.

    The rule is re-run at twice the order; if any normalized coefficient
    ``c_k / sqrt(k!)`` moves by more than ``1e-9`` the profile is flagged
    as not converged and a warning is emitted.
    """
    if K < 8:
        raise ValueError("truncation order K must be at least 8")
    kmax = K + 3
    if kmax > HE_MAX:
        raise ValueError(f"K + 3 = {kmax} exceeds cap {HE_MAX}")
    if order < 4 * K:
        raise ValueError(f"quadrature order {order} below 4K = {4 * K}")
    coeffs = _raw_coeffs(activation, kmax, order)
    check = _raw_coeffs(activation, kmax, 2 * order)
    norm = np.sqrt(np.array([float(math.factorial(k)) for k in range(kmax + 1)]))
    change = float(np.max(np.abs(coeffs - check) / norm))
    converged = change <= CONVERGENCE_TOL
    if not converged:
        warnings.warn(
            f"Hermite coefficients of {activation.name} not converged "
            f"(normalized change {change:.2e} on doubling order {order})",
            RuntimeWarning,
            stacklevel=2,
        )

    nodes, weights = gauss_rule(order)
    dsq = np.array([float(weights @ activation.deriv(l, nodes) ** 2) for l in range(4)])
    fact = _factorials(K)
    cs2 = float(np.sum((coeffs[1 : K + 2] ** 2 + coeffs[: K + 1] * coeffs[2 : K + 3]) / fact))
    return ActivationProfile(
        name=activation.name,
        coeffs=coeffs,
        truncation_order=K,
        cs0=2.0 * dsq[0],
        cs1=6.0 * dsq[1],
        cs2=cs2,
        deriv_sq_moments=dsq,
        quad_order=order,
        converged=converged,
        max_coeff_change=change,
    )


@lru_cache(maxsize=16)
def sigmoid_profile(K: int = DEFAULT_K, order: int = DEFAULT_QUAD_ORDER) -> ActivationProfile:
    """Cached profile of the logistic sigmoid."""
    return hermite_coeffs(SIGMOID, K, order)


# ---------------------------------------------------------------- moments


def _degree_cap(n: int) -> int:
    return SMALL_N_DEGREE_CAP if n <= 4 else LARGE_N_DEGREE_CAP


@lru_cache(maxsize=100_000)
def _enumerate_upper(degrees: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    """Upper-triangle entries of every admissible degree matrix.

    Entries are ordered ``(0,1), (0,2), .., (0,n-1), (1,2), ..``; results
    come out in lexicographic order of that vector.
    """
    n = len(degrees)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if sum(degrees) % 2:
        return ()
    out: list[tuple[int, ...]] = []
    remaining = list(degrees)
    entries = [0] * len(pairs)

    # the last pair touching node i; after it, node i must be saturated
    last_pair_of = {}
    for p, (i, j) in enumerate(pairs):
        last_pair_of[i] = p
        last_pair_of[j] = p

    def rest_capacity(p: int, node: int) -> int:
        return sum(remaining[j if i == node else i] for (i, j) in pairs[p:] if node in (i, j))

    def backtrack(p: int) -> None:
        if p == len(pairs):
            if all(r == 0 for r in remaining):
                out.append(tuple(entries))
            return
        i, j = pairs[p]
        hi = min(remaining[i], remaining[j])
        for val in range(hi + 1):
            remaining[i] -= val
            remaining[j] -= val
            entries[p] = val
            ok = True
            for node in (i, j):
                if last_pair_of[node] == p and remaining[node] != 0:
                    ok = False
                elif remaining[node] > rest_capacity(p + 1, node):
                    ok = False
            if ok:
                backtrack(p + 1)
            remaining[i] += val
            remaining[j] += val
        entries[p] = 0

    if n == 1:
        return ((),) if degrees[0] == 0 else ()
    if n == 0:
        return ((),)
    backtrack(0)
    return tuple(out)


def _check_degrees(degrees: Sequence[int]) -> tuple[int, ...]:
    degrees = tuple(int(k) for k in degrees)
    if any(k < 0 for k in degrees):
        raise ValueError("degrees must be nonnegative")
    cap = _degree_cap(len(degrees))
    if sum(degrees) > cap:
        raise ValueError(f"degree sum {sum(degrees)} exceeds cap {cap} for n={len(degrees)}")
    return degrees


def enumerate_degree_matrices(degrees: Sequence[int]) -> list[np.ndarray]:
    """All symmetric, zero-diagonal nonnegative integer matrices with row sums ``degrees``."""
    degrees = _check_degrees(degrees)
    n = len(degrees)
    iu = np.triu_indices(n, 1)
    mats = []
    for upper in _enumerate_upper(degrees):
        M = np.zeros((n, n), dtype=np.int64)
        M[iu] = upper
        mats.append(M + M.T)
    return mats


def _validate_cov(cov, n: int, tol: float = 1e-12) -> None:
    for i in range(n):
        if abs(cov[i][i] - 1) > tol:
            raise ValueError("covariance must have unit diagonal")
        for j in range(i + 1, n):
            if abs(cov[i][j] - cov[j][i]) > tol:
                raise ValueError("covariance must be symmetric")
            if abs(cov[i][j]) > 1 + tol:
                raise ValueError("covariance entries must lie in [-1, 1]")


def gaussian_hermite_moment(degrees: Sequence[int], cov) -> float:
    """``E[prod_i He_{k_i}(x_i)]`` for ``x ~ N(0, cov)`` with unit-diagonal ``cov``.

    Equal to ``prod_i k_i! * sum_M prod_{i<j} cov_ij**M_ij / M_ij!`` over the
    degree matrices ``M``. Works with any numeric type supporting ``*``,
    ``/`` and ``**`` (``fractions.Fraction`` gives exact results).
    """
    degrees = _check_degrees(degrees)
    n = len(degrees)
    if isinstance(cov, np.ndarray) and cov.shape != (n, n):
        raise ValueError(f"covariance shape {cov.shape} does not match {n} degrees")
    _validate_cov(cov, n)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if isinstance(cov, np.ndarray):
        vals = [float(cov[i, j]) for i, j in pairs]
    else:
        vals = [cov[i][j] for i, j in pairs]
    total = 0
    for upper in _enumerate_upper(degrees):
        term = 1
        for v, e in zip(vals, upper):
            if e:
                term = term * v**e / math.factorial(e)
        total = total + term
    return math.prod(math.factorial(k) for k in degrees) * total


# ---------------------------------------------------------------- series


def corr_series(coeffs_a, coeffs_b, rho):
    """``sum_k a_k b_k / k! * rho**k`` over the shared truncation."""
    a = np.asarray(coeffs_a, dtype=float)
    b = np.asarray(coeffs_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("coefficient sequences must be 1-D with equal length")
    w = a * b / _factorials(len(a) - 1)
    rho = np.asarray(rho, dtype=float)
    powers = rho[..., None] ** np.arange(len(a))
    out = powers @ w
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SigmoidCheckReport:
    grid: np.ndarray
    values: np.ndarray
    max_value: float
    tol: float
    method: str

    @property
    def passed(self) -> bool:
        return bool(self.max_value <= self.tol)


@dataclass(frozen=True)
class CsRatioReport:
    cs0: float
    cs1: float
    ratio: float
    threshold: float

    @property
    def passed(self) -> bool:
        return bool(self.ratio >= self.threshold)


def default_grid(n: int = 201) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n)


def cross_moment_quadrature(
    activation: Activation, p: int, q: int, rho, order: int = 120
) -> np.ndarray:
    """``E[act^(p)(z1) act^(q)(z2)]`` with unit variances and correlation ``rho`` by 2-D quadrature."""
    nodes, weights = gauss_rule(order)
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    fp = activation.deriv(p, nodes)
    out = np.empty(rho.shape)
    for n, r in enumerate(rho):
        z2 = r * nodes[:, None] + math.sqrt(max(0.0, 1.0 - r * r)) * nodes[None, :]
        inner = activation.deriv(q, z2) @ weights
        out[n] = weights @ (fp * inner)
    return out


def assumption_sigmoid_check(
    grid=None,
    method: str = "series",
    profile: ActivationProfile | None = None,
    activation: Activation = SIGMOID,
    tol: float = 1e-6,
    order: int = 120,
) -> SigmoidCheckReport:
    """Evaluate ``E[act'(z1) act'''(z2)]`` over correlations ``rho`` in ``grid``.

    ``method="series"`` sums ``c_{k+1} c_{k+3} / k! * rho**k``; ``"quadrature"``
    integrates directly in two dimensions. Passing means every value is at
    most ``tol``.
    """
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    if method == "series":
        if profile is None:
            profile = hermite_coeffs(activation) if activation is not SIGMOID else sigmoid_profile()
        values = np.atleast_1d(corr_series(profile.shifted(1), profile.shifted(3), grid))
    elif method == "quadrature":
        values = cross_moment_quadrature(activation, 1, 3, grid, order)
    else:
        raise ValueError(f"unknown method {method!r}")
    return SigmoidCheckReport(grid, values, float(np.max(values)), tol, method)


def cs_ratio_check(profile: ActivationProfile | None = None, threshold: float = 1.1) -> CsRatioReport:
    """Compare ``cs0 = 2 E[act^2]`` with ``cs1 = 6 E[act'^2]``; never raises."""
    profile = sigmoid_profile() if profile is None else profile
    ratio = profile.cs0 / profile.cs1 if profile.cs1 > 0 else math.inf
    return CsRatioReport(profile.cs0, profile.cs1, float(ratio), threshold)
