"""Training loop, alignment tracking and recovery diagnostics.

Training is online SGD with a fresh Gaussian batch per step followed by
rescaling every row back to its initial norm (gradient flow conserves row
norms, so this is the natural discretization). Time is ``t = step * eta``.

Student index ``i`` is paired with teacher index ``j`` greedily from the
initial expert alignments; the diagnostics below measure how well the
trajectory follows that pairing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from softmoe.errors import NumericalFailure
from softmoe.hermite import ActivationProfile
from softmoe.mc import mc_grad, mc_loss
from softmoe.model import ModelParams, TeacherSpec, draw_batch, renormalize
from softmoe.oracle import build_lambda_tables, grad_from_tables, loss_from_tables

# ---------------------------------------------------------------- snapshots


@dataclass(frozen=True)
class AlignmentSnapshot:
    """All pairwise cosines between student and teacher rows at time ``t``.

    ``gamma1[i, j] = vbar_i . vbar*_j``, ``gamma2[i, j] = wbar_i . wbar*_j``,
    ``zeta1[i, j] = vbar_i . wbar*_j``, ``zeta2[i, j] = wbar_i . vbar*_j``,
    ``I1 = Vbar Vbar^T``, ``I2 = Wbar Wbar^T``, ``I3 = Vbar Wbar^T``.
    ``norms_w`` keeps the expert norms for norm-weighted pairing.
    """

    t: float
    gamma1: np.ndarray
    gamma2: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray
    I1: np.ndarray
    I2: np.ndarray
    I3: np.ndarray
    norms_w: np.ndarray

    @property
    def m(self) -> int:
        return self.gamma1.shape[0]

    @property
    def m_star(self) -> int:
        return self.gamma1.shape[1]


def alignment_snapshot(params: ModelParams, teacher: TeacherSpec, t: float = 0.0) -> AlignmentSnapshot:
    if params.d != teacher.d:
        raise ValueError("student and teacher dimensions differ")
    V, W = params.Vbar, params.Wbar
    tp = teacher.as_params()
    Vs, Ws = tp.Vbar, tp.Wbar
    return AlignmentSnapshot(
        t=float(t),
        gamma1=V @ Vs.T,
        gamma2=W @ Ws.T,
        zeta1=V @ Ws.T,
        zeta2=W @ Vs.T,
        I1=V @ V.T,
        I2=W @ W.T,
        I3=V @ W.T,
        norms_w=params.norms_w.copy(),
    )


# ---------------------------------------------------------------- pairing


@dataclass(frozen=True)
class PairingMap:
    """Ordered pairs ``(student, teacher)``; position ``l`` is the recovery rank."""

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(set(self.students)) != len(self.pairs) or len(set(self.teachers)) != len(self.pairs):
            raise ValueError("pairing must be injective on both sides")

    @property
    def students(self) -> list[int]:
        return [i for i, _ in self.pairs]

    @property
    def teachers(self) -> list[int]:
        return [j for _, j in self.pairs]

    def __len__(self) -> int:
        return len(self.pairs)

    def student_for(self, j: int) -> int:
        for i, jj in self.pairs:
            if jj == j:
                return i
        raise KeyError(j)


def greedy_select(score: np.ndarray) -> PairingMap:
    """Repeatedly take the largest remaining entry and drop its row and column.

    Ties go to the smallest ``(i, j)`` in row-major order.
    """
    score = np.asarray(score, dtype=float)
    m, ms = score.shape
    if m < ms:
        raise ValueError(f"need at least as many students ({m}) as teachers ({ms})")
    work = score.copy()
    pairs = []
    for _ in range(ms):
        flat = int(np.argmax(work))  # argmax returns the first maximum in row-major order
        i, j = divmod(flat, ms)
        pairs.append((i, j))
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return PairingMap(tuple(pairs))


def pairing_scores(snapshot: AlignmentSnapshot, use_norms: bool = True) -> np.ndarray:
    """``w_i . wbar*_j`` (``use_norms``) or the cosine ``wbar_i . wbar*_j``."""
    if use_norms:
        return snapshot.norms_w[:, None] * snapshot.gamma2
    return snapshot.gamma2


def greedy_pairing(snapshot0: AlignmentSnapshot, use_norms: bool = True) -> PairingMap:
    return greedy_select(pairing_scores(snapshot0, use_norms))


# ---------------------------------------------------------------- init audit


@dataclass(frozen=True)
class InitReport:
    """Gap conditions on the initial expert alignments, with their margins.

    Each ``*_margin[l]`` is the slack ``lhs - rhs`` of the inequality for
    rank ``l``; the matching ``*_ok`` entry is ``margin >= 0``. The threshold
    gap has ``m* - 1`` entries.
    """

    delta_s: float
    pairing: PairingMap
    rowwise_margin: np.ndarray
    colwise_margin: np.ndarray
    threshold_margin: np.ndarray
    magnitude_margin: np.ndarray
    norm_band: float
    norm_band_ok: bool
    cross_alignment_max: float
    self_alignment_max: float
    decoupling_max: float

    @property
    def rowwise_ok(self) -> np.ndarray:
        return self.rowwise_margin >= 0

    @property
    def colwise_ok(self) -> np.ndarray:
        return self.colwise_margin >= 0

    @property
    def threshold_ok(self) -> np.ndarray:
        return self.threshold_margin >= 0

    @property
    def magnitude_ok(self) -> np.ndarray:
        return self.magnitude_margin >= 0

    @property
    def all_gaps_ok(self) -> bool:
        return bool(
            self.rowwise_ok.all() and self.colwise_ok.all() and self.threshold_ok.all() and self.magnitude_ok.all()
        )


def _max_or(values, default: float = 0.0) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.max()) if values.size else default


def gap_margins(score: np.ndarray, pairing: PairingMap, delta_s: float, d: int):
    """Margins of the row-wise, column-wise, threshold and magnitude conditions.

    With ``A = score`` and ``a_l = A[i_l, j_l]``:

    * row-wise: ``a_l >= (1 + 2 delta_s) A[i_l, j]`` for teachers ``j`` not yet paired at rank ``l``
    * column-wise: ``a_l >= (1 + 2 delta_s) A[i, j_l]`` for students ``i`` not yet paired at rank ``l``
    * threshold: ``a_l >= (1 + 2 delta_s) a_{l+1}``
    * magnitude: ``a_l**2 >= log(m*) / d``
    """
    m, ms = score.shape
    f = 1.0 + 2.0 * delta_s
    a = np.array([score[i, j] for i, j in pairing.pairs])
    row = np.empty(ms)
    col = np.empty(ms)
    for l, (i, j) in enumerate(pairing.pairs):
        used_t = set(pairing.teachers[: l + 1])
        used_s = set(pairing.students[: l + 1])
        others_t = [jj for jj in range(ms) if jj not in used_t]
        others_s = [ii for ii in range(m) if ii not in used_s]
        row[l] = a[l] - f * _max_or(score[i, others_t], -np.inf)
        col[l] = a[l] - f * _max_or(score[others_s, j], -np.inf)
    thr = a[:-1] - f * a[1:]
    mag = a**2 - math.log(ms) / d
    return row, col, thr, mag


def check_init_conditions(
    snapshot0: AlignmentSnapshot,
    params0: ModelParams,
    delta_s: float,
    use_norms: bool = True,
    norm_band: float = 0.1,
) -> InitReport:
    """Audit the initial state against the gap conditions used by the recovery analysis."""
    score = pairing_scores(snapshot0, use_norms)
    pairing = greedy_select(score)
    row, col, thr, mag = gap_margins(score, pairing, delta_s, params0.d)
    norms = np.concatenate([params0.norms_v, params0.norms_w])
    band_ok = bool(np.all(np.abs(norms - 1.0) <= norm_band))
    cross = max(np.abs(snapshot0.gamma1).max(), np.abs(snapshot0.zeta1).max(), np.abs(snapshot0.zeta2).max())
    off = ~np.eye(snapshot0.m, dtype=bool)
    selfmax = _max_or(np.concatenate([np.abs(M[off]) for M in (snapshot0.I1, snapshot0.I2, snapshot0.I3)]))
    return InitReport(
        delta_s=delta_s,
        pairing=pairing,
        rowwise_margin=row,
        colwise_margin=col,
        threshold_margin=thr,
        magnitude_margin=mag,
        norm_band=norm_band,
        norm_band_ok=band_ok,
        cross_alignment_max=float(cross),
        self_alignment_max=selfmax,
        decoupling_max=float(np.abs(np.diag(snapshot0.I3)).max()),
    )


# ---------------------------------------------------------------- error diagnostics


@dataclass(frozen=True)
class ErrorDiagnostics:
    """Error quantities at rank ``ell`` (1-based) for one snapshot.

    ``eps[0..4]`` are the five basic errors; ``forward``, ``backward1``,
    ``backward2``, ``backward_decoupling`` and the aggregates combine them.
    """

    ell: int
    eps: np.ndarray
    forward1: float
    forward2: float
    backward_b1: float
    backward_b2: float

    @property
    def forward(self) -> float:
        return max(self.forward1, self.forward2)

    @property
    def backward1(self) -> float:
        return max(self.backward_b1, self.backward_b2, self.eps[1])

    @property
    def backward2(self) -> float:
        return max(self.backward1, self.eps[0])

    backward_decoupling: float = 0.0

    @property
    def aggregate1(self) -> float:
        return max(self.eps[3], self.backward1, self.forward)

    @property
    def aggregate2(self) -> float:
        return max(self.aggregate1, self.eps[0], self.eps[2])


def error_diagnostics(snapshot: AlignmentSnapshot, pairing: PairingMap, ell: int) -> ErrorDiagnostics:
    """Evaluate every error quantity at rank ``ell`` (``1 <= ell <= m*``).

    With ``R_l`` the first ``l`` paired students:

    * ``eps1`` max ``|gamma1|`` over students outside ``R_l``
    * ``eps2`` max ``|gamma1|`` of student ``i_l`` against teachers other than ``j_l``
    * ``eps3``, ``eps4`` the same for ``gamma2``
    * ``eps5`` ``|I3[i_l, i_l]|``
    * forward: off-pair ``gamma`` of ranks ``<= l`` and ``zeta`` of students in ``R_{l-1}``
    * backward: ``zeta`` of students outside ``R_{l-1}`` and all off-diagonal ``I``
    """
    ms = snapshot.m_star
    if not 1 <= ell <= len(pairing):
        raise ValueError(f"ell must lie in [1, {len(pairing)}]")
    m = snapshot.m
    g1, g2 = np.abs(snapshot.gamma1), np.abs(snapshot.gamma2)
    z = np.maximum(np.abs(snapshot.zeta1), np.abs(snapshot.zeta2))
    students = pairing.students
    R_l = set(students[:ell])
    R_prev = students[: ell - 1]
    out_l = [i for i in range(m) if i not in R_l]
    out_prev = [i for i in range(m) if i not in set(R_prev)]
    i_l, j_l = pairing.pairs[ell - 1]
    other_t = [j for j in range(ms) if j != j_l]
    eps = np.array(
        [
            _max_or(g1[out_l]),
            _max_or(g1[i_l, other_t]),
            _max_or(g2[out_l]),
            _max_or(g2[i_l, other_t]),
            abs(float(snapshot.I3[i_l, i_l])),
        ]
    )
    f1 = 0.0
    for ii, jj in pairing.pairs[:ell]:
        cols = [j for j in range(ms) if j != jj]
        f1 = max(f1, _max_or(g1[ii, cols]), _max_or(g2[ii, cols]))
    f2 = _max_or(z[R_prev])
    b1 = _max_or(z[out_prev])
    off = ~np.eye(m, dtype=bool)
    b2 = _max_or(np.concatenate([np.abs(M[off]) for M in (snapshot.I1, snapshot.I2, snapshot.I3)]))
    bI = _max_or(np.abs(np.diag(snapshot.I3))[out_l])
    return ErrorDiagnostics(ell, eps, f1, f2, b1, b2, bI)


class ErrorTracker:
    """Running suprema of both aggregate errors for every rank."""

    def __init__(self, pairing: PairingMap):
        self.pairing = pairing
        n = len(pairing)
        self.sup1 = np.zeros(n)
        self.sup2 = np.zeros(n)

    def update(self, snapshot: AlignmentSnapshot) -> tuple[np.ndarray, np.ndarray]:
        for l in range(len(self.pairing)):
            diag = error_diagnostics(snapshot, self.pairing, l + 1)
            self.sup1[l] = max(self.sup1[l], diag.aggregate1)
            self.sup2[l] = max(self.sup2[l], diag.aggregate2)
        return self.sup1.copy(), self.sup2.copy()


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings. ``steps`` overrides the ``t_max_coeff * sqrt(d) / eta`` budget."""

    eta: float = 0.05
    t_max_coeff: float = 3.0
    batch: int = 4096
    record_count: int = 200
    gradient: str = "mc"
    steps: int | None = None
    use_norms_pairing: bool = True

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.batch < 1 or self.record_count < 1:
            raise ValueError("batch and record_count must be positive")
        if self.gradient not in ("mc", "analytic"):
            raise ValueError(f"gradient must be 'mc' or 'analytic', got {self.gradient!r}")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def num_steps(self, d: int) -> int:
        if self.steps is not None:
            return self.steps
        return int(round(self.t_max_coeff * math.sqrt(d) / self.eta))

    def record_every(self, d: int) -> int:
        return max(1, self.num_steps(d) // self.record_count)


@dataclass
class TrajectoryRecord:
    """Recorded snapshots with losses and error suprema.

    ``agg_sup[k]`` is the running supremum of the second aggregate error at
    rank ``m*`` up to record ``k``.
    """

    steps: list[int] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    loss_se: list[float] = field(default_factory=list)
    snapshots: list[AlignmentSnapshot] = field(default_factory=list)
    agg_sup: list[float] = field(default_factory=list)
    pairing: PairingMap | None = None
    norms_v: np.ndarray | None = None
    norms_w: np.ndarray | None = None
    final_params: ModelParams | None = None
    record_interval: float = 0.0

    def paired_series(self, which: str = "gamma2") -> np.ndarray:
        """``(records, m*)`` array of the paired alignment in ranking order."""
        return np.array([[getattr(s, which)[i, j] for i, j in self.pairing.pairs] for s in self.snapshots])

    def max_offpair(self) -> np.ndarray:
        """Largest ``|gamma1|`` or ``|gamma2|`` entry outside the pairing, per record."""
        out = []
        for s in self.snapshots:
            mask = np.ones(s.gamma1.shape, dtype=bool)
            for i, j in self.pairing.pairs:
                mask[i, j] = False
            vals = np.concatenate([np.abs(s.gamma1[mask]), np.abs(s.gamma2[mask])])
            out.append(_max_or(vals))
        return np.array(out)


def _step_gradient(params, teacher, config, seed, step, profile):
    """Return ``(gv, gw, loss, loss_se)`` for one step; loss uses the same batch."""
    if config.gradient == "analytic":
        tables = build_lambda_tables(params, teacher, profile)
        gv, gw = grad_from_tables(params, teacher, tables)
        return gv, gw, loss_from_tables(tables), 0.0
    batch = draw_batch(seed, config.batch, params.d, "data", step)
    g = mc_grad(params, teacher, batch, with_se=False)
    return g.grad_v, g.grad_w, None, None


def _record_loss(params, teacher, config, seed, step, profile):
    if config.gradient == "analytic":
        from softmoe.oracle import population_loss

        return population_loss(params, teacher, profile), 0.0
    est = mc_loss(params, teacher, draw_batch(seed, config.batch, params.d, "data", step))
    return est.value, est.std_error


def train(
    params0: ModelParams,
    teacher: TeacherSpec,
    config: TrainConfig,
    seed: int,
    profile: ActivationProfile | None = None,
    callback: Callable[[int, ModelParams], None] | None = None,
) -> TrajectoryRecord:
    """Run SGD with per-step renormalization and record the trajectory.

    Snapshots are taken at step 0, every ``record_every`` steps and at the
    last step. With ``gradient="mc"`` the recorded loss is evaluated on the
    data batch of that step (before the update), so recording never draws
    extra random numbers.
    """
    steps = config.num_steps(params0.d)
    every = config.record_every(params0.d)
    a0, b0 = params0.norms_v.copy(), params0.norms_w.copy()
    snap0 = alignment_snapshot(params0, teacher, 0.0)
    pairing = greedy_pairing(snap0, config.use_norms_pairing)
    tracker = ErrorTracker(pairing)
    rec = TrajectoryRecord(pairing=pairing, norms_v=a0, norms_w=b0, record_interval=every * config.eta)

    def record(step, params, snap=None):
        snap = snap or alignment_snapshot(params, teacher, step * config.eta)
        loss, se = _record_loss(params, teacher, config, seed, step, profile)
        rec.steps.append(step)
        rec.times.append(step * config.eta)
        rec.losses.append(loss)
        rec.loss_se.append(se)
        rec.snapshots.append(snap)
        rec.agg_sup.append(float(tracker.update(snap)[1][-1]))

    params = params0
    record(0, params, snap0)
    for step in range(steps):
        gv, gw, _, _ = _step_gradient(params, teacher, config, seed, step, profile)
        V = params.V - config.eta * gv
        W = params.W - config.eta * gw
        if not (np.all(np.isfinite(V)) and np.all(np.isfinite(W))):
            raise NumericalFailure(f"non-finite parameters at step {step + 1}", state=rec.snapshots[-1])
        params = renormalize(ModelParams(V, W, np.linalg.norm(V, axis=1), np.linalg.norm(W, axis=1)), a0, b0)
        if callback is not None:
            callback(step + 1, params)
        if (step + 1) % every == 0 or step + 1 == steps:
            record(step + 1, params)
    rec.final_params = params
    return rec


# ---------------------------------------------------------------- recovery


@dataclass(frozen=True)
class RecoveryReport:
    """Crossing times of the paired expert alignments.

    ``T[l]`` is the first (interpolated) time the rank-``l`` paired
    ``gamma2`` reaches ``xi``; ``T_r`` is the same at ``0.9``. Never-crossed
    entries are ``inf``.
    """

    xi: float
    T: np.ndarray
    T_r: np.ndarray
    order_matches_pairing: bool
    final_gamma1: np.ndarray
    final_gamma2: np.ndarray
    slack: float


def crossing_times(times, series, xi: float) -> np.ndarray:
    """First time each column of ``series`` reaches ``xi``, linearly interpolated."""
    times = np.asarray(times, dtype=float)
    series = np.asarray(series, dtype=float).reshape(len(times), -1)
    out = np.full(series.shape[1], np.inf)
    for l in range(series.shape[1]):
        y = series[:, l]
        hit = np.nonzero(y >= xi)[0]
        if hit.size == 0:
            continue
        k = int(hit[0])
        if k == 0:
            out[l] = times[0]
        else:
            t0, t1, y0, y1 = times[k - 1], times[k], y[k - 1], y[k]
            out[l] = t0 + (xi - y0) / (y1 - y0) * (t1 - t0)
    return out


def ordered_within(T: np.ndarray, slack: float) -> bool:
    for a, b in zip(T[:-1], T[1:]):
        if math.isinf(a) and math.isinf(b):
            continue
        if a > b + slack:
            return False
    return True


def recovery_times(traj: TrajectoryRecord, pairing: PairingMap | None = None, xi: float = 0.9) -> RecoveryReport:
    if not 0.0 < xi < 1.0:
        raise ValueError("xi must lie in (0, 1)")
    pairing = pairing or traj.pairing
    saved = traj.pairing
    traj.pairing = pairing
    try:
        g2 = traj.paired_series("gamma2")
        g1 = traj.paired_series("gamma1")
    finally:
        traj.pairing = saved
    T = crossing_times(traj.times, g2, xi)
    T_r = crossing_times(traj.times, g2, 0.9)
    slack = traj.record_interval
    return RecoveryReport(xi, T, T_r, ordered_within(T, slack), g1[-1], g2[-1], slack)


@dataclass(frozen=True)
class ShapeReport:
    """End-of-training recovery pattern.

    ``matched[j]`` is the unique student with both paired alignments at least
    ``xi`` for teacher ``j`` (``-1`` when there is none or more than one).
    """

    matched: np.ndarray
    unique_per_teacher: bool
    unmatched_cross_max: float
    unmatched_self_max: float
    bound: float
    min_matched_alignment: float

    @property
    def passed(self) -> bool:
        return bool(
            self.unique_per_teacher
            and self.unmatched_cross_max <= self.bound
            and self.unmatched_self_max <= self.bound
        )


def recovery_shape(snapshot: AlignmentSnapshot, xi: float = 0.9, bound: float = 0.25) -> ShapeReport:
    """Check one recovered student per teacher and small alignments elsewhere."""
    ok = (snapshot.gamma1 >= xi) & (snapshot.gamma2 >= xi)
    counts = ok.sum(axis=0)
    matched = np.where(counts == 1, np.argmax(ok, axis=0), -1)
    unique = bool(np.all(counts == 1)) and len(set(matched.tolist())) == snapshot.m_star
    rec = set(matched[matched >= 0].tolist())
    un = [i for i in range(snapshot.m) if i not in rec]
    cross = _max_or(
        np.concatenate([np.abs(M[un]).ravel() for M in (snapshot.gamma1, snapshot.gamma2, snapshot.zeta1, snapshot.zeta2)])
    )
    sub = np.ix_(un, un)
    off = ~np.eye(len(un), dtype=bool)
    selfmax = _max_or(np.concatenate([np.abs(M[sub][off]) for M in (snapshot.I1, snapshot.I2, snapshot.I3)]))
    if unique:
        paired = [min(snapshot.gamma1[i, j], snapshot.gamma2[i, j]) for j, i in enumerate(matched)]
        min_al = float(min(paired))
    else:
        min_al = float("nan")
    return ShapeReport(matched, unique, cross, selfmax, bound, min_al)
