"""Exact brute-force references on finite discrete instances.

Everything here works on joint distributions with small finite support, so
population metrics, estimator means/variances, and operator-form baselines
can be computed exactly (up to float rounding, budgeted at 1e-12 by summing
with ``math.fsum``). These are the independent checks the Monte-Carlo
estimators are certified against; none of the estimator code paths are
reused except where the whole point is to evaluate the estimator itself on
every enumerated sample tuple.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import estimators
from .errors import NumericError
from .estimators import Batch, GenBatch, GroupedBatch

Array = np.ndarray

_PROB_TOL = 1e-12
_MAX_SUPPORT = 64
_MAX_TUPLES = 10_000_000


def _fsum(values: Array) -> float:
    return math.fsum(np.asarray(values, dtype=float).ravel())


@dataclass(frozen=True)
class DiscreteInstance:
    """Finite-support joint distributions P and Q over (X, Y).

    Both sides share the same X marginal (the generated side conditions on
    the data inputs). ``p_supports[i]`` / ``p_probs[i]`` give the data-side
    conditional at ``xs[i]``; the q_* fields give the generator side.
    """

    xs: Array
    px: Array
    p_supports: tuple
    p_probs: tuple
    q_supports: tuple
    q_probs: tuple

    def __post_init__(self):
        xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        px = np.asarray(self.px, dtype=float)
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "px", px)
        object.__setattr__(self, "p_supports",
                           tuple(np.atleast_2d(np.asarray(s, dtype=float)) for s in self.p_supports))
        object.__setattr__(self, "q_supports",
                           tuple(np.atleast_2d(np.asarray(s, dtype=float)) for s in self.q_supports))
        object.__setattr__(self, "p_probs",
                           tuple(np.asarray(p, dtype=float) for p in self.p_probs))
        object.__setattr__(self, "q_probs",
                           tuple(np.asarray(p, dtype=float) for p in self.q_probs))
        k = xs.shape[0]
        if not (len(self.p_supports) == len(self.p_probs) == k
                and len(self.q_supports) == len(self.q_probs) == k):
            raise ValueError("need one conditional support per input point on both sides")
        self._check_dist(px, "px")
        for i in range(k):
            self._check_dist(self.p_probs[i], f"p_probs[{i}]")
            self._check_dist(self.q_probs[i], f"q_probs[{i}]")
            if self.p_supports[i].shape[0] != self.p_probs[i].shape[0]:
                raise ValueError(f"p side support/probs mismatch at input {i}")
            if self.q_supports[i].shape[0] != self.q_probs[i].shape[0]:
                raise ValueError(f"q side support/probs mismatch at input {i}")
        total = sum(s.shape[0] for s in self.p_supports) + \
            sum(s.shape[0] for s in self.q_supports)
        if total > _MAX_SUPPORT:
            raise ValueError(f"total support size {total} exceeds the tractable bound {_MAX_SUPPORT}")

    @staticmethod
    def _check_dist(p: Array, name: str) -> None:
        if np.any(p < 0):
            raise ValueError(f"{name} has negative probabilities")
        s = math.fsum(p)
        if abs(s - 1.0) > _PROB_TOL:
            raise ValueError(f"{name} sums to {s}, not 1")

    # --- flattened joint supports -----------------------------------------

    def joint(self, side: str):
        """Arrays (XS, YS, W) enumerating the joint support of one side."""
        sup = self.p_supports if side == "p" else self.q_supports
        pr = self.p_probs if side == "p" else self.q_probs
        xs_rows, ys_rows, w = [], [], []
        for i in range(self.xs.shape[0]):
            for a in range(sup[i].shape[0]):
                xs_rows.append(self.xs[i])
                ys_rows.append(sup[i][a])
                w.append(self.px[i] * pr[i][a])
        return np.array(xs_rows), np.array(ys_rows), np.array(w)


@dataclass(frozen=True)
class ExactMetrics:
    mmd2_marginal_y: float
    jmmd2: float
    ammd2: float
    c0: float
    c1: float
    e_k1xx: float


def _weighted_quad(w1: Array, K: Array, w2: Array) -> float:
    """Exact sum_{a,b} w1[a] K[a,b] w2[b]."""
    return _fsum(w1[:, None] * K * w2[None, :])


def exact_metrics(inst: DiscreteInstance, kx, ky) -> ExactMetrics:
    """Population metrics of a discrete instance by exact double sums."""
    PX, PY, wP = inst.joint("p")
    QX, QY, wQ = inst.joint("q")

    # joint discrepancy under the product kernel
    Kpp = kx(PX, PX) * ky(PY, PY)
    Kpq = kx(PX, QX) * ky(PY, QY)
    Kqq = kx(QX, QX) * ky(QY, QY)
    e_pp = _weighted_quad(wP, Kpp, wP)
    e_pq = _weighted_quad(wP, Kpq, wQ)
    e_qq = _weighted_quad(wQ, Kqq, wQ)
    jmmd2 = e_pp - 2.0 * e_pq + e_qq
    c1 = e_pp

    # marginal-output discrepancy
    Mpp = ky(PY, PY)
    Mpq = ky(PY, QY)
    Mqq = ky(QY, QY)
    mmd2_marg = _weighted_quad(wP, Mpp, wP) - 2.0 * _weighted_quad(wP, Mpq, wQ) \
        + _weighted_quad(wQ, Mqq, wQ)

    # averaged conditional discrepancy and its model-free constant
    per_x_mmd2, per_x_c0 = [], []
    for i in range(inst.xs.shape[0]):
        Yp, wp = inst.p_supports[i], inst.p_probs[i]
        Yq, wq = inst.q_supports[i], inst.q_probs[i]
        a_pp = _weighted_quad(wp, ky(Yp, Yp), wp)
        a_pq = _weighted_quad(wp, ky(Yp, Yq), wq)
        a_qq = _weighted_quad(wq, ky(Yq, Yq), wq)
        per_x_mmd2.append(a_pp - 2.0 * a_pq + a_qq)
        per_x_c0.append(a_pp)
    ammd2 = math.fsum(p * v for p, v in zip(inst.px, per_x_mmd2))
    c0 = math.fsum(p * v for p, v in zip(inst.px, per_x_c0))

    diag_k1 = np.array([kx(inst.xs[i][None, :], inst.xs[i][None, :])[0, 0]
                        for i in range(inst.xs.shape[0])])
    e_k1xx = math.fsum(inst.px * diag_k1)
    return ExactMetrics(mmd2_marg, jmmd2, ammd2, c0, c1, e_k1xx)


def marginal_output_kernel_expectation(inst: DiscreteInstance, ky, side: str = "p") -> float:
    """E[ky(Y1, Y2)] for two *unconditionally* independent outputs of one side.

    Differs in general from the conditional constant returned as ``c0`` by
    :func:`exact_metrics`: there the two outputs share the same input.
    """
    _, YS, w = inst.joint(side)
    return _weighted_quad(w, ky(YS, YS), w)


# ---------------------------------------------------------------------------
# estimator moments by exhaustive enumeration


@dataclass(frozen=True)
class Moments:
    mean: float
    variance: float


def _guard_tuples(count: int) -> None:
    if count > _MAX_TUPLES:
        raise ValueError(f"enumeration would visit {count} tuples, above the {_MAX_TUPLES} bound")


def _moments_from_terms(weights, values, scale_var: float = 1.0) -> Moments:
    mean = math.fsum(w * v for w, v in zip(weights, values))
    second = math.fsum(w * v * v for w, v in zip(weights, values))
    return Moments(mean, (second - mean * mean) * scale_var)


def estimator_moments(inst: DiscreteInstance, which: str, n: int, m: int, r: int,
                      kx=None, ky=None) -> Moments:
    """Exact mean and variance of an estimator over all sample tuples.

    ``which`` selects the estimator: ``"mmd"`` (n data outputs vs m generated
    outputs, both marginal), ``"jmmd"`` (r joint data pairs vs m generated
    pairs), or ``"ammd"`` (n groups, r observed and m generated outputs per
    group, outputs drawn conditionally i.i.d. given the group input). Every
    enumerated tuple is fed to the real estimator implementation.
    """
    if which == "mmd":
        _, PY, wP = inst.joint("p")
        _, QY, wQ = inst.joint("q")
        _guard_tuples(len(wP) ** n * len(wQ) ** m)
        weights, values = [], []
        for di in itertools.product(range(len(wP)), repeat=n):
            wp = math.prod(wP[i] for i in di)
            Y = PY[list(di)]
            for gi in itertools.product(range(len(wQ)), repeat=m):
                w = wp * math.prod(wQ[j] for j in gi)
                weights.append(w)
                values.append(estimators.mmd2_unbiased(ky, Y, QY[list(gi)]))
        return _moments_from_terms(weights, values)

    if which == "jmmd":
        PX, PY, wP = inst.joint("p")
        QX, QY, wQ = inst.joint("q")
        _guard_tuples(len(wP) ** r * len(wQ) ** m)
        xi = np.zeros((m, 1))
        weights, values = [], []
        for di in itertools.product(range(len(wP)), repeat=r):
            wp = math.prod(wP[i] for i in di)
            data = Batch(PX[list(di)], PY[list(di)])
            for gi in itertools.product(range(len(wQ)), repeat=m):
                w = wp * math.prod(wQ[j] for j in gi)
                gen = GenBatch(QX[list(gi)], xi, QY[list(gi)])
                weights.append(w)
                values.append(estimators.jmmd_hat(kx, ky, data, gen, with_grad=False).value)
        return _moments_from_terms(weights, values)

    if which == "ammd":
        if n < 1:
            raise ValueError("ammd needs n >= 1 groups")
        counts = [inst.p_supports[i].shape[0] ** r * inst.q_supports[i].shape[0] ** m
                  for i in range(inst.xs.shape[0])]
        _guard_tuples(sum(counts))
        # groups are i.i.d., so enumerate one group exactly; the n-group
        # average then has the same mean and 1/n of the variance
        weights, values = [], []
        for i in range(inst.xs.shape[0]):
            Yp, wp = inst.p_supports[i], inst.p_probs[i]
            Yq, wq = inst.q_supports[i], inst.q_probs[i]
            x_row = inst.xs[i][None, :]
            for di in itertools.product(range(len(wp)), repeat=r):
                w1 = inst.px[i] * math.prod(wp[l] for l in di)
                ys = Yp[list(di)][None, :, :]
                for gi in itertools.product(range(len(wq)), repeat=m):
                    w = w1 * math.prod(wq[j] for j in gi)
                    grouped = GroupedBatch(x_row, ys, Yq[list(gi)][None, :, :])
                    weights.append(w)
                    values.append(estimators.ammd_hat(ky, grouped, with_grad=False).value)
        return _moments_from_terms(weights, values, scale_var=1.0 / n)

    raise ValueError(f"unknown estimator {which!r}")


# ---------------------------------------------------------------------------
# closed-form variances


def _variance_terms(Kpq: Array, Kqq: Array, wP: Array, wQ: Array, m: int, r: int) -> float:
    """Shared structural variance formula given cross and generated Grams.

    The nine expectation terms pair up kernel evaluations that share zero,
    one, or two sample indices; their coefficients follow from expanding the
    estimator's second moment against its squared mean.
    """
    if m < 2:
        raise ValueError("variance formula needs m >= 2")
    if r < 1:
        raise ValueError("variance formula needs r >= 1")
    col = wP @ Kpq                 # E over data of the cross kernel, per generated point
    row = Kpq @ wQ                 # E over generated, per data point
    gen = Kqq @ wQ
    e_pq = _fsum(wQ * col)
    e_qq = _fsum(wQ * gen)
    t1 = _weighted_quad(wP, Kpq * Kpq, wQ)
    t2 = _fsum(wQ * col * col)
    t3 = _fsum(wP * row * row)
    t4 = e_pq * e_pq
    t5 = _weighted_quad(wQ, Kqq * Kqq, wQ)
    t6 = _fsum(wQ * gen * gen)
    t7 = e_qq * e_qq
    t8 = _fsum(wQ * gen * col)
    t9 = e_qq * e_pq
    return (4.0 / (m * r)) * (t1 + (r - 1) * t2 + (m - 1) * t3 + (1 - m - r) * t4) \
        + (1.0 / (m * (m - 1))) * (2.0 * t5 + 4.0 * (m - 2) * t6 + (6.0 - 4.0 * m) * t7) \
        - (4.0 / (m * r)) * (2.0 * r * t8 - 2.0 * r * t9)


def closed_form_variance_jmmd(inst: DiscreteInstance, m: int, r: int, kx, ky) -> float:
    """Explicit variance of the joint-discrepancy estimator.

    Each expectation term in the formula is computed by exact enumeration
    over the instance's joint supports.
    """
    PX, PY, wP = inst.joint("p")
    QX, QY, wQ = inst.joint("q")
    Kpq = kx(PX, QX) * ky(PY, QY)
    Kqq = kx(QX, QX) * ky(QY, QY)
    return _variance_terms(Kpq, Kqq, wP, wQ, m, r)


@dataclass(frozen=True)
class AmmdVariance:
    variance: float
    k0: float


def closed_form_variance_ammd(inst: DiscreteInstance, n: int, m: int, r: int, ky) -> AmmdVariance:
    """Explicit variance of the averaged conditional estimator.

    By the law of total variance the result splits into the expected
    conditional variance of a single group plus the across-input variance of
    the conditional mean (the floor ``k0`` that no per-group sample size can
    remove), both divided by the number of groups.
    """
    if n < 1:
        raise ValueError("need n >= 1 groups")
    cond_vars, cond_means = [], []
    for i in range(inst.xs.shape[0]):
        Yp, wp = inst.p_supports[i], inst.p_probs[i]
        Yq, wq = inst.q_supports[i], inst.q_probs[i]
        Kpq = ky(Yp, Yq)
        Kqq = ky(Yq, Yq)
        cond_vars.append(_variance_terms(Kpq, Kqq, wp, wq, m, r))
        a = _weighted_quad(wp, Kpq, wq)
        b = _weighted_quad(wq, Kqq, wq)
        cond_means.append(-2.0 * a + b)
    e_cond_var = math.fsum(p * v for p, v in zip(inst.px, cond_vars))
    mean_of_means = math.fsum(p * g for p, g in zip(inst.px, cond_means))
    second = math.fsum(p * g * g for p, g in zip(inst.px, cond_means))
    k0 = second - mean_of_means * mean_of_means
    return AmmdVariance(variance=(e_cond_var + k0) / n, k0=k0)


# ---------------------------------------------------------------------------
# operator-form conditional-embedding reference (identity feature maps)


def finite_feature_cmmd(data_xs, data_ys, gen_xs, gen_yhats, lam: float) -> float:
    """Conditional-embedding discrepancy with literal finite feature maps.

    Uses linear kernels, i.e. identity feature maps, so the ridge-estimated
    conditional operators are explicit (dy, dx) matrices

        C = Y^T (X X^T + lam * s * I)^-1 X        (rows of X, Y are samples)

    and the result is the squared Frobenius norm of their difference. This is
    the independent reference the Gram-trace expansion is checked against.
    """
    if lam <= 0:
        raise ValueError(f"ridge lambda must be positive, got {lam}")

    def operator(X: Array, Y: Array) -> Array:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        s = X.shape[0]
        K = X @ X.T
        try:
            inv_applied = np.linalg.solve(K + lam * s * np.eye(s), X)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"ridge solve failed: {exc}") from exc
        return Y.T @ inv_applied

    diff = operator(data_xs, data_ys) - operator(gen_xs, gen_yhats)
    return _fsum(diff * diff)


# ---------------------------------------------------------------------------
# metric inequality check


@dataclass(frozen=True)
class BoundCheck:
    holds: bool
    slack: float


def check_metric_inequalities(inst: DiscreteInstance, kx, ky) -> BoundCheck:
    """Check jmmd2 <= E[kx(x,x)] * ammd2 on an instance (1e-12 tolerance).

    The slack is the right side minus the left; it is zero when the input is
    degenerate (single support point with kx(x,x) = 1), where the joint and
    averaged metrics coincide.
    """
    ex = exact_metrics(inst, kx, ky)
    slack = ex.e_k1xx * ex.ammd2 - ex.jmmd2
    return BoundCheck(holds=slack >= -1e-12, slack=slack)


# ---------------------------------------------------------------------------
# instance constructors used by tests and the verification battery


def random_instance(rng: np.random.Generator, n_x: int = 2, max_y: int = 2,
                    dx: int = 1, dy: int = 1, matched: bool = False) -> DiscreteInstance:
    """A random small instance; ``matched=True`` makes Q identical to P."""

    def rand_probs(k: int) -> Array:
        u = rng.random(k) + 0.1
        return u / u.sum()

    xs = rng.standard_normal((n_x, dx))
    px = rand_probs(n_x)
    p_supports, p_probs, q_supports, q_probs = [], [], [], []
    for _ in range(n_x):
        kp = int(rng.integers(1, max_y + 1))
        p_supports.append(rng.standard_normal((kp, dy)))
        p_probs.append(rand_probs(kp))
        if matched:
            q_supports.append(p_supports[-1].copy())
            q_probs.append(p_probs[-1].copy())
        else:
            kq = int(rng.integers(1, max_y + 1))
            q_supports.append(rng.standard_normal((kq, dy)))
            q_probs.append(rand_probs(kq))
    return DiscreteInstance(xs, px, tuple(p_supports), tuple(p_probs),
                            tuple(q_supports), tuple(q_probs))


def two_point_instance() -> DiscreteInstance:
    """Degenerate input, data outputs uniform on {-1, +1}, generator at 0."""
    return DiscreteInstance(
        xs=np.zeros((1, 1)),
        px=np.array([1.0]),
        p_supports=(np.array([[-1.0], [1.0]]),),
        p_probs=(np.array([0.5, 0.5]),),
        q_supports=(np.array([[0.0]]),),
        q_probs=(np.array([1.0]),),
    )


def point_mass_instance() -> DiscreteInstance:
    """P = Q = a single joint point; every discrepancy is exactly zero."""
    return DiscreteInstance(
        xs=np.zeros((1, 1)),
        px=np.array([1.0]),
        p_supports=(np.zeros((1, 1)),),
        p_probs=(np.array([1.0]),),
        q_supports=(np.zeros((1, 1)),),
        q_probs=(np.array([1.0]),),
    )
