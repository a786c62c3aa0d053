"""Unbiased Monte-Carlo estimators of kernel discrepancies.

Three families are implemented, all returning plain floats plus (where a
training loss needs them) gradients with respect to the generated samples:

* ``mmd2_unbiased``  - the classical unbiased squared-MMD estimator between
  two unconditional samples.
* ``jmmd_hat`` / ``c1_hat`` - the joint-distribution discrepancy estimator
  under a product kernel kx*ky and the model-free constant it omits.
* ``ammd_hat`` / ``c0_hat`` - the per-input conditional discrepancy averaged
  over inputs, for grouped samples, and its model-free constant.
* ``cmmd_hat`` - the ridge-regularized conditional-embedding discrepancy
  (baseline), via its Gram-matrix trace expansion.

All sums are accumulated with ``math.fsum``, so estimator values are exactly
invariant under permuting the data rows or the generated rows, and
reproducible regardless of accumulation chunking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericError
from .kernels import GaussianKernel

Array = np.ndarray


# ---------------------------------------------------------------------------
# sample containers


def _as_matrix(a, name: str) -> Array:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (count, dim) array, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Batch:
    """Joint (x, y) sample pairs, row i holding the i-th pair."""

    xs: Array
    ys: Array

    def __post_init__(self):
        object.__setattr__(self, "xs", _as_matrix(self.xs, "xs"))
        object.__setattr__(self, "ys", _as_matrix(self.ys, "ys"))
        if self.xs.shape[0] != self.ys.shape[0]:
            raise ValueError("xs and ys must hold the same number of rows")
        if self.xs.shape[0] < 1:
            raise ValueError("batch must hold at least one pair")

    @property
    def size(self) -> int:
        return self.xs.shape[0]


@dataclass(frozen=True)
class GenBatch:
    """Generated samples: conditioning inputs, noise draws, and outputs."""

    xs: Array
    xis: Array
    yhats: Array

    def __post_init__(self):
        object.__setattr__(self, "xs", _as_matrix(self.xs, "xs"))
        object.__setattr__(self, "xis", _as_matrix(self.xis, "xis"))
        object.__setattr__(self, "yhats", _as_matrix(self.yhats, "yhats"))
        if not (self.xs.shape[0] == self.xis.shape[0] == self.yhats.shape[0]):
            raise ValueError("xs, xis and yhats must hold the same number of rows")

    @property
    def size(self) -> int:
        return self.xs.shape[0]


@dataclass(frozen=True)
class GroupedBatch:
    """Per-input groups: n inputs, r observed outputs and m generated outputs each.

    ``ys`` has shape (n, r, dy) and ``yhats`` (n, m, dy); the group counts r
    and m are constant across groups by construction.
    """

    xs: Array
    ys: Array
    yhats: Array

    def __post_init__(self):
        xs = _as_matrix(self.xs, "xs")
        ys = np.asarray(self.ys, dtype=float)
        yh = np.asarray(self.yhats, dtype=float)
        if ys.ndim != 3 or yh.ndim != 3:
            raise ValueError("ys and yhats must be 3-D (groups, per-group, dim) arrays; "
                             "groups with unequal sizes are not valid here")
        if not (xs.shape[0] == ys.shape[0] == yh.shape[0]):
            raise ValueError("xs, ys and yhats must agree on the number of groups")
        if ys.shape[2] != yh.shape[2]:
            raise ValueError("observed and generated outputs must share a dimension")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "yhats", yh)

    @property
    def n_groups(self) -> int:
        return self.xs.shape[0]

    @property
    def r(self) -> int:
        return self.ys.shape[1]

    @property
    def m(self) -> int:
        return self.yhats.shape[1]


@dataclass(frozen=True)
class EstimateWithGrad:
    """An estimator value with d(value)/d(generated output) alongside.

    ``grads`` mirrors the layout of the generated outputs that produced it:
    (m, dy) for flat generated batches, (n, m, dy) for grouped ones.
    """

    value: float
    grads: Array


# ---------------------------------------------------------------------------
# shared kernels-on-groups helpers


def _grouped_gram(ky, A: Array, B: Array) -> Array:
    """Per-group Gram tensor: out[i] = ky(A[i], B[i]); shapes (n,a,d),(n,b,d)->(n,a,b)."""
    if isinstance(ky, GaussianKernel):
        d = A[:, :, None, :] - B[:, None, :, :]
        sq = np.einsum("nabd,nabd->nab", d, d)
        return np.exp(-sq / (2.0 * ky.bandwidth_sq))
    return np.stack([ky(A[i], B[i]) for i in range(A.shape[0])])


def _grouped_grad_second(ky, A: Array, B: Array) -> Array:
    """Per-group d ky(a, b)/db tensor, shape (n, a, b, d)."""
    if isinstance(ky, GaussianKernel):
        diff = A[:, :, None, :] - B[:, None, :, :]
        K = np.exp(-np.einsum("nabd,nabd->nab", diff, diff) / (2.0 * ky.bandwidth_sq))
        return K[:, :, :, None] * diff / ky.bandwidth_sq
    return np.stack([ky.grad_second(A[i], B[i]) for i in range(A.shape[0])])


def _offdiag_sum(K: Array) -> float:
    """fsum of off-diagonal entries of a square matrix."""
    mask = ~np.eye(K.shape[0], dtype=bool)
    return math.fsum(K[mask])


# ---------------------------------------------------------------------------
# estimators


def mmd2_unbiased(ky, ys, yhats) -> float:
    """Unbiased estimator of the squared MMD between two output samples.

    Diagonal terms are excluded from both within-sample averages, so the
    expectation over sampling equals MMD^2 exactly; both samples need at
    least two points.
    """
    Y = _as_matrix(ys, "ys")
    Yh = _as_matrix(yhats, "yhats")
    n, m = Y.shape[0], Yh.shape[0]
    if n < 2 or m < 2:
        raise ValueError(f"mmd2_unbiased needs n >= 2 and m >= 2, got n={n}, m={m}")
    within_p = _offdiag_sum(ky(Y, Y)) / (n * (n - 1))
    within_q = _offdiag_sum(ky(Yh, Yh)) / (m * (m - 1))
    cross = math.fsum(ky(Y, Yh).ravel()) * 2.0 / (n * m)
    return within_p - cross + within_q


def jmmd_hat(kx, ky, data: Batch, gen: GenBatch, with_grad: bool = True) -> EstimateWithGrad:
    """Joint-discrepancy estimator on (x, y) pairs under the product kernel.

    value = -(2/(m r)) sum_{j,l} kx(x_l, xh_j) ky(y_l, yh_j)
            + (1/(m(m-1))) sum_{j != j'} kx(xh_j, xh_j') ky(yh_j, yh_j')

    Its expectation is the joint discrepancy minus the model-free constant
    estimated by :func:`c1_hat`. Gradients are taken with respect to the
    generated outputs only.
    """
    r, m = data.size, gen.size
    if m < 2:
        raise ValueError(f"jmmd_hat needs m >= 2 generated samples, got m={m}")
    K1c = kx(data.xs, gen.xs)            # (r, m)
    K2c = ky(data.ys, gen.yhats)         # (r, m)
    K1g = kx(gen.xs, gen.xs)             # (m, m)
    K2g = ky(gen.yhats, gen.yhats)
    cross = math.fsum((K1c * K2c).ravel()) * (-2.0) / (m * r)
    within = _offdiag_sum(K1g * K2g) / (m * (m - 1))
    value = cross + within
    if not with_grad:
        return EstimateWithGrad(value, None)
    GSc = ky.grad_second(data.ys, gen.yhats)       # (r, m, d)
    GSg = ky.grad_second(gen.yhats, gen.yhats)     # (m, m, d)
    off = (~np.eye(m, dtype=bool)).astype(float)
    grads = (-2.0 / (m * r)) * np.einsum("rm,rmd->md", K1c, GSc) \
        + (2.0 / (m * (m - 1))) * np.einsum("jm,jm,jmd->md", K1g, off, GSg)
    return EstimateWithGrad(value, grads)


def ammd_hat(ky, grouped: GroupedBatch, with_grad: bool = True) -> EstimateWithGrad:
    """Averaged per-input conditional discrepancy estimator on grouped samples.

    For each group the classical cross and within-generated terms are formed
    from that group's observed and generated outputs alone; the group values
    are averaged. Expectation: averaged conditional discrepancy minus the
    model-free constant from :func:`c0_hat`.
    """
    n, r, m = grouped.n_groups, grouped.r, grouped.m
    if m < 2:
        raise ValueError(f"ammd_hat needs m >= 2 generated samples per group, got m={m}")
    K2c = _grouped_gram(ky, grouped.ys, grouped.yhats)        # (n, r, m)
    K2g = _grouped_gram(ky, grouped.yhats, grouped.yhats)     # (n, m, m)
    cross = math.fsum(K2c.ravel()) * (-2.0) / (n * m * r)
    offmask = ~np.eye(m, dtype=bool)
    within = math.fsum(K2g[:, offmask].ravel()) / (n * m * (m - 1))
    value = cross + within
    if not with_grad:
        return EstimateWithGrad(value, None)
    GSc = _grouped_grad_second(ky, grouped.ys, grouped.yhats)      # (n, r, m, d)
    GSg = _grouped_grad_second(ky, grouped.yhats, grouped.yhats)   # (n, m, m, d)
    off = offmask.astype(float)
    grads = (-2.0 / (n * m * r)) * GSc.sum(axis=1) \
        + (2.0 / (n * m * (m - 1))) * np.einsum("jm,njmd->nmd", off, GSg)
    return EstimateWithGrad(value, grads)


def c0_hat(ky, grouped: GroupedBatch) -> float:
    """Estimate the model-free constant of the averaged conditional estimator.

    (1/n) sum_i (1/(r(r-1))) sum_{l != l'} ky(y_{i,l}, y_{i,l'}); needs at
    least two observed outputs per group.
    """
    n, r = grouped.n_groups, grouped.r
    if r < 2:
        raise ValueError("c0_hat needs r >= 2 observed outputs per group; "
                         "single-output data cannot estimate this constant")
    K = _grouped_gram(ky, grouped.ys, grouped.ys)   # (n, r, r)
    offmask = ~np.eye(r, dtype=bool)
    return math.fsum(K[:, offmask].ravel()) / (n * r * (r - 1))


def c1_hat(kx, ky, data: Batch) -> float:
    """Estimate the model-free constant of the joint estimator.

    (1/(r(r-1))) sum_{l != l'} kx(x_l, x_l') ky(y_l, y_l') over the data pairs.
    """
    r = data.size
    if r < 2:
        raise ValueError(f"c1_hat needs at least 2 data pairs, got {r}")
    K = kx(data.xs, data.xs) * ky(data.ys, data.ys)
    return _offdiag_sum(K) / (r * (r - 1))


# ---------------------------------------------------------------------------
# ridge-regularized conditional-embedding discrepancy (baseline)


def _ridge_inverse(K: Array, lam_scaled: float) -> Array:
    """(K + lam_scaled I)^-1 via an SPD Cholesky factorization."""
    n = K.shape[0]
    try:
        c, low = scipy.linalg.cho_factor(K + lam_scaled * np.eye(n), lower=True)
        return scipy.linalg.cho_solve((c, low), np.eye(n))
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(f"ridge system is not SPD (lambda*s = {lam_scaled}): {exc}") from exc


def _cmmd_core(kx, ky, data: Batch, gen: GenBatch, lam: float):
    if lam <= 0:
        raise ValueError(f"ridge lambda must be positive, got {lam}")
    n, m = data.size, gen.size
    K1dd = kx(data.xs, data.xs)
    K1gg = kx(gen.xs, gen.xs)
    K1dg = kx(data.xs, gen.xs)
    K2dd = ky(data.ys, data.ys)
    K2gg = ky(gen.yhats, gen.yhats)
    K2dg = ky(data.ys, gen.yhats)
    # ridge scale follows the sample count of each side
    Ap = _ridge_inverse(K1dd, lam * n)
    Aq = _ridge_inverse(K1gg, lam * m)
    t_dd = float(np.trace(Ap @ K2dd @ Ap @ K1dd))
    t_dg = float(np.trace(Ap @ K2dg @ Aq @ K1dg.T))
    t_gg = float(np.trace(Aq @ K2gg @ Aq @ K1gg))
    value = t_dd - 2.0 * t_dg + t_gg
    if value < -1e-8:
        raise NumericError(f"conditional-embedding discrepancy came out negative: {value}")
    return max(value, 0.0), (Ap, Aq, K1dg, K1gg)


def cmmd_hat(kx, ky, data: Batch, gen: GenBatch, lam: float = 0.01) -> float:
    """Squared Hilbert-Schmidt distance between ridge-estimated conditional
    embedding operators, computed through its Gram-trace expansion.

    With Ap = (K1_dd + lam*n I)^-1 and Aq = (K1_gg + lam*m I)^-1:

        tr(Ap K2_dd Ap K1_dd) - 2 tr(Ap K2_dg Aq K1_gd) + tr(Aq K2_gg Aq K1_gg)
    """
    value, _ = _cmmd_core(kx, ky, data, gen, lam)
    return value


def cmmd_hat_with_grad(kx, ky, data: Batch, gen: GenBatch, lam: float = 0.01) -> EstimateWithGrad:
    """Like :func:`cmmd_hat` but with gradients wrt the generated outputs."""
    value, (Ap, Aq, K1dg, K1gg) = _cmmd_core(kx, ky, data, gen, lam)
    M = Ap @ K1dg @ Aq                  # (n, m): d value / d K2_dg is -2 M
    N = Aq @ K1gg @ Aq                  # (m, m), symmetric
    GSc = ky.grad_second(data.ys, gen.yhats)     # (n, m, d)
    GSg = ky.grad_second(gen.yhats, gen.yhats)   # (m, m, d)
    m = gen.size
    off = (~np.eye(m, dtype=bool)).astype(float)
    grads = -2.0 * np.einsum("nm,nmd->md", M, GSc) \
        + 2.0 * np.einsum("jm,jm,jmd->md", N, off, GSg)
    return EstimateWithGrad(value, grads)


# ---------------------------------------------------------------------------
# sample-size guidance


@dataclass(frozen=True)
class SampleSizes:
    n: int
    m: int
    r: int


def recommend_sizes(estimator: str, budget: int) -> SampleSizes:
    """Variance-optimal sample sizes under a fixed evaluation budget.

    For the averaged conditional estimator with unconstrained n, the variance
    shrinks fastest by growing the number of inputs while keeping the
    per-input counts minimal (m=2, r=1). For the joint estimator the variance
    scales with 1/min(m, r), so the budget is split evenly, m = r = floor(sqrt(budget)).
    """
    if budget < 4:
        raise ValueError(f"budget must be at least 4, got {budget}")
    if estimator == "ammd":
        return SampleSizes(n=budget // 3, m=2, r=1)
    if estimator == "jmmd":
        k = math.isqrt(budget)
        return SampleSizes(n=1, m=k, r=k)
    raise ValueError(f"unknown estimator {estimator!r}; expected 'ammd' or 'jmmd'")
