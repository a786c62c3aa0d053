"""Kernels on the input space, output space, and their product.

All kernels operate on dense float64 row vectors. Calling a kernel with two
2-D sample arrays ``A`` (n, d) and ``B`` (m, d) returns the (n, m) Gram
matrix of pairwise evaluations. Kernel objects are immutable after
construction, so they are safe to share across threads.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def _as_points(a, name: str) -> Array:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a (n, d) array, got shape {a.shape}")
    return a


def _check_same_dim(A: Array, B: Array) -> None:
    if A.shape[1] != B.shape[1]:
        raise ValueError(
            f"point dimension mismatch: {A.shape[1]} vs {B.shape[1]}"
        )


def _sq_dists(A: Array, B: Array) -> Array:
    # ||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b, clipped against roundoff
    a2 = np.sum(A * A, axis=1)[:, None]
    b2 = np.sum(B * B, axis=1)[None, :]
    d = a2 + b2 - 2.0 * (A @ B.T)
    return np.maximum(d, 0.0)


class GaussianKernel:
    r"""Gaussian kernel  k(a, b) = exp(-||a - b||^2 / (2 * bandwidth_sq)).

    ``bandwidth_sq`` is the squared length scale; the default of 1.0 is the
    standard choice for z-normalized data. Values satisfy k(a, a) = 1 and
    0 < k(a, b) <= 1.
    """

    def __init__(self, bandwidth_sq: float = 1.0):
        bandwidth_sq = float(bandwidth_sq)
        if not bandwidth_sq > 0:
            raise ValueError(f"bandwidth_sq must be positive, got {bandwidth_sq}")
        self.bandwidth_sq = bandwidth_sq

    def __call__(self, A, B) -> Array:
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        return np.exp(-_sq_dists(A, B) / (2.0 * self.bandwidth_sq))

    def pair(self, a, b) -> float:
        """Evaluate the kernel on a single pair of points."""
        return float(self(np.atleast_1d(a)[None, :] if np.ndim(a) <= 1 else a,
                          np.atleast_1d(b)[None, :] if np.ndim(b) <= 1 else b)[0, 0])

    def grad_second(self, A, B) -> Array:
        """Gradients d k(a_i, b_j) / d b_j, returned as a (n, m, d) array."""
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        K = self(A, B)
        diff = A[:, None, :] - B[None, :, :]
        return K[:, :, None] * diff / self.bandwidth_sq

    def __repr__(self):
        return f"GaussianKernel(bandwidth_sq={self.bandwidth_sq})"


class LinearKernel:
    """Dot-product kernel k(a, b) = a . b; its feature map is the identity.

    Used where an explicit finite-dimensional feature map is wanted, e.g. to
    cross-check Gram-based computations against direct operator arithmetic.
    """

    def __call__(self, A, B) -> Array:
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        return A @ B.T

    def pair(self, a, b) -> float:
        return float(np.dot(np.asarray(a, dtype=float).ravel(),
                            np.asarray(b, dtype=float).ravel()))

    def grad_second(self, A, B) -> Array:
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        return np.broadcast_to(A[:, None, :], (A.shape[0], B.shape[0], A.shape[1])).copy()

    def __repr__(self):
        return "LinearKernel()"


class TensorKernel:
    r"""Product kernel on joint points  k((x1,y1), (x2,y2)) = kx(x1,x2) * ky(y1,y2).

    Joint points are stored as concatenated vectors [x ; y]; ``x_dim`` says
    where to split. ``gram_pairs`` avoids the concatenation when the x and y
    blocks are already separate.
    """

    def __init__(self, kx, ky, x_dim: int):
        if x_dim < 1:
            raise ValueError("x_dim must be >= 1")
        self.kx = kx
        self.ky = ky
        self.x_dim = int(x_dim)

    def _split(self, A: Array):
        if A.shape[1] <= self.x_dim:
            raise ValueError(
                f"joint points need dimension > x_dim={self.x_dim}, got {A.shape[1]}"
            )
        return A[:, : self.x_dim], A[:, self.x_dim:]

    def __call__(self, A, B) -> Array:
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        ax, ay = self._split(A)
        bx, by = self._split(B)
        return self.gram_pairs(ax, ay, bx, by)

    def gram_pairs(self, AX, AY, BX, BY) -> Array:
        return self.kx(AX, BX) * self.ky(AY, BY)

    def pair(self, a, b) -> float:
        return float(self(np.asarray(a, dtype=float)[None, :],
                          np.asarray(b, dtype=float)[None, :])[0, 0])

    def __repr__(self):
        return f"TensorKernel(kx={self.kx!r}, ky={self.ky!r}, x_dim={self.x_dim})"


class ProjectionEncoder:
    """Fixed random linear projection followed by tanh.

    A deterministic, seeded stand-in for a trained feature encoder; exposes
    the Jacobian needed to differentiate deep-kernel losses.
    """

    def __init__(self, in_dim: int, code_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.in_dim = int(in_dim)
        self.code_dim = int(code_dim)
        self.weight = rng.standard_normal((in_dim, code_dim)) / np.sqrt(in_dim)

    def __call__(self, Y) -> Array:
        Y = _as_points(Y, "Y")
        if Y.shape[1] != self.in_dim:
            raise ValueError(f"encoder expects dimension {self.in_dim}, got {Y.shape[1]}")
        return np.tanh(Y @ self.weight)

    def jacobian(self, y) -> Array:
        """d encode(y) / d y as a (code_dim, in_dim) matrix."""
        c = self(np.asarray(y, dtype=float)[None, :])[0]
        return (1.0 - c * c)[:, None] * self.weight.T


class DeepKernel:
    r"""Feature-aware kernel on the output space.

    k(y1, y2) = ((1 - eps0) * kappa1(enc(y1), enc(y2)) + eps0) * kappa2(y1, y2)

    ``kappa1`` acts on the encoder's code space, ``kappa2`` on the raw
    space, and eps0 in (0, 1) keeps the kernel characteristic regardless of
    the encoder. Values lie in (0, 1] with k(y, y) = 1, and are bounded by
    eps0 * kappa2 <= k <= kappa2.
    """

    def __init__(self, encoder, kappa1: GaussianKernel, kappa2: GaussianKernel,
                 epsilon0: float = 0.1):
        epsilon0 = float(epsilon0)
        if not 0.0 < epsilon0 < 1.0:
            raise ValueError(f"epsilon0 must lie in (0, 1), got {epsilon0}")
        self.encoder = encoder
        self.kappa1 = kappa1
        self.kappa2 = kappa2
        self.epsilon0 = epsilon0

    def __call__(self, A, B) -> Array:
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        eps = self.epsilon0
        code = (1.0 - eps) * self.kappa1(self.encoder(A), self.encoder(B)) + eps
        return code * self.kappa2(A, B)

    def pair(self, a, b) -> float:
        return float(self(np.asarray(a, dtype=float)[None, :],
                          np.asarray(b, dtype=float)[None, :])[0, 0])

    def grad_second(self, A, B) -> Array:
        """Gradients d k(a_i, b_j) / d b_j as (n, m, d); needs encoder.jacobian."""
        jac = getattr(self.encoder, "jacobian", None)
        if jac is None:
            raise ValueError("deep-kernel gradients need an encoder with a .jacobian method")
        A = _as_points(A, "A")
        B = _as_points(B, "B")
        _check_same_dim(A, B)
        eps = self.epsilon0
        CA, CB = self.encoder(A), self.encoder(B)
        K1 = self.kappa1(CA, CB)
        K2 = self.kappa2(A, B)
        # code-space gradient wrt the code of b_j, then chain through the encoder
        code_diff = CA[:, None, :] - CB[None, :, :]
        dK1_dcode = K1[:, :, None] * code_diff / self.kappa1.bandwidth_sq
        jacs = np.stack([jac(b) for b in B])  # (m, code, d)
        dK1 = np.einsum("nmc,mcd->nmd", dK1_dcode, jacs)
        dK2 = self.kappa2.grad_second(A, B)
        return (1.0 - eps) * dK1 * K2[:, :, None] + \
            ((1.0 - eps) * K1 + eps)[:, :, None] * dK2

    def __repr__(self):
        return (f"DeepKernel(epsilon0={self.epsilon0}, kappa1={self.kappa1!r}, "
                f"kappa2={self.kappa2!r})")


def gram(kernel, A, B) -> Array:
    """Gram matrix of pairwise kernel values, entry (i, j) = k(A[i], B[j])."""
    return kernel(A, B)


def median_heuristic(samples) -> float:
    """Median of pairwise squared distances over distinct sample pairs.

    Raises if fewer than two samples are given or the median is zero (all,
    or a majority of, samples identical), since a zero bandwidth is not a
    valid kernel parameter.
    """
    S = _as_points(samples, "samples")
    n = S.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least 2 samples")
    d = _sq_dists(S, S)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(d[iu]))
    if med <= 0.0:
        raise ValueError("median pairwise distance is zero; samples are (mostly) identical")
    return med


def kernel_from_config(cfg: dict, samples=None):
    """Build a kernel from its JSON configuration.

    ``bandwidth_sq`` may be a positive number or the string ``"median"``, in
    which case ``samples`` must be provided to resolve the bandwidth.
    Supported types: ``gaussian``, ``deep``, and ``tensor`` (with nested
    ``x``/``y`` configs plus ``x_dim``).
    """
    ktype = cfg.get("type", "gaussian")

    def resolve_bw(value):
        if value == "median":
            if samples is None:
                raise ValueError('bandwidth_sq "median" needs fit samples')
            return median_heuristic(samples)
        return float(value)

    if ktype == "gaussian":
        return GaussianKernel(resolve_bw(cfg.get("bandwidth_sq", 1.0)))
    if ktype == "deep":
        in_dim = int(cfg["in_dim"])
        code_dim = int(cfg.get("code_dim", 8))
        enc = ProjectionEncoder(in_dim, code_dim, seed=int(cfg.get("encoder_seed", 0)))
        kappa1 = GaussianKernel(float(cfg.get("code_bandwidth_sq", 1.0)))
        kappa2 = GaussianKernel(resolve_bw(cfg.get("bandwidth_sq", 1.0)))
        return DeepKernel(enc, kappa1, kappa2, epsilon0=float(cfg.get("epsilon0", 0.1)))
    if ktype == "tensor":
        kx = kernel_from_config(cfg["x"], samples=None)
        ky = kernel_from_config(cfg["y"], samples=None)
        return TensorKernel(kx, ky, x_dim=int(cfg["x_dim"]))
    raise ValueError(f"unknown kernel type {ktype!r}")
