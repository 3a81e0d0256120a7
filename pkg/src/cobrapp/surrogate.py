"""RBF interpolants with a low-degree polynomial tail, and the 11-member pool.

A model evaluates ``s(x) = sum_k lam_k phi(|x - c_k| / sigma) + p(x)`` where
``p`` is a constant or affine tail. Weights come from the augmented system::

    [Phi + ridge*I   P] [lam ]   [y]
    [P^T             0] [beta] = [0]
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from scipy.linalg import lapack
from scipy.spatial.distance import cdist, pdist, squareform

CUBIC = "cubic"
MULTIQUADRIC = "multiquadric"
GAUSSIAN = "gaussian"
WIDTH_FACTORS = (0.01, 0.2, 0.5, 1.0, 5.0)

RCOND_MIN = 1e-16
COND_EXACT = 1e12  # plain interpolation accepted below this condition estimate
RIDGE_GROWTH = 100.0
RIDGE_RETRIES = 3
LOO_WINDOW = 20
REFINE_STEPS = 4


class FitError(RuntimeError):
    """The interpolation system stayed singular after ridge escalation."""

    def __init__(self, message, condition=np.inf, ridge=np.nan, kernel_index=None):
        super().__init__(message)
        self.condition = condition
        self.ridge = ridge
        self.kernel_index = kernel_index


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in (CUBIC, MULTIQUADRIC, GAUSSIAN):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not self.width > 0:
            raise ValueError("width factor must be positive")

    def __str__(self) -> str:
        if self.kind == CUBIC:
            return "cubic"
        return f"{self.kind}(w={self.width:g})"

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == CUBIC:
            return r * r * r
        s = r / self.width
        if self.kind == MULTIQUADRIC:
            return np.sqrt(1.0 + s * s)
        return np.exp(-(s * s))


POOL: Tuple[KernelSpec, ...] = (
    (KernelSpec(CUBIC),)
    + tuple(KernelSpec(MULTIQUADRIC, w) for w in WIDTH_FACTORS)
    + tuple(KernelSpec(GAUSSIAN, w) for w in WIDTH_FACTORS)
)
POOL_SIZE = len(POOL)


def kernel_value(kernel: KernelSpec, r):
    """phi(r) for a scaled distance ``r >= 0``."""
    if np.any(np.asarray(r) < 0):
        raise ValueError("kernel argument must be non-negative")
    out = kernel(r)
    return float(out) if np.ndim(out) == 0 else out


def _sigma_from_distances(d: np.ndarray) -> float:
    if d.size == 0:
        return 1.0
    return max(float(np.median(d)), 1e-12)


def compute_sigma(centers) -> float:
    """Median pairwise distance among the centers (1.0 for a single center)."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    return _sigma_from_distances(pdist(centers))


def tail_degree(n_samples: int, dim: int) -> int:
    """1 (affine) with enough samples, 0 (constant) otherwise, -1 for no tail."""
    if n_samples >= dim + 2:
        return 1
    if n_samples >= 2:
        return 0
    return -1


def _tail_basis(X: np.ndarray, degree: int) -> np.ndarray:
    n = X.shape[0]
    if degree < 0:
        return np.zeros((n, 0))
    if degree == 0:
        return np.ones((n, 1))
    return np.hstack([np.ones((n, 1)), X])


def _base_ridge(phi: np.ndarray) -> float:
    k = phi.shape[0]
    ridge = 1e-10 * np.trace(phi) / k
    if ridge <= 0.0:
        # the cubic kernel has a zero diagonal
        ridge = 1e-10 * float(np.max(np.abs(phi))) if phi.size else 0.0
    return float(ridge)


def _refine(A, k, ridge, s, lu, piv, rhs, precise: bool = True):
    """Solve with the equilibrated LU, then refine towards the ridge-free system.

    ``A`` is the unscaled matrix that was factorized (ridge included on the
    first ``k`` diagonal entries) and ``s`` its symmetric scaling. Residuals
    are taken against ``A`` minus the ridge, unscaled, so the LU only serves
    as a preconditioner. A step is kept only if it shrinks the residual:
    near-singular systems keep the regularized answer while well-posed ones
    interpolate to round-off. With ``precise`` the iterate and residual are
    held in extended precision, which lets solvable systems whose weights
    are ~1e11 times larger than the data still reproduce the data closely.
    """
    sc = s[:, None]
    z, _ = lapack.dgetrs(lu, piv, rhs * sc)
    z = z * sc
    if precise:
        z = z.astype(np.longdouble)
        A = A.astype(np.longdouble)
        rhs = rhs.astype(np.longdouble)

    def residual(v):
        r = rhs - A @ v
        if ridge:
            r[:k] += ridge * v[:k]
        return r

    r = residual(z)
    err = np.max(np.abs(r))
    for _ in range(REFINE_STEPS):
        if err == 0.0:
            break
        dz, _ = lapack.dgetrs(lu, piv, np.asarray(r, dtype=float) * sc)
        z_new = z + dz * sc
        r_new = residual(z_new)
        err_new = np.max(np.abs(r_new))
        if not err_new < 0.5 * err:
            break
        z, r, err = z_new, r_new, err_new
    return z


def _factor(phi, P, ridge):
    """Build, equilibrate and LU-factorize the augmented matrix.

    Returns (A, s, lu, piv, cond) with ``A`` unscaled and ``cond`` the
    1-norm condition estimate of the equilibrated matrix.
    """
    k, q = P.shape
    A = np.empty((k + q, k + q))
    A[:k, :k] = phi
    A[:k, :k].flat[:: k + 1] += ridge
    A[:k, k:] = P
    A[k:, :k] = P.T
    A[k:, k:] = 0.0
    row_max = np.max(np.abs(A), axis=1)
    row_max[row_max == 0.0] = 1.0
    s = 1.0 / np.sqrt(row_max)
    As = A * s[:, None] * s[None, :]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv, info = lapack.dgetrf(As)
    if info != 0:
        return A, s, lu, piv, np.inf
    anorm = np.max(np.sum(np.abs(As), axis=0))
    rcond, _ = lapack.dgecon(lu, anorm, norm="1")
    return A, s, lu, piv, (1.0 / rcond if rcond > 0 else np.inf)


def _solve(phi: np.ndarray, P: np.ndarray, Y: np.ndarray, ridge: Optional[float],
           precise: bool = True):
    """Solve the augmented system for every column of ``Y`` at once.

    The matrix is symmetrically equilibrated (unit max-abs rows) before the LU
    factorization; condition estimates refer to the scaled matrix. With
    ``ridge=None`` the plain interpolation system is tried first and kept when
    its condition estimate is below ``COND_EXACT``; otherwise the ridge
    schedule starts at 1e-10 * trace(Phi)/K. Returns (weights, ridge used,
    condition estimate of the ridge-free system, or of the explicit-ridge
    system when ``ridge`` is given).
    """
    k, q = P.shape
    rhs = np.vstack([Y, np.zeros((q, Y.shape[1]))])
    cond0 = None
    if ridge is None:
        A, s, lu, piv, cond0 = _factor(phi, P, 0.0)
        if cond0 < COND_EXACT:
            sol = _refine(A, k, 0.0, s, lu, piv, rhs, precise)
            if np.all(np.isfinite(sol)):
                return sol, 0.0, cond0
        ridge = _base_ridge(phi)
    ridge = float(ridge)
    cond = np.inf
    for attempt in range(RIDGE_RETRIES + 1):
        A, s, lu, piv, cond = _factor(phi, P, ridge)
        if cond <= 1.0 / RCOND_MIN:
            sol = _refine(A, k, ridge, s, lu, piv, rhs, precise)
            if np.all(np.isfinite(sol)):
                return sol, ridge, (cond if cond0 is None else cond0)
        if attempt < RIDGE_RETRIES:
            ridge = ridge * RIDGE_GROWTH if ridge > 0 else 1e-12
    raise FitError(
        f"RBF system singular after {RIDGE_RETRIES} ridge escalations "
        f"(condition estimate {cond:.3g}, ridge {ridge:.3g})",
        condition=cond,
        ridge=ridge,
    )


@dataclass(frozen=True, eq=False)
class RbfModel:
    kernel: KernelSpec
    centers: np.ndarray
    sigma: float
    rbf_weights: np.ndarray
    tail_degree: int
    tail_weights: np.ndarray
    ridge: float
    condition: float
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def fit_rbf(kernel: KernelSpec, X, y, ridge: Optional[float] = None,
            sigma: Optional[float] = None) -> RbfModel:
    """Interpolate ``y`` at ``X`` with the given kernel.

    ``ridge=None`` uses the default schedule (1e-10 * trace(Phi)/K, grown
    100x per failed solve, at most 3 times).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise ValueError("need at least one sample and matching X / y lengths")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    d = pdist(X)
    sig = _sigma_from_distances(d) if sigma is None else float(sigma)
    phi = kernel(squareform(d) / sig)
    deg = tail_degree(X.shape[0], X.shape[1])
    P = _tail_basis(X, deg)
    sol, used, cond = _solve(phi, P, y[:, None], ridge)
    k = X.shape[0]
    return RbfModel(kernel, X, sig, sol[:k, 0], deg, sol[k:, 0], used, cond, y)


def _evaluate(kernel, centers, sigma, degree, weights, X) -> np.ndarray:
    """Evaluate stacked weights (K+q, m) at points X (n, d) -> (n, m).

    Weights may be extended precision; the sums are then accumulated in that
    precision and rounded to double once at the end.
    """
    k = centers.shape[0]
    phi = kernel(cdist(X, centers) / sigma)
    out = phi @ weights[:k]
    if degree >= 0:
        out += weights[k]
    if degree >= 1:
        out += X @ weights[k + 1:]
    return np.asarray(out, dtype=float)


def predict(model: RbfModel, x):
    """Evaluate the interpolant at one point (returns float) or at rows of x."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    X = np.atleast_2d(arr)
    if X.shape[1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {X.shape[1]}")
    w = np.concatenate([model.rbf_weights, model.tail_weights])[:, None]
    out = _evaluate(model.kernel, model.centers, model.sigma, model.tail_degree, w, X)[:, 0]
    return float(out[0]) if single else out


class SurrogateSet:
    """Objective and constraint interpolants sharing one kernel, centers and sigma."""

    def __init__(self, kernel: KernelSpec, f_hat: RbfModel, g_hat: Sequence[RbfModel]):
        self.kernel = kernel
        self.f_hat = f_hat
        self.g_hat = list(g_hat)
        models = [f_hat, *self.g_hat]
        self._weights = np.column_stack(
            [np.concatenate([m.rbf_weights, m.tail_weights]) for m in models]
        )
        self.centers = f_hat.centers
        self.sigma = f_hat.sigma
        self.tail_degree = f_hat.tail_degree

    @property
    def n_constraints(self) -> int:
        return len(self.g_hat)

    def predict_all(self, X) -> Tuple[np.ndarray, np.ndarray]:
        """Return (f_hat (n,), g_hat (n, M)) at the rows of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.centers.shape[1]:
            raise ValueError("dimension mismatch")
        out = _evaluate(self.kernel, self.centers, self.sigma, self.tail_degree, self._weights, X)
        return out[:, 0], out[:, 1:]

    def predict_point(self, x) -> Tuple[float, np.ndarray]:
        f, g = self.predict_all(np.asarray(x, dtype=float)[None, :])
        return float(f[0]), g[0]


def fit_set(kernel: KernelSpec, X, f, G, sigma: Optional[float] = None,
            dist: Optional[np.ndarray] = None) -> SurrogateSet:
    """Fit the objective and all constraints with one factorization."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    f = np.asarray(f, dtype=float).reshape(-1)
    G = np.asarray(G, dtype=float).reshape(X.shape[0], -1)
    if dist is None:
        dist = pdist(X)
    sig = _sigma_from_distances(dist) if sigma is None else sigma
    phi = kernel(squareform(dist) / sig)
    deg = tail_degree(X.shape[0], X.shape[1])
    P = _tail_basis(X, deg)
    Y = np.column_stack([f, G])
    sol, ridge, cond = _solve(phi, P, Y, None)
    k = X.shape[0]
    models = [
        RbfModel(kernel, X, sig, sol[:k, j], deg, sol[k:, j], ridge, cond, Y[:, j])
        for j in range(Y.shape[1])
    ]
    return SurrogateSet(kernel, models[0], models[1:])


class SurrogatePool:
    """One SurrogateSet per kernel; pool index i is action i."""

    def __init__(self, sets: Sequence[SurrogateSet]):
        self.sets = list(sets)

    def __len__(self) -> int:
        return len(self.sets)

    def __getitem__(self, i) -> SurrogateSet:
        return self.sets[i]

    def __iter__(self):
        return iter(self.sets)

    @property
    def kernels(self) -> List[KernelSpec]:
        return [s.kernel for s in self.sets]


def thin(X, tol: float) -> np.ndarray:
    """Indices of a subset of rows with pairwise distances above ``tol`` (first occurrence wins)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    keep: List[int] = []
    for j in range(X.shape[0]):
        if not keep or np.min(np.linalg.norm(X[keep] - X[j], axis=1)) > tol:
            keep.append(j)
    return np.array(keep, dtype=int)


THIN_TRIES = 6


def fit_pool(dataset, kernels: Sequence[KernelSpec] = POOL) -> SurrogatePool:
    """Fit every kernel of the pool on the whole archive.

    If a kernel's system stays singular (clusters of near-coincident points
    make the cubic kernel's dynamic range exceed double precision), that
    kernel is refitted on a thinned archive, the merge radius growing 10x per
    attempt. The error propagates, tagged with the kernel index, only when
    every attempt fails.
    """
    if len(dataset) == 0:
        raise ValueError("cannot fit surrogates on an empty dataset")
    X, f, G = dataset.X, dataset.f, dataset.G
    dist = pdist(X)
    sigma = _sigma_from_distances(dist)
    span = float(np.max(np.ptp(X, axis=0))) if X.shape[0] > 1 else 1.0
    sets = []
    for i, kernel in enumerate(kernels):
        try:
            sets.append(fit_set(kernel, X, f, G, sigma=sigma, dist=dist))
            continue
        except FitError as exc:
            first = exc
        for attempt in range(1, THIN_TRIES + 1):
            idx = thin(X, 1e-8 * span * 10.0 ** attempt)
            try:
                sets.append(fit_set(kernel, X[idx], f[idx], G[idx]))
                break
            except FitError:
                continue
        else:
            raise FitError(f"kernel {i} ({kernel}): {first}", first.condition, first.ridge, i) from first
    return SurrogatePool(sets)


def loo_errors(kernels: Sequence[KernelSpec], dataset, window: int = LOO_WINDOW) -> np.ndarray:
    """Windowed leave-one-out objective error for each kernel, normalized to [0, 1].

    Each of the most recent ``min(window, n)`` points is dropped in turn, the
    objective model is refitted on the rest (sigma recomputed), and the
    absolute error at the dropped point is recorded. The mean error is divided
    by the objective range over the whole archive.
    """
    n = len(dataset)
    if n < 2:
        raise ValueError("leave-one-out needs at least two points")
    X, f = dataset.X, dataset.f
    span = float(np.max(f) - np.min(f))
    if span == 0.0:
        return np.zeros(len(kernels))
    D = squareform(pdist(X))
    deg = tail_degree(n - 1, X.shape[1])
    errors = np.zeros((len(kernels), 0)).tolist()
    for j in range(n - min(window, n), n):
        keep = np.arange(n) != j
        Dk = D[np.ix_(keep, keep)]
        sigma = _sigma_from_distances(Dk[np.triu_indices(n - 1, 1)])
        P = _tail_basis(X[keep], deg)
        r_out = D[j, keep] / sigma
        p_out = _tail_basis(X[j:j + 1], deg)[0]
        for i, kernel in enumerate(kernels):
            try:
                sol, _, _ = _solve(kernel(Dk / sigma), P, f[keep, None], None, precise=False)
            except FitError:
                errors[i].append(span)
                continue
            pred = kernel(r_out) @ sol[: n - 1, 0] + p_out @ sol[n - 1:, 0]
            errors[i].append(abs(pred - f[j]))
    out = np.array([np.mean(e) for e in errors]) / span
    return np.clip(out, 0.0, 1.0)


def loo_error(kernel: KernelSpec, dataset, window: int = LOO_WINDOW) -> float:
    return float(loo_errors([kernel], dataset, window)[0])
