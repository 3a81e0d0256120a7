"""Constrained benchmark problems with a known constrained optimum.

Each instance is built around a convex "smooth core" in a shifted and
(optionally) rotated space ``y = R (x - z)``. Linear constraints are placed so
that ``x_star`` is a KKT point of that core: the first constraint normal is the
negated core gradient at ``x_star`` and every other normal leans towards it.
Because the objective is the smooth core plus a non-negative term that
vanishes with zero gradient at ``x_star`` (only the Rastrigin families have
one), ``x_star`` is the global constrained minimizer and ``f_star`` is exact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .seeding import substream

DEFAULT_BOUNDS = (-5.0, 5.0)
DEFAULT_PROBLEM_SEED = 0


class BudgetExhausted(RuntimeError):
    """Raised when an evaluation is requested past the run budget."""


class OutOfBounds(ValueError):
    """Raised when a point outside the box is evaluated."""


class Family(enum.Enum):
    SPHERE = "sphere"
    ELLIPSOID = "ellipsoid"
    BENT_CIGAR = "bent_cigar"
    RASTRIGIN = "rastrigin"
    LINEAR_SLOPE = "linear_slope"
    ELLIPSOID_ROTATED = "ellipsoid_rotated"
    DISCUS = "discus"
    DIFFERENT_POWERS = "different_powers"
    RASTRIGIN_ROTATED = "rastrigin_rotated"

    @classmethod
    def parse(cls, name: "str | Family") -> "Family":
        if isinstance(name, Family):
            return name
        key = str(name).lower().replace("_", "").replace("-", "").replace(" ", "")
        aliases = {f.value.replace("_", ""): f for f in cls}
        aliases["rotatedellipsoid"] = cls.ELLIPSOID_ROTATED
        aliases["rotatedrastrigin"] = cls.RASTRIGIN_ROTATED
        aliases["bentcigar"] = cls.BENT_CIGAR
        if key not in aliases:
            raise ValueError(f"unknown problem family {name!r}")
        return aliases[key]


# bbob-style: the families with variable coupling get a random rotation
ROTATED = frozenset(
    {
        Family.ELLIPSOID_ROTATED,
        Family.RASTRIGIN_ROTATED,
        Family.BENT_CIGAR,
        Family.DISCUS,
        Family.DIFFERENT_POWERS,
    }
)
OSCILLATING = frozenset({Family.RASTRIGIN, Family.RASTRIGIN_ROTATED})

TRAIN_FAMILIES = (
    Family.LINEAR_SLOPE,
    Family.ELLIPSOID_ROTATED,
    Family.DISCUS,
    Family.DIFFERENT_POWERS,
    Family.RASTRIGIN_ROTATED,
)
TEST_FAMILIES = (Family.SPHERE, Family.ELLIPSOID, Family.BENT_CIGAR, Family.RASTRIGIN)


@dataclass(frozen=True)
class ProblemSpec:
    family: Family
    instance: int
    dim: int
    seed: int = DEFAULT_PROBLEM_SEED

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if not 1 <= int(self.instance) <= 6:
            raise ValueError(f"instance must be in 1..6, got {self.instance}")
        if int(self.dim) < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if int(self.seed) < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def parse(cls, text: str, seed: int = DEFAULT_PROBLEM_SEED) -> "ProblemSpec":
        """Parse ``<family>:<instance>:<dim>``, e.g. ``sphere:1:10``."""
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"problem spec must be <family>:<instance>:<dim>, got {text!r}")
        try:
            instance, dim = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise ValueError(f"bad problem spec {text!r}") from exc
        return cls(Family.parse(parts[0]), instance, dim, seed)

    def __str__(self) -> str:
        return f"{self.family.value}:{self.instance}:{self.dim}"


def _conditioning(dim: int, exponent: float) -> np.ndarray:
    return 10.0 ** (exponent * np.arange(dim) / (dim - 1))


def _core_coefficients(family: Family, dim: int, rng: np.random.Generator) -> np.ndarray:
    if family is Family.ELLIPSOID or family is Family.ELLIPSOID_ROTATED:
        return _conditioning(dim, 6.0)
    if family is Family.BENT_CIGAR:
        c = np.full(dim, 1e6)
        c[0] = 1.0
        return c
    if family is Family.DISCUS:
        c = np.ones(dim)
        c[0] = 1e6
        return c
    if family is Family.DIFFERENT_POWERS:
        return 2.0 + 4.0 * np.arange(dim) / (dim - 1)
    if family is Family.LINEAR_SLOPE:
        signs = np.where(rng.random(dim) < 0.5, -1.0, 1.0)
        return signs * _conditioning(dim, 1.0)
    return np.ones(dim)


@dataclass(frozen=True, eq=False)
class ConstrainedProblem:
    """min f(x) s.t. g_j(x) <= 0 (j = 1..M), lower <= x <= upper."""

    spec: ProblemSpec
    shift: np.ndarray
    rotation: np.ndarray
    coefficients: np.ndarray
    constraint_normals: np.ndarray
    constraint_offsets: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    x_star: np.ndarray
    f_star: float = field(default=np.nan)

    @property
    def dim(self) -> int:
        return self.spec.dim

    @property
    def n_constraints(self) -> int:
        return self.constraint_normals.shape[0]

    @property
    def bounds(self) -> np.ndarray:
        return np.stack([self.lower, self.upper], axis=1)

    @property
    def bounds_range(self) -> float:
        return float(np.max(self.upper - self.lower))

    def transform(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x - self.shift) @ self.rotation.T

    def core(self, y) -> np.ndarray:
        """Raw core function applied row-wise to transformed points ``y``."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        fam, c = self.spec.family, self.coefficients
        if fam is Family.LINEAR_SLOPE:
            return y @ c
        if fam is Family.DIFFERENT_POWERS:
            return np.sum(np.abs(y) ** c, axis=1)
        val = (y * y) @ c
        if fam in OSCILLATING:
            val = val + 10.0 * np.sum(1.0 - np.cos(2.0 * np.pi * y), axis=1)
        return val

    def core_smooth_gradient(self, y) -> np.ndarray:
        """Gradient (w.r.t. ``y``) of the convex part of the core."""
        y = np.asarray(y, dtype=float)
        fam, c = self.spec.family, self.coefficients
        if fam is Family.LINEAR_SLOPE:
            return c.copy()
        if fam is Family.DIFFERENT_POWERS:
            return c * np.abs(y) ** (c - 1.0) * np.sign(y)
        return 2.0 * c * y

    def objective(self, x) -> np.ndarray:
        return self.core(self.transform(x))

    def constraints(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x - self.x_star) @ self.constraint_normals.T + self.constraint_offsets

    def in_bounds(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


def make_problem(spec: ProblemSpec, bounds=DEFAULT_BOUNDS) -> ConstrainedProblem:
    """Generate the instance described by ``spec``; identical specs give identical problems."""
    if not isinstance(spec, ProblemSpec):
        raise TypeError("make_problem expects a ProblemSpec")
    fam, dim, m = spec.family, spec.dim, spec.instance
    rng = substream(spec.seed, "problem", fam.value, spec.instance, dim)
    lower = np.full(dim, float(bounds[0]))
    upper = np.full(dim, float(bounds[1]))
    span = upper - lower

    coefficients = _core_coefficients(fam, dim, rng)
    if fam in ROTATED:
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        rotation = q * np.sign(np.diag(r))
    else:
        rotation = np.eye(dim)

    x_star = lower + span * (0.1 + 0.8 * rng.random(dim))
    if fam in OSCILLATING:
        # integer offsets put x_star on a zero-gradient trough of the cosine term
        y_star = rng.integers(-2, 3, size=dim).astype(float)
        while not np.any(y_star):
            y_star = rng.integers(-2, 3, size=dim).astype(float)
    else:
        direction = rng.standard_normal(dim)
        y_star = direction / np.linalg.norm(direction) * rng.uniform(1.0, 3.0)
    shift = x_star - rotation.T @ y_star

    proto = ConstrainedProblem(
        spec, shift, rotation, coefficients, np.zeros((0, dim)), np.zeros(0),
        lower, upper, x_star,
    )
    a1 = -(rotation.T @ proto.core_smooth_gradient(y_star))
    norm_a1 = np.linalg.norm(a1)
    normals = [a1]
    offsets = [0.0]
    for _ in range(1, m):
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        # |perturbation| < |a1| keeps a_j . a1 > 0
        a = a1 + u * norm_a1 * rng.uniform(0.0, 0.9)
        normals.append(a)
        if rng.random() < 0.5:
            offsets.append(0.0)
        else:
            offsets.append(-np.linalg.norm(a) * rng.uniform(0.1, 1.0))
    normals = np.array(normals)
    offsets = np.array(offsets)

    problem = ConstrainedProblem(
        spec, shift, rotation, coefficients, normals, offsets, lower, upper, x_star,
    )
    object.__setattr__(problem, "f_star", float(problem.objective(x_star)[0]))
    for arr in (shift, rotation, coefficients, normals, offsets, lower, upper, x_star):
        arr.setflags(write=False)
    return problem


class EvalCounter:
    """Counts true function evaluations against a hard budget."""

    def __init__(self, budget: int):
        if budget < 0:
            raise ValueError("budget must be non-negative")
        self.budget = int(budget)
        self.count = 0

    @property
    def remaining(self) -> int:
        return self.budget - self.count

    @property
    def exhausted(self) -> bool:
        return self.count >= self.budget

    def tick(self) -> int:
        if self.exhausted:
            raise BudgetExhausted(f"evaluation budget of {self.budget} exhausted")
        self.count += 1
        return self.count


@dataclass(frozen=True, eq=False)
class Evaluation:
    x: np.ndarray
    f: float
    g: np.ndarray
    feasible: bool
    fes_at_eval: int

    @property
    def violation(self) -> float:
        return float(np.sum(np.maximum(self.g, 0.0)))


def evaluate(problem: ConstrainedProblem, x, counter: EvalCounter) -> Evaluation:
    """Evaluate the true objective and constraints at ``x`` (costs one FE)."""
    x = np.array(x, dtype=float).reshape(-1)
    if x.shape != (problem.dim,):
        raise ValueError(f"expected a point of dimension {problem.dim}, got shape {x.shape}")
    if not problem.in_bounds(x):
        raise OutOfBounds(f"point {x} lies outside the box")
    fes = counter.tick()
    f = float(problem.objective(x)[0])
    g = problem.constraints(x)[0]
    x.setflags(write=False)
    g.setflags(write=False)
    return Evaluation(x, f, g, bool(np.max(g) <= 0.0), fes)


class Dataset:
    """Append-only archive of true evaluations."""

    def __init__(self, evaluations: Sequence[Evaluation] = ()):
        self._items: List[Evaluation] = []
        self._cache = None
        for e in evaluations:
            self.append(e)

    def append(self, evaluation: Evaluation) -> None:
        self._items.append(evaluation)
        self._cache = None

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Evaluation]:
        return iter(self._items)

    def __getitem__(self, i) -> Evaluation:
        return self._items[i]

    def _arrays(self):
        if self._cache is None:
            self._cache = (
                np.array([e.x for e in self._items]),
                np.array([e.f for e in self._items]),
                np.array([e.g for e in self._items]),
            )
        return self._cache

    @property
    def X(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def f(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def G(self) -> np.ndarray:
        return self._arrays()[2]

    @property
    def feasible(self) -> np.ndarray:
        return np.array([e.feasible for e in self._items], dtype=bool)

    def min_distance(self, x) -> float:
        if not self._items:
            return np.inf
        return float(np.min(np.linalg.norm(self.X - np.asarray(x, dtype=float), axis=1)))


def default_n0(dim: int, budget: Optional[int] = None) -> int:
    n0 = 2 * (dim + 1)
    if budget is not None:
        n0 = min(n0, budget // 2)
    return max(n0, 1)


def latin_hypercube(problem: ConstrainedProblem, n: int, rng: np.random.Generator) -> np.ndarray:
    sampler = qmc.LatinHypercube(d=problem.dim, rng=rng)
    return qmc.scale(sampler.random(n), problem.lower, problem.upper)


def initial_design(
    problem: ConstrainedProblem,
    n0: int,
    seed: int,
    counter: Optional[EvalCounter] = None,
) -> Dataset:
    """Evaluate an ``n0``-point Latin hypercube design (consumes ``n0`` FEs)."""
    if counter is None:
        counter = EvalCounter(n0)
    if n0 < 1:
        raise ValueError("n0 must be at least 1")
    if n0 > counter.remaining:
        raise ValueError(f"n0={n0} exceeds the remaining budget {counter.remaining}")
    points = latin_hypercube(problem, n0, substream(seed, "design"))
    return Dataset(evaluate(problem, x, counter) for x in points)
