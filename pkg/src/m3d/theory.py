"""Classification probability of attention-aggregated Gaussian representations.

Setting: node ``u`` of class ``c`` attends to ``k`` neighbors; a fraction
``rho[i]`` of them has class ``i`` and receives attention weight
``alpha[i]`` each (so ``sum(k * rho * alpha) == 1``). Neighbor features are
``mu_i + sigma_i * eps`` with orthonormal prototypes ``mu_i``. The
aggregated representation ``z`` is classified correctly when
``z . mu_c >= delta``.

This module evaluates the exact probability, the two closed-form bounds,
their monotone behaviour, a Monte Carlo oracle, and the two-layer support
identity between the cluster-virtual mask and the same-cluster mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .graph import Graph
from .masks import build_designed_masks, build_taxonomy_mask, extend_universe
from .partition import Partition
from .tensor import counter_rng

SCAN_AXES = ("k", "rho_c", "alpha_c", "sigma")
_TOL = 1e-9


class ScenarioError(ValueError):
    """A scenario violates the preconditions of the requested computation."""


def std_normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class GaussianScenario:
    k: float
    rho: tuple
    alpha: tuple
    sigma: tuple
    delta: float
    target: int = 0
    dim: int | None = None

    def __post_init__(self):
        for name in ("rho", "alpha", "sigma"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        self.validate()

    @property
    def n_classes(self) -> int:
        return len(self.rho)

    @property
    def rho_c(self) -> float:
        return self.rho[self.target]

    @property
    def alpha_c(self) -> float:
        return self.alpha[self.target]

    @property
    def sigma_c(self) -> float:
        return self.sigma[self.target]

    @property
    def sigma_m(self) -> float:
        others = [s for i, s in enumerate(self.sigma) if i != self.target]
        return max(others) if others else 0.0

    def validate(self):
        c = self.n_classes
        if not (len(self.alpha) == len(self.sigma) == c) or c < 1:
            raise ScenarioError("rho, alpha and sigma need one entry per class")
        if not 0 <= self.target < c:
            raise ScenarioError(f"target class {self.target} outside [0, {c})")
        if self.k <= 0:
            raise ScenarioError("k must be positive")
        rho, alpha, sigma = map(np.asarray, (self.rho, self.alpha, self.sigma))
        if np.any(rho < 0) or abs(rho.sum() - 1) > _TOL:
            raise ScenarioError("rho must be nonnegative and sum to 1")
        if np.any(alpha < 0) or np.any(sigma < 0):
            raise ScenarioError("alpha and sigma must be nonnegative")
        if abs(np.sum(self.k * rho * alpha) - 1) > _TOL:
            raise ScenarioError("attention mass sum(k * rho * alpha) must equal 1")
        if self.dim is not None and self.dim < c:
            raise ScenarioError("feature dimension must be at least the class count")

    def class_counts(self) -> np.ndarray:
        """Neighbor count per class; rejects non-integral ``k * rho``."""
        counts = self.k * np.asarray(self.rho)
        rounded = np.round(counts)
        if np.any(np.abs(counts - rounded) > 1e-9):
            raise ScenarioError(f"k * rho is not integral: {counts}")
        return rounded.astype(np.int64)


def make_scenario(n_classes, k, rho_c, alpha_c, sigma, delta, target=0) -> GaussianScenario:
    """Scenario with off-target classes sharing mass and attention equally.

    Off-target neighbors split ``1 - rho_c`` evenly across the other classes
    and all receive the same weight ``(1 - k rho_c alpha_c) / (k (1 - rho_c))``.
    """
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n_classes,))
    rho = np.full(n_classes, (1 - rho_c) / (n_classes - 1) if n_classes > 1 else 0.0)
    rho[target] = rho_c
    off = (1 - k * rho_c * alpha_c) / (k * (1 - rho_c)) if rho_c < 1 else 0.0
    alpha = np.full(n_classes, off)
    alpha[target] = alpha_c
    if rho_c >= 1 and abs(k * alpha_c - 1) > _TOL:
        raise ScenarioError("with rho_c = 1 the target weight must be exactly 1/k")
    return GaussianScenario(k, tuple(rho), tuple(alpha), tuple(sigma), float(delta), target)


def updated_repr_distribution(s: GaussianScenario):
    """Mean coefficient per class (``k rho_i alpha_i``) and variance along each axis."""
    k, rho, alpha, sigma = s.k, np.asarray(s.rho), np.asarray(s.alpha), np.asarray(s.sigma)
    coef = k * rho * alpha
    var = float(np.sum(k * rho * alpha**2 * sigma**2))
    return coef, var


def _upper_tail(numerator: float, variance: float) -> float:
    """``P(N(0, variance) >= numerator)`` with the point-mass limit at zero variance."""
    if variance <= 0:
        return 1.0 if numerator <= 0 else 0.0
    return 1.0 - std_normal_cdf(numerator / math.sqrt(variance))


def exact_probability(s: GaussianScenario) -> float:
    coef, var = updated_repr_distribution(s)
    return _upper_tail(s.delta - coef[s.target], var)


def check_bound_preconditions(s: GaussianScenario, tol: float = 1e-12):
    """Raise :class:`ScenarioError` unless the bound regime holds."""
    m = s.k * s.rho_c * s.alpha_c
    if s.delta - m > tol:
        raise ScenarioError(f"delta={s.delta} exceeds the target mean {m}")
    inv_k = 1.0 / s.k
    if s.alpha_c < inv_k - tol or (s.rho_c > 0 and s.alpha_c > 1.0 / (s.k * s.rho_c) + tol):
        raise ScenarioError(f"alpha_c={s.alpha_c} outside [1/k, 1/(k rho_c)]")
    for i, a in enumerate(s.alpha):
        if i != s.target and s.rho[i] > 0 and not (-tol <= a <= inv_k + tol):
            raise ScenarioError(f"off-target alpha[{i}]={a} outside [0, 1/k]")


def probability_bounds(s: GaussianScenario) -> tuple[float, float]:
    check_bound_preconditions(s)
    m = s.k * s.rho_c * s.alpha_c
    own = s.k * s.rho_c * s.alpha_c**2 * s.sigma_c**2
    spread = (1 - s.rho_c) * s.sigma_m**2 / s.k
    return _upper_tail(s.delta - m, own + spread), _upper_tail(s.delta - m, own)


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    stderr: float
    samples: int


def mc_probability(s: GaussianScenario, samples: int = 100_000, seed: int = 0, full_vector=False, chunk=16384):
    """Sample neighbor representations, aggregate them, test ``z . mu_c >= delta``.

    By default only the coordinate along ``mu_c`` is drawn for each neighbor
    (the orthogonal coordinates never reach the score). ``full_vector=True``
    draws whole ``dim``-dimensional vectors instead.
    """
    counts = s.class_counts()
    labels = np.repeat(np.arange(s.n_classes), counts)
    weights = np.asarray(s.alpha)[labels]
    sig = np.asarray(s.sigma)[labels]
    dim = s.dim or s.n_classes
    hits = 0
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        rng = counter_rng(seed, "mc", start // chunk)
        if full_vector:
            protos = np.eye(dim)[labels]
            reps = protos[None] + sig[None, :, None] * rng.standard_normal((n, len(labels), dim))
            z = np.einsum("k,nkd->nd", weights, reps)
            score = z[:, s.target]
        else:
            on_target = (labels == s.target).astype(float)
            score = (on_target + sig * rng.standard_normal((n, len(labels)))) @ weights
        hits += int(np.count_nonzero(score >= s.delta))
    p = hits / samples
    return McEstimate(p, math.sqrt(p * (1 - p) / samples), samples)


@dataclass
class ScanReport:
    axis: str
    values: list
    lower: list
    upper: list
    violations: list = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return not self.violations


def _scan_point(base: GaussianScenario, axis: str, value) -> GaussianScenario:
    c, t = base.n_classes, base.target
    if axis == "k":
        # keep k * alpha_c fixed so the attention profile scales with 1/k
        focus = base.k * base.alpha_c
        return make_scenario(c, value, base.rho_c, focus / value, base.sigma, base.delta, t)
    if axis == "rho_c":
        return make_scenario(c, base.k, value, base.alpha_c, base.sigma, base.delta, t)
    if axis == "alpha_c":
        return make_scenario(c, base.k, base.rho_c, value, base.sigma, base.delta, t)
    if axis == "sigma":
        return replace(base, sigma=tuple([float(value)] * c))
    raise ValueError(f"unknown scan axis {axis!r}; expected one of {SCAN_AXES}")


def monotonicity_scan(base: GaussianScenario, axis: str, grid) -> ScanReport:
    """Evaluate both bounds along one axis and flag order violations.

    Bounds must not decrease along ``k``, ``rho_c`` and ``alpha_c`` and must
    not increase along ``sigma``. Grid values are taken in the given order.
    """
    if axis not in SCAN_AXES:
        raise ValueError(f"unknown scan axis {axis!r}; expected one of {SCAN_AXES}")
    report = ScanReport(axis, list(grid), [], [])
    for v in grid:
        try:
            point = _scan_point(base, axis, v)
            lo, hi = probability_bounds(point)
        except ScenarioError as exc:
            raise ScenarioError(f"infeasible grid point {axis}={v}: {exc}") from None
        report.lower.append(lo)
        report.upper.append(hi)
    sign = -1.0 if axis == "sigma" else 1.0
    for name, seq in (("lower", report.lower), ("upper", report.upper)):
        for i in range(len(seq) - 1):
            if sign * (seq[i + 1] - seq[i]) < 0:
                report.violations.append((name, report.values[i], report.values[i + 1]))
    return report


def random_feasible_scenario(rng: np.random.Generator, n_classes=3, k_range=(2, 16)) -> GaussianScenario:
    """A scenario with integral class counts inside the bound regime.

    ``delta`` is placed between 2.5 standard deviations below the target
    mean and the mean itself, which keeps probabilities away from 0 and 1
    often enough for the Monte Carlo comparison to be informative.
    """
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    n_c = int(rng.integers(1, k + 1))
    rest = k - n_c
    others = rng.multinomial(rest, np.full(n_classes - 1, 1.0 / (n_classes - 1))) if n_classes > 1 else []
    counts = np.concatenate([[n_c], others]).astype(float)
    rho = counts / k
    alpha_c = rng.uniform(1.0 / k, 1.0 / n_c)
    off = (1 - n_c * alpha_c) / rest if rest else 0.0
    alpha = np.where(np.arange(n_classes) == 0, alpha_c, off)
    sigma = rng.uniform(0.1, 1.0, size=n_classes)
    s = GaussianScenario(k, tuple(rho), tuple(alpha), tuple(sigma), 0.0)
    m = k * rho[0] * alpha_c
    sd = math.sqrt(updated_repr_distribution(s)[1])
    return replace(s, delta=float(m + rng.uniform(-2.5, 0.0) * sd))


# ---------------------------------------------------------------------------
# Cluster-virtual two-hop support


@dataclass
class SupportReport:
    support_equal: bool
    n_mismatch: int
    max_row_sum_error: float
    composite_support_equal: bool


def _real_support(mat, n):
    block = sp.csr_matrix(mat)[:n, :n].tocoo()
    keep = block.data != 0
    return set(zip(block.row[keep].tolist(), block.col[keep].tolist()))


def c4_c3_support_check(g: Graph, part: Partition, seed: int = 0) -> SupportReport:
    """Two hops over the cluster-virtual mask vs. same-cluster attention.

    Checks that the real x real support of ``M_c4 @ M_c4`` equals the
    same-cluster mask plus self-loops, then composes random attention
    weights over two layers (self weight on the diagonal plus the path
    through the cluster virtual) and reports the worst row-sum deviation.
    """
    u = extend_universe(g, part)
    _, m_c4, _ = build_designed_masks(u, g, part)
    m_c3 = build_taxonomy_mask(u, g, part, "C3")
    n = g.n_nodes
    c4 = m_c4.to_scipy()
    two_hop = _real_support(c4 @ c4, n)
    target = _real_support(m_c3.to_scipy() + sp.identity(m_c3.size, dtype=np.int64, format="csr"), n)
    mismatch = len(two_hop ^ target)

    rng = counter_rng(seed, "prop1")
    scores = rng.normal(size=m_c4.nnz)
    rows = m_c4.rows
    weights = np.exp(scores - np.max(scores))
    weights /= np.bincount(rows, weights=weights, minlength=m_c4.size)[rows]
    att = sp.csr_matrix((weights, (rows, m_c4.cols)), shape=(m_c4.size, m_c4.size))
    real = np.arange(n)
    cl = n + np.asarray(part.assignment)
    self_w = np.asarray(att[real, real]).ravel()
    via = np.asarray(att[real, cl]).ravel()
    virt_rows = att[n : n + part.p, :n]
    composite = sp.diags(self_w) + sp.diags(via) @ virt_rows[np.asarray(part.assignment)]
    row_err = float(np.max(np.abs(np.asarray(composite.sum(axis=1)).ravel() - 1.0))) if n else 0.0
    return SupportReport(mismatch == 0, mismatch, row_err, _real_support(composite, n) == target)
