"""Entropic Gromov-Wasserstein distance between metric-measure spaces.

The outer loop linearises the GW objective around the current coupling and
solves the resulting entropic OT problem with log-domain Sinkhorn. A step is
then taken along the segment to the Sinkhorn solution with an exact quadratic
line search, so the recorded objective never increases. Several deterministic
initial couplings are tried and the lowest final objective wins.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import DimensionMismatch, InvariantViolation, NumericalUnderflow
from .tensor_io import EmbeddingMatrix

MARGINAL_ATOL = 1e-6


@dataclass(frozen=True)
class GwConfig:
    """Solver settings.

    ``epsilon=None`` means ``epsilon_rel`` times the mean entry of the two
    distance matrices.
    """

    epsilon: float | None = None
    epsilon_rel: float = 0.05
    p: float = 2.0
    max_outer_iter: int = 200
    max_sinkhorn_iter: int = 1000
    outer_tol: float = 1e-6
    sinkhorn_tol: float = 1e-7
    n_random_starts: int = 4
    enumerate_limit: int = 720
    seed: int = 0
    omega: float = 1.5

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvariantViolation(f"epsilon must be > 0, got {self.epsilon}")
        if not self.epsilon_rel > 0:
            raise InvariantViolation(f"epsilon_rel must be > 0, got {self.epsilon_rel}")
        if not self.p >= 1:
            raise InvariantViolation(f"p must be >= 1, got {self.p}")
        if self.outer_tol <= 0 or self.sinkhorn_tol <= 0:
            raise InvariantViolation("tolerances must be > 0")
        if not 1.0 <= self.omega < 2.0:
            raise InvariantViolation(f"omega must lie in [1, 2), got {self.omega}")
        if self.max_outer_iter < 1 or self.max_sinkhorn_iter < 1 or self.n_random_starts < 0:
            raise InvariantViolation("iteration limits must be >= 1 and n_random_starts >= 0")

    def resolve_epsilon(self, *dists: np.ndarray) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        scale = float(np.mean([np.mean(d) for d in dists])) if dists else 0.0
        return self.epsilon_rel * scale if scale > 0 else 1.0


@dataclass(frozen=True)
class MetricSpace:
    dist: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        d = np.array(self.dist, dtype=np.float64)
        w = np.array(self.weights, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape[0] < 1:
            raise InvariantViolation(f"distance matrix must be square and nonempty, got {d.shape}")
        if w.shape != (d.shape[0],):
            raise InvariantViolation(f"weights shape {w.shape} does not match {d.shape[0]} points")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise InvariantViolation("distances must be finite and nonnegative")
        if np.any(np.diag(d) != 0):
            raise InvariantViolation("distance matrix must have a zero diagonal")
        if not np.allclose(d, d.T, rtol=0, atol=1e-12 * max(1.0, float(d.max()))):
            raise InvariantViolation("distance matrix must be symmetric")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or abs(w.sum() - 1.0) > 1e-12:
            raise InvariantViolation("weights must be a probability vector")
        d.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "dist", d)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, dist) -> "MetricSpace":
        n = np.asarray(dist).shape[0]
        return cls(dist, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.dist.shape[0]

    def permuted(self, perm) -> "MetricSpace":
        perm = np.asarray(perm)
        return MetricSpace(self.dist[np.ix_(perm, perm)], self.weights[perm])

    def _key(self) -> tuple:
        return (self.n, self.dist.tobytes(), self.weights.tobytes())


@dataclass(frozen=True)
class Coupling:
    """Transport plan together with its prescribed marginals and solver status."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    converged: bool = True
    iterations: int = 0
    marginal_error: float = 0.0  # before the final feasibility rounding
    potentials: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        check_coupling(self.plan, self.row_marginal, self.col_marginal)

    @property
    def violation(self) -> float:
        return max(
            float(np.max(np.abs(self.plan.sum(1) - self.row_marginal))),
            float(np.max(np.abs(self.plan.sum(0) - self.col_marginal))),
        )

    @property
    def T(self) -> "Coupling":
        return Coupling(self.plan.T.copy(), self.col_marginal, self.row_marginal, self.converged, self.iterations,
                        self.marginal_error)


def check_coupling(plan, mu, nu, atol: float = MARGINAL_ATOL) -> None:
    plan = np.asarray(plan)
    if plan.shape != (len(mu), len(nu)):
        raise DimensionMismatch(f"coupling shape {plan.shape} does not match marginals ({len(mu)}, {len(nu)})")
    if np.any(plan < 0) or not np.all(np.isfinite(plan)):
        raise InvariantViolation("coupling entries must be finite and nonnegative")
    if np.max(np.abs(plan.sum(1) - mu)) > atol or np.max(np.abs(plan.sum(0) - nu)) > atol:
        raise InvariantViolation("coupling violates its marginals")


@dataclass(frozen=True)
class GwResult:
    distance: float
    coupling: Coupling
    iterations: int
    converged: bool
    history: tuple[float, ...]
    epsilon: float
    start: str = "product"

    def transposed(self) -> "GwResult":
        return replace(self, coupling=self.coupling.T)


# ---------------------------------------------------------------------------
# Entropic OT


def round_to_marginals(plan: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Project a nonnegative matrix onto the transport polytope (Altschuler et al. rounding)."""
    plan = np.array(plan, dtype=np.float64)
    rows = plan.sum(1)
    x = np.ones_like(rows)
    np.divide(mu, rows, out=x, where=rows > mu)
    plan *= x[:, None]
    cols = plan.sum(0)
    y = np.ones_like(cols)
    np.divide(nu, cols, out=y, where=cols > nu)
    plan *= y[None, :]
    err_r = np.maximum(mu - plan.sum(1), 0.0)
    err_c = np.maximum(nu - plan.sum(0), 0.0)
    total = err_r.sum()
    if total > 0:
        plan += np.outer(err_r, err_c) / total
    return plan


def _log(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


@numba.njit(cache=True, nogil=True)
def _sinkhorn_log(scaled, log_mu, log_nu, f, g, max_iter, tol, omega):
    """Log-domain Sinkhorn sweeps on potentials divided by epsilon.

    Returns (f, g, iterations, max marginal error). ``omega`` > 1
    over-relaxes the updates; it drops back to 1 whenever the error grows.
    """
    n, m = scaled.shape
    mu = np.exp(log_mu)
    nu = np.exp(log_nu)
    rowbuf = np.empty(m)
    colbuf = np.empty(n)
    err = np.inf
    prev_err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        for i in range(n):
            if log_mu[i] == -np.inf:
                f[i] = -np.inf
                continue
            mx = -np.inf
            for j in range(m):
                rowbuf[j] = g[j] - scaled[i, j]
                if rowbuf[j] > mx:
                    mx = rowbuf[j]
            acc = 0.0
            for j in range(m):
                acc += np.exp(rowbuf[j] - mx)
            new = log_mu[i] - (mx + np.log(acc))
            f[i] = new if omega == 1.0 or not np.isfinite(f[i]) else (1.0 - omega) * f[i] + omega * new
        for j in range(m):
            if log_nu[j] == -np.inf:
                g[j] = -np.inf
                continue
            mx = -np.inf
            for i in range(n):
                colbuf[i] = f[i] - scaled[i, j]
                if colbuf[i] > mx:
                    mx = colbuf[i]
            acc = 0.0
            for i in range(n):
                acc += np.exp(colbuf[i] - mx)
            new = log_nu[j] - (mx + np.log(acc))
            g[j] = new if omega == 1.0 or not np.isfinite(g[j]) else (1.0 - omega) * g[j] + omega * new
        err = 0.0
        colsum = np.zeros(m)
        for i in range(n):
            acc = 0.0
            for j in range(m):
                v = np.exp(f[i] + g[j] - scaled[i, j])
                acc += v
                colsum[j] += v
            err = max(err, abs(acc - mu[i]))
        for j in range(m):
            err = max(err, abs(colsum[j] - nu[j]))
        if err < tol:
            break
        if err > prev_err and omega != 1.0:
            omega = 1.0
        prev_err = err
    return f, g, it, err


def wasserstein_entropic(
    cost,
    mu,
    nu,
    cfg: GwConfig = GwConfig(),
    epsilon: float | None = None,
    init_potentials: tuple | None = None,
) -> Coupling:
    """Entropic OT plan for ``cost`` between ``mu`` and ``nu`` (log-domain Sinkhorn).

    The returned plan is rounded onto the exact marginals. ``converged`` is
    False when the pre-rounding marginal error is still above
    ``cfg.sinkhorn_tol`` after ``cfg.max_sinkhorn_iter`` sweeps.
    """
    cost = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if cost.shape != (mu.size, nu.size):
        raise DimensionMismatch(f"cost shape {cost.shape} does not match marginals ({mu.size}, {nu.size})")
    if not np.all(np.isfinite(cost)):
        raise InvariantViolation("cost matrix must be finite")
    eps = epsilon if epsilon is not None else cfg.epsilon
    if eps is None:
        eps = cfg.resolve_epsilon(np.abs(cost))

    with np.errstate(over="ignore", invalid="ignore"):
        scaled = cost / eps
    if not np.all(np.isfinite(scaled)):
        raise NumericalUnderflow(f"cost/epsilon overflows (epsilon={eps:g} too small)")
    log_mu, log_nu = _log(mu), _log(nu)
    if init_potentials is not None:
        f, g = (np.array(v, dtype=np.float64) / eps for v in init_potentials)
    else:
        f, g = np.zeros(mu.size), np.zeros(nu.size)

    f, g, it, err = _sinkhorn_log(scaled, log_mu, log_nu, f, g, cfg.max_sinkhorn_iter, cfg.sinkhorn_tol, cfg.omega)
    if np.any(~np.isfinite(f[mu > 0])) or np.any(~np.isfinite(g[nu > 0])) or not np.isfinite(err):
        raise NumericalUnderflow("Sinkhorn kernel underflowed to an all-zero row or column")
    converged = err < cfg.sinkhorn_tol
    plan = np.exp(f[:, None] + g[None, :] - scaled)
    f = np.where(np.isfinite(f), f, 0.0)
    g = np.where(np.isfinite(g), g, 0.0)
    return Coupling(
        round_to_marginals(plan, mu, nu),
        mu,
        nu,
        converged=converged,
        iterations=it,
        marginal_error=err,
        potentials=(f * eps, g * eps),
    )


# ---------------------------------------------------------------------------
# GW objective


def _plan_array(pi) -> np.ndarray:
    return np.asarray(getattr(pi, "plan", pi), dtype=np.float64)


def gw_tensor(cx: np.ndarray, cy: np.ndarray, pi: np.ndarray, p: float = 2.0, fast: bool = True) -> np.ndarray:
    """Contraction ``L(cx, cy) (x) pi``: entry (i, j) is sum_kl |cx[i,k]-cy[j,l]|^p pi[k,l]."""
    if fast and p == 2:
        rows, cols = pi.sum(1), pi.sum(0)
        return (cx**2 @ rows)[:, None] + (cy**2 @ cols)[None, :] - 2.0 * (cx @ pi @ cy.T)
    out = np.empty((cx.shape[0], cy.shape[0]))
    for i in range(cx.shape[0]):
        diff = np.abs(cx[i][:, None, None] - cy[None, :, :]) ** p  # (k, j, l)
        out[i] = np.einsum("kjl,kl->j", diff, pi)
    return out


def gw_objective(cx: MetricSpace, cy: MetricSpace, pi, p: float = 2.0, fast: bool = True) -> float:
    """Sum over (i,k,j,l) of |cx[i,k] - cy[j,l]|^p * pi[i,j] * pi[k,l].

    ``fast`` selects the quadratic decomposition when p == 2; otherwise the
    contraction is evaluated directly.
    """
    plan = _plan_array(pi)
    if plan.shape != (cx.n, cy.n):
        raise DimensionMismatch(f"coupling shape {plan.shape} does not match spaces ({cx.n}, {cy.n})")
    return float(np.sum(gw_tensor(cx.dist, cy.dist, plan, p, fast) * plan))


# ---------------------------------------------------------------------------
# Initial couplings


def _monotone_coupling(order_x, mu, order_y, nu) -> np.ndarray:
    """North-west corner rule along the given point orders."""
    plan = np.zeros((mu.size, nu.size))
    a, b = mu[order_x].copy(), nu[order_y].copy()
    i = j = 0
    while i < a.size and j < b.size:
        m = min(a[i], b[j])
        plan[order_x[i], order_y[j]] += m
        a[i] -= m
        b[j] -= m
        if a[i] <= b[j]:
            i += 1
        else:
            j += 1
    return round_to_marginals(plan, mu, nu)


def initial_couplings(cx: MetricSpace, cy: MetricSpace, p: float, n_random: int, seed: int,
                      enumerate_limit: int = 720):
    """Yield (name, coupling) starting points; the product coupling comes first.

    The remaining starts are north-west-corner vertices of the transport
    polytope: first along eccentricity order, then along every pair of point
    orderings when there are at most ``enumerate_limit`` of them, otherwise
    along ``n_random`` seeded random orderings. Duplicates are skipped.
    """
    mu, nu = cx.weights, cy.weights
    yield "product", np.outer(mu, nu)
    ox = np.argsort((cx.dist**p) @ mu, kind="stable")
    oy = np.argsort((cy.dist**p) @ nu, kind="stable")
    seen = set()

    def fresh(plan):
        key = np.round(plan, 12).tobytes()
        if key in seen:
            return False
        seen.add(key)
        return True

    for name, (a, b) in (("eccentricity", (ox, oy)), ("eccentricity-reversed", (ox, oy[::-1]))):
        plan = _monotone_coupling(a, mu, b, nu)
        if fresh(plan):
            yield name, plan
    if math.factorial(cx.n) * math.factorial(cy.n) <= enumerate_limit:
        orders = itertools.product(itertools.permutations(range(cx.n)), itertools.permutations(range(cy.n)))
    else:
        rng = np.random.default_rng(seed)
        orders = ((rng.permutation(cx.n), rng.permutation(cy.n)) for _ in range(n_random))
    for k, (a, b) in enumerate(orders):
        plan = _monotone_coupling(np.asarray(a), mu, np.asarray(b), nu)
        if fresh(plan):
            yield f"vertex-{k}", plan


# ---------------------------------------------------------------------------
# Outer loop


def _line_search(cx, cy, pi, direction, p, f0):
    """Best step in [0, 1] along ``direction`` for the (quadratic) GW objective."""
    tens_d = gw_tensor(cx.dist, cy.dist, direction, p)
    tens_pi = gw_tensor(cx.dist, cy.dist, pi, p)
    a = float(np.sum(tens_d * direction))
    b = 2.0 * float(np.sum(tens_pi * direction))
    steps = [1.0]
    if a > 0:
        steps.append(float(np.clip(-b / (2 * a), 0.0, 1.0)))
    best_step, best_val = 0.0, f0
    for s in steps:
        cand = pi + s * direction
        val = gw_objective(cx, cy, cand, p)
        if val < best_val:
            best_step, best_val = s, val
    return best_step, best_val


def _run_from(cx, cy, pi, eps, cfg):
    mu, nu = cx.weights, cy.weights
    obj = gw_objective(cx, cy, pi, cfg.p)
    history, potentials, converged, it = [], None, False, 0
    for it in range(1, cfg.max_outer_iter + 1):
        cost = gw_tensor(cx.dist, cy.dist, pi, cfg.p)
        cpl = wasserstein_entropic(cost, mu, nu, cfg, epsilon=eps, init_potentials=potentials)
        potentials = cpl.potentials
        direction = cpl.plan - pi
        step, obj = _line_search(cx, cy, pi, direction, cfg.p, obj)
        new = pi + step * direction
        change = float(np.abs(new - pi).sum())
        pi = new
        history.append(obj)
        if change < cfg.outer_tol:
            converged = True
            break
    return pi, obj, history, it, converged


def gw_entropic(cx: MetricSpace, cy: MetricSpace, cfg: GwConfig = GwConfig()) -> GwResult:
    """Entropic GW between two metric-measure spaces.

    The reported ``distance`` is the unregularised objective at the final
    coupling. Arguments are processed in a canonical order so that swapping
    them gives the identical distance and the transposed coupling.
    """
    if cy._key() < cx._key():
        return gw_entropic(cy, cx, cfg).transposed()
    eps = cfg.resolve_epsilon(cx.dist, cy.dist)
    best = None
    for name, start in initial_couplings(cx, cy, cfg.p, cfg.n_random_starts, cfg.seed, cfg.enumerate_limit):
        pi, obj, history, it, converged = _run_from(cx, cy, start, eps, cfg)
        if best is None or obj < best[1]:
            best = (pi, obj, history, it, converged, name)
    pi, obj, history, it, converged, name = best
    pi = round_to_marginals(np.maximum(pi, 0.0), cx.weights, cy.weights)
    coupling = Coupling(pi, cx.weights, cy.weights, converged=converged, iterations=it)
    return GwResult(
        distance=gw_objective(cx, cy, pi, cfg.p),
        coupling=coupling,
        iterations=it,
        converged=converged,
        history=tuple(history),
        epsilon=eps,
        start=name,
    )


# ---------------------------------------------------------------------------
# Embeddings to metric spaces


def subsample_rows(data: np.ndarray, max_rows: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if max_rows is None or data.shape[0] <= max_rows:
        return data
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = np.sort(rng.choice(data.shape[0], size=max_rows, replace=False))
    return data[idx]


def build_metric_space(
    emb: EmbeddingMatrix | np.ndarray,
    normalize: bool = False,
    max_rows: int | None = None,
    rng: np.random.Generator | None = None,
) -> MetricSpace:
    """Uniform-weight metric space of pairwise Euclidean distances between rows.

    Rows beyond ``max_rows`` are dropped by uniform subsampling with ``rng``.
    With ``normalize`` the distances are divided by their maximum (unless it is 0).
    """
    data = np.asarray(getattr(emb, "data", emb), dtype=np.float64)
    data = subsample_rows(data, max_rows, rng)
    dist = squareform(pdist(data)) if data.shape[0] > 1 else np.zeros((1, 1))
    if normalize and dist.max() > 0:
        dist = dist / dist.max()
    return MetricSpace.uniform(dist)
