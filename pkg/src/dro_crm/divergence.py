"""Phi-divergences and worst-case risk over a finite loss sample.

Given losses z_1..z_n carrying base probabilities p_1..p_n, the robust risk at
radius eps is

    sup { sum_i q_i z_i : q in simplex, D(q || p) <= eps },

where D(q || p) = sum_i p_i * phi(q_i / p_i) for a convex generator phi with
phi(1) = 0.  Two generators are supported:

* chi-square, phi(t) = (t - 1)^2: the supremum has the closed form
  mean + sqrt(eps * var) whenever the maximizing weights stay nonnegative, and
  an active-set solve on the simplex face otherwise.
* Kullback-Leibler, phi(t) = t*log(t) - t + 1: the supremum equals
  inf_{gamma > 0} gamma*eps + gamma*log sum_i p_i exp(z_i / gamma), attained by
  exponentially tilted (Boltzmann) weights at the minimizing temperature.

A brute-force maximizer over the feasible set (`dro_oracle`) is included for
verification at small n; it shares no code with the closed forms or the dual.

All functions are pure; reductions use a fixed summation order, so results are
bit-identical across repeated calls regardless of caller threading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

import numpy as np

from .errors import ContractViolation
from .special import normal_quantile

_WEIGHT_SUM_TOL = 1e-12
_VAR_FLOOR = 1e-300


def _effectively_constant(z: np.ndarray) -> bool:
    """Spread at roundoff scale; guards every variance-driven formula."""
    return float(z.max() - z.min()) <= 1e-14 * max(1.0, float(np.abs(z).max()))


class DivergenceKind(Enum):
    CHI_SQUARE = "chi_square"
    KULLBACK_LEIBLER = "kullback_leibler"


@dataclass(frozen=True)
class LossSample:
    """Finite loss sample with base probabilities (uniform when omitted)."""

    values: np.ndarray
    base_weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        z = np.asarray(self.values, dtype=np.float64)
        if z.ndim != 1 or z.size < 1:
            raise ContractViolation("losses must be a non-empty 1-d vector")
        if not np.all(np.isfinite(z)):
            raise ContractViolation("losses must be finite")
        if self.base_weights is None:
            w = np.full(z.size, 1.0, dtype=np.float64)
            w /= w.sum()
        else:
            w = np.asarray(self.base_weights, dtype=np.float64)
            if w.shape != z.shape:
                raise ContractViolation("base_weights length must match losses")
            if np.any(w < 0.0) or not np.all(np.isfinite(w)):
                raise ContractViolation("base_weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > _WEIGHT_SUM_TOL:
                raise ContractViolation("base_weights must sum to 1 within 1e-12")
        object.__setattr__(self, "values", z)
        object.__setattr__(self, "base_weights", w)

    @property
    def n(self) -> int:
        return self.values.size

    def mean(self) -> float:
        return float(self.base_weights @ self.values)

    def variance(self) -> float:
        """Variance of the losses under the base weights (divisor n when uniform)."""
        m = self.mean()
        return float(self.base_weights @ (self.values - m) ** 2)


@dataclass(frozen=True)
class DualSolution:
    """Robust risk value together with the attaining weights.

    `gamma` is the minimizing temperature (KL only, None for chi-square).
    `saturated` marks a radius large enough that the solution sits at the
    max-loss vertex (or the temperature bracket boundary); `degenerate` marks
    constant-loss samples where every radius yields the plain mean.
    """

    robust_risk: float
    gamma: Optional[float]
    worst_case_weights: np.ndarray
    saturated: bool = False
    degenerate: bool = False


class FixedPointResult(NamedTuple):
    gamma: float
    converged: bool
    fell_back: bool
    iterations: int


class GammaApprox(NamedTuple):
    gamma: float
    degenerate: bool


# ---------------------------------------------------------------------------
# Generators, conjugates, divergences
# ---------------------------------------------------------------------------

def phi_value(kind: DivergenceKind, t: float) -> float:
    """Generator phi(t); +inf (a deliberate saturation value, never an
    overflow artifact) outside the domain."""
    if t < 0.0:
        return math.inf
    if kind is DivergenceKind.CHI_SQUARE:
        return (t - 1.0) ** 2
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        if t == 0.0:
            return 1.0
        return t * math.log(t) - t + 1.0
    raise ContractViolation(f"unknown divergence kind {kind!r}")


def phi_conjugate(kind: DivergenceKind, u: float) -> float:
    """Convex conjugate phi*(u) = sup_{t >= 0} u*t - phi(t)."""
    if kind is DivergenceKind.CHI_SQUARE:
        if u < -2.0:
            return -1.0
        return u + 0.25 * u * u
    if kind is DivergenceKind.KULLBACK_LEIBLER:
        return math.expm1(u)
    raise ContractViolation(f"unknown divergence kind {kind!r}")


def divergence(kind: DivergenceKind, q, p) -> float:
    """D(q || p) = sum_i p_i * phi(q_i / p_i), with 0*phi(0/0) := 0 and +inf
    whenever q puts mass where p does not."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 1:
        raise ContractViolation("q and p must be 1-d vectors of equal length")
    if np.any(q[p == 0.0] > 0.0):
        return math.inf
    total = 0.0
    for qi, pi in zip(q.tolist(), p.tolist()):
        if pi == 0.0:
            continue
        total += pi * phi_value(kind, qi / pi)
    return total


# ---------------------------------------------------------------------------
# Chi-square: closed form plus active-set fallback on the simplex boundary
# ---------------------------------------------------------------------------

def robust_risk_chi2(sample: LossSample, epsilon: float) -> DualSolution:
    """Worst-case mean over the chi-square ball of radius epsilon.

    Interior regime: risk = mean + sqrt(eps * var) with weights
    p_i * (1 + sqrt(eps/var) * (z_i - mean)).  When those weights would leave
    the simplex, coordinates are dropped one at a time (lowest implied weight
    first) and the tangency problem is re-solved on the remaining face.
    """
    if epsilon < 0.0:
        raise ContractViolation("epsilon must be nonnegative")
    z = sample.values
    p = sample.base_weights
    mean = sample.mean()
    var = sample.variance()
    if epsilon == 0.0 or _effectively_constant(z):
        return DualSolution(mean, None, p.copy(), degenerate=_effectively_constant(z))

    q = p * (1.0 + math.sqrt(epsilon / var) * (z - mean))
    if q.min() >= 0.0:
        return DualSolution(mean + math.sqrt(epsilon * var), None, q)

    active = np.ones(sample.n, dtype=bool)
    for _ in range(sample.n):
        idx = np.flatnonzero(active)
        pa, za = p[idx], z[idx]
        mass = pa.sum()
        mean_a = float(pa @ za) / mass
        scatter = float(pa @ (za - mean_a) ** 2)
        slack = epsilon - (1.0 - mass) / mass
        if idx.size == 1 or _effectively_constant(za):
            # Remaining losses are equal: the max-loss face, reached only when
            # the radius covers it, so slack >= 0 here.
            q = np.zeros(sample.n)
            q[idx] = pa / mass
            return DualSolution(mean_a, None, q, saturated=True)
        if slack <= 0.0:
            raise ArithmeticError("chi-square active-set solve left the feasible region")
        beta = math.sqrt(slack / scatter)
        qa = pa * (1.0 + (1.0 - mass) / mass + beta * (za - mean_a))
        worst = qa.min()
        if worst >= -1e-15:
            q = np.zeros(sample.n)
            q[idx] = np.maximum(qa, 0.0)
            return DualSolution(mean_a + math.sqrt(slack * scatter), None, q)
        active[idx[int(np.argmin(qa))]] = False
    raise ArithmeticError("chi-square active-set solve failed to terminate")


# ---------------------------------------------------------------------------
# Kullback-Leibler: Boltzmann weights, dual bisection, fixed point, Taylor rule
# ---------------------------------------------------------------------------

def boltzmann_weights(sample: LossSample, gamma: float) -> np.ndarray:
    """Exponentially tilted weights s_i = p_i exp(z_i/gamma) / sum_j p_j exp(z_j/gamma),
    computed with a max shift so the result is finite for any finite z/gamma."""
    if gamma <= 0.0:
        raise ContractViolation("gamma must be positive")
    a = sample.values / gamma
    a -= a.max()
    w = sample.base_weights * np.exp(a)
    return w / w.sum()


def robust_risk_kl_fixed_gamma(sample: LossSample, gamma: float) -> tuple[float, np.ndarray]:
    """Tilted mean sum_i s_i z_i at a fixed temperature gamma."""
    s = boltzmann_weights(sample, gamma)
    return float(s @ sample.values), s


def _kl_dual_value(sample: LossSample, epsilon: float, gamma: float) -> float:
    a = sample.values / gamma
    m = a.max()
    lse = m + math.log(float(sample.base_weights @ np.exp(a - m)))
    return gamma * epsilon + gamma * lse


def _kl_dual_deriv(sample: LossSample, epsilon: float, gamma: float) -> float:
    """Derivative in gamma of gamma*eps + gamma*log sum p exp(z/gamma)."""
    a = sample.values / gamma
    m = a.max()
    e = sample.base_weights * np.exp(a - m)
    total = float(e.sum())
    lse = m + math.log(total)
    tilted_mean = float(e @ sample.values) / total
    return epsilon + lse - tilted_mean / gamma


def _argmax_limit_weights(sample: LossSample) -> np.ndarray:
    """Zero-temperature limit of the tilted weights: base mass renormalized on
    the set of maximal losses."""
    z = sample.values
    top = z >= z.max() - 1e-15 * max(1.0, abs(z.max()))
    q = np.where(top, sample.base_weights, 0.0)
    return q / q.sum()


def robust_risk_kl_dual(sample: LossSample, epsilon: float) -> DualSolution:
    """Worst-case mean over the KL ball of radius epsilon via the 1-d dual.

    The dual objective gamma*eps + gamma*log sum_i p_i exp(z_i/gamma) is convex
    in gamma; its minimizer is bracketed in [1e-6, 1e6] * range(z) and located
    by bisection on the derivative to 1e-10 relative width.  A radius so large
    that the supremum sits at the max-loss vertex (minimizer below the bracket)
    returns that vertex solution flagged `saturated`; a minimizer above the
    bracket returns the ceiling evaluation, also flagged.
    """
    if epsilon <= 0.0:
        raise ContractViolation("epsilon must be positive")
    z = sample.values
    p = sample.base_weights
    spread = float(z.max() - z.min())
    if _effectively_constant(z):
        return DualSolution(sample.mean(), None, p.copy(), degenerate=True)

    lo, hi = 1e-6 * spread, 1e6 * spread
    if _kl_dual_deriv(sample, epsilon, lo) >= 0.0:
        # Increasing already at the floor: the ball covers the max-loss vertex.
        return DualSolution(float(z.max()), lo, _argmax_limit_weights(sample), saturated=True)
    if _kl_dual_deriv(sample, epsilon, hi) <= 0.0:
        risk = _kl_dual_value(sample, epsilon, hi)
        return DualSolution(risk, hi, boltzmann_weights(sample, hi), saturated=True)

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _kl_dual_deriv(sample, epsilon, mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-10 * hi:
            break
    gamma = 0.5 * (lo + hi)
    risk = _kl_dual_value(sample, epsilon, gamma)
    return DualSolution(risk, gamma, boltzmann_weights(sample, gamma))


def kl_gamma_fixed_point(sample: LossSample, epsilon: float,
                         gamma0: float) -> FixedPointResult:
    """Temperature found by iterating gamma <- tilted_mean / (eps + log-mean-exp).

    The iteration's fixed points are the stationary temperatures of the KL
    dual.  It is iterated to 1e-8 relative tolerance or 200 steps; when it
    leaves (0, inf), collapses toward the spurious root at 0, or fails to
    settle, the bisection minimizer is returned with `fell_back` set.
    """
    if epsilon <= 0.0:
        raise ContractViolation("epsilon must be positive")
    if gamma0 <= 0.0:
        raise ContractViolation("gamma0 must be positive")
    z = sample.values
    spread = float(z.max() - z.min())
    if _effectively_constant(z):
        raise ContractViolation("losses must be non-constant")

    gamma = float(gamma0)
    lo_guard, hi_guard = 1e-9 * spread, 1e9 * spread
    for k in range(1, 201):
        a = z / gamma
        m = a.max()
        e = sample.base_weights * np.exp(a - m)
        total = float(e.sum())
        tilted_mean = float(e @ z) / total
        denom = epsilon + m + math.log(total)
        if denom == 0.0 or not math.isfinite(denom):
            break
        step = tilted_mean / denom
        if not math.isfinite(step) or step <= lo_guard or step >= hi_guard:
            break
        if abs(step - gamma) <= 1e-8 * abs(step):
            return FixedPointResult(step, True, False, k)
        gamma = step
    fallback = robust_risk_kl_dual(sample, epsilon)
    return FixedPointResult(float(fallback.gamma), False, True, 200)


def gamma_star_approx(sample: LossSample, epsilon: float) -> GammaApprox:
    """Second-order temperature rule sqrt(var / (2*eps)); degenerate (gamma 0)
    for constant losses."""
    if epsilon <= 0.0:
        raise ContractViolation("epsilon must be positive")
    var = sample.variance()
    if var <= _VAR_FLOOR:
        return GammaApprox(0.0, True)
    return GammaApprox(math.sqrt(var / (2.0 * epsilon)), False)


# ---------------------------------------------------------------------------
# Brute-force verification oracle
# ---------------------------------------------------------------------------

def _divergence_rows(kind: DivergenceKind, Q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Row-wise D(q || p) for strictly positive p (vectorized, 0*log 0 := 0)."""
    if kind is DivergenceKind.CHI_SQUARE:
        return ((Q - p) ** 2 / p).sum(axis=1)
    ratio = Q / p
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(Q > 0.0, Q * np.log(ratio), 0.0)
    return terms.sum(axis=1) - Q.sum(axis=1) + 1.0


def _project_simplex_rows(Q: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    n = Q.shape[1]
    srt = np.sort(Q, axis=1)[:, ::-1]
    css = np.cumsum(srt, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = srt - css / ind > 0.0
    rho = cond.sum(axis=1)
    theta = css[np.arange(Q.shape[0]), rho - 1] / rho
    return np.maximum(Q - theta[:, None], 0.0)


def _shrink_to_ball_rows(kind: DivergenceKind, Q: np.ndarray, p: np.ndarray,
                         epsilon: float, iters: int = 60) -> np.ndarray:
    """Move each infeasible row along the ray toward p until D(q||p) = eps.
    The chi-square divergence is exactly quadratic along the ray, so that case
    scales in closed form; KL bisects."""
    d = _divergence_rows(kind, Q, p)
    bad = d > epsilon
    if not bad.any():
        return Q
    out = Q.copy()
    base = Q[bad]
    if kind is DivergenceKind.CHI_SQUARE:
        t = np.sqrt(epsilon / d[bad])
        out[bad] = p + t[:, None] * (base - p)
        return out
    lo = np.zeros(base.shape[0])
    hi = np.ones(base.shape[0])
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        trial = p + mid[:, None] * (base - p)
        inside = _divergence_rows(kind, trial, p) <= epsilon
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    out[bad] = p + lo[:, None] * (base - p)
    return out


def _push_to_boundary_rows(kind: DivergenceKind, Q: np.ndarray, p: np.ndarray,
                           epsilon: float, iters: int = 60) -> np.ndarray:
    """Extend each feasible row outward along the ray from p until it meets
    the ball boundary or a simplex face, whichever comes first."""
    diff = Q - p
    with np.errstate(divide="ignore", invalid="ignore"):
        caps = np.where(diff < 0.0, p / -diff, np.inf)
    t_cap = np.minimum(caps.min(axis=1), 1e6)
    t_cap = np.maximum(t_cap, 1.0)
    if kind is DivergenceKind.CHI_SQUARE:
        d = _divergence_rows(kind, Q, p)
        t_ball = np.where(d > 0.0, np.sqrt(epsilon / np.maximum(d, 1e-300)), t_cap)
        return np.maximum(p + np.maximum(np.minimum(t_ball, t_cap), 1.0)[:, None] * diff, 0.0)
    at_cap = _divergence_rows(kind, p + t_cap[:, None] * diff, p) <= epsilon
    hi = t_cap
    lo = np.where(at_cap, t_cap, 1.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = _divergence_rows(kind, p + mid[:, None] * diff, p) <= epsilon
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return np.maximum(p + lo[:, None] * diff, 0.0)


def _ray_max_feasible_rows(kind: DivergenceKind, base: np.ndarray,
                           direction: np.ndarray, p: np.ndarray,
                           epsilon: float, iters: int = 70) -> np.ndarray:
    """From each feasible base row, advance t >= 0 along its direction row to
    the furthest point that stays in the simplex and the ball."""
    with np.errstate(divide="ignore", invalid="ignore"):
        caps = np.where(direction < 0.0, base / -direction, np.inf)
    t_cap = np.where(np.isfinite(caps.min(axis=1)), caps.min(axis=1), 1.0)
    at_cap = _divergence_rows(kind, base + t_cap[:, None] * direction, p) <= epsilon
    hi = t_cap
    lo = np.where(at_cap, t_cap, 0.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = _divergence_rows(kind, base + mid[:, None] * direction, p) <= epsilon
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return np.maximum(base + lo[:, None] * direction, 0.0)


def _face_line_candidates(kind: DivergenceKind, z: np.ndarray, p: np.ndarray,
                          epsilon: float) -> np.ndarray:
    """For every top-k support (by loss), walk the line through the face
    center in the face's centered-loss direction out to the boundary.  These
    lines contain the tangency optima of faces, for any generator."""
    n = z.size
    order = np.argsort(z)[::-1]
    bases = np.zeros((n, n))
    dirs = np.zeros((n, n))
    for k in range(1, n + 1):
        idx = order[:k]
        mass = p[idx].sum()
        base = np.zeros(n)
        base[idx] = p[idx] / mass
        m = float(base[idx] @ z[idx])
        d = np.zeros(n)
        d[idx] = p[idx] * (z[idx] - m)
        bases[k - 1] = base
        norm = np.abs(d).max()
        dirs[k - 1] = d / norm if norm > 0 else d
    feasible = _divergence_rows(kind, bases, p) <= epsilon
    bases, dirs = bases[feasible], dirs[feasible]
    if bases.shape[0] == 0:
        return p[None, :]
    return _ray_max_feasible_rows(kind, bases, dirs, p, epsilon)


def _exp_tilt_candidates(z: np.ndarray, p: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    expo = p[None, :] * np.exp((z[None, :] - z.max()) / gammas[:, None])
    return expo / expo.sum(axis=1, keepdims=True)


def _pairwise_polish(kind: DivergenceKind, q: np.ndarray, z: np.ndarray,
                     p: np.ndarray, epsilon: float) -> np.ndarray:
    """Greedy mass transfers along simplex edges (toward higher loss) with the
    transfer amount bisected against the divergence budget."""
    order = np.argsort(z)
    q = q.copy()
    for _ in range(3):
        improved = False
        slack = epsilon - _divergence_rows(kind, q[None, :], p)[0]
        g = _divergence_grad_rows(kind, q[None, :], p)[0]
        for i in order[::-1]:
            for j in order:
                if z[i] <= z[j] or q[j] <= 1e-15:
                    continue
                # On the boundary, a transfer whose divergence derivative is
                # outward admits no feasible positive step.
                if slack <= 1e-12 and g[i] - g[j] >= -1e-12:
                    continue
                lo, hi = 0.0, float(q[j])
                trial = q.copy()
                trial[i] += hi
                trial[j] -= hi
                if _divergence_rows(kind, trial[None, :], p)[0] <= epsilon:
                    lo = hi
                else:
                    for _ in range(40):
                        mid = 0.5 * (lo + hi)
                        trial = q.copy()
                        trial[i] += mid
                        trial[j] -= mid
                        if _divergence_rows(kind, trial[None, :], p)[0] <= epsilon:
                            lo = mid
                        else:
                            hi = mid
                if lo > 1e-14:
                    q[i] += lo
                    q[j] -= lo
                    improved = True
        if not improved:
            break
    return q


def _divergence_grad_rows(kind: DivergenceKind, Q: np.ndarray, p: np.ndarray) -> np.ndarray:
    if kind is DivergenceKind.CHI_SQUARE:
        return 2.0 * (Q - p) / p
    return np.log(np.maximum(Q, 1e-300) / p) + 1.0


def _tangent_walk(kind: DivergenceKind, Q: np.ndarray, z: np.ndarray,
                  p: np.ndarray, epsilon: float, iters: int = 60,
                  eta0: float = 0.12) -> np.ndarray:
    """Row-wise ascent of q'z along the ball boundary: step in the direction
    of z projected onto the tangent space of {D = eps, sum q = 1}, clip to the
    simplex, retract to the ball along the ray toward p.  Steps that fail to
    improve a row are rejected, so every row is monotone."""
    n = Q.shape[1]
    obj = Q @ z
    eta = eta0
    zsum = float(z.sum())
    for k in range(iters):
        G = _divergence_grad_rows(kind, Q, p)
        a11 = (G * G).sum(axis=1)
        a12 = G.sum(axis=1)
        b1 = G @ z
        det = a11 * n - a12 * a12
        det = np.where(np.abs(det) < 1e-30, 1e-30, det)
        alpha = (b1 * n - zsum * a12) / det
        beta = (a11 * zsum - a12 * b1) / det
        T = z[None, :] - alpha[:, None] * G - beta[:, None]
        norm = np.sqrt((T * T).sum(axis=1, keepdims=True))
        trial = _project_simplex_rows(Q + eta * T / np.maximum(norm, 1e-15))
        trial = _shrink_to_ball_rows(kind, trial, p, epsilon, iters=14)
        trial_obj = trial @ z
        better = trial_obj > obj
        Q = np.where(better[:, None], trial, Q)
        obj = np.where(better, trial_obj, obj)
        if (k + 1) % 12 == 0:
            eta *= 0.45
    return Q


def dro_oracle(sample: LossSample, kind: DivergenceKind, epsilon: float) -> float:
    """Brute-force sup of sum_i q_i z_i over the divergence ball, for n <= 12.

    Candidates come from a dense Dirichlet grid (rays shrunk to the ball
    boundary) plus the simplex vertices; the best 64 seed a projected-gradient
    ascent along the constraint boundary (`_tangent_walk`), and the winner is
    polished by greedy pairwise mass transfers.  Accurate to well under 1e-4
    at this scale, independently of the closed forms it checks.
    """
    if epsilon < 0.0:
        raise ContractViolation("epsilon must be nonnegative")
    z = sample.values
    p = sample.base_weights
    n = sample.n
    if n > 12:
        raise ContractViolation("dro_oracle is limited to n <= 12")
    if epsilon == 0.0 or n == 1:
        return sample.mean()

    rng = np.random.default_rng(20240901)
    grids = [np.eye(n), p[None, :]]
    for alpha in (0.3, 1.0, 3.0):
        grids.append(rng.dirichlet(np.full(n, alpha), size=300))
        grids.append(rng.dirichlet(n * alpha * p + 1e-2, size=200))
    # structured seeds: face tangency lines for every top-k support, plus
    # exponentially tilted copies of p over a two-stage temperature grid
    grids.append(_face_line_candidates(kind, z, p, epsilon))
    spread = max(float(z.max() - z.min()), 1e-12)
    coarse = spread * 10.0 ** np.linspace(-3.0, 3.0, 40)
    tilts = _exp_tilt_candidates(z, p, coarse)
    feas = _divergence_rows(kind, tilts, p) <= epsilon
    if feas.any() and not feas.all():
        # the sharpest feasible tilt sits at the feasibility threshold of the
        # temperature; locate it by bisection on primal feasibility
        i = int(np.argmax(feas))
        g_lo, g_hi = coarse[i - 1], coarse[i]
        for _ in range(80):
            g_mid = math.sqrt(g_lo * g_hi)
            if _divergence_rows(kind, _exp_tilt_candidates(z, p, np.array([g_mid])),
                                p)[0] <= epsilon:
                g_hi = g_mid
            else:
                g_lo = g_mid
        grids.append(_exp_tilt_candidates(z, p, np.array([g_hi])))
    grids.append(tilts)

    Q = _shrink_to_ball_rows(kind, np.vstack(grids), p, epsilon, iters=40)
    obj = Q @ z
    best = float(obj.max())

    cur = _tangent_walk(kind, Q[np.argsort(obj)[-64:]], z, p, epsilon)
    best = max(best, float((cur @ z).max()))
    cur = _push_to_boundary_rows(kind, cur, p, epsilon)
    obj = cur @ z
    best = max(best, float(obj.max()))

    q_best = _pairwise_polish(kind, cur[int(np.argmax(obj))], z, p, epsilon)
    return max(best, float(q_best @ z))


# ---------------------------------------------------------------------------
# Radius calibration
# ---------------------------------------------------------------------------

def chi2_quantile_1dof(delta: float) -> float:
    """(1 - delta) quantile of the chi-square distribution with one degree of
    freedom, as the squared standard-normal quantile."""
    if not 0.0 < delta < 1.0:
        raise ContractViolation(f"delta must lie in (0, 1), got {delta}")
    x = normal_quantile(1.0 - 0.5 * delta)
    return x * x


def chi2_radius(delta: float, n: int) -> float:
    """Confidence-calibrated ball radius: chi2 quantile over the sample size."""
    if n < 1:
        raise ContractViolation("n must be at least 1")
    return chi2_quantile_1dof(delta) / n
