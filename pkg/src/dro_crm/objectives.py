"""Counterfactual risk objectives and gradients over a logged bandit dataset.

Each record of the log is (features x, action y, propensity p, cost c).  The
per-sample counterfactual loss under a candidate policy is

    z_i = c_i * min(M, pi_theta(y_i | x_i) / p_i),

with the importance ratio computed in log space and clipped at M.  On top of
z the module provides the plain clipped estimator (uniform weights), its
variance-penalized version, a fixed-temperature tilted version that puts more
weight on high-loss samples, and an adaptive-temperature version that
recomputes the temperature from the loss spread at every evaluation.

Gradients follow the score-function identity d z_i / d theta =
c_i * ratio_i * d log pi / d theta on unclipped samples and zero on clipped
ones.  For the tilted objectives the weights are treated as constants of the
evaluation by default (the surrogate each optimizer step actually minimizes);
`freeze_weights=False` switches to the fully differentiated form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .divergence import LossSample, boltzmann_weights
from .errors import ContractViolation
from .policy import FeatureVector, PolicyParams, log_prob_matrix, logits_matrix, sigmoid

_VAR_FLOOR = 1e-12
_RATIO_LOG_CAP = 700.0  # keeps exp() finite; ratios beyond e^700 are already absurd


@dataclass(frozen=True)
class BanditRecord:
    """One logged interaction: context features, taken action, the logger's
    probability of that action, and the observed cost."""

    x: FeatureVector
    y: np.ndarray
    propensity: float
    cost: float

    def __post_init__(self):
        if not 0.0 < self.propensity <= 1.0:
            raise ContractViolation("propensity must lie in (0, 1]")
        if not np.isfinite(self.cost):
            raise ContractViolation("cost must be finite")


@dataclass(frozen=True)
class CostScaling:
    """Affine map scaled = raw * scale + offset applied before logging."""

    scale: float = 1.0
    offset: float = 0.0

    def to_raw(self, scaled):
        return (np.asarray(scaled) - self.offset) / self.scale


@dataclass
class BanditLog:
    """Dense logged-feedback dataset.

    X: (n, D) features; Y: (n, q) 0/1 actions; log_propensities: (n,) natural
    logs of the logger's action probabilities; costs: (n,) logged (already
    scaled) costs; clip_m: ratio clipping constant M > 0.
    """

    X: np.ndarray
    Y: np.ndarray
    log_propensities: np.ndarray
    costs: np.ndarray
    clip_m: float
    cost_scaling: CostScaling = field(default_factory=CostScaling)
    replay_ids: Optional[np.ndarray] = None
    example_ids: Optional[np.ndarray] = None
    seed: Optional[int] = None
    delta: Optional[int] = None

    def __post_init__(self):
        n = self.X.shape[0]
        if n < 1:
            raise ContractViolation("bandit log must be non-empty")
        if self.Y.shape[0] != n or self.log_propensities.shape != (n,) \
                or self.costs.shape != (n,):
            raise ContractViolation("bandit log arrays must agree on length")
        if self.clip_m <= 0.0:
            raise ContractViolation("clip constant must be positive")
        if np.any(self.log_propensities > 0.0):
            raise ContractViolation("propensities must lie in (0, 1]")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def propensities(self) -> np.ndarray:
        return np.exp(self.log_propensities)

    @staticmethod
    def from_records(records: List[BanditRecord], clip_m: float,
                     cost_scaling: CostScaling = CostScaling()) -> "BanditLog":
        if not records:
            raise ContractViolation("bandit log must be non-empty")
        dim = records[0].x.dim
        X = np.stack([r.x.to_dense() for r in records])
        Y = np.stack([np.asarray(r.y, dtype=np.float64) for r in records])
        logp = np.log(np.array([r.propensity for r in records]))
        costs = np.array([r.cost for r in records], dtype=np.float64)
        if any(r.x.dim != dim for r in records):
            raise ContractViolation("records disagree on feature dimension")
        return BanditLog(X, Y, logp, costs, clip_m, cost_scaling)


@dataclass
class RiskReport:
    """Risk value with its ingredients: per-sample losses z, the weights s
    applied to them, their variance (divisor n), the gradient in theta, and
    the temperature used when one was."""

    risk: float
    losses: np.ndarray
    weights: np.ndarray
    variance: float
    gradient: np.ndarray
    gamma_used: Optional[float] = None
    degenerate: bool = False


def sample_losses(params: PolicyParams, log: BanditLog) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample clipped losses z_i and the mask of clipped samples
    (importance ratio >= M), where the ratio's gradient contribution is zero."""
    z, clipped, _ = _ratio_grad_weights(params, log)
    return z, clipped


def _grad_weighted(params: PolicyParams, log: BanditLog,
                   sample_weight: np.ndarray) -> np.ndarray:
    """Gradient sum_i w_i * c_i * ratio_i * d log pi_i / d theta for the given
    per-sample weights (zeros where the contribution is masked out)."""
    U = logits_matrix(params, log.X)
    G = log.Y - sigmoid(U)
    return (sample_weight[:, None] * G).T @ log.X


def _ratio_grad_weights(params: PolicyParams, log: BanditLog) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z, clipped mask, per-sample factor c_i * ratio_i masked at clips)."""
    log_ratio = log_prob_matrix(params, log.X, log.Y) - log.log_propensities
    ratio = np.exp(np.minimum(log_ratio, _RATIO_LOG_CAP))
    clipped = ratio >= log.clip_m
    z = log.costs * np.minimum(ratio, log.clip_m)
    dz = np.where(clipped, 0.0, log.costs * ratio)
    return z, clipped, dz


def _variance(z: np.ndarray) -> float:
    return float(np.mean((z - z.mean()) ** 2))


def ips_risk(params: PolicyParams, log: BanditLog) -> float:
    """Unclipped importance-weighted mean cost (the unbiased estimator used
    for validation-time model selection, never as a training objective)."""
    log_ratio = log_prob_matrix(params, log.X, log.Y) - log.log_propensities
    ratio = np.exp(np.minimum(log_ratio, _RATIO_LOG_CAP))
    return float(np.mean(log.costs * ratio))


def cips_risk(params: PolicyParams, log: BanditLog) -> RiskReport:
    """Clipped importance-weighted risk: mean of z with uniform weights."""
    z, _, dz = _ratio_grad_weights(params, log)
    n = log.n
    grad = _grad_weighted(params, log, dz / n)
    return RiskReport(float(z.mean()), z, np.full(n, 1.0 / n), _variance(z), grad)


def poem_objective(params: PolicyParams, log: BanditLog, lam: float) -> RiskReport:
    """Variance-penalized clipped risk: mean(z) + lam * sqrt(var(z) / n).

    The penalty gradient chains through the variance; it is treated as zero
    when the variance falls below 1e-12.
    """
    if lam < 0.0:
        raise ContractViolation("lambda must be nonnegative")
    z, _, dz = _ratio_grad_weights(params, log)
    n = log.n
    if lam > 0.0 and n < 2:
        raise ContractViolation("variance penalty needs at least two records")
    var = _variance(z)
    risk = float(z.mean()) + lam * np.sqrt(var / n)
    coeff = dz / n
    if lam > 0.0 and var >= _VAR_FLOOR:
        # d/dtheta sqrt(var/n) = (1 / (2 sqrt(var/n))) * (2/n) sum (z_i - mean) dz_i / n
        pref = lam / (2.0 * np.sqrt(var / n))
        coeff = coeff + pref * (2.0 / n) * (z - z.mean()) / n * dz
    grad = _grad_weighted(params, log, coeff)
    return RiskReport(risk, z, np.full(n, 1.0 / n), var, grad)


def kl_crm_objective(params: PolicyParams, log: BanditLog, gamma: float,
                     freeze_weights: bool = True) -> RiskReport:
    """Tilted clipped risk sum_i s_i z_i with s_i prop. to exp(z_i / gamma).

    With `freeze_weights` (default) the tilt is a constant of the evaluation
    and the gradient is sum_i s_i dz_i; otherwise the softmax is differentiated
    through as well.
    """
    if gamma <= 0.0:
        raise ContractViolation("gamma must be positive")
    z, _, dz = _ratio_grad_weights(params, log)
    s = boltzmann_weights(LossSample(z), gamma)
    risk = float(s @ z)
    if freeze_weights:
        coeff = s * dz
    else:
        coeff = s * (1.0 + (z - risk) / gamma) * dz
    grad = _grad_weighted(params, log, coeff)
    return RiskReport(risk, z, s, _variance(z), grad, gamma_used=gamma)


def akl_crm_objective(params: PolicyParams, log: BanditLog, epsilon: float,
                      gamma_rule: str = "sum_sq",
                      freeze_weights: bool = True) -> RiskReport:
    """Adaptive-temperature tilted risk.

    Every evaluation recomputes the temperature from the current losses:
    gamma = sqrt(sum_i (z_i - mean)^2 / (2 eps)) under the default "sum_sq"
    rule, or sqrt(var(z) / (2 eps)) under "variance".  Constant losses make
    the temperature degenerate; the uniform-weight risk is returned flagged.
    """
    if epsilon <= 0.0:
        raise ContractViolation("epsilon must be positive")
    if gamma_rule not in ("sum_sq", "variance"):
        raise ContractViolation(f"unknown gamma rule {gamma_rule!r}")
    z, _, dz = _ratio_grad_weights(params, log)
    n = log.n
    sum_sq = float(((z - z.mean()) ** 2).sum())
    scatter = sum_sq if gamma_rule == "sum_sq" else sum_sq / n
    gamma = np.sqrt(scatter / (2.0 * epsilon))
    if gamma <= 0.0:
        grad = _grad_weighted(params, log, dz / n)
        return RiskReport(float(z.mean()), z, np.full(n, 1.0 / n), 0.0, grad,
                          gamma_used=0.0, degenerate=True)
    s = boltzmann_weights(LossSample(z), float(gamma))
    risk = float(s @ z)
    if freeze_weights:
        coeff = s * dz
    else:
        coeff = s * (1.0 + (z - risk) / gamma) * dz
    grad = _grad_weighted(params, log, coeff)
    return RiskReport(risk, z, s, _variance(z), grad, gamma_used=float(gamma))


def make_objective(algorithm: str, log: BanditLog, hyper: Optional[float],
                   gamma_rule: str = "sum_sq", freeze_weights: bool = True):
    """Flat-vector adapter used by the minimizer: returns fun(theta_flat) ->
    (risk, grad_flat) for the named algorithm, plus the matrix shape."""
    q = log.Y.shape[1]
    d = log.X.shape[1]

    def wrap(report_fn):
        def fun(theta_flat: np.ndarray):
            params = PolicyParams(theta_flat.reshape(q, d))
            report = report_fn(params)
            fun.last_gamma = report.gamma_used  # minimizer traces show it
            return report.risk, report.gradient.ravel()
        fun.last_gamma = None
        return fun

    if algorithm == "cips":
        return wrap(lambda p: cips_risk(p, log)), (q, d)
    if algorithm == "poem":
        if hyper is None:
            raise ContractViolation("poem needs a penalty strength")
        return wrap(lambda p: poem_objective(p, log, hyper)), (q, d)
    if algorithm == "klcrm":
        if hyper is None:
            raise ContractViolation("klcrm needs a temperature")
        return wrap(lambda p: kl_crm_objective(p, log, hyper, freeze_weights)), (q, d)
    if algorithm == "aklcrm":
        if hyper is None:
            raise ContractViolation("aklcrm needs a radius")
        return wrap(lambda p: akl_crm_objective(p, log, hyper, gamma_rule,
                                                freeze_weights)), (q, d)
    raise ContractViolation(f"unknown algorithm {algorithm!r}")
