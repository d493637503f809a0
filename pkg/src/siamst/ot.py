"""Entropic optimal transport and the sequence-level Wasserstein loss."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError, NumericalError
from .numcore import Tensor

MAX_ORACLE_SIZE = 6


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    max_iterations: int = 200
    convergence_tolerance: float = 1e-6
    # Newton polish on the dual when the scaling loop stalls; small problems only
    newton_refine: bool = False
    newton_max_steps: int = 50

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ConfigurationError("max_iterations must be >= 1")
        if self.convergence_tolerance < 0:
            raise ConfigurationError("convergence_tolerance must be >= 0")


@dataclass
class TransportPlan:
    plan: np.ndarray
    marginal_a: np.ndarray
    marginal_b: np.ndarray
    transport_cost: Tensor
    iterations_used: int
    converged: bool

    @property
    def marginal_violation(self) -> float:
        return float(max(
            np.max(np.abs(self.plan.sum(axis=1) - self.marginal_a)),
            np.max(np.abs(self.plan.sum(axis=0) - self.marginal_b)),
        ))


def cost_matrix(x, y) -> Tensor:
    """Squared Euclidean distance between every row of ``x`` and every row of ``y``."""
    return nc.squared_distances(x, y)


def _log_softmax_np(z: np.ndarray, axis: int):
    m = np.max(z, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return z - lse, lse


def _check_marginal(w, size: int, name: str) -> np.ndarray:
    if w is None:
        return np.full(size, 1.0 / size)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != size:
        raise DimensionError(f"marginal {name} has {w.size} entries, expected {size}")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"marginal {name} must be strictly positive and sum to 1")
    return w


def sinkhorn(C, a=None, b=None, cfg: SinkhornConfig | None = None) -> TransportPlan:
    """Log-domain Sinkhorn on cost ``C`` with marginals ``a`` (rows), ``b`` (columns).

    Stops when the row-marginal violation (columns are exact after each
    column update) drops to ``cfg.convergence_tolerance``.  The returned
    ``transport_cost`` is ``<P, C>`` and is differentiable in ``C``: the
    backward pass replays the executed iterations in reverse.
    """
    cfg = cfg or SinkhornConfig()
    C = nc.as_tensor(C)
    if C.value.ndim != 2:
        raise DimensionError("cost must be a matrix")
    n, m = C.shape
    a = _check_marginal(a, n, "a")
    b = _check_marginal(b, m, "b")
    eps = cfg.epsilon
    cost = C.value
    log_a, log_b = np.log(a), np.log(b)

    g = np.zeros(m)
    row_soft, col_soft = [], []
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        log_A, lse_rows = _log_softmax_np((g[None, :] - cost) / eps, axis=1)
        f = eps * log_a - eps * lse_rows[:, 0]
        log_B, lse_cols = _log_softmax_np((f[:, None] - cost) / eps, axis=0)
        g = eps * log_b - eps * lse_cols[0, :]
        row_soft.append(np.exp(log_A))
        col_soft.append(np.exp(log_B))
        # column sums equal b exactly here; rows need the updated g
        row_mass = np.exp(f / eps + _log_softmax_np((g[None, :] - cost) / eps, axis=1)[1][:, 0])
        violation = np.max(np.abs(row_mass - a))
        if not np.isfinite(violation):
            raise NumericalError("non-finite value in Sinkhorn scaling")
        if violation <= cfg.convergence_tolerance:
            converged = True
            break

    refined = False
    if not converged and cfg.newton_refine:
        f, g, converged = _newton_dual(cost, a, b, f, g, eps, cfg)
        refined = True

    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    if not np.all(np.isfinite(plan)):
        raise NumericalError("non-finite transport plan")
    value = float(np.sum(plan * cost))

    def implicit_backward(grad_out):
        # differentiate the fixed point: J [df; dg] = -F_C dC with J the dual Hessian
        weighted = plan * cost / eps
        J = np.block([[np.diag(plan.sum(axis=1)), plan], [plan.T, np.diag(plan.sum(axis=0))]]) / eps
        rhs = -np.concatenate([weighted.sum(axis=1), weighted.sum(axis=0)])
        lam = np.linalg.lstsq(J, rhs, rcond=None)[0]
        lam_f, lam_g = lam[:n], lam[n:]
        bar_C = plan - weighted - plan * (lam_f[:, None] + lam_g[None, :]) / eps
        C._accumulate(grad_out * bar_C)

    def backward(grad_out):
        weighted = plan * cost / eps
        bar_C = grad_out * (plan - weighted)
        bar_f = grad_out * weighted.sum(axis=1)
        bar_g = grad_out * weighted.sum(axis=0)
        for A, B in zip(reversed(row_soft), reversed(col_soft)):
            # g_k = G(f_k, C)
            bar_f = bar_f - B @ bar_g
            bar_C = bar_C + B * bar_g[None, :]
            # f_k = F(g_{k-1}, C)
            bar_g = -(A.T @ bar_f)
            bar_C = bar_C + A * bar_f[:, None]
            bar_f = np.zeros_like(bar_f)
        C._accumulate(bar_C)

    out = nc._node(np.asarray(value), (C,), implicit_backward if refined else backward)
    return TransportPlan(plan, a, b, out, iterations, converged)


def _dual_residual(cost, a, b, f, g, eps) -> np.ndarray:
    P = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return np.concatenate([a - P.sum(axis=1), b - P.sum(axis=0)])


def _newton_dual(cost, a, b, f, g, eps, cfg):
    """Damped Newton on the entropic dual optimality conditions, started from scaling iterates.

    The merit is the squared marginal residual; objective differences near the
    optimum drop below float resolution and are useless for the line search.
    """
    n = len(a)
    grad = _dual_residual(cost, a, b, f, g, eps)
    merit = float(grad @ grad)
    for _ in range(cfg.newton_max_steps):
        if np.max(np.abs(grad)) <= cfg.convergence_tolerance:
            return f, g, True
        P = np.exp((f[:, None] + g[None, :] - cost) / eps)
        H = np.block([[np.diag(P.sum(axis=1)), P], [P.T, np.diag(P.sum(axis=0))]]) / eps
        # H is singular along (1, -1); lstsq picks the minimum-norm step
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            f_new, g_new = f + t * step[:n], g + t * step[n:]
            with np.errstate(over="ignore", invalid="ignore"):
                grad_new = _dual_residual(cost, a, b, f_new, g_new, eps)
                merit_new = float(grad_new @ grad_new)
            if np.isfinite(merit_new) and merit_new < merit:
                break
            t *= 0.5
        else:
            break
        f, g, grad, merit = f_new, g_new, grad_new, merit_new
    return f, g, bool(np.max(np.abs(grad)) <= cfg.convergence_tolerance)


def exact_ot_oracle(C) -> float:
    """Exact OT cost for square ``C`` with uniform marginals via permutation search."""
    C = np.asarray(C.value if isinstance(C, Tensor) else C, dtype=np.float64)
    n, m = C.shape
    if n != m:
        raise DimensionError("permutation oracle needs a square cost matrix")
    if n > MAX_ORACLE_SIZE:
        raise ConfigurationError(f"oracle refuses n={n} > {MAX_ORACLE_SIZE} (factorial blowup)")
    rows = np.arange(n)
    return min(C[rows, list(p)].sum() for p in itertools.permutations(range(n))) / n


def wasserstein_loss(speech, text, cfg: SinkhornConfig | None = None, with_pe: bool = True,
                     pe_weight: float = 1.0) -> Tensor:
    """Entropic OT cost between two sequences of row vectors.

    With ``with_pe`` each sequence gets sinusoidal positions (scaled by
    ``pe_weight``) added before row L2-normalization, which breaks the
    permutation invariance of plain OT.
    """
    loss, _ = wasserstein_plan(speech, text, cfg, with_pe, pe_weight)
    return loss


def wasserstein_plan(speech, text, cfg: SinkhornConfig | None = None, with_pe: bool = True,
                     pe_weight: float = 1.0) -> tuple[Tensor, TransportPlan]:
    speech, text = nc.as_tensor(speech), nc.as_tensor(text)
    if speech.shape[0] == 0 or text.shape[0] == 0:
        raise DimensionError("wasserstein_loss needs non-empty sequences")
    if speech.shape[1] != text.shape[1]:
        raise DimensionError(f"feature dims differ: {speech.shape[1]} vs {text.shape[1]}")
    if with_pe and pe_weight:
        d = speech.shape[1]
        speech = speech + pe_weight * nc.sinusoidal_pe(speech.shape[0], d)
        text = text + pe_weight * nc.sinusoidal_pe(text.shape[0], d)
    speech = nc.l2_normalize_rows(speech)
    text = nc.l2_normalize_rows(text)
    result = sinkhorn(cost_matrix(speech, text), cfg=cfg)
    return result.transport_cost, result


def entropic_slack(n: int, m: int, epsilon: float) -> float:
    """Upper bound on ``<P_eps, C> - OT(C)`` for uniform marginals."""
    return epsilon * (math.log(n) + math.log(m))
