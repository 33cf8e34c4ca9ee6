"""Optimal-transport alignment between uni-modal and fused embeddings.

For each of the relation, attribute and visual modalities, the batch rows of
the uni-modal embedding and of the (projected) fused embedding are treated
as two uniform point clouds.  An entropic transport plan between them is
found with log-domain Sinkhorn, and each fused-side sample receives the
plan-weighted average of the uni-modal rows.  Plans are constants for
autodiff.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

DEFAULT_EPSILON = 0.05
DEFAULT_MAX_ITERS = 500
DEFAULT_TOL = 1e-6


class SinkhornWarning(UserWarning):
    pass


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def cosine_cost(X, Y, projection=None, zero_rows="raise"):
    """C_ij = 1 - cos(x_i, y_j), clipped to [0, 2].

    If ``projection`` is given, Y is first mapped through it (Y @ projection).
    A zero-norm row raises DomainError, or with ``zero_rows="neutral"`` it is
    treated as orthogonal to everything (cost 1).
    """
    x = _values(X)
    y = _values(Y)
    if projection is not None:
        y = y @ np.asarray(projection)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"cost needs equal widths, got {x.shape} and {y.shape}")
    for label, m in (("source", x), ("target", y)):
        norms = np.linalg.norm(m, axis=1)
        zero = np.flatnonzero(norms == 0)
        if zero.size and zero_rows != "neutral":
            raise DomainError(f"cosine_cost: {label} row {zero[0]} has zero norm")
    xn = _unit_rows(x)
    yn = _unit_rows(y)
    return Tensor._wrap(np.clip(1.0 - xn @ yn.T, 0.0, 2.0))


@dataclass
class TransportProblem:
    cost: np.ndarray
    mu_r: np.ndarray
    mu_m: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    @classmethod
    def uniform(cls, cost, epsilon=DEFAULT_EPSILON):
        c = _values(cost)
        n_r, n_m = c.shape
        return cls(c, np.full(n_r, 1.0 / n_r), np.full(n_m, 1.0 / n_m), epsilon)


@dataclass
class TransportPlan:
    T: np.ndarray
    iterations_used: int
    marginal_error: float
    converged: bool

    def cost(self, C):
        return float((self.T * _values(C)).sum())


def marginal_error(plan, mu_r, mu_m):
    return max(np.abs(plan.sum(axis=1) - mu_r).max(), np.abs(plan.sum(axis=0) - mu_m).max())


def _plan(f, g, C, eps):
    with np.errstate(over="ignore"):
        return np.exp((f[:, None] + g[None, :] - C) / eps)


def _newton_polish(f, g, C, eps, mu, nu, tol, steps):
    """Damped Newton steps on the dual marginal equations.

    Same fixed point as the Sinkhorn sweeps; used when near-permutation plans
    make the sweeps contract too slowly.  The Jacobian is singular along the
    gauge directions (and nearly so when the plan's support splits into
    blocks), hence the truncated least-squares solve.
    """
    n = len(f)
    plan = _plan(f, g, C, eps)
    err = marginal_error(plan, mu, nu)
    used = 0
    while used < steps and err >= tol:
        used += 1
        a, b = plan.sum(axis=1), plan.sum(axis=0)
        resid = np.concatenate([a - mu, b - nu])
        jac = np.block([[np.diag(a), plan], [plan.T, np.diag(b)]]) / eps
        step = np.linalg.lstsq(jac, -resid, rcond=1e-12)[0]
        t = 1.0
        while t > 1e-6:
            trial = _plan(f + t * step[:n], g + t * step[n:], C, eps)
            if np.all(np.isfinite(trial)):
                trial_err = marginal_error(trial, mu, nu)
                if trial_err < err:
                    break
            t *= 0.5
        else:
            break
        f, g, plan, err = f + t * step[:n], g + t * step[n:], trial, trial_err
    return f, g, plan, used


def _eps_schedule(eps, cost_max):
    sched = []
    e = max(eps, cost_max)
    while e > eps:
        sched.append(e)
        e *= 0.5
    sched.append(eps)
    return sched


def sinkhorn(prob, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL, newton_steps=50):
    """Entropic OT by alternating dual updates in the log domain.

    The regularization is annealed from max(C) down to epsilon by halving,
    warm-starting each stage from the previous potentials.  At the target
    epsilon the sweeps stop once both marginals are within ``tol`` (sup
    norm); if the sweep budget runs out first, up to ``newton_steps`` damped
    Newton steps on the same dual equations finish the solve.  A plan still
    outside ``tol`` comes back with ``converged=False`` and a
    :class:`SinkhornWarning`.
    """
    eps = float(prob.epsilon)
    if not eps > 0:
        raise DomainError(f"epsilon must be positive, got {eps}")
    C = prob.cost
    mu, nu = prob.mu_r, prob.mu_m
    log_mu, log_nu = np.log(mu), np.log(nu)
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    sweeps = 0
    sched = _eps_schedule(eps, float(C.max()))
    for stage, e in enumerate(sched):
        final = stage == len(sched) - 1
        stage_tol = tol if final else 1e-3
        while sweeps < max_iters:
            sweeps += 1
            f = e * (log_mu - logsumexp((g[None, :] - C) / e, axis=1))
            g = e * (log_nu - logsumexp((f[:, None] - C) / e, axis=0))
            if marginal_error(_plan(f, g, C, e), mu, nu) < stage_tol:
                break
    plan = _plan(f, g, C, eps)
    err = marginal_error(plan, mu, nu)
    polish = 0
    if err >= tol and newton_steps:
        f2, g2, plan2, polish = _newton_polish(f, g, C, eps, mu, nu, tol, newton_steps)
        err2 = marginal_error(plan2, mu, nu)
        if err2 < err:
            plan, err = plan2, err2
    result = TransportPlan(plan, sweeps + polish, float(err), err < tol)
    if not result.converged:
        warnings.warn(f"sinkhorn did not reach tol={tol} within {max_iters} sweeps "
                      f"(marginal error {err:.3g})", SinkhornWarning, stacklevel=2)
    return result


def translate(H_uni, plan):
    """P = n_m * T^T H_uni: each row is a convex combination of H_uni rows."""
    t = plan.T if isinstance(plan, TransportPlan) else np.asarray(plan)
    if t.shape[0] != H_uni.rows:
        raise ShapeError(f"plan has {t.shape[0]} source rows, embedding has {H_uni.rows}")
    n_m = t.shape[1]
    return Tensor._wrap(n_m * t.T) @ H_uni


def otma_all(embeds, H_m, projection, epsilon=DEFAULT_EPSILON, max_iters=DEFAULT_MAX_ITERS,
             tol=DEFAULT_TOL, modalities=("r", "a", "v"), plans=None):
    """Transport relation/attribute/visual rows onto the fused rows.

    ``embeds`` maps modality key to an n x d tensor (structural is never
    aligned).  Returns ({key: P}, {key: TransportPlan}).  Passing ``plans``
    from an earlier call reuses them instead of solving again.
    """
    out, out_plans = {}, {}
    target = _values(H_m) @ np.asarray(projection)
    for k in modalities:
        if k == "s":
            continue
        H = embeds[k]
        if H.rows != target.shape[0]:
            raise ShapeError(f"modality {k} has {H.rows} rows, fused embedding has {target.shape[0]}")
        if plans is not None and k in plans:
            plan = plans[k]
        else:
            with T.no_grad():
                cost = cosine_cost(H, target, zero_rows="neutral")
            plan = sinkhorn(TransportProblem.uniform(cost, epsilon), max_iters, tol)
        out_plans[k] = plan
        out[k] = translate(H, plan)
    return out, out_plans
