"""IPTW-weighted Cox model with Breslow ties, fitted from per-center risk-set sums.

A center summarises its patients at every global event time ``s`` with

* ``W[s]``  weighted death mass,
* ``Z[s]``  weighted sum of the death design vectors,
* ``zeta0[s], zeta1[s], zeta2[s]`` weighted sums of ``exp(beta'z)``,
  ``exp(beta'z) z`` and ``exp(beta'z) z z'`` over its risk set.

Summing those over centers recovers the pooled loss, gradient and Hessian.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedeca.errors import ConvergenceError, DataError, ProtocolError

MAX_LINEAR_PREDICTOR = 700.0


@dataclass(eq=False)
class CoxLocalStats:
    times: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    zeta0: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray

    def as_payload(self):
        return {"W": self.W, "Z": self.Z, "zeta0": self.zeta0, "zeta1": self.zeta1, "zeta2": self.zeta2}

    @classmethod
    def from_payload(cls, times, payload):
        return cls(times, payload["W"], payload["Z"], payload["zeta0"], payload["zeta1"], payload["zeta2"])


@dataclass(eq=False)
class CoxAggregate:
    """Server-side sums over centers at one ``beta``."""

    beta: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    zeta0: np.ndarray
    zeta1: np.ndarray
    nll: float
    grad: np.ndarray
    hess: np.ndarray


def _revcumsum(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def union_event_times(per_center_times):
    """Sorted union of each center's distinct event times."""
    arrays = [np.asarray(t, dtype=float) for t in per_center_times]
    times = np.unique(np.concatenate(arrays)) if arrays else np.empty(0)
    if len(times) == 0:
        raise DataError("no events in federation")
    return times


def local_event_times(time, event):
    return np.unique(np.asarray(time)[np.asarray(event) == 1])


def local_cox_stats(beta, z, time, event, weights, times) -> CoxLocalStats:
    """Risk-set summaries of one center at every global event time.

    ``time`` must be sorted ascending (canonical cohort order). Times with an
    empty local risk or death set get zeros.
    """
    beta = np.asarray(beta, dtype=float)
    z = np.asarray(z, dtype=float)
    q = len(beta)
    if z.shape[1] != q:
        raise DataError(f"beta has length {q}, design has {z.shape[1]} columns")
    S = len(times)
    eta = z @ beta
    if len(eta) and np.max(np.abs(eta)) > MAX_LINEAR_PREDICTOR:
        raise DataError("linear predictor overflow; consider scaling the Cox covariates")
    r = weights * np.exp(eta)
    if not np.all(np.isfinite(r)):
        raise DataError("non-finite exponential in Cox sums; consider scaling the Cox covariates")
    start = np.searchsorted(time, times, side="left")
    c0 = np.append(_revcumsum(r), 0.0)
    rz = r[:, None] * z
    c1 = np.vstack([_revcumsum(rz), np.zeros((1, q))])
    c2 = np.concatenate([_revcumsum(rz[:, :, None] * z[:, None, :]), np.zeros((1, q, q))])
    dead = np.asarray(event) == 1
    idx = np.searchsorted(times, time[dead])
    if np.any(idx >= S) or np.any(times[np.minimum(idx, S - 1)] != time[dead]):
        raise ProtocolError("local event time missing from the global event-time grid")
    W = np.bincount(idx, weights=weights[dead], minlength=S)
    Z = np.zeros((S, q))
    np.add.at(Z, idx, weights[dead][:, None] * z[dead])
    return CoxLocalStats(times, W, Z, c0[start], c1[start], c2[start])


def aggregate_grad_hess(beta, stats) -> CoxAggregate:
    """Sum center summaries (in the given order) and rebuild loss, gradient, Hessian.

    The loss is the negative weighted Breslow log partial likelihood.
    """
    beta = np.asarray(beta, dtype=float)
    W = sum(s.W for s in stats)
    Z = sum(s.Z for s in stats)
    z0 = sum(s.zeta0 for s in stats)
    z1 = sum(s.zeta1 for s in stats)
    z2 = sum(s.zeta2 for s in stats)
    if np.any((z0 <= 0) & (W > 0)):
        raise ProtocolError("protocol corruption: death mass at a time with empty risk set")
    m = W > 0
    Wm, z0m, z1m = W[m], z0[m], z1[m]
    ratio = z1m / z0m[:, None]
    nll = -float(np.sum(Z[m] @ beta) - np.sum(Wm * np.log(z0m)))
    grad = -(Z[m].sum(axis=0) - Wm @ ratio)
    hess = np.einsum("s,sij->ij", Wm, z2[m] / z0m[:, None, None] - ratio[:, :, None] * ratio[:, None, :])
    hess = 0.5 * (hess + hess.T)
    return CoxAggregate(beta, W, Z, z0, z1, nll, grad, hess)


def elastic_net_penalty(beta, gamma, l1_ratio, round_index):
    """Smoothed elastic net ``gamma * psi(beta)``, with its gradient and Hessian.

    ``psi = l1_ratio * sum phi_a(beta_r) + (1 - l1_ratio)/2 ||beta||^2`` where
    ``phi_a(x) = (log(1+e^{ax}) + log(1+e^{-ax}))/a`` and ``a = 1.3**round_index``.
    """
    beta = np.asarray(beta, dtype=float)
    q = len(beta)
    if gamma == 0:
        return 0.0, np.zeros(q), np.zeros((q, q))
    if gamma < 0 or not 0 <= l1_ratio <= 1:
        raise DataError("penalty needs gamma >= 0 and l1_ratio in [0, 1]")
    a = 1.3 ** round_index
    ax = a * beta
    phi = (np.logaddexp(0.0, ax) + np.logaddexp(0.0, -ax)) / a
    dphi = np.tanh(ax / 2.0)
    d2phi = 0.5 * a / np.cosh(ax / 2.0) ** 2
    value = l1_ratio * phi.sum() + 0.5 * (1 - l1_ratio) * beta @ beta
    grad = l1_ratio * dphi + (1 - l1_ratio) * beta
    hess = np.diag(l1_ratio * d2phi + (1 - l1_ratio))
    return gamma * float(value), gamma * grad, gamma * hess


@dataclass
class CoxNewtonConfig:
    gamma: float = 0.0
    l1_ratio: float = 1.0
    step_policy: str = "backtracking"
    step_size: float = 0.95
    max_halvings: int = 10
    max_rounds: int = 20
    grad_tol: float = 1e-7
    rel_tol: float = 1e-14


@dataclass
class CoxNewtonResult:
    beta: np.ndarray
    rounds: int
    trace: list
    final: CoxAggregate
    hessian: np.ndarray
    evaluations: int = 0
    step_sizes: list = field(default_factory=list)

    @property
    def nll(self):
        return self.final.nll


def _solve(H, g):
    try:
        d = np.linalg.solve(H, g)
    except np.linalg.LinAlgError:
        raise ConvergenceError("singular Cox Hessian (treatment constant over risk sets?)") from None
    if not np.all(np.isfinite(d)) or np.linalg.cond(H) > 1e14:
        raise ConvergenceError("singular Cox Hessian (treatment constant over risk sets?)")
    return d


def cox_newton_solver(q, config: CoxNewtonConfig):
    """Damped Newton-Raphson on ``nll + gamma psi`` as a coroutine.

    Yields ``beta`` and expects the :class:`CoxAggregate` at that point. A
    round proposes ``beta - step * H^{-1} g``; under backtracking the step is
    halved (up to ``max_halvings`` times) until the penalized loss does not
    increase beyond rounding noise. Converged when ``max|grad| < grad_tol``,
    when the relative loss change of an accepted step falls below ``rel_tol``
    (0 disables this test), or when no step can decrease the loss because the
    Newton decrement is at rounding level.
    """
    beta = np.zeros(q)
    agg = yield beta
    evaluations = 1
    trace = []
    steps = []
    for round_index in range(1, config.max_rounds + 1):
        pen, pgrad, phess = elastic_net_penalty(beta, config.gamma, config.l1_ratio, round_index)
        loss = agg.nll + pen
        grad = agg.grad + pgrad
        hess = agg.hess + phess
        if round_index == 1:
            trace.append(loss)
        if not np.isfinite(loss):
            raise ConvergenceError("non-finite Cox loss", trace)
        # also validates the Hessian when the gradient test already passes
        direction = _solve(hess, grad)
        if np.max(np.abs(grad)) < config.grad_tol:
            return CoxNewtonResult(beta, round_index - 1, trace, agg, hess, evaluations, steps)
        # loss changes below this are rounding noise and must not drive decisions,
        # otherwise pooled and federated summation orders take different steps
        noise = 64 * np.finfo(float).eps * max(abs(loss), 1.0)
        lr = config.step_size
        for _ in range(config.max_halvings + 1):
            cand = beta - lr * direction
            cand_agg = yield cand
            evaluations += 1
            cand_loss = cand_agg.nll + elastic_net_penalty(cand, config.gamma, config.l1_ratio, round_index)[0]
            if config.step_policy == "constant" or cand_loss <= loss + noise:
                break
            lr /= 2.0
        else:
            # predicted decrease below the loss's rounding resolution: already optimal
            if 0.5 * float(grad @ direction) <= noise:
                return CoxNewtonResult(beta, round_index - 1, trace, agg, hess, evaluations, steps)
            raise ConvergenceError("step-size search failed to decrease the Cox loss", trace)
        beta, agg = cand, cand_agg
        trace.append(cand_loss)
        steps.append(lr)
        if config.rel_tol > 0 and abs(cand_loss - loss) <= config.rel_tol * max(abs(loss), 1.0):
            pen, pgrad, phess = elastic_net_penalty(beta, config.gamma, config.l1_ratio, round_index + 1)
            return CoxNewtonResult(beta, round_index, trace, agg, agg.hess + phess, evaluations, steps)
    pen, pgrad, phess = elastic_net_penalty(beta, config.gamma, config.l1_ratio, config.max_rounds + 1)
    if np.max(np.abs(agg.grad + pgrad)) < config.grad_tol:
        return CoxNewtonResult(beta, config.max_rounds, trace, agg, agg.hess + phess, evaluations, steps)
    raise ConvergenceError(f"Cox Newton-Raphson did not converge in {config.max_rounds} rounds", trace)


def fit_cox(z, time, event, weights, config: CoxNewtonConfig | None = None) -> CoxNewtonResult:
    """Pooled fit: the K=1 case of the federated solver."""
    config = config or CoxNewtonConfig()
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    order = np.lexsort((event, time))
    z, time, event, weights = z[order], np.asarray(time, float)[order], np.asarray(event)[order], np.asarray(weights, float)[order]
    times = union_event_times([local_event_times(time, event)])
    solver = cox_newton_solver(z.shape[1], config)
    beta = next(solver)
    try:
        while True:
            beta = solver.send(aggregate_grad_hess(beta, [local_cox_stats(beta, z, time, event, weights, times)]))
    except StopIteration as stop:
        return stop.value
