"""Running cost, transformed drift, Hamiltonian and the pointwise allocation problem.

In the exponentially transformed problem the solver needs, at each node
``(x, r, p)`` with ``r = Phi~`` and ``p = D Phi~``, the minimiser over the
admissible set of

    f(x, h).p + theta * g(x, h) * r.

Dividing by ``theta * r`` (which is positive) leaves the strictly convex map

    phi(h) = 1/2 (theta+1) h' SS' h - h'c + jump terms,
    c = a_hat + A_hat x + Sigma Lambda' p / r,

so the minimiser depends on ``p`` and ``r`` only through ``p / r``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import DomainError, NotZeroBeta, OptFailure, RankError
from .jumps import jump_terms
from .model import MarketModel

TOL_OPT = 1e-9
MAX_NEWTON = 100
_ARMIJO = 1e-4


def eval_g(x, h, model: MarketModel) -> float:
    """Running cost ``g(x, h)``; raises DomainError when ``h`` leaves the admissible set."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    return float(eval_g_batch(x[None, :], h[None, :], model)[0])


def eval_g_batch(X: NDArray[np.float64], H: NDArray[np.float64], model: MarketModel) -> NDArray[np.float64]:
    """Row-wise ``g`` for states ``X`` (P, n) and allocations ``H`` (P, m)."""
    X = np.asarray(X, dtype=float)
    H = np.asarray(H, dtype=float)
    theta = model.theta
    quad = 0.5 * (theta + 1.0) * np.sum((H @ model.SigmaSigmaT) * H, axis=1)
    drift = model.a_hat + X @ model.A_hat.T
    jv, _, _ = jump_terms(H, model.jumps, theta, order=0)
    return quad - model.a0 - X @ model.A0 - np.sum(H * drift, axis=1) + jv


def eval_f(x, h, model: MarketModel) -> NDArray[np.float64]:
    """Drift of the factors under the control-dependent measure: ``b + Bx - theta Lambda Sigma' h``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    h = np.atleast_1d(np.asarray(h, dtype=float))
    return model.b + model.B @ x - model.theta * model.SigmaLambdaT.T @ h


def eval_f_batch(X: NDArray[np.float64], H: NDArray[np.float64], model: MarketModel) -> NDArray[np.float64]:
    return model.b + X @ model.B.T - model.theta * H @ model.SigmaLambdaT


def _objective(H, C, model: MarketModel, order: int = 2):
    """Normalised objective ``phi`` with gradient and Hessian, row-wise."""
    q = model.theta + 1.0
    SS = model.SigmaSigmaT
    jv, jg, jh = jump_terms(H, model.jumps, model.theta, order=order)
    HS = H @ SS
    val = 0.5 * q * np.einsum("pi,pi->p", HS, H) - np.einsum("pi,pi->p", H, C) + jv
    grad = hess = None
    if order >= 1:
        grad = q * HS - C + jg
    if order >= 2:
        hess = q * SS[None, :, :] + jh
    return val, grad, hess


def linear_coefficient(X, ratio, model: MarketModel) -> NDArray[np.float64]:
    """``c = a_hat + A_hat x + Sigma Lambda' (p/r)`` row-wise."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    ratio = np.atleast_2d(np.asarray(ratio, dtype=float))
    return model.a_hat + X @ model.A_hat.T + ratio @ model.SigmaLambdaT.T


def _max_steps(H, D, model: MarketModel, fraction: float = 0.99) -> NDArray[np.float64]:
    aset = model.admissible
    if not aset.bounded:
        return np.ones(H.shape[0])
    slack = aset.slack(H) - aset.margin
    rate = D @ aset.marks.T
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(rate < 0, slack / -rate, np.inf)
    return np.minimum(1.0, fraction * lim.min(axis=1))


def newton_allocation(C: NDArray[np.float64], model: MarketModel, H0=None,
                      tol: float = TOL_OPT, max_iter: int = MAX_NEWTON):
    """Newton iterations for every row of ``C``; returns ``(H, converged)`` without raising."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    P, m = C.shape
    aset = model.admissible
    if H0 is None:
        H = np.zeros((P, m))
    else:
        H = np.array(np.broadcast_to(np.asarray(H0, dtype=float), (P, m)))
        bad = np.any(aset.slack(H) < aset.margin, axis=1) if aset.bounded else np.zeros(P, bool)
        H[bad] = 0.0

    done = np.zeros(P, dtype=bool)
    for _ in range(max_iter + 1):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        Ha, Ca = H[idx], C[idx]
        val, grad, hess = _objective(Ha, Ca, model)
        conv = np.max(np.abs(grad), axis=1) <= tol
        done[idx[conv]] = True
        if conv.all():
            break
        keep = ~conv
        idx, Ha, Ca, val, grad, hess = idx[keep], Ha[keep], Ca[keep], val[keep], grad[keep], hess[keep]
        D = -np.linalg.solve(hess, grad[:, :, None])[:, :, 0]
        slope = np.einsum("pi,pi->p", grad, D)
        alpha = _max_steps(Ha, D, model)
        # Near the optimum the decrease is below rounding; take the step as is.
        tiny = -slope < 1e-13 * (1.0 + np.abs(val))
        active = ~tiny
        for _ls in range(60):
            if not active.any():
                break
            a_idx = np.flatnonzero(active)
            trial = Ha[a_idx] + alpha[a_idx, None] * D[a_idx]
            tval, _, _ = _objective(trial, Ca[a_idx], model, order=0)
            ok = tval <= val[a_idx] + _ARMIJO * alpha[a_idx] * slope[a_idx]
            active[a_idx[ok]] = False
            alpha[a_idx[~ok]] *= 0.5
        H[idx] = Ha + alpha[:, None] * D

    return H, done


def solve_allocation(C: NDArray[np.float64], model: MarketModel, H0=None,
                     tol: float = TOL_OPT, max_iter: int = MAX_NEWTON) -> NDArray[np.float64]:
    """Minimise the normalised objective for every row of ``C`` (P, m).

    Damped Newton with a fraction-to-boundary rule and Armijo backtracking.
    The objective itself diverges at the boundary of the admissible set
    whenever an atom pushes against it, so no extra barrier is added.

    Raises
    ------
    OptFailure
        if some row has not reached ``tol`` (gradient infinity norm) after
        ``max_iter`` steps, or, without jump atoms, the minimiser lies outside
        the search box.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    H, done = newton_allocation(C, model, H0, tol, max_iter)
    P = C.shape[0]
    aset = model.admissible
    if not done.all():
        _, grad, _ = _objective(H, C, model, order=1)
        gn = np.max(np.abs(grad), axis=1)
        worst = int(np.argmax(gn))
        raise OptFailure(f"Newton iteration did not reach tol {tol:g} in {max_iter} steps "
                         f"({int((~done).sum())} of {P} rows; worst gradient {gn[worst]:.3e} at row {worst})")
    if not aset.bounded and np.any(np.abs(H) > aset.box):
        raise OptFailure(f"minimiser outside the search box |h_i| <= {aset.box:g}")
    return H


def optimal_h_batch(X, ratio, model: MarketModel, H0=None, tol: float = TOL_OPT,
                    max_iter: int = MAX_NEWTON) -> NDArray[np.float64]:
    """Optimal allocations for states ``X`` (P, n) and gradient ratios ``p/r`` (P, n)."""
    return solve_allocation(linear_coefficient(X, ratio, model), model, H0, tol, max_iter)


def optimal_h(x, r: float, p, model: MarketModel, h0=None, tol: float = TOL_OPT,
              max_iter: int = MAX_NEWTON) -> NDArray[np.float64]:
    """Unique minimiser over the admissible set of ``f(x,h).p + theta g(x,h) r``.

    Examples
    --------
    Without jumps the first-order condition is linear and, in terms of
    ``D Phi = -(p/r)/theta``,

        h* = (SS')^{-1} (a_hat + A_hat x - theta Sigma Lambda' D Phi) / (theta + 1).
    """
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return optimal_h_batch(x[None, :], (p / r)[None, :], model, h0, tol, max_iter)[0]


def inner_objective(x, r: float, p, h, model: MarketModel) -> float:
    """``f(x,h).p + theta g(x,h) r``, the quantity minimised by ``optimal_h``."""
    return float(eval_f(x, h, model) @ np.atleast_1d(p) + model.theta * eval_g(x, h, model) * r)


def hamiltonian(x, r: float, p, model: MarketModel, **kw) -> float:
    """``H(x, r, p)``: the inner objective at its minimiser."""
    h = optimal_h(x, r, p, model, **kw)
    return inner_objective(x, r, p, h, model)


@dataclass(frozen=True, eq=False)
class ZeroBeta:
    """A zero-beta allocation and its state-independent running cost ``g_check``."""

    h: NDArray[np.float64]
    g: float


def zero_beta(model: MarketModel, h=None, tol: float = 1e-10) -> ZeroBeta:
    """Zero-beta allocation ``h' A_hat = -A0`` and the constant cost ``g_check``.

    By default the minimum-norm solution is used. A user-supplied ``h`` is
    checked instead.

    Raises
    ------
    RankError
        if ``A_hat`` does not have rank ``n`` and the allocation has to be
        computed (with ``A0 = 0``, ``h = 0`` qualifies; a given ``h`` is
        only checked against the equation).
    NotZeroBeta
        if the allocation lies outside the admissible set. Rescaling would
        fit it in, but the rescaled allocation no longer solves the equation.
    """
    Ah = model.A_hat
    n = model.n
    # only the computed allocation needs the rank; h = 0 qualifies when A0 = 0
    if h is None and np.any(model.A0 != 0) and np.linalg.matrix_rank(Ah) < n:
        raise RankError(f"A_hat has rank {np.linalg.matrix_rank(Ah)} < n = {n}")
    if h is None:
        if np.all(model.A0 == 0):
            h = np.zeros(model.m)
        else:
            h = np.linalg.lstsq(Ah.T, -model.A0, rcond=None)[0]
    h = np.atleast_1d(np.asarray(h, dtype=float))
    resid = float(np.max(np.abs(Ah.T @ h + model.A0))) if n else 0.0
    if resid > tol * (1.0 + float(np.max(np.abs(model.A0)))):
        raise NotZeroBeta(f"h' A_hat + A0 = {resid:.3e}, not a zero-beta allocation")
    aset = model.admissible
    if not aset.contains_strict(h):
        slack = aset.slack(h)
        lam = float(np.min(np.where(slack < 1, (1 - aset.margin) / (1 - slack), np.inf)))
        raise NotZeroBeta(f"minimum-norm zero-beta allocation leaves the admissible set; "
                          f"scaling by {min(lam, 1.0):.6g} would fit but breaks h' A_hat = -A0")
    h.setflags(write=False)
    try:
        g = eval_g(np.zeros(n), h, model)
    except DomainError as exc:  # pragma: no cover - guarded by contains_strict
        raise NotZeroBeta(str(exc)) from exc
    return ZeroBeta(h=h, g=g)
