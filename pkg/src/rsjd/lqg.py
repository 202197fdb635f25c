"""Closed-form value for the pure-diffusion model.

Without jumps the value is quadratic, ``Phi(t,x) = 1/2 x'Q x + q'x + k``.
Substituting into the equation for ``Phi`` and matching powers of ``x``
gives, with ``S = (SS')^{-1} / (theta + 1)``, ``K = theta Sigma Lambda'``,
``W1 = A_hat - K Q`` and ``w0 = a_hat - K q``,

    Q' + B'Q + QB - theta Q LL' Q + W1' S W1 = 0
    q' + Qb + B'q - theta Q LL' q + A0 + W1' S w0 = 0
    k' + b'q + 1/2 tr(LL' Q) - theta/2 q' LL' q + a0 + 1/2 w0' S w0 = 0

with ``Q(T) = 0``, ``q(T) = 0``, ``k(T) = ln v``. The optimal allocation is
``h* = S (w0 + W1 x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import solve_ivp

from .model import MarketModel


@dataclass(frozen=True, eq=False)
class QuadraticValue:
    times: NDArray[np.float64]
    Q: NDArray[np.float64]  # (nt, n, n)
    q: NDArray[np.float64]  # (nt, n)
    k: NDArray[np.float64]  # (nt,)
    model: MarketModel

    def phi(self, t_index: int, X) -> NDArray[np.float64]:
        """``Phi`` at slice ``t_index`` for states ``X`` (P, n)."""
        X = np.atleast_2d(X)
        Q, q, k = self.Q[t_index], self.q[t_index], self.k[t_index]
        return 0.5 * np.einsum("pi,ij,pj->p", X, Q, X) + X @ q + k

    def allocation(self, t_index: int, X) -> NDArray[np.float64]:
        m = self.model
        S = np.linalg.inv(m.SigmaSigmaT) / (m.theta + 1.0)
        K = m.theta * m.SigmaLambdaT
        W1 = m.A_hat - K @ self.Q[t_index]
        w0 = m.a_hat - K @ self.q[t_index]
        return (w0 + np.atleast_2d(X) @ W1.T) @ S.T


def riccati_solution(model: MarketModel, times, rtol: float = 1e-11, atol: float = 1e-13) -> QuadraticValue:
    """Integrate the coefficient equations backward from ``T`` and sample at ``times``."""
    if model.jumps.n_atoms:
        raise ValueError("the quadratic solution holds only without jumps")
    n = model.n
    th = model.theta
    S = np.linalg.inv(model.SigmaSigmaT) / (th + 1.0)
    K = th * model.SigmaLambdaT
    LL = model.LambdaLambdaT
    B, b, Ah, ah = model.B, model.b, model.A_hat, model.a_hat

    def rhs(t, y):
        Q = y[: n * n].reshape(n, n)
        q = y[n * n: n * n + n]
        W1 = Ah - K @ Q
        w0 = ah - K @ q
        dQ = -(B.T @ Q + Q @ B - th * Q @ LL @ Q + W1.T @ S @ W1)
        dq = -(Q @ b + B.T @ q - th * Q @ LL @ q + model.A0 + W1.T @ S @ w0)
        dk = -(b @ q + 0.5 * np.trace(LL @ Q) - 0.5 * th * q @ LL @ q + model.a0 + 0.5 * w0 @ S @ w0)
        return np.concatenate([dQ.ravel(), dq, [dk]])

    times = np.asarray(times, dtype=float)
    y_T = np.concatenate([np.zeros(n * n), np.zeros(n), [np.log(model.v)]])
    back = times[::-1]
    sol = solve_ivp(rhs, (model.T, float(times.min())), y_T, t_eval=back, method="DOP853",
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    Y = sol.y[:, ::-1].T
    Q = Y[:, : n * n].reshape(-1, n, n)
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    return QuadraticValue(times, Q, Y[:, n * n: n * n + n], Y[:, -1], model)
