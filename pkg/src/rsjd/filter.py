"""Partial observation of the factors through the asset prices (no rate loading).

With ``A0 = 0`` the discounted log-prices ``Y = ln S - a0 t`` split into

    dY1 = A_hat X dt + Sigma dW                       (continuous, carries X)
    dY2 = (c - sum_Z0 w ln(1 + gamma)) dt + jumps ln(1 + gamma)
    c_i = a_hat_i - 1/2 (SS')_ii + sum_Z0 w (ln(1 + gamma_i) - gamma_i)

and the Kalman-Bucy filter driven by ``Y1`` gives the conditional mean and
the deterministic conditional covariance ``P(t)``. Replacing ``X`` by the
filtered state leaves a market of the same form, driven by the innovations
and with time-varying factor loading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.stats import chi2
from statsmodels.stats.diagnostic import acorr_ljungbox

from .errors import NonPSD, PolicyInfeasible, PreconditionError
from .model import MarketModel
from .sim import _run_block, _streams, as_policy, mesh, transition

PSD_TOL = 1e-8


def _require_no_rate_loading(model: MarketModel) -> None:
    if np.any(model.A0 != 0):
        raise PreconditionError("the filter is implemented for A0 = 0 only")


def _sym_power(S: NDArray[np.float64], p: float) -> NDArray[np.float64]:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * w ** p) @ V.T


def xi_matrix(model: MarketModel, variant: str = "projection") -> NDArray[np.float64]:
    """``I - Sigma' (SS')^{-1} Sigma``, the projection onto the noise not seen in prices.

    ``variant="pinv"`` builds it as ``I - (Sigma' Sigma)^+ Sigma' Sigma`` with a
    pseudo-inverse, since ``Sigma' Sigma`` is singular whenever ``M > m``. Both
    give the same matrix up to rounding.
    """
    S = model.Sigma
    M = model.M
    if variant == "projection":
        return np.eye(M) - S.T @ np.linalg.solve(model.SigmaSigmaT, S)
    if variant == "pinv":
        StS = S.T @ S
        return np.eye(M) - np.linalg.pinv(StS) @ StS
    raise ValueError("variant must be 'projection' or 'pinv'")


# -- observations ------------------------------------------------------------------

@dataclass(eq=False)
class ObservationDecomposition:
    """Increment arrays of shape ``(..., K, m)`` and the constant ``c``."""

    times: NDArray[np.float64]
    Y: NDArray[np.float64]
    dY1: NDArray[np.float64]
    dY2: NDArray[np.float64]
    c: NDArray[np.float64]
    events: list = field(default_factory=list)

    def reconstruct(self) -> NDArray[np.float64]:
        """``Y(0) + cumulative sum of dY1 + dY2`` on the mesh."""
        inc = np.cumsum(self.dY1 + self.dY2, axis=-2)
        Y0 = self.Y[..., :1, :]
        return np.concatenate([Y0, Y0 + inc], axis=-2)


def observation_constant(model: MarketModel) -> NDArray[np.float64]:
    j = model.jumps
    c = model.a_hat - 0.5 * np.diag(model.SigmaSigmaT)
    if j.n_atoms and j.in_z0.any():
        z = j.in_z0
        c = c + j.weights[z] @ (np.log1p(j.gammas[z]) - j.gammas[z])
    return c


def _jump_drift(model: MarketModel) -> NDArray[np.float64]:
    j = model.jumps
    if not (j.n_atoms and j.in_z0.any()):
        return np.zeros(model.m)
    z = j.in_z0
    return j.weights[z] @ np.log1p(j.gammas[z])


def decompose_arrays(model: MarketModel, times, logS, logS0, Xbar, dW, counts) -> ObservationDecomposition:
    """Decomposition from simulated arrays; works on one path or a leading path axis."""
    _require_no_rate_loading(model)
    dt = np.diff(times)[:, None]
    Y = logS - logS0[..., None]
    dY1 = (Xbar @ model.A_hat.T) * dt + dW @ model.Sigma.T
    c = observation_constant(model)
    dY2 = np.broadcast_to((c - _jump_drift(model)) * dt, dY1.shape).copy()
    if model.jumps.n_atoms:
        dY2 = dY2 + counts @ np.log1p(model.jumps.gammas)
    return ObservationDecomposition(np.asarray(times), Y, dY1, dY2, c)


def decompose_observations(path, model: MarketModel) -> ObservationDecomposition:
    """Split the discounted log-prices of a simulated path into continuous and jump parts."""
    out = decompose_arrays(model, path.t, np.log(path.S), np.log(path.S0), path.Xbar, path.dW, path.counts)
    out.events = list(path.events)
    return out


def remove_jumps(dY, times, model: MarketModel, threshold: float | None = None):
    """Heuristic recovery of ``dY1`` from raw discounted log-price increments.

    A step is flagged when some coordinate of ``dY - (c - jump drift) dt``
    exceeds ``threshold`` in absolute value (default: half the smallest
    non-zero ``|ln(1 + gamma)|`` over atoms and assets). On a flagged step the
    atom whose log-mark is closest to the excess is subtracted. This step is
    not part of the filtering theory; it only makes the filter usable on price
    data that contain jumps.

    Returns ``(dY1, flagged)``.
    """
    dY = np.asarray(dY, dtype=float)
    dt = np.diff(np.asarray(times, dtype=float))[:, None]
    base = (observation_constant(model) - _jump_drift(model)) * dt
    resid = dY - base
    j = model.jumps
    if j.n_atoms == 0:
        return resid, np.zeros(resid.shape[:-1], dtype=bool)
    marks = np.log1p(j.gammas)
    if threshold is None:
        mags = np.abs(marks[marks != 0])
        threshold = 0.5 * float(mags.min())
    flagged = np.any(np.abs(resid) > threshold, axis=-1)
    out = resid.copy()
    if flagged.any():
        sel = resid[flagged]
        d = np.sum((sel[:, None, :] - marks[None, :, :]) ** 2, axis=-1)
        out[flagged] = sel - marks[np.argmin(d, axis=1)]
    return out, flagged


# -- Riccati ------------------------------------------------------------------------

def riccati_rhs(P: NDArray[np.float64], model: MarketModel, xi: str = "projection") -> NDArray[np.float64]:
    """Right-hand side of the conditional covariance equation."""
    Ah = model.A_hat
    SSinv = np.linalg.inv(model.SigmaSigmaT)
    LSt = model.SigmaLambdaT.T  # Lambda Sigma'
    Xi = xi_matrix(model, xi)
    Lm = model.Lambda
    Bt = model.B - LSt @ SSinv @ Ah
    return Lm @ Xi @ Xi.T @ Lm.T - P @ Ah.T @ SSinv @ Ah @ P + Bt @ P + P @ Bt.T


def _check_psd(P, t=None):
    ev = float(np.linalg.eigvalsh(P).min()) if P.size else 0.0
    if ev < -PSD_TOL:
        where = "" if t is None else f" at t = {t:.6g}"
        raise NonPSD(f"covariance lost positive semidefiniteness{where} (eigenvalue {ev:.3e})")


def riccati_step(P, dt: float, model: MarketModel, xi: str = "projection") -> NDArray[np.float64]:
    """One classical RK4 step, symmetrised."""
    P = np.asarray(P, dtype=float)
    k1 = riccati_rhs(P, model, xi)
    k2 = riccati_rhs(P + 0.5 * dt * k1, model, xi)
    k3 = riccati_rhs(P + 0.5 * dt * k2, model, xi)
    k4 = riccati_rhs(P + dt * k3, model, xi)
    out = P + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out = 0.5 * (out + out.T)
    _check_psd(out)
    return out


def riccati_solve(P0, times, model: MarketModel, substeps: int = 10, xi: str = "projection") -> NDArray[np.float64]:
    """``P`` on ``times`` from RK4 with ``substeps`` steps per mesh interval; shape ``(K+1, n, n)``."""
    times = np.asarray(times, dtype=float)
    P = np.array(np.atleast_2d(P0), dtype=float)
    out = np.empty((times.size, *P.shape))
    out[0] = P
    for k in range(times.size - 1):
        h = (times[k + 1] - times[k]) / substeps
        for _ in range(substeps):
            P = riccati_step(P, h, model, xi)
        out[k + 1] = P
    return out


def stationary_covariance_scalar(model: MarketModel, xi: str = "projection") -> float:
    """Non-negative root of the scalar algebraic Riccati equation (n = 1)."""
    if model.n != 1:
        raise ValueError("scalar case only")
    Ah = model.A_hat
    SSinv = np.linalg.inv(model.SigmaSigmaT)
    a2 = float((Ah.T @ SSinv @ Ah)[0, 0])
    Bt = float(model.B[0, 0] - (model.SigmaLambdaT.T @ SSinv @ Ah)[0, 0])
    Xi = xi_matrix(model, xi)
    q = float((model.Lambda @ Xi @ Xi.T @ model.Lambda.T)[0, 0])
    # -a2 P^2 + 2 Bt P + q = 0
    if a2 == 0:
        return -q / (2 * Bt)
    return (Bt + math.sqrt(Bt * Bt + a2 * q)) / a2


# -- filter ------------------------------------------------------------------------

@dataclass
class KalmanState:
    x_hat: NDArray[np.float64]
    P: NDArray[np.float64]
    t: float = 0.0


def _gain(P, model: MarketModel) -> NDArray[np.float64]:
    """``(Lambda Sigma' + P A_hat') (SS')^{-1/2}``."""
    return (model.SigmaLambdaT.T + P @ model.A_hat.T) @ _sym_power(model.SigmaSigmaT, -0.5)


def _propagator(model: MarketModel, dt: float):
    """``e^{B dt}`` and ``int_0^dt e^{Bu} du b``: the drift part of the mean is propagated exactly."""
    tr = transition(model.B, np.zeros((model.n, 1)), dt)
    return tr.E, tr.F @ model.b


def filter_step(state: KalmanState, dY1, dt: float, model: MarketModel, xi: str = "projection"):
    """Advance the conditional mean and covariance by one observation increment.

    Returns ``(new state, innovation increment dU)``.
    """
    _require_no_rate_loading(model)
    S_mh = _sym_power(model.SigmaSigmaT, -0.5)
    E, Fb = _propagator(model, dt)
    x = np.asarray(state.x_hat, dtype=float)
    dU = S_mh @ (np.asarray(dY1, dtype=float) - model.A_hat @ x * dt)
    x_new = E @ x + Fb + _gain(state.P, model) @ dU
    P_new = riccati_step(state.P, dt, model, xi)
    return KalmanState(x_new, P_new, state.t + dt), dU


@dataclass(eq=False)
class FilterResult:
    times: NDArray[np.float64]
    x_hat: NDArray[np.float64]  # (paths, K+1, n)
    P: NDArray[np.float64]  # (K+1, n, n)
    dU: NDArray[np.float64]  # (paths, K, m)

    def normalized_innovations(self) -> NDArray[np.float64]:
        """``dU / sqrt(dt)``, standard normal and white when the filter is right."""
        return self.dU / np.sqrt(np.diff(self.times))[None, :, None]


def run_filter(model: MarketModel, dY1, times, m0, P0, substeps: int = 10, xi: str = "projection") -> FilterResult:
    """Filter many paths at once; ``dY1`` has shape ``(paths, K, m)`` or ``(K, m)``.

    ``P`` is integrated once on a mesh ``substeps`` times finer, as it does
    not depend on the observations.
    """
    _require_no_rate_loading(model)
    dY1 = np.asarray(dY1, dtype=float)
    single = dY1.ndim == 2
    if single:
        dY1 = dY1[None]
    times = np.asarray(times, dtype=float)
    Npaths, K, m = dY1.shape
    n = model.n
    Ps = riccati_solve(P0, times, model, substeps, xi)
    S_mh = _sym_power(model.SigmaSigmaT, -0.5)
    xh = np.empty((Npaths, K + 1, n))
    xh[:, 0] = np.broadcast_to(np.atleast_1d(np.asarray(m0, dtype=float)), (Npaths, n))
    dU = np.empty((Npaths, K, m))
    props: dict = {}
    for k in range(K):
        dt = times[k + 1] - times[k]
        key = round(dt, 15)
        if key not in props:
            props[key] = _propagator(model, dt)
        E, Fb = props[key]
        x = xh[:, k]
        u = (dY1[:, k] - x @ model.A_hat.T * dt) @ S_mh.T
        dU[:, k] = u
        xh[:, k + 1] = x @ E.T + Fb + u @ _gain(Ps[k], model).T
    if single:
        return FilterResult(times, xh[0], Ps, dU[0])
    return FilterResult(times, xh, Ps, dU)


def error_covariance_check(X_true, x_hat, P_T) -> dict:
    """Empirical covariance of ``X - X_hat`` at the final time against ``P(T)``."""
    e = np.asarray(X_true) - np.asarray(x_hat)
    emp = np.atleast_2d(np.cov(e.T, ddof=1)) if e.shape[1] > 1 else np.array([[float(np.var(e, ddof=1))]])
    scale = float(np.linalg.norm(P_T))
    # with P(T) = 0 the absolute error is reported
    rel = float(np.linalg.norm(emp - P_T) / scale) if scale > 0 else float(np.linalg.norm(emp))
    return {"empirical": emp.tolist(), "P_T": np.asarray(P_T).tolist(), "frobenius_rel": rel}


def whiteness(innov, lags: int = 10, alpha: float = 0.01) -> dict:
    """Ljung-Box test per innovation coordinate, pooled over independent paths.

    Each path gets its own statistic ``Q``; under whiteness their sum is
    chi-square with ``lags * paths`` degrees of freedom.
    """
    u = np.asarray(innov, dtype=float)
    if u.ndim == 2:
        u = u[None]
    out = []
    for i in range(u.shape[-1]):
        q = sum(float(acorr_ljungbox(series, lags=[lags], return_df=True)["lb_stat"].iloc[0])
                for series in u[..., i])
        out.append(float(chi2.sf(q, lags * u.shape[0])))
    return {"lags": lags, "pvalues": out, "alpha": alpha, "passed": bool(min(out) > alpha)}


# -- filtered market ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FilteredMarket(MarketModel):
    """Market seen through the filter: state ``X_hat``, noise ``U`` of dimension ``m``.

    Factor loading ``(Lambda Sigma' + P(t) A_hat') (SS')^{-1/2}`` and asset
    loading ``(SS')^{1/2}``. ``P`` is interpolated linearly from the schedule.
    """

    schedule_t: NDArray[np.float64] | None = None
    schedule_P: NDArray[np.float64] | None = None
    base_SLt: NDArray[np.float64] | None = None  # Lambda Sigma' of the full-information model
    time_varying = True

    def model_at(self, t: float) -> MarketModel:
        key = ("at", float(t))
        if key in self._cache:
            return self._cache[key]
        ts, Ps = self.schedule_t, self.schedule_P
        t = min(max(float(t), float(ts[0])), float(ts[-1]))
        k = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        P = (1 - w) * Ps[k] + w * Ps[k + 1]
        L = (self.base_SLt + P @ self.A_hat.T) @ _sym_power(self.base_SS, -0.5)
        out = MarketModel(b=self.b, B=self.B, Lambda=L, a0=self.a0, A0=self.A0, a=self.a, A=self.A,
                          Sigma=self.Sigma, jumps=self.jumps, theta=self.theta, T=self.T, v=self.v,
                          margin=self.margin, box=self.box)
        self._cache[key] = out
        return out

    @property
    def base_SS(self):
        return self.SigmaSigmaT


def filtered_market(model: MarketModel, P_schedule, times=None, P0=None) -> FilteredMarket:
    """Full-information model with ``X`` replaced by the filtered state.

    ``P_schedule`` is an array ``(K+1, n, n)`` on ``times``; alternatively
    pass ``P0`` and ``times`` with ``P_schedule=None`` to integrate it here.
    """
    _require_no_rate_loading(model)
    if P_schedule is None:
        if P0 is None or times is None:
            raise ValueError("need a covariance schedule or P0 and times")
        P_schedule = riccati_solve(P0, times, model)
    P_schedule = np.asarray(P_schedule, dtype=float)
    times = np.linspace(0.0, model.T, P_schedule.shape[0]) if times is None else np.asarray(times, dtype=float)
    S_half = _sym_power(model.SigmaSigmaT, 0.5)
    LSt = model.SigmaLambdaT.T
    L0 = (LSt + P_schedule[0] @ model.A_hat.T) @ _sym_power(model.SigmaSigmaT, -0.5)
    return FilteredMarket(b=model.b, B=model.B, Lambda=L0, a0=model.a0, A0=model.A0, a=model.a, A=model.A,
                          Sigma=S_half, jumps=model.jumps, theta=model.theta, T=model.T, v=model.v,
                          margin=model.margin, box=model.box, schedule_t=times, schedule_P=P_schedule,
                          base_SLt=LSt)


# -- partial-information simulation -----------------------------------------------------

def simulate_partial_information(model: MarketModel, policy, paths: int, dt: float, seed: int | None, m0, P0,
                                 block_size: int = 4096, substeps: int = 10) -> dict:
    """Wealth under an allocation that sees only the filtered state.

    The factors start from ``N(m0, P0)``. The true market is simulated, the
    filter runs on the continuous part of the discounted log-prices, and the
    wealth of ``h(t, X_hat)`` is accumulated along the true increments.
    Returns per-path ``logV`` and the final filtered and true states.
    """
    _require_no_rate_loading(model)
    policy = as_policy(policy)
    times = mesh(model.T, dt)
    n_blocks = max(1, math.ceil(paths / block_size))
    streams = _streams(seed, n_blocks)
    jumps = model.jumps
    G, w = jumps.gammas, jumps.weights
    z = jumps.in_z0.astype(float)
    out_logV, out_x, out_xh = [], [], []
    Ps = riccati_solve(P0, times, model, substeps)
    for b in range(n_blocks):
        size = min(block_size, paths - b * block_size)
        rec = _run_block(model, lambda t, X: np.zeros((X.shape[0], model.m)), times, size,
                         (np.atleast_1d(m0), np.atleast_2d(P0)), streams[b], "P", True)[6]
        dec = decompose_arrays(model, times, rec["logS"], rec["logS0"], rec["Xbar"], rec["dW"], rec["counts"])
        fr = run_filter(model, dec.dY1, times, m0, P0, substeps)
        logV = np.full(size, math.log(model.v))
        for k in range(len(times) - 1):
            h_dt = times[k + 1] - times[k]
            H = np.asarray(policy(times[k], fr.x_hat[:, k]), dtype=float)
            Xbar = rec["Xbar"][:, k]
            excess = model.a_hat + Xbar @ model.A_hat.T
            hssh = np.sum((H @ model.SigmaSigmaT) * H, axis=1)
            drift = model.a0 + np.sum(H * excess, axis=1) - 0.5 * hssh
            inc = drift * h_dt + np.sum(H * (rec["dW"][:, k] @ model.Sigma.T), axis=1)
            if jumps.n_atoms:
                hg = H @ G.T
                if np.any(hg <= -1):
                    raise PolicyInfeasible(f"policy leaves the admissible set at t = {times[k]:.6g}", time=times[k])
                inc += -((hg * z) @ w) * h_dt + np.sum(rec["counts"][:, k] * np.log1p(hg), axis=1)
            logV += inc
        out_logV.append(logV)
        out_x.append(rec["X"][:, -1])
        out_xh.append(fr.x_hat[:, -1])
    return {"times": times, "logV": np.concatenate(out_logV), "X_T": np.concatenate(out_x),
            "x_hat_T": np.concatenate(out_xh), "P": Ps}
