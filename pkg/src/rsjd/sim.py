"""Monte Carlo simulation of factors, assets, wealth and the Doleans exponential.

Paths are simulated in blocks. Each block owns three independent random
streams spawned from the run seed (Brownian increments, jump counts, initial
state), so a run is reproducible bitwise for a given seed and block size and
the Brownian draws never depend on the jump specification.

Within a step ``[t_k, t_{k+1})`` the allocation is frozen at its value at
``t_k``. The factors then follow a linear SDE over the step and are advanced
by their exact Gaussian transition jointly with the Brownian increment.
Jumps are drawn as Poisson counts per atom and step, which is exact in law
for a policy that is constant over the step. Time integrals of affine
functions of ``X`` use the trapezoid average of the end points.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import expm

from .dynamics import ZeroBeta, eval_g_batch, zero_beta
from .errors import DomainError, PolicyInfeasible
from .model import MarketModel

BLOCK_SIZE = 8192


# -- policies -----------------------------------------------------------------

class ConstantPolicy:
    """The same allocation at every time and state."""

    def __init__(self, h):
        self.h = np.atleast_1d(np.asarray(h, dtype=float))

    def __call__(self, t: float, X: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.broadcast_to(self.h, (X.shape[0], self.h.size))


class GridPolicy:
    """Feedback allocation interpolated multilinearly from a policy grid.

    Time and state are clamped to the grid. States outside the box get the
    zero-beta allocation, as on the solver's boundary.
    """

    def __init__(self, policy, zb: ZeroBeta | None = None, model: MarketModel | None = None):
        grid = policy.grid
        self.grid = grid
        if zb is None:
            if model is None:
                raise ValueError("need the zero-beta allocation or the model")
            zb = zero_beta(model)
        self.h_out = np.asarray(zb.h, dtype=float)
        self._h = np.asarray(policy.h, dtype=float)
        self._interp = RegularGridInterpolator((grid.times, *grid.axes), policy.h, method="linear",
                                               bounds_error=False, fill_value=None)

    def __call__(self, t: float, X: NDArray[np.float64]) -> NDArray[np.float64]:
        X = np.atleast_2d(X)
        grid = self.grid
        t = min(max(t, 0.0), grid.T)
        outside = np.any(np.abs(X) > grid.R, axis=1)
        Xc = np.clip(X, -grid.R, grid.R)
        if grid.n == 1:
            H = self._interp_1d(t, Xc[:, 0])
        else:
            H = self._interp(np.hstack([np.full((X.shape[0], 1), t), Xc]))
        if outside.any():
            H[outside] = self.h_out
        return H

    def _interp_1d(self, t: float, x: NDArray[np.float64]) -> NDArray[np.float64]:
        grid, h = self.grid, self._h
        s = t / grid.dt
        j = min(int(math.floor(s + 1e-9)), grid.nt - 1)
        w = min(max(s - j, 0.0), 1.0)
        ax = grid.axes[0]
        H = np.empty((x.size, h.shape[-1]))
        for c in range(h.shape[-1]):
            H[:, c] = np.interp(x, ax, h[j, :, c])
            if w > 1e-12:
                H[:, c] = (1.0 - w) * H[:, c] + w * np.interp(x, ax, h[j + 1, :, c])
        return H


class ShiftedPolicy:
    """``base(t, x) + delta``, used for perturbation studies."""

    def __init__(self, base: Callable, delta):
        self.base = base
        self.delta = np.atleast_1d(np.asarray(delta, dtype=float))

    def __call__(self, t, X):
        return self.base(t, X) + self.delta


def as_policy(policy) -> Callable:
    if callable(policy):
        return policy
    return ConstantPolicy(policy)


# -- Gaussian transition ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Transition:
    """Exact one-step law of ``dX = (c + BX) dt + Lambda dW`` jointly with ``dW``.

    ``X' = E X + F c + K dW + L z`` with ``z`` standard normal independent of ``dW``.
    """

    E: NDArray[np.float64]
    F: NDArray[np.float64]
    K: NDArray[np.float64]
    L: NDArray[np.float64]


def transition(B, Lambda, dt: float) -> Transition:
    n = B.shape[0]
    # F = int_0^dt e^{Bu} du from the block exponential [[B, I], [0, 0]]
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = B
    blk[:n, n:] = np.eye(n)
    eb = expm(blk * dt)
    E, F = eb[:n, :n], eb[:n, n:]
    # Van Loan: integrated covariance C11 = int_0^dt e^{Bs} LL' e^{B's} ds
    vl = np.zeros((2 * n, 2 * n))
    vl[:n, :n] = -B
    vl[:n, n:] = Lambda @ Lambda.T
    vl[n:, n:] = B.T
    ev = expm(vl * dt)
    C11 = ev[n:, n:].T @ ev[:n, n:]
    C11 = 0.5 * (C11 + C11.T)
    C12 = F @ Lambda  # Cov(noise, dW)
    K = C12 / dt
    cond = C11 - C12 @ C12.T / dt
    w, V = np.linalg.eigh(0.5 * (cond + cond.T))
    L = V * np.sqrt(np.clip(w, 0.0, None))
    return Transition(E, F, K, L)


# -- engine ---------------------------------------------------------------------

@dataclass(eq=False)
class BatchResult:
    """Per-path outputs of a simulation run; ``paths`` holds full trajectories when recorded."""

    times: NDArray[np.float64]
    logV: NDArray[np.float64]
    log_chi: NDArray[np.float64]
    int_g: NDArray[np.float64]
    X_T: NDArray[np.float64]
    min_logV: NDArray[np.float64]
    min_jump_factor: float
    seed: int | None
    measure: str
    paths: dict[str, NDArray[np.float64]] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.logV.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.times.shape[0] - 1)


def mesh(T: float, dt: float, t0: float = 0.0) -> NDArray[np.float64]:
    """Uniform mesh on ``[t0, T]`` with ``ceil((T - t0)/dt)`` steps."""
    k = max(1, math.ceil((T - t0) / dt - 1e-9))
    return np.linspace(t0, T, k + 1)


def _streams(seed, n_blocks: int):
    ss = np.random.SeedSequence(seed)
    out = []
    for child in ss.spawn(n_blocks):
        bm, jp, init = child.spawn(3)
        out.append((np.random.default_rng(bm), np.random.default_rng(jp), np.random.default_rng(init)))
    return out


def _initial_states(x0, n: int, size: int, rng) -> NDArray[np.float64]:
    if isinstance(x0, tuple) and len(x0) == 2:
        mean, cov = (np.atleast_1d(np.asarray(x0[0], dtype=float)),
                     np.atleast_2d(np.asarray(x0[1], dtype=float)))
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        L = V * np.sqrt(np.clip(w, 0.0, None))
        return mean + rng.standard_normal((size, n)) @ L.T
    x0 = np.zeros(n) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    return np.broadcast_to(x0, (size, n)).copy()


def _run_block(model: MarketModel, policy, times, size: int, x0, rngs, measure: str, record: bool):
    rng_bm, rng_jp, rng_init = rngs
    n, m, M = model.n, model.m, model.M
    theta = model.theta
    time_varying = bool(getattr(model, "time_varying", False))
    X = _initial_states(x0, n, size, rng_init)
    logV = np.full(size, math.log(model.v))
    logS = np.zeros((size, m))
    logS0 = np.zeros(size)
    log_chi = np.zeros(size)
    int_g = np.zeros(size)
    min_logV = logV.copy()
    min_factor = math.inf
    jumps = model.jumps
    G = jumps.gammas
    w = jumps.weights
    z = jumps.in_z0.astype(float)
    log1g = np.log1p(G) if jumps.n_atoms else np.zeros((0, m))
    K = len(times) - 1
    rec = {}
    if record:
        rec = {
            "X": np.empty((size, K + 1, n)), "logS": np.empty((size, K + 1, m)),
            "logS0": np.empty((size, K + 1)), "logV": np.empty((size, K + 1)),
            "log_chi": np.empty((size, K + 1)), "dW": np.empty((size, K, M)),
            "counts": np.zeros((size, K, jumps.n_atoms), dtype=np.int64), "H": np.empty((size, K, m)),
            "Xbar": np.empty((size, K, n)),
        }
        rec["X"][:, 0], rec["logS"][:, 0], rec["logS0"][:, 0] = X, logS, logS0
        rec["logV"][:, 0], rec["log_chi"][:, 0] = logV, log_chi
    cache: dict = {}
    mk = model
    for k in range(K):
        t, dt = float(times[k]), float(times[k + 1] - times[k])
        if time_varying:
            mk = model.model_at(t)
        key = (id(mk), round(dt, 15))
        if key not in cache:
            cache[key] = transition(mk.B, mk.Lambda, dt)
        tr = cache[key]
        H = np.asarray(policy(t, X), dtype=float)
        if H.shape != (size, m):
            H = np.broadcast_to(H, (size, m)).copy()
        if jumps.n_atoms:
            slack = 1.0 + H @ mk.admissible.marks.T
            smin = float(slack.min())
            if not smin > 0:
                raise PolicyInfeasible(f"policy leaves the admissible set at t = {t:.6g}", time=t)
            min_factor = min(min_factor, smin)
        dW = math.sqrt(dt) * rng_bm.standard_normal((size, M))
        zn = rng_bm.standard_normal((size, n))
        c = mk.b if measure == "P" else mk.b - theta * H @ mk.SigmaLambdaT
        Xn = X @ tr.E.T + np.atleast_2d(c) @ tr.F.T + dW @ tr.K.T + zn @ tr.L.T
        Xbar = 0.5 * (X + Xn)
        try:
            g = eval_g_batch(Xbar, H, mk)
        except DomainError as exc:
            raise PolicyInfeasible(f"policy leaves the admissible set at t = {t:.6g}", time=t) from exc
        int_g += g * dt
        logS0 += (mk.a0 + Xbar @ mk.A0) * dt
        if measure == "P":
            sdW = dW @ mk.Sigma.T
            hsdw = np.einsum("pi,pi->p", H, sdW)
            hssh = np.einsum("pi,ij,pj->p", H, mk.SigmaSigmaT, H)
            excess = mk.a_hat + Xbar @ mk.A_hat.T
            drift = mk.a0 + Xbar @ mk.A0 + np.einsum("pi,pi->p", H, excess) - 0.5 * hssh
            dlogS = (mk.a + Xbar @ mk.A.T - 0.5 * np.diag(mk.SigmaSigmaT)) * dt + sdW
            dchi = -theta * hsdw - 0.5 * theta ** 2 * hssh * dt
            if jumps.n_atoms:
                counts = rng_jp.poisson(w * dt, size=(size, jumps.n_atoms))
                hg = H @ G.T
                lg = np.log1p(hg)
                drift = drift - (hg * z) @ w
                dlogS = dlogS - jumps.compensator() * dt + counts @ log1g
                Gv = 1.0 - np.exp(-theta * lg)
                dchi = dchi - theta * np.sum(counts * lg, axis=1) + (Gv @ w) * dt
                logV += drift * dt + hsdw + np.sum(counts * lg, axis=1)
                if record:
                    rec["counts"][:, k] = counts
            else:
                logV += drift * dt + hsdw
            logS += dlogS
            log_chi += dchi
            np.minimum(min_logV, logV, out=min_logV)
        X = Xn
        if record:
            rec["X"][:, k + 1], rec["logS"][:, k + 1], rec["logS0"][:, k + 1] = X, logS, logS0
            rec["logV"][:, k + 1], rec["log_chi"][:, k + 1] = logV, log_chi
            rec["dW"][:, k], rec["H"][:, k], rec["Xbar"][:, k] = dW, H, Xbar
    return logV, log_chi, int_g, X, min_logV, min_factor, rec


def simulate_batch(model: MarketModel, policy, n_paths: int, dt: float | None = None, seed: int | None = 0,
                   x0=None, measure: str = "P", record: bool = False, times=None,
                   block_size: int = BLOCK_SIZE, threads: int = 1) -> BatchResult:
    """Simulate ``n_paths`` independent paths.

    Parameters
    ----------
    policy : callable ``(t, X) -> H`` or a constant allocation vector
    x0 : initial factor state, or ``(mean, cov)`` for a Gaussian start
    measure : ``"P"`` for the original dynamics with jumps, wealth and the
        Doleans exponential; ``"Ph"`` for the control-dependent measure,
        which is a pure diffusion with drift ``f(x, h)`` (only ``int_g`` and
        the factors are produced)
    times : explicit mesh; default ``mesh(model.T, dt)``
    threads : blocks run concurrently when > 1; results are identical
    """
    if measure not in ("P", "Ph"):
        raise ValueError("measure must be 'P' or 'Ph'")
    policy = as_policy(policy)
    times = mesh(model.T, dt) if times is None else np.asarray(times, dtype=float)
    n_blocks = max(1, math.ceil(n_paths / block_size))
    sizes = [min(block_size, n_paths - i * block_size) for i in range(n_blocks)]
    streams = _streams(seed, n_blocks)

    def run(i):
        return _run_block(model, policy, times, sizes[i], x0, streams[i], measure, record)

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, range(n_blocks)))
    else:
        parts = [run(i) for i in range(n_blocks)]
    cat = lambda i: np.concatenate([p[i] for p in parts])
    paths = {}
    if record:
        paths = {key: np.concatenate([p[6][key] for p in parts]) for key in parts[0][6]}
        paths["times"] = times
    return BatchResult(times, cat(0), cat(1), cat(2), cat(3), cat(4),
                       float(min(p[5] for p in parts)), seed, measure, paths)


# -- single paths -------------------------------------------------------------------

@dataclass(eq=False)
class SimPath:
    """One realisation on a mesh; ``events`` lists ``(time, atom index)``."""

    t: NDArray[np.float64]
    X: NDArray[np.float64]
    S: NDArray[np.float64]
    S0: NDArray[np.float64]
    V: NDArray[np.float64]
    logV: NDArray[np.float64]
    chi: NDArray[np.float64]
    dW: NDArray[np.float64]
    counts: NDArray[np.int64]
    H: NDArray[np.float64]
    Xbar: NDArray[np.float64]
    events: list[tuple[float, int]]
    seed: int | None = None

    @property
    def logS(self) -> NDArray[np.float64]:
        return np.log(self.S)


def _events(times, counts, rng) -> list[tuple[float, int]]:
    ev = []
    for k, j in zip(*np.nonzero(counts)):
        dt = times[k + 1] - times[k]
        for u in np.sort(rng.uniform(size=counts[k, j])):
            ev.append((float(times[k] + u * dt), int(j)))
    ev.sort()
    return ev


def paths_from_batch(res: BatchResult) -> list[SimPath]:
    """Split a recorded batch into SimPath objects."""
    if not res.paths:
        raise ValueError("the batch was not recorded")
    p = res.paths
    rng = np.random.default_rng(np.random.SeedSequence(res.seed).spawn(1)[0] if res.seed is not None else None)
    out = []
    for i in range(res.n_paths):
        out.append(SimPath(
            t=res.times, X=p["X"][i], S=np.exp(p["logS"][i]), S0=np.exp(p["logS0"][i]),
            V=np.exp(p["logV"][i]), logV=p["logV"][i], chi=np.exp(p["log_chi"][i]), dW=p["dW"][i],
            counts=p["counts"][i], H=p["H"][i], Xbar=p["Xbar"][i],
            events=_events(res.times, p["counts"][i], rng), seed=res.seed,
        ))
    return out


def simulate_path(model: MarketModel, policy, mesh_times=None, seed: int | None = 0, x0=None,
                  dt: float | None = None) -> SimPath:
    """A single path under the original measure (see ``simulate_batch``)."""
    times = mesh_times if mesh_times is not None else mesh(model.T, dt if dt is not None else model.T / 100)
    res = simulate_batch(model, policy, 1, seed=seed, x0=x0, record=True, times=times)
    return paths_from_batch(res)[0]


def doleans(model: MarketModel, policy, path: SimPath) -> NDArray[np.float64]:
    """Recompute ``chi`` along a path from its Brownian increments and jump counts.

    Uses the allocation recorded on the path when ``policy`` is None.
    """
    times = path.t
    theta = model.theta
    K = len(times) - 1
    jumps = model.jumps
    log_chi = np.zeros(K + 1)
    pol = None if policy is None else as_policy(policy)
    for k in range(K):
        dt = times[k + 1] - times[k]
        mk = model.model_at(times[k])
        h = path.H[k] if pol is None else np.asarray(pol(times[k], path.X[k][None, :]), dtype=float)[0]
        sdw = mk.Sigma @ path.dW[k]
        inc = -theta * h @ sdw - 0.5 * theta ** 2 * h @ mk.SigmaSigmaT @ h * dt
        if jumps.n_atoms:
            s = 1.0 + jumps.gammas @ h
            if np.any(s <= 0):
                raise DomainError(f"G >= 1 at t = {times[k]:.6g}")
            Gv = 1.0 - s ** (-theta)
            inc += np.sum(path.counts[k] * np.log1p(-Gv)) + (Gv @ jumps.weights) * dt
        log_chi[k + 1] = log_chi[k] + inc
    return np.exp(log_chi)


# -- estimators -----------------------------------------------------------------------

@dataclass
class McEstimate:
    mean: float
    se: float
    paths: int
    seed: int | None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"estimate": self.mean, "se": self.se, "paths": self.paths, "seed": self.seed, **self.extra}


def mean_estimate(samples, seed=None, **extra) -> McEstimate:
    s = np.asarray(samples, dtype=float)
    se = float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else math.inf
    return McEstimate(float(s.mean()), se, int(s.size), seed, dict(extra))


def log_mean_exp(a) -> tuple[float, float]:
    """``log(mean(exp(a)))`` with max shift, and the delta-method standard error of that log."""
    a = np.asarray(a, dtype=float)
    c = float(a.max())
    y = np.exp(a - c)
    mu = float(y.mean())
    se = float(y.std(ddof=1) / math.sqrt(y.size) / mu) if y.size > 1 else math.inf
    return c + math.log(mu), se


def criterion_from_logV(logV, theta: float, seed=None) -> McEstimate:
    lme, se = log_mean_exp(-theta * np.asarray(logV))
    return McEstimate(-lme / theta, se / theta, int(np.size(logV)), seed,
                      {"mean_logV": float(np.mean(logV)), "var_logV": float(np.var(logV, ddof=1))})


def estimate_J(model: MarketModel, policy, paths: int, seed: int | None = 0, dt: float = 0.01,
               x0=None, threads: int = 1, result: list | None = None) -> McEstimate:
    """``J = -(1/theta) ln E[V_T^(-theta)]`` from paths under the original measure."""
    res = simulate_batch(model, policy, paths, dt, seed, x0, "P", threads=threads)
    if result is not None:
        result.append(res)
    est = criterion_from_logV(res.logV, model.theta, seed)
    est.extra["dt"] = float(res.times[1] - res.times[0])
    return est


def estimate_I_tilde(model: MarketModel, policy, x0, paths: int, seed: int | None = 0, dt: float = 0.01,
                     t0: float = 0.0, threads: int = 1) -> McEstimate:
    """``E^h[exp(theta int_t0^T g dt)] v^(-theta)`` with the factors driven by ``f(x, h)``."""
    times = mesh(model.T, dt, t0)
    res = simulate_batch(model, policy, paths, seed=seed, x0=x0, measure="Ph", times=times, threads=threads)
    samples = np.exp(model.theta * res.int_g) * model.v ** (-model.theta)
    return mean_estimate(samples, seed, dt=float(times[1] - times[0]), t0=t0)


def compare_J(model: MarketModel, policy_a, policy_b, paths: int, seed: int | None = 0, dt: float = 0.01,
              x0=None, threads: int = 1) -> McEstimate:
    """``J(a) - J(b)`` on common random numbers with a paired delta-method error."""
    ra = simulate_batch(model, policy_a, paths, dt, seed, x0, "P", threads=threads)
    rb = simulate_batch(model, policy_b, paths, dt, seed, x0, "P", threads=threads)
    th = model.theta
    ya, yb = -th * ra.logV, -th * rb.logV
    c = max(ya.max(), yb.max())
    ea, eb = np.exp(ya - c), np.exp(yb - c)
    ma, mb = ea.mean(), eb.mean()
    diff = -(math.log(ma) - math.log(mb)) / th
    infl = (ea / ma - eb / mb) / th
    se = float(infl.std(ddof=1) / math.sqrt(paths))
    Ja = criterion_from_logV(ra.logV, th)
    Jb = criterion_from_logV(rb.logV, th)
    return McEstimate(diff, se, paths, seed, {"J_a": Ja.mean, "J_b": Jb.mean, "se_a": Ja.se, "se_b": Jb.se})


def wealth_positivity(res: BatchResult) -> dict:
    """Minimum wealth and jump factor over all path-steps."""
    return {
        "path_steps": res.n_paths * res.n_steps,
        "min_V": float(np.exp(res.min_logV.min())),
        "min_logV": float(res.min_logV.min()),
        "min_jump_factor": res.min_jump_factor,
        "violations": int(np.sum(~np.isfinite(res.min_logV))),
    }
