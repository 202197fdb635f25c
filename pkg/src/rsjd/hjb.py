"""Exponentially transformed HJB equation solved by approximation in policy space.

Under a frozen policy ``h`` the transformed value ``Phi~ = exp(-theta Phi)``
solves the linear backward equation

    dPhi~/dt + 1/2 tr(Lambda Lambda' D^2 Phi~) + f(x,h).D Phi~ + theta g(x,h) Phi~ = 0,
    Phi~(T, x) = v^(-theta),

on a box, with Dirichlet data from a zero-beta policy on the lateral boundary.
Writing ``Phi~ = exp(theta g_check (T - t)) u`` removes the constant part of
the reaction term. The zero-beta solution is then ``u = v^(-theta)``, which
backward Euler reproduces exactly, so the upper bound on ``Phi~`` holds to
rounding rather than to the time discretization error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .dynamics import ZeroBeta, eval_f_batch, eval_g_batch, linear_coefficient, newton_allocation, zero_beta
from .errors import DomainError, LinearSolveFailure, NoConvergence, NonPositiveValue, OptFailure
from .model import MarketModel

TOL_PI = 1e-8
K_MAX = 50
DRIFT_SCHEMES = ("hybrid", "upwind", "central")


@dataclass(frozen=True, eq=False)
class Grid:
    """Space-time lattice on ``[0, T] x [-R_1, R_1] x ... x [-R_n, R_n]``.

    ``nt = ceil(T / dt)`` and the step actually used is ``T / nt``.
    """

    R: NDArray[np.float64]
    nodes: tuple[int, ...]
    dt: float
    T: float

    def __init__(self, R, nodes, dt: float, T: float, n: int | None = None):
        R = np.atleast_1d(np.asarray(R, dtype=float))
        if n is not None and R.size == 1:
            R = np.full(n, R[0])
        nodes = tuple(int(k) for k in np.atleast_1d(nodes))
        if len(nodes) == 1 and R.size > 1:
            nodes = nodes * R.size
        if len(nodes) != R.size:
            raise ValueError(f"nodes {nodes} and R {R.tolist()} disagree in dimension")
        if R.size not in (1, 2):
            raise ValueError(f"only 1 or 2 factors are supported, got n = {R.size}")
        if np.any(R <= 0) or any(k < 3 for k in nodes) or not dt > 0 or not T > 0:
            raise ValueError("need R > 0, at least 3 nodes per axis, dt > 0 and T > 0")
        R.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "T", float(T))
        object.__setattr__(self, "dt", float(T) / math.ceil(T / dt - 1e-9))

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def nt(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def axes(self) -> list[NDArray[np.float64]]:
        return [np.linspace(-r, r, k) for r, k in zip(self.R, self.nodes)]

    @property
    def dx(self) -> NDArray[np.float64]:
        return 2.0 * self.R / (np.asarray(self.nodes) - 1)

    @property
    def times(self) -> NDArray[np.float64]:
        return np.linspace(0.0, self.T, self.nt + 1)

    def points(self) -> NDArray[np.float64]:
        """Node coordinates, shape ``(*shape, n)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    def interior(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.shape, dtype=bool)
        mask[(slice(1, -1),) * self.n] = True
        return mask

    def inner_region(self, fraction: float = 0.5) -> NDArray[np.bool_]:
        """Nodes with ``|x_i| <= fraction * R_i`` on every axis."""
        pts = self.points()
        return np.all(np.abs(pts) <= fraction * self.R + 1e-12, axis=-1)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "nodes": list(self.nodes), "dt": self.dt, "T": self.T}


@dataclass(eq=False)
class ValueGrid:
    """Samples of ``Phi~`` with shape ``(nt + 1, *grid.shape)``."""

    values: NDArray[np.float64]
    grid: Grid
    theta: float
    nonpositive: int = 0

    @property
    def phi(self) -> NDArray[np.float64]:
        return to_phi(self.values, self.theta)

    def at(self, t_index: int) -> NDArray[np.float64]:
        return self.values[t_index]


@dataclass(eq=False)
class PolicyGrid:
    """Allocations with shape ``(nt + 1, *grid.shape, m)``; slice ``j`` is used on ``[t_j, t_{j+1})``."""

    h: NDArray[np.float64]
    grid: Grid

    @property
    def m(self) -> int:
        return int(self.h.shape[-1])

    @classmethod
    def constant(cls, h, grid: Grid) -> "PolicyGrid":
        h = np.atleast_1d(np.asarray(h, dtype=float))
        return cls(np.broadcast_to(h, (grid.nt + 1, *grid.shape, h.size)).copy(), grid)


def to_phi(values, theta: float) -> NDArray[np.float64]:
    """``Phi = -(1/theta) ln Phi~`` nodewise."""
    return -np.log(np.asarray(values, dtype=float)) / theta


def boundary_values(grid: Grid, model: MarketModel, zb: ZeroBeta) -> NDArray[np.float64]:
    """Zero-beta value ``v^(-theta) exp(theta g_check (T - t))`` per time slice."""
    return model.v ** (-model.theta) * np.exp(model.theta * zb.g * (grid.T - grid.times))


# -- spatial operator ---------------------------------------------------------

@dataclass
class _Stencil:
    offsets: list[tuple[int, ...]]
    coeffs: list[NDArray[np.float64]]  # each of grid.shape, zero off the interior
    upwinded: float
    negative_axis: bool


def _axis_base(a, dx, d: int) -> float:
    """Axis neighbour weight of the diffusion after the mixed-derivative correction."""
    base = 0.5 * a[d, d] / dx[d] ** 2
    for e in range(len(dx)):
        if e != d:
            base -= abs(a[d, e]) / (2.0 * dx[d] * dx[e])
    return base


def _central_mask(fd, base: float, dxd: float, scheme: str) -> NDArray[np.bool_]:
    if scheme == "central":
        return np.ones(fd.shape, dtype=bool)
    if scheme == "upwind":
        return np.zeros(fd.shape, dtype=bool)
    return np.abs(fd) / (2.0 * dxd) <= base


def drift_modes(grid: Grid, model: MarketModel, H: NDArray[np.float64], scheme: str = "hybrid"):
    """Difference used for the drift at each node and axis under allocations ``H``.

    0 for central, +1 for forward and -1 for backward (upwind) differences.
    """
    X = grid.points().reshape(-1, grid.n)
    F = eval_f_batch(X, H.reshape(-1, H.shape[-1]), model).reshape(*grid.shape, grid.n)
    modes = np.zeros((*grid.shape, grid.n), dtype=np.int8)
    a = model.LambdaLambdaT
    for d in range(grid.n):
        central = _central_mask(F[..., d], _axis_base(a, grid.dx, d), grid.dx[d], scheme)
        modes[..., d] = np.where(central, 0, np.where(F[..., d] >= 0, 1, -1))
    return modes


def _stencil(grid: Grid, model: MarketModel, F: NDArray[np.float64], scheme: str) -> _Stencil:
    """Coefficients of ``1/2 tr(a D^2) + F.D`` on the interior nodes.

    Second derivatives are central. The mixed derivative uses the 7-point
    stencil oriented by the sign of ``a_12``. The drift is central wherever
    that keeps every neighbour coefficient non-negative (``hybrid``) and
    one-sided upwind elsewhere.
    """
    n = grid.n
    dx = grid.dx
    a = model.LambdaLambdaT
    inner = grid.interior()
    offsets: list[tuple[int, ...]] = []
    coeffs: list[NDArray[np.float64]] = []
    n_up = 0
    negative_axis = False
    for d in range(n):
        base = _axis_base(a, dx, d)
        if base < 0:
            negative_axis = True
        fd = F[..., d]
        central = _central_mask(fd, base, dx[d], scheme)
        n_up += int(np.sum(~central & inner))
        plus = np.where(central, base + fd / (2 * dx[d]), base + np.maximum(fd, 0.0) / dx[d])
        minus = np.where(central, base - fd / (2 * dx[d]), base + np.maximum(-fd, 0.0) / dx[d])
        e_d = tuple(1 if k == d else 0 for k in range(n))
        offsets += [e_d, tuple(-k for k in e_d)]
        coeffs += [np.where(inner, plus, 0.0), np.where(inner, minus, 0.0)]
    if n == 2 and a[0, 1] != 0.0:
        s = 1 if a[0, 1] > 0 else -1
        cd = abs(a[0, 1]) / (2.0 * dx[0] * dx[1])
        diag = np.where(inner, cd, 0.0)
        offsets += [(1, s), (-1, -s)]
        coeffs += [diag, diag.copy()]
    frac = n_up / max(1, n * int(inner.sum()))
    return _Stencil(offsets, coeffs, frac, negative_axis)


def _flat_index(grid: Grid) -> NDArray[np.int64]:
    return np.arange(grid.size).reshape(grid.shape)


def _shift_index(idx: NDArray[np.int64], off: tuple[int, ...]) -> NDArray[np.int64]:
    """Flat index of ``node + off`` (wrapped; only used on interior nodes)."""
    out = idx
    for ax, o in enumerate(off):
        if o:
            out = np.roll(out, -o, axis=ax)
    return out


@dataclass
class _Slice:
    """Implicit system ``(I - dt (L + diag(react))) u = rhs`` for one time slice."""

    st: _Stencil
    react: NDArray[np.float64]
    diag: NDArray[np.float64]


class _Assembler:
    def __init__(self, grid: Grid, model: MarketModel, zb: ZeroBeta, scheme: str):
        if scheme not in DRIFT_SCHEMES:
            raise ValueError(f"drift_scheme must be one of {DRIFT_SCHEMES}")
        if model.n != grid.n:
            raise ValueError(f"grid has {grid.n} axes but the model has {model.n} factors")
        self.grid, self.model, self.zb, self.scheme = grid, model, zb, scheme
        self.X = grid.points().reshape(-1, grid.n)
        self.inner = grid.interior()
        self.idx = _flat_index(grid)
        self.warned = False

    def coefficients(self, j: int, H: NDArray[np.float64]):
        """Drift and reaction at slice ``j`` for allocation field ``H`` (*shape, m)."""
        mj = self.model.model_at(self.grid.times[j])
        Hf = H.reshape(-1, H.shape[-1])
        F = eval_f_batch(self.X, Hf, mj).reshape(*self.grid.shape, self.grid.n)
        try:
            g = eval_g_batch(self.X, Hf, mj).reshape(self.grid.shape)
        except DomainError as exc:
            raise DomainError(f"policy at time {self.grid.times[j]:.6g} leaves the admissible set") from exc
        react = np.where(self.inner, mj.theta * (g - self.zb.g), 0.0)
        return mj, F, react

    def build(self, j: int, H: NDArray[np.float64]) -> _Slice:
        mj, F, react = self.coefficients(j, H)
        st = _stencil(self.grid, mj, F, self.scheme)
        if st.negative_axis and not self.warned:
            warnings.warn("cross-derivative term exceeds the axis diffusion; the scheme may not "
                          "preserve positivity on this grid", RuntimeWarning, stacklevel=3)
            self.warned = True
        dt = self.grid.dt
        diag = 1.0 + dt * sum(st.coeffs) - dt * react
        return _Slice(st, react, diag)

    def solve(self, sl: _Slice, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        grid, dt = self.grid, self.grid.dt
        if grid.n == 1:
            N = grid.size
            ab = np.zeros((3, N))
            ab[1] = sl.diag
            plus, minus = sl.st.coeffs[0], sl.st.coeffs[1]
            ab[0, 1:] = -dt * plus[:-1]
            ab[2, :-1] = -dt * minus[1:]
            try:
                out = solve_banded((1, 1), ab, rhs)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise LinearSolveFailure(str(exc)) from exc
        else:
            rows, cols, vals = [self.idx.ravel()], [self.idx.ravel()], [sl.diag.ravel()]
            mask = self.inner.ravel()
            for off, c in zip(sl.st.offsets, sl.st.coeffs):
                nb = _shift_index(self.idx, off).ravel()
                rows.append(self.idx.ravel()[mask])
                cols.append(nb[mask])
                vals.append(-dt * c.ravel()[mask])
            A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(grid.size, grid.size))
            try:
                out = splu(A).solve(rhs.ravel()).reshape(grid.shape)
            except RuntimeError as exc:
                raise LinearSolveFailure(str(exc)) from exc
        if not np.all(np.isfinite(out)):
            raise LinearSolveFailure("non-finite values in the implicit solve")
        return out


def _check_policy(policy, grid: Grid, model: MarketModel) -> NDArray[np.float64]:
    H = policy.h if isinstance(policy, PolicyGrid) else np.asarray(policy, dtype=float)
    expected = (grid.nt + 1, *grid.shape, model.m)
    if H.shape != expected:
        raise ValueError(f"policy grid has shape {H.shape}, expected {expected}")
    return H


@dataclass
class SolveInfo:
    upwinded_fraction: float
    stability_dt: float


def solve_linear_pde(policy, grid: Grid, model: MarketModel, zb: ZeroBeta | None = None,
                     drift_scheme: str = "hybrid", strict: bool = False,
                     info: list | None = None) -> ValueGrid:
    """Backward implicit solve of the frozen-policy equation for ``Phi~``.

    Parameters
    ----------
    policy : PolicyGrid or array ``(nt + 1, *grid.shape, m)``
    zb : zero-beta allocation supplying the boundary data; minimum-norm by default
    drift_scheme : {"hybrid", "upwind", "central"}
    strict : raise NonPositiveValue instead of clamping non-positive nodes
    info : optional list that receives a SolveInfo

    Returns
    -------
    ValueGrid
    """
    zb = zero_beta(model) if zb is None else zb
    H = _check_policy(policy, grid, model)
    asm = _Assembler(grid, model, zb, drift_scheme)
    vt = model.v ** (-model.theta)
    u = np.empty((grid.nt + 1, *grid.shape))
    u[-1] = vt
    bmask = ~asm.inner
    upw, max_react = [], 0.0
    for j in range(grid.nt - 1, -1, -1):
        sl = asm.build(j, H[j])
        upw.append(sl.st.upwinded)
        max_react = max(max_react, float(sl.react.max()))
        rhs = u[j + 1].copy()
        rhs[bmask] = vt
        u[j] = asm.solve(sl, rhs)
    scale = np.exp(model.theta * zb.g * (grid.T - grid.times))
    vals = u * scale.reshape(-1, *([1] * grid.n))
    bad = int(np.sum(vals <= 0))
    if bad:
        if strict:
            raise NonPositiveValue(f"{bad} non-positive nodes; refine the grid")
        warnings.warn(f"{bad} non-positive nodes clamped; the grid is too coarse", RuntimeWarning, stacklevel=2)
        vals = np.maximum(vals, np.finfo(float).tiny)
    if info is not None:
        info.append(SolveInfo(float(np.mean(upw)) if upw else 0.0,
                              1.0 / max_react if max_react > 0 else math.inf))
    return ValueGrid(vals, grid, model.theta, bad)


def gradient_ratio(values: NDArray[np.float64], grid: Grid, modes=None) -> NDArray[np.float64]:
    """``D Phi~ / Phi~`` on one slice; shape ``(*shape, n)``, zero on the boundary.

    Central differences, except where ``modes`` (see ``drift_modes``) asks for
    a one-sided difference.
    """
    out = np.zeros((*grid.shape, grid.n))
    for d in range(grid.n):
        up = np.roll(values, -1, axis=d)
        dn = np.roll(values, 1, axis=d)
        D = (up - dn) / (2.0 * grid.dx[d])
        if modes is not None:
            md = modes[..., d]
            D = np.where(md > 0, (up - values) / grid.dx[d], D)
            D = np.where(md < 0, (values - dn) / grid.dx[d], D)
        out[..., d] = D / values
    out[~grid.interior()] = 0.0
    return out


def _improve_slices(vals, grid: Grid, model: MarketModel, zb: ZeroBeta, slices, H0=None,
                    tol: float = 1e-9, modes=None) -> NDArray[np.float64]:
    """Policy improvement on the listed time slices; boundary nodes get the zero-beta allocation."""
    inner = grid.interior()
    X = grid.points()[inner]
    m = model.m
    slices = list(slices)
    C_rows, H0_rows = [], []
    for k, j in enumerate(slices):
        mj = model.model_at(grid.times[j])
        ratio = gradient_ratio(vals[k], grid, None if modes is None else modes[k])[inner]
        C_rows.append(linear_coefficient(X, ratio, mj))
        if H0 is not None:
            H0_rows.append(H0[k][inner])
    C = np.concatenate(C_rows)
    H0c = np.concatenate(H0_rows) if H0 is not None else None
    if all(model.model_at(grid.times[j]) is model for j in slices):
        Hc, done = newton_allocation(C, model, H0c, tol)
    else:
        Hc = np.empty_like(C)
        done = np.empty(C.shape[0], dtype=bool)
        step = int(inner.sum())
        for k, j in enumerate(slices):
            rows = slice(k * step, (k + 1) * step)
            Hc[rows], done[rows] = newton_allocation(
                C[rows], model.model_at(grid.times[j]), None if H0c is None else H0c[rows], tol)
    if not done.all():
        bad = int(np.flatnonzero(~done)[0])
        step = int(inner.sum())
        j = slices[bad // step]
        x = X[bad % step]
        raise OptFailure(f"allocation optimiser failed at t = {grid.times[j]:.6g}, x = {x.tolist()}")
    aset = model.admissible
    if not aset.bounded and np.any(np.abs(Hc) > aset.box):
        raise OptFailure(f"optimal allocation outside the search box |h_i| <= {aset.box:g}")
    out = np.empty((len(slices), *grid.shape, m))
    out[...] = zb.h
    out[:, inner] = Hc.reshape(len(slices), -1, m)
    return out


def policy_improve(values: ValueGrid, grid: Grid, model: MarketModel, zb: ZeroBeta | None = None,
                   warm: PolicyGrid | None = None, tol: float = 1e-9,
                   consistent_with: PolicyGrid | None = None, drift_scheme: str = "hybrid") -> PolicyGrid:
    """Pointwise optimal allocations from finite-difference gradients of ``Phi~``.

    Gradients are central. With ``consistent_with`` given, nodes where the
    drift of that policy is upwinded by ``drift_scheme`` use the same
    one-sided difference as the solver, which keeps the policy iteration
    exactly monotone when upwinding is active.
    """
    zb = zero_beta(model) if zb is None else zb
    vals = values.values if isinstance(values, ValueGrid) else np.asarray(values)
    if np.any(vals <= 0):
        raise NonPositiveValue("policy improvement needs strictly positive values")
    H0 = None if warm is None else warm.h
    slices = range(grid.nt + 1)
    if consistent_with is None or drift_scheme == "central":
        return PolicyGrid(_improve_slices(vals, grid, model, zb, slices, H0, tol), grid)
    return PolicyGrid(_consistent_improve(vals, grid, model, zb, slices, consistent_with.h, drift_scheme,
                                          H0, tol), grid)


def _consistent_improve(vals, grid: Grid, model: MarketModel, zb: ZeroBeta, slices, H_old, scheme: str,
                        H0=None, tol: float = 1e-9) -> NDArray[np.float64]:
    """Improvement whose gradients follow the solver's one-sided differences.

    The drift modes depend on the allocation. Where the minimiser under the old
    modes would switch them, the minimiser under the switched modes is tried as
    well. Each node keeps the best of the old, first and second candidates,
    each scored with its own modes, so no node can get worse.
    """
    slices = list(slices)
    modes = _modes_of(grid, model, H_old, slices, scheme)
    H = _improve_slices(vals, grid, model, zb, slices, H0, tol, modes if modes.any() else None)
    cand, cmodes = [H_old, H], [modes, _modes_of(grid, model, H, slices, scheme)]
    if np.any(cmodes[1] != modes):
        H2 = _improve_slices(vals, grid, model, zb, slices, H, tol, cmodes[1])
        cand.append(H2)
        cmodes.append(_modes_of(grid, model, H2, slices, scheme))
    scores = np.stack([_scores(vals, grid, model, h, md, slices) for h, md in zip(cand, cmodes)])
    # ties go to the newest candidate
    best = len(cand) - 1 - np.argmin(scores[::-1], axis=0)
    return np.take_along_axis(np.stack(cand), best[None, ..., None], axis=0)[0]


def _modes_of(grid: Grid, model: MarketModel, H, slices, scheme: str) -> NDArray[np.int8]:
    return np.stack([drift_modes(grid, model.model_at(grid.times[j]), H[k], scheme) for k, j in enumerate(slices)])


def _scores(vals, grid: Grid, model: MarketModel, H, modes, slices) -> NDArray[np.float64]:
    """Allocation-dependent part of the discrete operator divided by ``Phi~``, per node."""
    X = grid.points().reshape(-1, grid.n)
    out = np.empty((len(slices), *grid.shape))
    for k, j in enumerate(slices):
        mj = model.model_at(grid.times[j])
        Hk = H[k].reshape(-1, model.m)
        ratio = gradient_ratio(vals[k], grid, modes[k]).reshape(-1, grid.n)
        F = eval_f_batch(X, Hk, mj)
        out[k] = (np.sum(F * ratio, axis=1) + mj.theta * eval_g_batch(X, Hk, mj)).reshape(grid.shape)
    out[:, ~grid.interior()] = 0.0
    return out


@dataclass(eq=False)
class PolicyIterationResult:
    values: ValueGrid
    policy: PolicyGrid
    iterations: int
    history: list[float]
    converged: bool
    max_increase: float
    zero_beta: ZeroBeta
    upwinded_fraction: float = 0.0
    stability_dt: float = math.inf
    iterates: list[NDArray[np.float64]] = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        return self.max_increase <= 10 * TOL_PI


def policy_iteration(grid: Grid, model: MarketModel, k_max: int = K_MAX, tol_pi: float = TOL_PI,
                     zb: ZeroBeta | None = None, drift_scheme: str = "hybrid",
                     keep_iterates: bool = False, raise_on_failure: bool = True) -> PolicyIterationResult:
    """Approximation in policy space starting from the zero-beta policy.

    Iterates ``Phi~^k = solve(h^{k-1})``, ``h^k = improve(Phi~^k)`` until the
    sup-norm change between successive values is at most ``tol_pi``.
    ``history[k]`` is that change at the ``k``-th improvement.

    Raises
    ------
    NoConvergence
        after ``k_max`` improvements without meeting ``tol_pi`` (carrying the
        history), unless ``raise_on_failure`` is False.
    """
    zb = zero_beta(model) if zb is None else zb
    pol = PolicyGrid.constant(zb.h, grid)
    info: list[SolveInfo] = []
    vals = solve_linear_pde(pol, grid, model, zb, drift_scheme, info=info)
    iterates = [vals.values.copy()] if keep_iterates else []
    history: list[float] = []
    max_inc = -math.inf
    converged = False
    k = 0
    for k in range(1, k_max + 1):
        pol = policy_improve(vals, grid, model, zb, warm=pol, consistent_with=pol,
                             drift_scheme=drift_scheme)
        new = solve_linear_pde(pol, grid, model, zb, drift_scheme, info=info)
        diff = new.values - vals.values
        history.append(float(np.max(np.abs(diff))))
        max_inc = max(max_inc, float(diff.max()))
        vals = new
        if keep_iterates:
            iterates.append(vals.values.copy())
        if history[-1] <= tol_pi:
            converged = True
            break
    if not converged and raise_on_failure:
        raise NoConvergence(f"policy iteration did not reach {tol_pi:g} in {k_max} steps", history)
    return PolicyIterationResult(vals, pol, k, history, converged, max(max_inc, 0.0), zb,
                                 info[-1].upwinded_fraction, min(i.stability_dt for i in info), iterates)


def howard_inline(grid: Grid, model: MarketModel, tol: float = TOL_PI, max_inner: int = K_MAX,
                  zb: ZeroBeta | None = None, drift_scheme: str = "hybrid") -> PolicyIterationResult:
    """Single backward sweep with policy iteration inside every time slice.

    Faster than the frozen-policy reference loop; the two agree to the
    iteration tolerance up to the ordering of the fixed-point updates.
    """
    zb = zero_beta(model) if zb is None else zb
    asm = _Assembler(grid, model, zb, drift_scheme)
    vt = model.v ** (-model.theta)
    scale = np.exp(model.theta * zb.g * (grid.T - grid.times))
    u = np.empty((grid.nt + 1, *grid.shape))
    u[-1] = vt
    H = np.empty((grid.nt + 1, *grid.shape, model.m))
    H[-1] = _improve_slices(u[-1:], grid, model, zb, [grid.nt])[0]
    bmask = ~asm.inner
    counts = []
    for j in range(grid.nt - 1, -1, -1):
        rhs = u[j + 1].copy()
        rhs[bmask] = vt
        h = H[j + 1]
        cur = u[j + 1]
        for it in range(1, max_inner + 1):
            if drift_scheme == "central":
                h = _improve_slices(cur[None], grid, model, zb, [j], h[None])[0]
            else:
                h = _consistent_improve(cur[None], grid, model, zb, [j], h[None], drift_scheme, h[None])[0]
            nxt = asm.solve(asm.build(j, h), rhs)
            delta = float(np.max(np.abs(nxt - cur))) * scale[j]
            cur = nxt
            if delta <= tol:
                break
        else:
            raise NoConvergence(f"inner policy iteration failed at t = {grid.times[j]:.6g}", counts)
        counts.append(it)
        u[j], H[j] = cur, h
    vals = ValueGrid(u * scale.reshape(-1, *([1] * grid.n)), grid, model.theta)
    return PolicyIterationResult(vals, PolicyGrid(H, grid), max(counts), [float(c) for c in counts],
                                 True, 0.0, zb)


# -- a posteriori checks ------------------------------------------------------

@dataclass
class VerificationReport:
    residual_max: float
    residual_median: float
    bounds_ok: bool
    bound_excess: float
    min_value: float
    convexity_violations: int
    convexity_checked: int
    convexity_min_margin: float
    log_midpoint_violations: int
    log_midpoint_checked: int
    region_fraction: float

    @property
    def passed(self) -> bool:
        return self.bounds_ok and self.convexity_violations == 0 and self.log_midpoint_violations == 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def pde_residual(values: ValueGrid, policy: PolicyGrid, grid: Grid, model: MarketModel) -> NDArray[np.float64]:
    """Pointwise residual of the transformed equation at interior nodes and interior times.

    Centred differences in time and space; shape ``(nt - 1, *interior shape)``.
    """
    V = values.values
    dt, dx, n = grid.dt, grid.dx, grid.n
    X = grid.points()
    inner = (slice(1, -1),) * n
    res = []
    for j in range(1, grid.nt):
        mj = model.model_at(grid.times[j])
        a = mj.LambdaLambdaT
        Vj = V[j]
        dV = [(np.roll(Vj, -1, d) - np.roll(Vj, 1, d)) / (2 * dx[d]) for d in range(n)]
        lap = 0.0
        for d in range(n):
            d2 = (np.roll(Vj, -1, d) - 2 * Vj + np.roll(Vj, 1, d)) / dx[d] ** 2
            lap = lap + 0.5 * a[d, d] * d2
        if n == 2:
            pp = np.roll(np.roll(Vj, -1, 0), -1, 1)
            mm = np.roll(np.roll(Vj, 1, 0), 1, 1)
            pm = np.roll(np.roll(Vj, -1, 0), 1, 1)
            mp = np.roll(np.roll(Vj, 1, 0), -1, 1)
            lap = lap + a[0, 1] * (pp + mm - pm - mp) / (4 * dx[0] * dx[1])
        Hj = policy.h[j].reshape(-1, model.m)
        Xf = X.reshape(-1, n)
        F = eval_f_batch(Xf, Hj, mj).reshape(*grid.shape, n)
        g = eval_g_batch(Xf, Hj, mj).reshape(grid.shape)
        dt_term = (V[j + 1] - V[j - 1]) / (2 * dt)
        r = dt_term + lap + sum(F[..., d] * dV[d] for d in range(n)) + mj.theta * g * Vj
        res.append(r[inner])
    return np.array(res)


def _convexity(phi, grid: Grid, region, slack: float):
    """Midpoint convexity along each axis at nodes whose neighbours lie in ``region``."""
    viol = checked = 0
    min_margin = math.inf
    for d in range(grid.n):
        up = np.roll(phi, -1, axis=d + 1)
        dn = np.roll(phi, 1, axis=d + 1)
        margin = 0.5 * (up + dn) - phi
        ok_nodes = region & np.roll(region, -1, d) & np.roll(region, 1, d) & grid.interior()
        sel = margin[:, ok_nodes]
        eps = slack * grid.dx[d] ** 2
        viol += int(np.sum(sel < -eps))
        checked += sel.size
        if sel.size:
            min_margin = min(min_margin, float(sel.min()) / grid.dx[d] ** 2)
    return viol, checked, min_margin


def _log_midpoint(values, grid: Grid, region, n_pairs: int, rng, tol: float):
    """``Phi~(mid) >= sqrt(Phi~(x1) Phi~(x2))`` on random node pairs ``mid -/+ d``."""
    idx = np.argwhere(region)
    if len(idx) < 3:
        return 0, 0
    lo, hi = idx.min(axis=0), idx.max(axis=0)
    logV = np.log(values)
    mids = np.empty((0, grid.n), dtype=int)
    offs = np.empty((0, grid.n), dtype=int)
    while len(mids) < n_pairs:
        c = idx[rng.integers(0, len(idx), size=2 * n_pairs)]
        d = rng.integers(-(hi - lo) // 2, (hi - lo) // 2 + 1, size=(2 * n_pairs, grid.n))
        ok = np.all((c - d >= lo) & (c + d <= hi) & (c + d >= lo) & (c - d <= hi), axis=1)
        ok &= np.any(d != 0, axis=1)
        mids = np.vstack([mids, c[ok]])
        offs = np.vstack([offs, d[ok]])
    mids, offs = mids[:n_pairs], offs[:n_pairs]
    j = rng.integers(0, grid.nt + 1, size=n_pairs)
    ix = lambda P: (j, *P.T)
    gap = logV[ix(mids)] - 0.5 * (logV[ix(mids - offs)] + logV[ix(mids + offs)])
    return int(np.sum(gap < -tol)), n_pairs


def verify_solution(values: ValueGrid, policy: PolicyGrid, grid: Grid, model: MarketModel,
                    zb: ZeroBeta | None = None, region_fraction: float = 0.5,
                    convexity_slack: float = 1e-2, n_pairs: int = 1000, seed: int = 0,
                    bound_rtol: float = 1e-12) -> VerificationReport:
    """Residual, two-sided bounds, convexity of ``Phi`` and the midpoint inequality for ``Phi~``.

    Convexity and the midpoint inequality are checked on ``|x_i| <=
    region_fraction * R_i``. Close to the artificial boundary the zero-beta
    data pull ``Phi`` down and bend it, so that layer is excluded.
    ``convexity_slack * dx^2`` is the allowed shortfall of a midpoint test.
    """
    zb = zero_beta(model) if zb is None else zb
    V = values.values
    res = np.abs(pde_residual(values, policy, grid, model))
    upper = boundary_values(grid, model, zb).reshape(-1, *([1] * grid.n))
    excess = float(np.max(V / upper - 1.0))
    bounds_ok = bool(np.all(V > 0) and excess <= bound_rtol)
    region = grid.inner_region(region_fraction)
    phi = to_phi(V, model.theta)
    cv, cc, cmin = _convexity(phi, grid, region, convexity_slack)
    rng = np.random.default_rng(seed)
    tol_mid = model.theta * convexity_slack * float(np.max(grid.dx)) ** 2
    pv, pc = _log_midpoint(V, grid, region, n_pairs, rng, tol_mid)
    return VerificationReport(
        residual_max=float(res.max()) if res.size else 0.0,
        residual_median=float(np.median(res)) if res.size else 0.0,
        bounds_ok=bounds_ok, bound_excess=excess, min_value=float(V.min()),
        convexity_violations=cv, convexity_checked=cc, convexity_min_margin=cmin,
        log_midpoint_violations=pv, log_midpoint_checked=pc, region_fraction=region_fraction,
    )


def quadratic_fit(values: ValueGrid, grid: Grid, t_index: int = 0, region_fraction: float = 0.5):
    """Least-squares quadratic fit of ``Phi`` in ``x`` on one slice (1 factor).

    Returns ``(coefficients [c0, c1, c2], relative residual)`` with
    ``Phi ~ c0 + c1 x + c2 x^2``.
    """
    if grid.n != 1:
        raise ValueError("quadratic_fit supports one factor")
    x = grid.axes[0]
    sel = np.abs(x) <= region_fraction * grid.R[0] + 1e-12
    phi = values.phi[t_index][sel]
    Xd = np.vander(x[sel], 3, increasing=True)
    coef, *_ = np.linalg.lstsq(Xd, phi, rcond=None)
    resid = phi - Xd @ coef
    rel = float(np.max(np.abs(resid)) / max(np.max(np.abs(phi - phi.mean())), 1e-300))
    return coef, rel
