"""Market model: factor SDE, money market, jump-diffusion assets.

Factors      dX = (b + B X) dt + Lambda dW
Money market dS0/S0 = (a0 + A0.X) dt
Assets       dS_i/S_i- = (a + A X)_i dt + (Sigma dW)_i + jumps
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, DimensionMismatch
from .jumps import DEFAULT_BOX, DEFAULT_MARGIN, AdmissibleSet, JumpMeasure

PD_FLOOR = 1e-10


def _vec(x, name: str) -> NDArray[np.float64]:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be a vector, got shape {arr.shape}")
    return arr


def _mat(x, name: str) -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class MarketModel:
    """All coefficients of the risk-sensitive jump-diffusion market.

    Arrays are copied, coerced to float and made read-only on construction.
    ``M`` is the Brownian dimension, read from the column count of
    ``Lambda`` (``n + m`` for a full-information model, ``m`` for a filtered
    one).
    """

    b: NDArray[np.float64]
    B: NDArray[np.float64]
    Lambda: NDArray[np.float64]
    a0: float
    A0: NDArray[np.float64]
    a: NDArray[np.float64]
    A: NDArray[np.float64]
    Sigma: NDArray[np.float64]
    jumps: JumpMeasure | None = None
    theta: float = 1.0
    T: float = 1.0
    v: float = 1.0
    margin: float = DEFAULT_MARGIN
    box: float = DEFAULT_BOX
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        conv = {
            "b": _vec(self.b, "b"), "B": _mat(self.B, "B"), "Lambda": _mat(self.Lambda, "Lambda"),
            "A0": _vec(self.A0, "A0"), "a": _vec(self.a, "a"), "A": _mat(self.A, "A"),
            "Sigma": _mat(self.Sigma, "Sigma"),
        }
        for name, arr in conv.items():
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "a0", float(self.a0))
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "v", float(self.v))
        if self.jumps is None:
            object.__setattr__(self, "jumps", JumpMeasure.empty(conv["a"].shape[0]))

    # dimensions -------------------------------------------------------------
    @property
    def n(self) -> int:
        return int(self.b.shape[0])

    @property
    def m(self) -> int:
        return int(self.a.shape[0])

    @property
    def M(self) -> int:
        return int(self.Lambda.shape[1])

    # derived quantities (cached; the model is immutable) ----------------------
    def _cached(self, key, fn):
        if key not in self._cache:
            val = fn()
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            self._cache[key] = val
        return self._cache[key]

    @property
    def a_hat(self) -> NDArray[np.float64]:
        return self._cached("a_hat", lambda: self.a - self.a0 * np.ones(self.m))

    @property
    def A_hat(self) -> NDArray[np.float64]:
        return self._cached("A_hat", lambda: self.A - np.outer(np.ones(self.m), self.A0))

    @property
    def SigmaSigmaT(self) -> NDArray[np.float64]:
        return self._cached("SS", lambda: self.Sigma @ self.Sigma.T)

    @property
    def LambdaLambdaT(self) -> NDArray[np.float64]:
        return self._cached("LL", lambda: self.Lambda @ self.Lambda.T)

    @property
    def SigmaLambdaT(self) -> NDArray[np.float64]:
        """``Sigma Lambda^T`` (m x n), the asset/factor noise covariance."""
        return self._cached("SL", lambda: self.Sigma @ self.Lambda.T)

    @property
    def admissible(self) -> AdmissibleSet:
        return self._cached("aset", lambda: AdmissibleSet.from_measure(self.jumps, self.margin, self.box))

    def with_jumps(self, jumps: JumpMeasure | None) -> "MarketModel":
        return replace(self, jumps=jumps)

    def model_at(self, t: float) -> "MarketModel":
        """Coefficients in force at time ``t`` (constant for this class)."""
        return self

    # serialization ------------------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return {
            "b": self.b.tolist(), "B": self.B.tolist(), "Lambda": self.Lambda.tolist(),
            "a0": self.a0, "A0": self.A0.tolist(), "a": self.a.tolist(), "A": self.A.tolist(),
            "Sigma": self.Sigma.tolist(), "jumps": self.jumps.to_atoms(),
            "theta": self.theta, "T": self.T, "v": self.v,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MarketModel":
        required = ["b", "B", "Lambda", "a0", "A0", "a", "A", "Sigma", "theta", "T", "v"]
        missing = [k for k in required if k not in d]
        if missing:
            raise ConfigError(f"model is missing fields: {', '.join(missing)}")
        try:
            m = len(np.atleast_1d(d["a"]))
            jumps = JumpMeasure.from_atoms(d.get("jumps") or [], m=m)
            opts = {k: float(d[k]) for k in ("margin", "box") if k in d}
            return cls(
                b=d["b"], B=d["B"], Lambda=d["Lambda"], a0=d["a0"], A0=d["A0"], a=d["a"],
                A=d["A"], Sigma=d["Sigma"], jumps=jumps, theta=d["theta"], T=d["T"], v=d["v"],
                **opts,
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed model: {exc}") from exc


def hatted(model: MarketModel) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Excess-return intercept and loading ``(a - a0 1, A - 1 A0^T)``."""
    return model.a_hat, model.A_hat


def check_dimensions(model: MarketModel) -> None:
    """Raise DimensionMismatch unless every coefficient shape agrees."""
    n, m, M = model.n, model.m, model.M
    expected = {
        "B": (model.B.shape, (n, n)),
        "Lambda": (model.Lambda.shape, (n, M)),
        "A0": (model.A0.shape, (n,)),
        "A": (model.A.shape, (m, n)),
        "Sigma": (model.Sigma.shape, (m, M)),
    }
    bad = [f"{k}: got {got}, expected {exp}" for k, (got, exp) in expected.items() if got != exp]
    if model.jumps.m != m:
        bad.append(f"jump marks: got dimension {model.jumps.m}, expected {m}")
    if bad:
        raise DimensionMismatch("; ".join(bad))


@dataclass
class Finding:
    name: str
    passed: bool
    value: Any
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        val = self.value.tolist() if isinstance(self.value, np.ndarray) else self.value
        return {"name": self.name, "passed": bool(self.passed), "value": val, "detail": self.detail}


@dataclass
class ValidationReport:
    findings: list[Finding]

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.findings)

    def failed(self) -> list[Finding]:
        return [f for f in self.findings if not f.passed]

    def __getitem__(self, name: str) -> Finding:
        for f in self.findings:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {"passed": self.passed, "findings": [f.to_dict() for f in self.findings]}

    def format(self) -> str:
        lines = []
        for f in self.findings:
            flag = "PASS" if f.passed else "FAIL"
            lines.append(f"[{flag}] {f.name}: {f.value!r} {f.detail}".rstrip())
        return "\n".join(lines)


def validate(model: MarketModel, pd_floor: float = PD_FLOOR) -> ValidationReport:
    """Check the standing assumptions; violations are reported, never raised."""
    check_dimensions(model)
    n, m = model.n, model.m
    out: list[Finding] = []

    out.append(Finding("dimension_m_gt_n", m > n, {"n": n, "m": m, "M": model.M},
                       "need more assets than factors"))

    for name, mat in (("sigma_sigma_t_pd", model.SigmaSigmaT), ("lambda_lambda_t_pd", model.LambdaLambdaT)):
        sym_err = float(np.max(np.abs(mat - mat.T))) if mat.size else 0.0
        eig_min = float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())
        out.append(Finding(name, eig_min > pd_floor and sym_err <= 1e-12, eig_min,
                           f"smallest eigenvalue vs floor {pd_floor:g}"))

    sv = np.linalg.svd(model.A_hat, compute_uv=False)
    tol = max(model.A_hat.shape) * np.finfo(float).eps * (sv.max() if sv.size else 0.0)
    rank = int(np.sum(sv > tol)) if sv.size and sv.max() > 0 else 0
    out.append(Finding("rank_a_hat", rank == n, rank, f"singular values {np.round(sv, 12).tolist()}"))

    jumps = model.jumps
    if jumps.n_atoms == 0:
        for i in range(m):
            out.append(Finding(f"jump_support_asset_{i}", True, None,
                               "no atoms: pure-diffusion model"))
    else:
        for i in range(m):
            lo, hi = float(jumps.gammas[:, i].min()), float(jumps.gammas[:, i].max())
            ok = (-1.0 <= lo < 0.0 < hi < np.inf)
            out.append(Finding(f"jump_support_asset_{i}", ok, {"gamma_min": lo, "gamma_max": hi},
                               "needs a downward and an upward atom"))
    sq = jumps.z0_square_moment
    out.append(Finding("jump_square_integrable", bool(np.isfinite(sq)), sq,
                       "sum over compensated atoms of weight*|gamma|^2"))
    out.append(Finding("finite_activity_weight", bool(np.isfinite(jumps.finite_activity_weight)),
                       jumps.finite_activity_weight, "total weight of uncompensated atoms"))
    for name in ("theta", "T", "v"):
        val = getattr(model, name)
        out.append(Finding(f"{name}_positive", val > 0, val))
    return ValidationReport(out)


def load_model(path: str | Path) -> MarketModel:
    """Read a model from a YAML (or JSON) document."""
    import yaml

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"model file not found: {path}")
    with path.open() as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    if "model" in doc and isinstance(doc["model"], dict):
        doc = doc["model"]
    return MarketModel.from_dict(doc)


def save_model(model: MarketModel, path: str | Path) -> None:
    import yaml

    with Path(path).open("w") as fh:
        yaml.safe_dump(model.to_dict(), fh, sort_keys=False)
