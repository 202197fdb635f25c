"""Finite-atom Poisson jump structure and the admissible allocation set.

A jump measure is a finite list of atoms ``(gamma_k, weight_k, in_z0_k)``:
``gamma_k`` is the vector of relative price jumps of the ``m`` assets,
``weight_k`` the arrival intensity (per unit time) and ``in_z0_k`` marks the
atoms whose Poisson counts are compensated in the price dynamics (the "small
jump" set).  Every integral against the jump measure is then a finite sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import DimensionMismatch, DomainError

DEFAULT_MARGIN = 1e-6
DEFAULT_BOX = 1e3


@dataclass(frozen=True, eq=False)
class JumpMeasure:
    """Finite atom list representing the Levy measure and the jump map.

    Parameters
    ----------
    gammas : (K, m) array of jump marks
    weights : (K,) array of positive intensities
    in_z0 : (K,) boolean array, True for compensated atoms
    """

    gammas: NDArray[np.float64]
    weights: NDArray[np.float64]
    in_z0: NDArray[np.bool_]

    def __post_init__(self):
        gammas = np.atleast_2d(np.asarray(self.gammas, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        in_z0 = np.atleast_1d(np.asarray(self.in_z0, dtype=bool))
        if gammas.size == 0:
            m = gammas.shape[1] if gammas.ndim == 2 and gammas.shape[0] == 0 else 0
            gammas = np.zeros((0, m))
            weights = np.zeros(0)
            in_z0 = np.zeros(0, dtype=bool)
        if not (gammas.shape[0] == weights.shape[0] == in_z0.shape[0]):
            raise DimensionMismatch(
                f"atom arrays disagree: gammas {gammas.shape}, weights {weights.shape}, "
                f"in_z0 {in_z0.shape}"
            )
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("atom weights must be finite and strictly positive")
        if np.any(~np.isfinite(gammas)):
            raise ValueError("atom marks must be finite")
        if np.any(gammas <= -1.0):
            raise DomainError("every jump mark must satisfy gamma_i > -1")
        for name, arr in (("gammas", gammas), ("weights", weights), ("in_z0", in_z0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, m: int) -> "JumpMeasure":
        return cls(np.zeros((0, m)), np.zeros(0), np.zeros(0, dtype=bool))

    @classmethod
    def from_atoms(cls, atoms, m: int | None = None) -> "JumpMeasure":
        """Build from an iterable of mappings ``{gamma, weight, in_z0}``."""
        atoms = list(atoms)
        if not atoms:
            if m is None:
                raise ValueError("asset count m is required for an empty atom list")
            return cls.empty(m)
        gammas = [np.atleast_1d(np.asarray(a["gamma"], dtype=float)) for a in atoms]
        return cls(
            np.vstack(gammas),
            np.array([float(a["weight"]) for a in atoms]),
            np.array([bool(a.get("in_z0", False)) for a in atoms]),
        )

    def to_atoms(self) -> list[dict]:
        return [
            {"gamma": g.tolist(), "weight": float(w), "in_z0": bool(z)}
            for g, w, z in zip(self.gammas, self.weights, self.in_z0)
        ]

    @property
    def n_atoms(self) -> int:
        return int(self.weights.shape[0])

    @property
    def m(self) -> int:
        return int(self.gammas.shape[1])

    @property
    def total_intensity(self) -> float:
        return float(self.weights.sum())

    @property
    def finite_activity_weight(self) -> float:
        """Total weight outside the compensated set."""
        return float(self.weights[~self.in_z0].sum())

    @property
    def z0_square_moment(self) -> float:
        """Sum of ``weight * |gamma|^2`` over compensated atoms."""
        z = self.in_z0
        return float(np.sum(self.weights[z] * np.sum(self.gammas[z] ** 2, axis=1)))

    def compensator(self) -> NDArray[np.float64]:
        """Vector ``sum_{Z0} weight * gamma``, the drift correction of compensated atoms."""
        z = self.in_z0
        return (self.weights[z, None] * self.gammas[z]).sum(axis=0) if z.any() else np.zeros(self.m)


@dataclass(frozen=True, eq=False)
class AdmissibleSet:
    """Open polytope ``{h : 1 + h.gamma_k > 0 for every distinct mark}``.

    With no atoms the set is all of R^m and ``box`` bounds the search region
    of the optimizer instead.
    """

    marks: NDArray[np.float64]
    margin: float = DEFAULT_MARGIN
    box: float = DEFAULT_BOX
    m: int = field(default=0)

    @classmethod
    def from_measure(cls, jumps: JumpMeasure, margin: float = DEFAULT_MARGIN,
                     box: float = DEFAULT_BOX) -> "AdmissibleSet":
        marks = np.unique(jumps.gammas, axis=0) if jumps.n_atoms else np.zeros((0, jumps.m))
        return cls(marks=marks, margin=margin, box=box, m=jumps.m)

    @property
    def bounded(self) -> bool:
        return self.marks.shape[0] > 0

    def slack(self, h) -> NDArray[np.float64]:
        """``1 + h.gamma_k`` for every mark; shape ``(..., K)``."""
        return 1.0 + np.asarray(h, dtype=float) @ self.marks.T

    def contains(self, h) -> bool:
        return bool(np.all(self.slack(h) > 0))

    def contains_strict(self, h, delta: float | None = None) -> bool:
        delta = self.margin if delta is None else delta
        return bool(np.all(self.slack(h) >= delta))

    def max_step(self, h, direction, fraction: float = 0.99) -> float:
        """Largest ``alpha <= 1`` keeping ``h + alpha*direction`` strictly inside."""
        if not self.bounded:
            return 1.0
        s = self.slack(h)
        rate = np.asarray(direction, dtype=float) @ self.marks.T
        shrinking = rate < 0
        if not shrinking.any():
            return 1.0
        return float(min(1.0, fraction * np.min((s[shrinking] - self.margin) / -rate[shrinking])))


def contains(aset: AdmissibleSet, h) -> bool:
    return aset.contains(h)


def contains_strict(aset: AdmissibleSet, h, delta: float | None = None) -> bool:
    return aset.contains_strict(h, delta)


def big_g(h, gamma, theta: float) -> float:
    """``1 - (1 + h.gamma)^(-theta)``; raises DomainError outside the half-space."""
    s = 1.0 + float(np.dot(np.atleast_1d(h), np.atleast_1d(gamma)))
    if s <= 0:
        raise DomainError(f"1 + h.gamma = {s} <= 0")
    return 1.0 - s ** (-theta)


def jump_integral_g(h, jumps: JumpMeasure, theta: float) -> float:
    """Jump part of the running cost for a single allocation ``h``."""
    if jumps.n_atoms == 0:
        return 0.0
    value, _, _ = jump_terms(np.atleast_2d(np.asarray(h, dtype=float)), jumps, theta, order=0)
    return float(value[0])


def jump_terms(H: NDArray[np.float64], jumps: JumpMeasure, theta: float, order: int = 2):
    """Vectorised jump part of the running cost with derivatives.

    Parameters
    ----------
    H : (P, m) allocations
    order : 0, 1 or 2; derivatives above ``order`` are returned as None

    Returns
    -------
    value : (P,)
    grad : (P, m) or None
    hess : (P, m, m) or None

    Raises DomainError if some ``1 + h.gamma_k <= 0``.
    """
    P = H.shape[0]
    if jumps.n_atoms == 0:
        m = H.shape[1]
        return (np.zeros(P), np.zeros((P, m)) if order >= 1 else None,
                np.zeros((P, m, m)) if order >= 2 else None)
    G = jumps.gammas
    w = jumps.weights
    z = jumps.in_z0.astype(float)
    hg = H @ G.T
    s = 1.0 + hg
    if np.any(s <= 0):
        raise DomainError("allocation outside the admissible set: 1 + h.gamma <= 0")
    s_pow = s ** (-theta)
    value = ((s_pow - 1.0) / theta + hg * z) @ w
    grad = hess = None
    if order >= 1:
        # d/dh: gamma * (z - (1+h.gamma)^(-theta-1))
        coef = w * (z - s_pow / s)
        grad = coef @ G
    if order >= 2:
        coef2 = w * (theta + 1.0) * s_pow / (s * s)
        hess = np.einsum("pk,ki,kj->pij", coef2, G, G)
    return value, grad, hess
