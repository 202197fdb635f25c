import numpy as np
import pytest

from rsjd.jumps import JumpMeasure
from rsjd.model import MarketModel


def diffusion_model(**kw) -> MarketModel:
    """One factor, two assets, three Brownian motions, correlated factor noise."""
    base = dict(b=[0.0], B=[[-1.0]], Lambda=[[0.05, 0.0, 0.2]], a0=0.01, A0=[0.0],
                a=[0.05, 0.04], A=[[0.1], [-0.05]], Sigma=[[0.2, 0.0, 0.0], [0.0, 0.25, 0.0]],
                theta=1.0, T=1.0, v=1.0)
    base.update(kw)
    return MarketModel(**base)


JUMP_ATOMS = [
    {"gamma": [-0.1, -0.15], "weight": 0.5, "in_z0": False},
    {"gamma": [0.08, 0.1], "weight": 0.7, "in_z0": True},
]


def jump_model(**kw) -> MarketModel:
    return diffusion_model(**kw).with_jumps(JumpMeasure.from_atoms(JUMP_ATOMS))


def flat_model() -> MarketModel:
    """Excess returns vanish and the factor is orthogonal to the assets: h = 0 is optimal."""
    return MarketModel(b=[0.0], B=[[-1.0]], Lambda=[[0.0, 0.3]], a0=0.02, A0=[0.0], a=[0.02],
                       A=[[0.0]], Sigma=[[0.2, 0.0]], theta=1.0, T=1.0, v=1.0)


def three_asset_model() -> MarketModel:
    atoms = [{"gamma": [-0.1, -0.05, -0.12], "weight": 0.4, "in_z0": False},
             {"gamma": [0.06, 0.05, 0.08], "weight": 0.6, "in_z0": True}]
    return MarketModel(
        b=[0.0], B=[[-1.0]], Lambda=[[0.05, 0.0, 0.0, 0.2]], a0=0.01, A0=[0.0],
        a=[0.06, 0.05, 0.07], A=[[0.1], [-0.05], [0.05]],
        Sigma=[[0.2, 0.0, 0.0, 0.0], [0.05, 0.25, 0.0, 0.0], [0.0, 0.05, 0.3, 0.0]],
        jumps=JumpMeasure.from_atoms(atoms), theta=1.0, T=1.0, v=1.0)


@pytest.fixture
def dmodel():
    return diffusion_model()


@pytest.fixture
def jmodel():
    return jump_model()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
