"""Sample-plane media acting on photon pairs.

Every function works on batches: positions are ``(n, 2)`` arrays and
survival is tracked with boolean arrays, one per photon of the pair.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


@dataclass(frozen=True)
class EtpaAbsorber:
    """Removes whole pairs with probability ``strength * exp(-|d|^2 / (2 width^2))``."""

    strength: float
    width: float

    def __post_init__(self):
        if not 0 <= self.strength <= 1:
            raise ValueError(f"ETPA strength must lie in [0, 1], got {self.strength}")
        if not self.width > 0:
            raise ValueError(f"ETPA kernel width must be > 0, got {self.width}")


@dataclass(frozen=True)
class LinearLoss:
    transmission: float

    def __post_init__(self):
        if not 0 <= self.transmission <= 1:
            raise ValueError(f"transmission must lie in [0, 1], got {self.transmission}")


@dataclass(frozen=True)
class Scatterer:
    """Each photon is displaced by N(0, displacement^2) with ``probability``."""

    probability: float
    displacement: float

    def __post_init__(self):
        if not 0 <= self.probability <= 1:
            raise ValueError(f"scatter probability must lie in [0, 1], got {self.probability}")
        if not self.displacement > 0:
            raise ValueError(f"scatter displacement must be > 0, got {self.displacement}")


MediumElement = Union[EtpaAbsorber, LinearLoss, Scatterer]
MediumSpec = Sequence[MediumElement]


def expected_etpa_fraction(strength: float, width: float, entanglement_area: float) -> float:
    """Mean absorbed fraction of unshaped pairs (Gaussian minus coordinate).

    Averaging ``strength * exp(-|d|^2 / (2 w^2))`` over a 2-D Gaussian of
    per-axis variance ``A_e`` gives ``strength * w^2 / (w^2 + A_e)``.
    """
    if strength < 0 or width <= 0 or entanglement_area < 0:
        raise ValueError("strength must be >= 0, width > 0 and area >= 0")
    return strength * width**2 / (width**2 + entanglement_area)


def etpa_probability(r1: np.ndarray, r2: np.ndarray, e: EtpaAbsorber) -> np.ndarray:
    d2 = np.sum((r1 - r2) ** 2, axis=-1)
    return e.strength * np.exp(-d2 / (2 * e.width**2))


def apply_etpa(r1: np.ndarray, r2: np.ndarray, e: EtpaAbsorber,
               rng: np.random.Generator) -> np.ndarray:
    """Boolean array, True where the pair is absorbed (both photons)."""
    p = etpa_probability(np.atleast_2d(r1), np.atleast_2d(r2), e)
    return rng.random(p.shape) < p


def apply_linear_loss(positions: np.ndarray, transmission: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Boolean array, True where the photon is kept."""
    n = np.atleast_2d(positions).shape[0]
    return rng.random(n) < transmission


def apply_scatter(positions: np.ndarray, probability: float, displacement: float,
                  rng: np.random.Generator) -> np.ndarray:
    pos = np.array(positions, dtype=float, ndmin=2)
    hit = rng.random(pos.shape[0]) < probability
    kick = displacement * rng.standard_normal(pos.shape)
    return pos + kick * hit[:, None]


def apply_medium(r1: np.ndarray, r2: np.ndarray, medium: MediumSpec,
                 rng: np.random.Generator):
    """Propagate pairs through ``medium`` in order.

    Returns ``(r1, alive1, r2, alive2)``. ETPA only acts on pairs whose two
    photons are both still present; loss and scattering act per photon.
    """
    r1 = np.array(r1, dtype=float, ndmin=2)
    r2 = np.array(r2, dtype=float, ndmin=2)
    n = r1.shape[0]
    alive1 = np.ones(n, bool)
    alive2 = np.ones(n, bool)
    for el in medium:
        if isinstance(el, EtpaAbsorber):
            gone = apply_etpa(r1, r2, el, rng) & alive1 & alive2
            alive1 &= ~gone
            alive2 &= ~gone
        elif isinstance(el, LinearLoss):
            alive1 &= apply_linear_loss(r1, el.transmission, rng)
            alive2 &= apply_linear_loss(r2, el.transmission, rng)
        elif isinstance(el, Scatterer):
            r1 = apply_scatter(r1, el.probability, el.displacement, rng)
            r2 = apply_scatter(r2, el.probability, el.displacement, rng)
        else:
            raise TypeError(f"unknown medium element {el!r}")
    return r1, alive1, r2, alive2


def describe_medium(medium: MediumSpec) -> str:
    if not medium:
        return "none"
    parts = []
    for el in medium:
        if isinstance(el, EtpaAbsorber):
            parts.append(f"etpa(strength={el.strength!r},width={el.width!r})")
        elif isinstance(el, LinearLoss):
            parts.append(f"loss(transmission={el.transmission!r})")
        else:
            parts.append(f"scatter(probability={el.probability!r},displacement={el.displacement!r})")
    return ";".join(parts)


def default_etpa_width(entanglement_area: float) -> float:
    return math.sqrt(entanglement_area)
