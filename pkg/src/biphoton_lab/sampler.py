"""Monte Carlo photon-pair positions in the sample plane.

A pair is drawn in sum/minus coordinates: the minus coordinate
``d = r1 - r2`` follows the (mask-shaped) correlation, the sum coordinate
``u = r1 + r2`` an isotropic Gaussian, and ``r1 = (u + d) / 2``,
``r2 = (u - d) / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .optics import (
    CorrelationField,
    Flat,
    Grating,
    OpticsConfig,
    OpticsError,
    SlmGrid,
    SlmMask,
    analytic_grating_correlation,
    _cached_correlation,
)


class PairEvent(NamedTuple):
    """Pair positions in mm; arrays of shape ``(n, 2)`` holding ``(x, y)``."""

    r1: np.ndarray
    r2: np.ndarray


@dataclass(frozen=True, eq=False)
class MinusSampler:
    """Distribution of the minus coordinate ``d = r1 - r2``.

    Either an analytic Gaussian mixture (``centers``, ``variance``,
    ``weights``) or a tabulated CDF over a lag grid. A fraction ``leak`` of
    pairs ignores the mask and follows the flat-mask Gaussian. Shaped pairs
    fall outside the relay aperture with probability ``1 - transmission``;
    :meth:`sample` reports them as not transmitted.
    """

    kind: str
    flat_variance: float
    leak: float = 0.0
    centers: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    lags: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)
    cdf: np.ndarray | None = field(default=None, repr=False)
    transmission: float = 1.0

    def __post_init__(self):
        if not 0 <= self.leak <= 1:
            raise ValueError(f"leak fraction must lie in [0, 1], got {self.leak}")
        if not self.flat_variance > 0:
            raise ValueError("variance must be > 0")
        if self.kind == "analytic":
            if not math.isclose(float(np.sum(self.weights)), 1.0, rel_tol=1e-9):
                raise ValueError("mixture weights must sum to 1")
        elif self.kind == "tabulated":
            if np.any(np.diff(self.cdf) < 0) or not math.isclose(self.cdf[-1], 1.0, rel_tol=1e-12):
                raise ValueError("CDF must be monotone and end at 1")
        else:
            raise ValueError(f"unknown sampler kind {self.kind!r}")

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` minus-coordinate vectors.

        Returns ``(d, transmitted)`` with ``d`` of shape ``(n, 2)``.
        """
        sd = math.sqrt(self.flat_variance)
        u = rng.random(n)
        leaked = u < self.leak
        transmitted = leaked | (u < self.leak + (1 - self.leak) * self.transmission)
        out = np.empty((n, 2))
        if self.kind == "analytic":
            comp = rng.choice(len(self.weights), size=n, p=self.weights)
            out[:] = self.centers[comp] + sd * rng.standard_normal((n, 2))
        else:
            cells = np.searchsorted(self.cdf, rng.random(n), side="right")
            cells = np.minimum(cells, self.cdf.size - 1)
            lx, ly = self.lags
            iy, ix = np.divmod(cells, lx.size)
            step = lx[1] - lx[0]
            jitter = (rng.random((n, 2)) - 0.5) * step
            out[:, 0] = lx[ix] + jitter[:, 0]
            out[:, 1] = ly[iy] + jitter[:, 1]
        k = int(leaked.sum())
        if k:
            out[leaked] = sd * rng.standard_normal((k, 2))
        return out, transmitted


def _support(marginal: np.ndarray, floor: float) -> slice:
    c = marginal.size // 2
    keep = np.flatnonzero(marginal > floor)
    half = max(abs(keep[0] - c), abs(keep[-1] - c))
    return slice(c - half, c + half + 1)


def _tabulate(corr: CorrelationField, aperture: float, floor: float = 1e-13):
    """Crop a field to its support inside ``aperture``.

    Returns ``((lags_x, lags_y), cdf, transmitted_mass)``.
    """
    v = np.where(np.abs(corr.lags) <= aperture, 1.0, 0.0)
    v = corr.values * v[:, None] * v[None, :]
    sx = _support(v.sum(axis=0), floor)
    sy = _support(v.sum(axis=1), floor)
    cdf = np.cumsum(v[sy, sx].ravel())
    mass = float(cdf[-1])
    cdf /= mass
    return (corr.lags[sx], corr.lags[sy]), cdf, mass


def build_minus_sampler(mask: SlmMask, cfg: OpticsConfig, slm_efficiency: float = 1.0,
                        mode: str = "tabulated", n_max: int = 3,
                        grid: SlmGrid | None = None) -> MinusSampler:
    """Sampler for the minus coordinate under ``mask``.

    A fraction ``1 - slm_efficiency`` of pairs is left unshaped. ``analytic``
    mode is limited to flat masks and unshifted gratings and neglects
    interference between diffraction orders; ``tabulated`` mode samples the
    numerical field of :func:`~biphoton_lab.optics.shaped_correlation`.
    """
    if not 0 < slm_efficiency <= 1:
        raise ValueError(f"SLM efficiency must lie in (0, 1], got {slm_efficiency}")
    leak = 1.0 - slm_efficiency
    var = cfg.entanglement_area
    if isinstance(mask, Flat):
        return MinusSampler("analytic", var, 0.0, np.zeros((1, 2)), np.ones(1))
    if mode == "analytic":
        if not isinstance(mask, Grating) or mask.shift != 0:
            raise OpticsError("analytic sampling supports only flat masks and unshifted gratings")
        orders = analytic_grating_correlation(mask.period, cfg, n_max)
        centers = np.array([[c, 0.0] for c, _ in orders])
        weights = np.array([w for _, w in orders])
        return MinusSampler("analytic", var, leak, centers, weights / weights.sum())
    if mode != "tabulated":
        raise ValueError(f"unknown sampler mode {mode!r}")
    grid = grid or SlmGrid.default(cfg)
    lags, cdf, mass = _tabulate(_cached_correlation(mask, cfg, grid), cfg.relay_aperture)
    return MinusSampler("tabulated", var, leak, lags=lags, cdf=cdf, transmission=mass)


def draw_pair_count(pair_rate: float, exposure: float, rng: np.random.Generator,
                    size=None):
    """Poisson number of pairs emitted during one exposure."""
    mean = pair_rate * exposure
    if not mean >= 0 or not math.isfinite(mean):
        raise ValueError(f"mean pair count must be finite and >= 0, got {mean}")
    return rng.poisson(mean, size=size)


def sum_variance(cfg: OpticsConfig) -> float:
    """Per-axis variance of ``u = r1 + r2`` giving intensity variance ``beam_area``."""
    return 4 * cfg.beam_area - cfg.entanglement_area


def sample_pairs(sampler: MinusSampler, cfg: OpticsConfig, n: int,
                 rng: np.random.Generator, anticorrelated: bool = False) -> PairEvent:
    """Draw ``n`` emitted pairs and return those transmitted to the sample.

    With ``anticorrelated`` the roles of the sum and minus coordinates are
    swapped, as for pairs imaged in the Fourier plane of the crystal.
    """
    d, ok = sampler.sample(n, rng)
    u = math.sqrt(sum_variance(cfg)) * rng.standard_normal((n, 2))
    if not ok.all():
        d, u = d[ok], u[ok]
    if anticorrelated:
        return PairEvent((u + d) / 2, (d - u) / 2)
    return PairEvent((u + d) / 2, (u - d) / 2)


def sample_pair(sampler: MinusSampler, cfg: OpticsConfig, rng: np.random.Generator):
    """Single pair as two ``(x, y)`` arrays."""
    while True:
        ev = sample_pairs(sampler, cfg, 1, rng)
        if len(ev.r1):
            return PairEvent(ev.r1[0], ev.r2[0])


PAIRINGS = ("image", "fourier", "independent")


@dataclass(frozen=True)
class SourceSpec:
    """Pair source for one run of exposures.

    Parameters
    ----------
    pair_rate : float
        Emitted pairs per second.
    exposure : float
        Exposure time in seconds.
    slm_efficiency : float
        Fraction of pairs shaped by the mask; the rest follow the flat mask.
    seed : int
        Root seed; each exposure chunk derives its own stream from it.
    pairing : str
        ``image`` for position-correlated pairs, ``fourier`` for
        anti-correlated pairs and ``independent`` for photons with the same
        intensity profile but no pair correlation.
    """

    pair_rate: float
    exposure: float = 2e-3
    slm_efficiency: float = 1.0
    mask: SlmMask = Flat()
    cfg: OpticsConfig = field(default_factory=OpticsConfig)
    seed: int = 0
    sampler_mode: str = "tabulated"
    pairing: str = "image"

    def __post_init__(self):
        mean = self.pair_rate * self.exposure
        if not (math.isfinite(mean) and mean >= 0):
            raise ValueError(f"pair rate x exposure must be finite and >= 0, got {mean}")
        if not 0 < self.slm_efficiency <= 1:
            raise ValueError(f"SLM efficiency must lie in (0, 1], got {self.slm_efficiency}")
        if self.pairing not in PAIRINGS:
            raise ValueError(f"pairing must be one of {PAIRINGS}, got {self.pairing!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def mean_pairs(self) -> float:
        return self.pair_rate * self.exposure

    def minus_sampler(self) -> MinusSampler:
        return build_minus_sampler(self.mask, self.cfg, self.slm_efficiency, self.sampler_mode)
