"""Two-photon optics: SLM correlation shaping, grating Fourier series and rates.

Lengths are in millimetres unless a name says otherwise (``*_um``, ``*_nm``).
The correlation field is expressed over the minus coordinate
``delta = r1 - r2`` of the sample plane.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Union

import numpy as np
from scipy import fft as sfft
from scipy import optimize


class OpticsError(ValueError):
    """Invalid optical configuration or sampling."""


class AliasingError(OpticsError):
    """Correlation field has significant mass at the edge of the lag grid."""


@dataclass(frozen=True)
class OpticsConfig:
    """Source and imaging constants of one optical configuration.

    ``entanglement_area`` (A_e) and ``beam_area`` (Sigma) are Gaussian
    variance parameters in the sample plane, in mm^2. ``slm_area`` and
    ``slm_correlation_width`` describe the SLM plane; when left as ``None``
    they are derived from the sample-plane values through the optical
    Fourier transform of focal length ``focal_length``. ``relay_aperture``
    is the largest pair separation (per axis, mm) the SLM-to-sample relay
    transmits; pairs diffracted further are lost.
    """

    wavelength_nm: float = 814.0
    focal_length: float = 50.0
    entanglement_area: float = 1.72e-3
    beam_area: float = 1.92
    magnification: float = 2.0
    pixel_pitch_um: float = 16.0
    roi: tuple[int, int] = (64, 64)
    slm_area: float | None = None
    slm_correlation_width: float | None = None
    relay_aperture: float | None = None

    def __post_init__(self):
        if not self.entanglement_area > 0:
            raise OpticsError(f"entanglement_area must be > 0, got {self.entanglement_area}")
        if not self.beam_area > self.entanglement_area:
            raise OpticsError("beam_area must exceed entanglement_area")
        for name in ("wavelength_nm", "focal_length", "magnification", "pixel_pitch_um"):
            if not getattr(self, name) > 0:
                raise OpticsError(f"{name} must be > 0")
        nx, ny = self.roi
        if int(nx) != nx or int(ny) != ny or nx < 2 or ny < 2:
            raise OpticsError(f"roi must be two integers >= 2, got {self.roi}")
        object.__setattr__(self, "roi", (int(nx), int(ny)))
        if self.slm_area is None:
            object.__setattr__(self, "slm_area", slm_area_for(
                self.entanglement_area, self.wavelength, self.focal_length))
        if self.slm_correlation_width is None:
            object.__setattr__(self, "slm_correlation_width", slm_correlation_width_for(
                self.beam_area, self.wavelength, self.focal_length))
        if self.relay_aperture is None:
            object.__setattr__(self, "relay_aperture", 24 * math.sqrt(self.entanglement_area))
        if not self.relay_aperture > 0:
            raise OpticsError("relay_aperture must be > 0")

    @property
    def wavelength(self) -> float:
        """Wavelength in mm."""
        return self.wavelength_nm * 1e-6

    @property
    def sample_pixel(self) -> float:
        """Size of one camera pixel projected onto the sample plane (mm)."""
        return self.pixel_pitch_um * 1e-3 / self.magnification

    def replace(self, **changes) -> "OpticsConfig":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if {"entanglement_area", "wavelength_nm", "focal_length"} & changes.keys():
            fields["slm_area"] = None
        if {"beam_area", "wavelength_nm", "focal_length"} & changes.keys():
            fields["slm_correlation_width"] = None
        if "entanglement_area" in changes:
            fields["relay_aperture"] = None
        fields.update(changes)
        return OpticsConfig(**fields)


def slm_area_for(entanglement_area: float, wavelength: float, focal_length: float) -> float:
    """SLM-plane envelope area whose Fourier image has variance ``entanglement_area``.

    The amplitude ``exp(-r^2 / (4 S))`` transforms to an intensity
    ``exp(-delta^2 / (2 A_e))`` with ``A_e = (lambda f)^2 / (16 pi^2 S)``.
    """
    return (wavelength * focal_length) ** 2 / (16 * math.pi**2 * entanglement_area)


def slm_correlation_width_for(beam_area: float, wavelength: float, focal_length: float) -> float:
    # Fourier dual of the sample-plane beam, same relation as slm_area_for.
    return wavelength * focal_length / (4 * math.pi * math.sqrt(beam_area))


# --------------------------------------------------------------------------- masks


@dataclass(frozen=True)
class Flat:
    pass


@dataclass(frozen=True)
class Grating:
    """Binary [0, pi/2] grating ``pi/4 [sgn(cos(2 pi x / period + shift)) + 1]``."""

    period: float
    shift: float = 0.0

    def __post_init__(self):
        if not self.period > 0:
            raise OpticsError(f"grating period must be > 0, got {self.period}")


@dataclass(frozen=True)
class HalfPlane:
    """Constant phase on the ``x > 0`` half of the SLM, zero elsewhere."""

    phase: float

    def __post_init__(self):
        if not 0 <= self.phase < 2 * math.pi:
            raise OpticsError(f"half-plane phase must lie in [0, 2pi), got {self.phase}")


@dataclass(frozen=True, eq=False)
class Custom:
    """Arbitrary phase map sampled on a :class:`SlmGrid` of matching size."""

    phase: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.phase, dtype=float)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise OpticsError("custom phase must be a finite 2-D array")
        arr.setflags(write=False)
        object.__setattr__(self, "phase", arr)

    def __hash__(self):
        return hash((self.phase.shape, self.phase.tobytes()))

    def __eq__(self, other):
        return isinstance(other, Custom) and np.array_equal(self.phase, other.phase)


SlmMask = Union[Flat, Grating, HalfPlane, Custom]


def mask_name(mask: SlmMask) -> str:
    if isinstance(mask, Flat):
        return "flat"
    if isinstance(mask, Grating):
        return f"grating(period={mask.period!r},shift={mask.shift!r})"
    if isinstance(mask, HalfPlane):
        return f"halfplane(phase={mask.phase!r})"
    return f"custom({mask.phase.shape[0]}x{mask.phase.shape[1]})"


# --------------------------------------------------------------------------- Fourier series


def square_wave_coeff(n: int) -> float:
    """Exponential Fourier coefficient ``a_n`` of ``sgn(cos u)``.

    ``a_n = sinc(n / 2)`` for odd ``n`` (normalised sinc) and 0 for even ``n``.
    """
    n = int(n)
    if n % 2 == 0:
        return 0.0
    return float(np.sinc(n / 2))


# --------------------------------------------------------------------------- SLM sampling


@dataclass(frozen=True)
class SlmGrid:
    """Square sampling of the SLM plane, symmetric about the origin.

    ``n`` must be odd so that every sample ``r`` has its mirror ``-r``.
    """

    n: int
    step: float

    def __post_init__(self):
        if self.n % 2 == 0:
            raise OpticsError(f"SLM grid size must be odd to be origin-symmetric, got {self.n}")
        if not self.step > 0:
            raise OpticsError("SLM grid step must be > 0")

    @classmethod
    def default(cls, cfg: OpticsConfig, n: int = 2047, extent: float = 64.0) -> "SlmGrid":
        """``n`` samples over ``extent * sqrt(slm_area)`` per side."""
        return cls(n, extent * math.sqrt(cfg.slm_area) / n)

    @property
    def coords(self) -> np.ndarray:
        half = (self.n - 1) // 2
        return np.arange(-half, half + 1) * self.step

    def lag_coords(self, cfg: OpticsConfig) -> np.ndarray:
        """Sample-plane lag coordinates conjugate to this grid."""
        half = (self.n - 1) // 2
        return np.arange(-half, half + 1) * cfg.wavelength * cfg.focal_length / (self.n * self.step)


def _phase_1d(mask: SlmMask, x: np.ndarray) -> np.ndarray | None:
    """Phase as a function of x only, or None when the mask is genuinely 2-D."""
    if isinstance(mask, Flat):
        return np.zeros_like(x)
    if isinstance(mask, Grating):
        return np.pi / 4 * (np.sign(np.cos(2 * np.pi * x / mask.period + mask.shift)) + 1)
    if isinstance(mask, HalfPlane):
        # half value on the dividing line keeps theta(x) + theta(-x) constant
        return np.where(x > 0, mask.phase, np.where(x == 0, mask.phase / 2, 0.0))
    return None


def mask_phase(mask: SlmMask, grid: SlmGrid) -> np.ndarray:
    """Programmed phase theta on the grid, indexed ``[y, x]``."""
    x = grid.coords
    phase = _phase_1d(mask, x)
    if phase is not None:
        return np.broadcast_to(phase, (grid.n, grid.n)).copy()
    if mask.phase.shape != (grid.n, grid.n):
        raise OpticsError(f"custom phase shape {mask.phase.shape} does not match grid {grid.n}")
    return mask.phase.copy()


def symmetrized_phase(mask: SlmMask, grid: SlmGrid) -> np.ndarray:
    """``psi(r) = theta(r) + theta(-r)`` on an origin-symmetric grid."""
    if not isinstance(grid, SlmGrid):
        raise OpticsError("symmetrized_phase needs an SlmGrid")
    theta = mask_phase(mask, grid)
    return theta + theta[::-1, ::-1]


# --------------------------------------------------------------------------- correlation field


@dataclass(frozen=True, eq=False)
class CorrelationField:
    """Correlation over sample-plane lags, indexed ``[dy, dx]``.

    The total mass is 1 up to the share of light a grating diffracts beyond
    the lag range.
    """

    values: np.ndarray = field(repr=False)
    lags: np.ndarray = field(repr=False)

    @property
    def spacing(self) -> float:
        return float(self.lags[1] - self.lags[0])

    def marginal_x(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def variance_x(self) -> float:
        p = self.marginal_x()
        mean = np.sum(p * self.lags)
        return float(np.sum(p * (self.lags - mean) ** 2))

    def index_of(self, delta: float) -> int:
        return int(np.argmin(np.abs(self.lags - delta)))

    def peak_near(self, delta_x: float, halfwidth: int = 3) -> float:
        """Largest value on the dy=0 row within ``halfwidth`` cells of ``delta_x``."""
        row = self.values[self.values.shape[0] // 2]
        i = self.index_of(delta_x)
        return float(row[max(i - halfwidth, 0): i + halfwidth + 1].max())

    def mass_near(self, delta_x: float, radius: float) -> float:
        sel = np.abs(self.lags - delta_x) <= radius
        return float(self.marginal_x()[sel].sum())


def _edge_mass(p: np.ndarray, cells: int = 2) -> float:
    inner = p[cells:-cells, cells:-cells].sum() if p.ndim == 2 else p[cells:-cells].sum()
    return float(p.sum() - inner)


def _centered_fft(a: np.ndarray, axes) -> np.ndarray:
    return sfft.fftshift(sfft.fftn(sfft.ifftshift(a, axes=axes), axes=axes), axes=axes)


# Oversampling of the x factor for gratings. The sharp edges of a binary grating
# carry harmonics that a coarse grid folds back onto the first orders and pulls
# them off 2 lambda f / period; on the finer grid they land beyond the lag range.
GRATING_OVERSAMPLE = 5


def _binary_safe_factor(mask: SlmMask, grid: SlmGrid, cfg: OpticsConfig) -> np.ndarray:
    """1-D lag distribution along x on the lags of ``grid``.

    Gratings are evaluated with a ``GRATING_OVERSAMPLE`` times finer step over
    the same extent and cropped to the lag range of ``grid``; the power
    diffracted beyond that range is dropped, so the mass can fall short of 1.
    """
    q = GRATING_OVERSAMPLE if isinstance(mask, Grating) else 1
    fine = SlmGrid(grid.n * q, grid.step / q)
    x = fine.coords
    phase = _phase_1d(mask, x)
    amp = np.exp(-x**2 / (4 * cfg.slm_area)) * np.exp(1j * (phase + phase[::-1]))
    f = np.abs(_centered_fft(amp, axes=0)) ** 2
    f /= f.sum()
    lo = (fine.n - grid.n) // 2
    return f[lo:lo + grid.n]


def shaped_correlation(mask: SlmMask, cfg: OpticsConfig, grid: SlmGrid | None = None,
                       alias_tol: float = 2e-3) -> CorrelationField:
    """Numerical sample-plane correlation for a phase mask.

    Evaluates ``exp(-|r|^2 / (4 slm_area)) exp(i psi(r))`` on the SLM grid,
    Fourier transforms it with ``delta = lambda f nu`` and returns the
    squared modulus normalised to unit mass. Masks that only vary along x
    are transformed as 1-D factors, which is exact for a separable field;
    for gratings the light diffracted beyond the lag range is dropped.
    """
    grid = grid or SlmGrid.default(cfg)
    x = grid.coords
    envelope = np.exp(-x**2 / (4 * cfg.slm_area))
    if isinstance(mask, Grating):
        if mask.period < 8 * grid.step:
            raise OpticsError(
                f"grating period {mask.period} is below 8 SLM grid steps ({8 * grid.step:.3g})")
        margin = mask.period / cfg.slm_correlation_width
        if not thin_crystal_validity(cfg.slm_correlation_width, mask.period)[0]:
            warnings.warn(f"grating period {mask.period} violates the thin-crystal "
                          f"condition (margin {margin:.2f})", stacklevel=2)
    phase_x = _phase_1d(mask, x)
    if phase_x is not None:
        fx = _binary_safe_factor(mask, grid, cfg)
        fy = np.abs(_centered_fft(envelope.astype(complex), axes=0)) ** 2
        fy /= fy.sum()
        if max(_edge_mass(fx), _edge_mass(fy)) >= alias_tol:
            raise AliasingError(_alias_message(mask, _edge_mass(fx)))
        values = np.outer(fy, fx)
    else:
        psi = symmetrized_phase(mask, grid)
        amp = np.outer(envelope, envelope) * np.exp(1j * psi)
        values = np.abs(_centered_fft(amp, axes=(0, 1))) ** 2
        values /= values.sum()
        if _edge_mass(values) >= alias_tol:
            raise AliasingError(_alias_message(mask, _edge_mass(values)))
    return CorrelationField(values, grid.lag_coords(cfg))


def _alias_message(mask, edge) -> str:
    if isinstance(mask, Grating):
        return (f"aliasing: grating period {mask.period} leaves {edge:.3g} of the "
                "correlation mass at the lag-grid edge")
    return f"aliasing: {edge:.3g} of the correlation mass at the lag-grid edge"


@lru_cache(maxsize=8)
def _cached_correlation(mask, cfg, grid) -> CorrelationField:
    return shaped_correlation(mask, cfg, grid)


def oracle_peak_ratio(period: float, cfg: OpticsConfig, grid: SlmGrid | None = None,
                      shift: float = 0.0) -> float:
    """Height of the +1 grating peak relative to the flat-mask peak height."""
    grid = grid or SlmGrid.default(cfg)
    flat = _cached_correlation(Flat(), cfg, grid)
    shaped = _cached_correlation(Grating(period, shift), cfg, grid)
    half_sep = peak_separation(period, cfg.wavelength, cfg.focal_length) / 2
    # search a window a few correlation widths wide around the expected order
    width = max(1, int(round(math.sqrt(cfg.entanglement_area) / shaped.spacing)))
    return shaped.peak_near(half_sep, width) / flat.values.max()


def solve_slm_area(cfg: OpticsConfig, grid_n: int = 1023, extent: float = 64.0,
                   rtol: float = 1e-6) -> float:
    """Bisect the SLM envelope area so the flat-mask lag variance equals A_e.

    Works on the discretised transform, so it absorbs sampling effects the
    closed form of :func:`slm_area_for` ignores.
    """
    guess = slm_area_for(cfg.entanglement_area, cfg.wavelength, cfg.focal_length)

    def mismatch(log_area):
        trial = cfg.replace(slm_area=math.exp(log_area))
        grid = SlmGrid.default(trial, grid_n, extent)
        return shaped_correlation(Flat(), trial, grid).variance_x() - cfg.entanglement_area

    lo, hi = math.log(guess / 2), math.log(guess * 2)
    root = optimize.bisect(mismatch, lo, hi, rtol=rtol)
    return math.exp(root)


# --------------------------------------------------------------------------- analytic gratings


def analytic_grating_correlation(period: float, cfg: OpticsConfig, n_max: int = 3,
                                 shift: float = 0.0) -> list[tuple[float, float]]:
    """Order centres and renormalised intensity weights for an ideal grating.

    Orders ``k`` are the odd harmonics with ``|k| <= n_max``, centred at
    ``k lambda f / period`` with weight ``a_k^2`` renormalised to sum to one.
    Interference between orders is neglected.
    """
    if shift != 0:
        raise OpticsError("analytic grating correlation requires zero shift; "
                          "use shaped_correlation for shifted masks")
    if n_max < 1:
        raise OpticsError(f"n_max must be >= 1, got {n_max}")
    if math.isinf(period):
        return [(0.0, 1.0)]
    unit = cfg.wavelength * cfg.focal_length / period
    orders = [k for k in range(-n_max, n_max + 1) if k % 2]
    weights = np.array([square_wave_coeff(k) ** 2 for k in orders])
    weights /= weights.sum()
    return [(k * unit, float(w)) for k, w in zip(orders, weights)]


def peak_separation(period: float, wavelength: float, focal_length: float) -> float:
    """Distance ``2 lambda f / period`` between the two first-order peaks."""
    if not period > 0:
        raise OpticsError(f"grating period must be > 0, got {period}")
    return 2 * wavelength * focal_length / period


def grating_period_for(separation: float, wavelength: float, focal_length: float) -> float:
    """Inverse of :func:`peak_separation`."""
    if not separation > 0:
        raise OpticsError(f"separation must be > 0, got {separation}")
    return 2 * wavelength * focal_length / separation


def thin_crystal_validity(correlation_width: float, min_period: float,
                          threshold: float = 3.0) -> tuple[bool, float]:
    """Whether the smallest grating period is coarse enough (inclusive bound).

    Returns ``(valid, min_period / correlation_width)``.
    """
    if not (correlation_width > 0 and min_period > 0):
        raise OpticsError("correlation width and period must be > 0")
    margin = min_period / correlation_width
    return margin >= threshold, margin


# --------------------------------------------------------------------------- rates


@dataclass(frozen=True)
class RateModelParams:
    """Two-photon absorption rate parameters.

    ``multipair`` is the unitless weight of the quadratic term in the mixed
    regime. ``entanglement_time`` is carried for bookkeeping only.
    """

    sigma_e: float = 0.0            # cm^2
    delta_c: float = 0.0            # cm^4 s (1 GM = 1e-50)
    entanglement_time: float = 0.0  # s
    multipair: float = 0.0
    pair_flux: float = 0.0          # pairs / s

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise OpticsError(f"{name} must be finite")
            if value < 0:
                raise OpticsError(f"{name} must be >= 0, got {value}")


def tpa_rate(params: RateModelParams, regime: str = "entangled") -> float:
    """Two-photon absorption rate (events / s).

    ``entangled``: linear in pair flux; ``classical``: quadratic;
    ``mixed``: linear plus ``multipair`` times the quadratic term.
    """
    phi = params.pair_flux
    if regime == "entangled":
        return params.sigma_e * phi
    if regime == "classical":
        return params.delta_c * phi**2
    if regime == "mixed":
        return params.sigma_e * phi + params.multipair * params.delta_c * phi**2
    raise OpticsError(f"unknown regime {regime!r}")


def entangled_cross_section_scale(delta_c: float, entanglement_time: float,
                                  entanglement_area: float) -> float:
    """Proportionality ``delta_c / (T_e A_e)``; absolute prefactor unknown."""
    if entanglement_time <= 0 or entanglement_area <= 0:
        raise OpticsError("entanglement time and area must be > 0")
    return delta_c / (entanglement_time * entanglement_area)
