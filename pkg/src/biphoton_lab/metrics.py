"""Peak metrics, ratio curves, Gaussian area fits and grating-shift calibration."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import least_squares

from .detector import DetectorSpec, FrameSimulator
from .g2 import CorrAccumulator, CorrelationImage, _atomic_write, interpolate_artifacts
from .media import MediumSpec, describe_medium
from .optics import (Flat, Grating, OpticsConfig, grating_period_for, square_wave_coeff,
                     thin_crystal_validity)
from .sampler import SourceSpec


class MetricError(ValueError):
    pass


class FitError(RuntimeError):
    pass


# --------------------------------------------------------------------------- peak height


def overlap_fraction(window: tuple[int, int], shape: tuple[int, int]) -> np.ndarray:
    """Fraction of pixel pairs inside an ``H x W`` ROI at each lag."""
    lx, ly = window
    h, w = shape
    fx = 1 - np.abs(np.arange(-lx, lx + 1)) / w
    fy = 1 - np.abs(np.arange(-ly, ly + 1)) / h
    return fy[:, None] * fx[None, :]


def correct_overlap(img: CorrelationImage, shape: tuple[int, int]) -> CorrelationImage:
    """Undo the finite-ROI fall-off of a correlation image."""
    v = img.values / overlap_fraction(img.window, shape)
    return dataclasses.replace(img, values=v, flags=img.flags + ("overlap-corrected",))


def peak_lag(delta_x: float, cfg: OpticsConfig) -> int:
    """Lag column of the positive-side first-order peak for separation ``delta_x`` (mm)."""
    return int(math.floor(delta_x / (2 * cfg.sample_pixel) + 0.5))


def extract_xi(img: CorrelationImage, center: tuple[int, int] = (0, 0), w: int = 1,
               metric: str = "height") -> float:
    """Peak value inside the ``(2w+1)^2`` window at lag ``center = (dx, dy)``.

    ``metric="area"`` sums the window instead of taking its maximum.
    """
    lx, ly = img.window
    cx, cy = center
    if abs(cx) + w > lx or abs(cy) + w > ly:
        raise MetricError(f"peak window at {center} +- {w} exceeds lag grid +-({lx}, {ly})")
    block = img.values[cy + ly - w:cy + ly + w + 1, cx + lx - w:cx + lx + w + 1]
    if metric == "height":
        return float(block.max())
    if metric == "area":
        return float(block.sum())
    raise MetricError(f"unknown metric {metric!r}")


def locate_peak(img: CorrelationImage, smooth: float = 1.0, min_dx: int = 0) -> tuple[float, float]:
    """Sub-pixel lag ``(dx, dy)`` of the strongest peak with ``dx >= min_dx``.

    The image is smoothed with a Gaussian of ``smooth`` pixels and the
    maximum refined by a parabola through its neighbours.
    """
    lx, ly = img.window
    v = gaussian_filter(img.values, smooth) if smooth > 0 else img.values
    cols = np.arange(-lx, lx + 1) >= min_dx
    sub = np.where(cols[None, :], v, -np.inf)
    iy, ix = np.unravel_index(np.argmax(sub), sub.shape)

    def refine(a, b, c):
        den = a - 2 * b + c
        return 0.0 if den == 0 else 0.5 * (a - c) / den

    fx = refine(v[iy, ix - 1], v[iy, ix], v[iy, ix + 1]) if 0 < ix < 2 * lx else 0.0
    fy = refine(v[iy - 1, ix], v[iy, ix], v[iy + 1, ix]) if 0 < iy < 2 * ly else 0.0
    return ix - lx + fx, iy - ly + fy


@dataclass
class XiMeasurement:
    center: tuple[int, int]
    w: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise MetricError("non-finite batch value")

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def stderr(self) -> float:
        b = self.values.size
        if b < 2:
            return math.nan
        return float(self.values.std(ddof=1) / math.sqrt(b))


def batch_images(chunks: Iterable[np.ndarray], shape: tuple[int, int], window: tuple[int, int],
                 batches: int, per_batch: int) -> list[CorrAccumulator]:
    """Split a frame stream into ``batches`` disjoint runs of ``per_batch`` frames."""
    if per_batch < 2:
        raise MetricError("need at least 2 frames per batch")
    accs = [CorrAccumulator(shape, window)]
    for frames in chunks:
        while len(frames):
            acc = accs[-1]
            if acc.frames_seen == per_batch:
                if len(accs) == batches:
                    break
                acc = CorrAccumulator(shape, window)
                accs.append(acc)
            take = per_batch - acc.frames_seen
            acc.accumulate_many(frames[:take])
            frames = frames[take:]
    if len(accs) < batches or accs[-1].frames_seen < per_batch:
        have = (len(accs) - 1) * per_batch + accs[-1].frames_seen
        raise MetricError(f"stream ended after {have} frames, need {batches * per_batch}")
    return accs


def prepare_image(acc: CorrAccumulator, interpolation: str = "paper",
                  overlap: bool = True) -> CorrelationImage:
    img = interpolate_artifacts(acc.finalize(), interpolation)
    return correct_overlap(img, acc.shape) if overlap else img


def batch_xi(frames: np.ndarray | Iterable[np.ndarray], center: tuple[int, int], w: int = 1,
             batches: int = 4, per_batch: int = 1000, window: tuple[int, int] | None = None,
             shape: tuple[int, int] | None = None, interpolation: str = "paper",
             overlap: bool = True, metric: str = "height") -> XiMeasurement:
    """Per-batch peak value over ``batches`` contiguous blocks of ``per_batch`` frames."""
    if isinstance(frames, np.ndarray):
        if frames.shape[0] < batches * per_batch:
            raise MetricError(f"stack has {frames.shape[0]} frames, need {batches * per_batch}")
        shape = frames.shape[-2:]
        frames = [frames[:batches * per_batch]]
    if shape is None:
        raise MetricError("shape is required for streamed input")
    if window is None:
        window = (abs(center[0]) + w + 2, abs(center[1]) + w + 2)
    accs = batch_images(frames, shape, window, batches, per_batch)
    vals = [extract_xi(prepare_image(a, interpolation, overlap), center, w, metric) for a in accs]
    return XiMeasurement(tuple(center), w, vals)


# --------------------------------------------------------------------------- ratios


def ratio_with_error(xi: float, dxi: float, xi0: float, dxi0: float) -> tuple[float, float]:
    """``xi / xi0`` with the linear-sum relative error ``(dxi/xi + dxi0/xi0)``."""
    if not (xi > 0 and xi0 > 0):
        raise MetricError(f"peak values must be positive, got xi={xi}, xi0={xi0}")
    r = xi / xi0
    return r, r * (dxi0 / xi0 + dxi / xi)


def ratio_quadrature(xi: float, dxi: float, xi0: float, dxi0: float) -> float:
    """Conventional quadrature error of ``xi / xi0`` (diagnostic)."""
    return xi / xi0 * math.hypot(dxi / xi, dxi0 / xi0)


# --------------------------------------------------------------------------- Gaussian fits


@dataclass
class GaussianFit:
    amplitude: float
    center: tuple[float, float]
    variance: float
    offset: float
    residual_norm: float
    converged: bool
    camera_variance: float = 0.0

    def report(self) -> str:
        return (f"amplitude = {self.amplitude!r}\ncenter_x_px = {self.center[0]!r}\n"
                f"center_y_px = {self.center[1]!r}\nvariance_mm2 = {self.variance!r}\n"
                f"camera_variance_mm2 = {self.camera_variance!r}\noffset = {self.offset!r}\n"
                f"residual_norm = {self.residual_norm!r}\nconverged = {self.converged}\n")


def _gauss(p, x, y):
    a, x0, y0, v, c = p
    return a * np.exp(-((x - x0) ** 2 + (y - y0) ** 2) / (2 * v)) + c


def fit_gaussian_variance(image: np.ndarray | CorrelationImage, cfg: OpticsConfig,
                          kind: str = "correlation", exclude: np.ndarray | None = None,
                          max_iter: int = 200) -> GaussianFit:
    """Least-squares fit of ``A exp(-|r - r0|^2 / (2V)) + c``.

    Pixel coordinates are converted to camera-plane mm with the pixel pitch
    and the fitted variance to the sample plane by dividing by the squared
    magnification. For correlation images the ``dx = 0`` lag column, which
    carries readout smear and the interpolated lags, is excluded by default.
    """
    if kind not in ("correlation", "intensity"):
        raise MetricError(f"unknown fit kind {kind!r}")
    if isinstance(image, CorrelationImage):
        lx, ly = image.window
        values = image.values
        x, y = np.meshgrid(np.arange(-lx, lx + 1), np.arange(-ly, ly + 1))
        if exclude is None and kind == "correlation":
            exclude = x == 0
    else:
        values = np.asarray(image, dtype=float)
        h, w = values.shape
        x, y = np.meshgrid(np.arange(w) - (w - 1) / 2, np.arange(h) - (h - 1) / 2)
    keep = np.ones(values.shape, bool) if exclude is None else ~exclude
    xs, ys, zs = x[keep].astype(float), y[keep].astype(float), values[keep]

    # start from the smoothed maximum and the area above half maximum, which
    # noise far from the peak barely affects
    smooth = gaussian_filter(np.where(keep, values, np.median(zs)), 1.0)
    c0 = float(np.median(smooth))
    top = float(smooth.max())
    if not top > c0:
        raise FitError("image has no positive peak above its background")
    iy, ix = np.unravel_index(np.argmax(smooth), smooth.shape)
    x0, y0 = float(x[iy, ix]), float(y[iy, ix])
    half_area = np.count_nonzero(smooth > c0 + 0.5 * (top - c0))
    v0 = half_area / (2 * math.pi * math.log(2))
    p0 = [top - c0, x0, y0, max(v0, 0.25), c0]
    scale = max(abs(p0[0]), 1e-300)

    res = least_squares(lambda p: (_gauss(p, xs, ys) - zs) / scale, p0, method="lm",
                        xtol=1e-8, max_nfev=max_iter * (len(p0) + 1))
    a, fx, fy, v, c = res.x
    rnorm = float(np.linalg.norm(res.fun) * scale)
    if not res.success or not v > 0:
        raise FitError(f"Gaussian fit did not converge ({res.message}); residual norm {rnorm:.4g}")
    pitch = cfg.pixel_pitch_um * 1e-3
    cam_v = float(v) * pitch**2
    return GaussianFit(float(a), (float(fx), float(fy)), cam_v / cfg.magnification**2,
                       float(c), rnorm, True, cam_v)


# --------------------------------------------------------------------------- simulation drivers


def point_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit seed of measurement point ``index``."""
    return int(np.random.SeedSequence((seed, index)).generate_state(1, np.uint64)[0])


@dataclass
class MeasurementPlan:
    """Everything needed to simulate and measure peak values.

    ``w`` is the half-width of the peak window. The default 0 reads the
    single expected lag; wider windows take the maximum, which noise pushes
    upward by an amount that grows as the SNR falls.
    """

    source: SourceSpec
    medium: MediumSpec = ()
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    batches: int = 4
    per_batch: int = 1000
    w: int = 0
    interpolation: str = "paper"
    overlap: bool = True
    metric: str = "height"
    threads: int = 1

    @property
    def frames(self) -> int:
        return self.batches * self.per_batch


def measure(plan: MeasurementPlan, mask, seed: int, center: tuple[int, int],
            window: tuple[int, int] | None = None, keep_images: bool = False):
    """Simulate ``plan.frames`` exposures with ``mask`` and measure the peak at ``center``.

    Returns the :class:`XiMeasurement` and, with ``keep_images``, the per-batch images.
    """
    src = dataclasses.replace(plan.source, mask=mask, seed=seed)
    sim = FrameSimulator(src, plan.medium, plan.detector)
    if window is None:
        window = (abs(center[0]) + plan.w + 2, abs(center[1]) + plan.w + 2)
    accs = batch_images(sim.iter_frames(plan.frames, plan.threads), sim.shape, window,
                        plan.batches, plan.per_batch)
    imgs = [prepare_image(a, plan.interpolation, plan.overlap) for a in accs]
    xi = XiMeasurement(tuple(center), plan.w,
                       [extract_xi(i, center, plan.w, plan.metric) for i in imgs])
    return (xi, imgs) if keep_images else xi


@dataclass
class RatioPoint:
    delta_x: float          # mm
    ratio: float
    ratio_err: float
    period: float           # mm, inf for the flat reference
    frames: int
    flags: tuple[str, ...] = ()
    xi: XiMeasurement | None = field(default=None, repr=False)
    ratio_quadrature: float = math.nan
    batch_ratios: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RatioCurve:
    points: list[RatioPoint]
    xi0: XiMeasurement
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def delta_x(self) -> np.ndarray:
        return np.array([p.delta_x for p in self.points])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([p.ratio for p in self.points])

    @property
    def errors(self) -> np.ndarray:
        return np.array([p.ratio_err for p in self.points])

    def to_csv(self) -> str:
        lines = ["delta_x_um,ratio,ratio_err,lambda_um,frames,flags"]
        for p in self.points:
            lam = "inf" if math.isinf(p.period) else repr(p.period * 1e3)
            lines.append(f"{p.delta_x * 1e3!r},{p.ratio!r},{p.ratio_err!r},{lam},{p.frames},"
                         f"{'|'.join(p.flags)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        _atomic_write(Path(path), self.to_csv())


def _ratio_point(plan, xi, xi0, delta_x, period, expected_dx, measured_dx) -> RatioPoint:
    flags = []
    if xi.mean <= 0 or xi.mean < 3 * xi.stderr:
        flags.append("low_snr")
    if measured_dx is not None and abs(measured_dx - expected_dx) > 1:
        flags.append("peak_offset")
    if xi.mean > 0:
        r, e = ratio_with_error(xi.mean, xi.stderr, xi0.mean, xi0.stderr)
        q = ratio_quadrature(xi.mean, xi.stderr, xi0.mean, xi0.stderr)
    else:
        r, e, q = max(xi.mean, 0.0) / xi0.mean, math.nan, math.nan
        flags.append("nonpositive_peak")
    return RatioPoint(delta_x, r, e, period, plan.frames, tuple(flags), xi, q,
                      xi.values / xi0.values)


def ratio_curve(plan: MeasurementPlan, delta_xs: Sequence[float], seed: int = 0,
                reference: XiMeasurement | None = None) -> RatioCurve:
    """Peak ratio ``xi(dx) / xi0`` for each grating separation ``dx`` (mm).

    A separation of 0 is measured with the flat mask under its own seed, so
    it reproduces the reference only within statistical error. Point ``i``
    of the list uses seed ``point_seed(seed, i + 1)`` and the flat
    reference ``point_seed(seed, 0)``; runs that differ only in the medium
    therefore share their pair and detector noise.
    """
    cfg = plan.source.cfg
    dxs = [float(d) for d in delta_xs]
    if any(b <= a for a, b in zip(dxs, dxs[1:])):
        raise MetricError("separations must be strictly increasing")
    periods = []
    for d in dxs:
        if d == 0:
            periods.append(math.inf)
            continue
        period = grating_period_for(d, cfg.wavelength, cfg.focal_length)
        ok, margin = thin_crystal_validity(cfg.slm_correlation_width, period)
        if not ok:
            raise MetricError(f"grating period {period:.4g} mm (dx = {d * 1e3:.4g} um) violates "
                              f"the thin-crystal condition (margin {margin:.3g})")
        periods.append(period)
    xi0 = reference or measure(plan, Flat(), point_seed(seed, 0), (0, 0))
    points = []
    for i, (d, period) in enumerate(zip(dxs, periods)):
        c = peak_lag(d, cfg)
        mask = Flat() if math.isinf(period) else Grating(period)
        lx = c + plan.w + 4
        xi, imgs = measure(plan, mask, point_seed(seed, i + 1), (c, 0), (lx, plan.w + 3),
                           keep_images=True)
        measured = None
        if c > plan.w:
            mean_img = dataclasses.replace(imgs[0], values=np.mean([m.values for m in imgs], axis=0))
            measured = locate_peak(mean_img, min_dx=plan.w + 1)[0]
        points.append(_ratio_point(plan, xi, xi0, d, period, d / (2 * cfg.sample_pixel), measured))
    meta = {
        "seed": str(seed),
        "mask_efficiency": repr(plan.source.slm_efficiency),
        "pair_rate": repr(plan.source.pair_rate),
        "medium": describe_medium(plan.medium),
        "batches": str(plan.batches),
        "frames_per_batch": str(plan.per_batch),
        "peak_halfwidth": str(plan.w),
        "interpolation": plan.interpolation,
        "overlap_corrected": str(plan.overlap),
        "metric": plan.metric,
        "roi": f"{cfg.roi[0]}x{cfg.roi[1]}",
    }
    return RatioCurve(points, xi0, meta)


# --------------------------------------------------------------------------- alpha calibration


@dataclass
class AlphaScan:
    alphas: np.ndarray
    values: np.ndarray
    errors: np.ndarray

    def to_csv(self) -> str:
        rows = ["alpha_rad,xi_zero_order"]
        rows += [f"{a!r},{v!r}" for a, v in zip(self.alphas, self.values)]
        return "\n".join(rows) + "\n"

    def write(self, path) -> None:
        _atomic_write(Path(path), self.to_csv())


def alpha_grid(points: int = 8) -> np.ndarray:
    """Equally spaced shifts over ``[-pi/2, pi/2)``, one period of the zero-order response."""
    if points < 5:
        raise MetricError("an alpha grid needs at least 5 points")
    return -math.pi / 2 + math.pi * np.arange(points) / points


def calibrate_alpha(scan: AlphaScan, min_contrast: float = 3.0) -> float:
    """Shift with the smallest zero-order peak, ties broken toward small ``|alpha|``.

    Raises if the spread of the scan is within ``min_contrast`` standard
    errors, i.e. the scan cannot tell the shifts apart.
    """
    v, a = np.asarray(scan.values), np.asarray(scan.alphas)
    err = float(np.nanmax(scan.errors)) if len(scan.errors) else 0.0
    if v.max() - v.min() <= min_contrast * err:
        raise MetricError("zero-order peak does not vary across the alpha grid beyond noise; "
                          "use more frames per point")
    best = np.flatnonzero(v == v.min())
    return float(a[best[np.argmin(np.abs(a[best]))]])


def alpha_scan(plan: MeasurementPlan, period: float, alphas: Sequence[float],
               planted: float = 0.0, seed: int = 0) -> AlphaScan:
    """Zero-order peak height for each trial shift of a grating.

    ``planted`` models an unknown offset of the SLM: trial ``alpha`` is
    applied as the shift ``alpha - planted``.
    """
    vals, errs = [], []
    for i, a in enumerate(alphas):
        xi = measure(plan, Grating(period, float(a) - planted), point_seed(seed, i), (0, 0))
        vals.append(xi.mean)
        errs.append(xi.stderr)
    return AlphaScan(np.asarray(alphas, float), np.array(vals), np.array(errs))


def delta_x_for_period(period: float, cfg: OpticsConfig) -> float:
    return 2 * cfg.wavelength * cfg.focal_length / period


def fit_peak_separation(img: CorrelationImage, cfg: OpticsConfig, guess: float | None = None,
                        variance: float | None = None, leak: bool = False,
                        orders: int = 5) -> float:
    """Separation (mm, sample plane) of the first-order peaks of a grating image.

    Fits the coherent sum of odd diffraction orders,
    ``A |sum_n a_n exp(-(dx - n s)^2 / (4V))|^2 exp(-dy^2 / (2V)) + c``,
    with the square-wave weights ``a_n`` up to ``|n| <= orders``. Because the
    orders interfere, the model stays exact where the first orders merge
    into one hump. ``variance`` (mm^2, sample plane) fixes ``V``, typically
    to the flat-mask fit, which removes its degeneracy with ``s`` for close
    orders. ``leak`` adds an incoherent flat-mask term for unshaped pairs.
    The ``dx = 0`` column, which carries readout smear and the interpolated
    lags, is left out.
    """
    lx, ly = img.window
    x, y = np.meshgrid(np.arange(-lx, lx + 1, dtype=float), np.arange(-ly, ly + 1, dtype=float))
    keep = x != 0
    xs, ys, zs = x[keep], y[keep], img.values[keep]
    if guess is None:
        guess = max(abs(locate_peak(img, min_dx=2)[0]), 1.0)
    scale = max(float(np.abs(zs).max()), 1e-300)
    ns = np.array([n for n in range(-orders, orders + 1) if n % 2])
    an = np.array([square_wave_coeff(n) for n in ns]) / 2
    v_fixed = None if variance is None else variance / cfg.sample_pixel**2

    def model(p):
        a, sep, c = p[:3]
        v = v_fixed if v_fixed is not None else p[3]
        amp = (an[:, None] * np.exp(-(xs[None, :] - ns[:, None] * sep) ** 2 / (4 * v))).sum(axis=0)
        out = a * amp**2 * np.exp(-ys**2 / (2 * v)) + c
        if leak:
            out = out + p[-1] * np.exp(-(xs**2 + ys**2) / (2 * v))
        return out

    p0 = [scale, guess, 0.0]
    if v_fixed is None:
        p0.append(cfg.entanglement_area / cfg.sample_pixel**2)
    if leak:
        p0.append(0.0)
    res = least_squares(lambda p: (model(p) - zs) / scale, p0, method="lm", xtol=1e-8)
    if not res.success:
        raise FitError(f"peak-pair fit did not converge ({res.message})")
    return 2 * abs(float(res.x[1])) * cfg.sample_pixel
