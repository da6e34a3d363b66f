"""Preset experiments and run bookkeeping.

Each preset builds its measurements from an :class:`ExperimentConfig`,
writes CSV artifacts into an output directory and finishes with a
``manifest.txt`` that lists the configuration, seed and SHA-256 of every
artifact. Outputs are written atomically.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import constants as C
from .config import ExperimentConfig, TaskConfig, optics_preset, serialize_config
from .detector import (DetectorSpec, FrameSimulator, mean_photons_per_pixel, remove_smear,
                       simulate_stack)
from .g2 import (CorrAccumulator, CorrelationImage, _atomic_write, interpolate_artifacts,
                 null_correlation)
from .media import EtpaAbsorber, LinearLoss, Scatterer, default_etpa_width
from .metrics import (AlphaScan, GaussianFit, MeasurementPlan, RatioCurve, XiMeasurement,
                      alpha_grid, alpha_scan, calibrate_alpha, correct_overlap, extract_xi,
                      fit_gaussian_variance, fit_peak_separation, measure, point_seed, ratio_curve)
from .optics import Flat, Grating, HalfPlane, grating_period_for
from .sampler import SourceSpec
from .stackio import BpfReader, file_sha256

PRESETS = ("fig2b", "fig3a", "fig3b", "fig3c", "fig3d", "fig4a", "figS2", "figS4", "figS5")

# relative strengths of the two absorbers; only their order is meaningful
RH6G_STRENGTH = 0.05
CDSE_STRENGTH = 0.5


class PipelineError(RuntimeError):
    """A named stage of a run failed."""

    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"{stage}: {exc}")


@dataclass
class RunResult:
    out_dir: Path
    artifacts: dict[str, Path] = field(default_factory=dict)
    summary: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, path: Path) -> None:
        self.artifacts[name] = path


# --------------------------------------------------------------------------- plans


def default_config(preset: str = "config1", roi: int = 64, seed: int = 0,
                   pair_rate: float = 1e6) -> ExperimentConfig:
    cfg = optics_preset(preset, (roi, roi))
    src = SourceSpec(pair_rate, C.EXPOSURE_S, cfg=cfg, seed=seed)
    return ExperimentConfig(preset, src, (), DetectorSpec(gain=C.EM_GAIN), TaskConfig())


def plan_from(cfg: ExperimentConfig, **changes) -> MeasurementPlan:
    t = cfg.task
    plan = MeasurementPlan(cfg.source, tuple(cfg.medium), cfg.detector, t.batches,
                           t.frames_per_batch, t.peak_halfwidth, t.interpolation,
                           t.overlap_correction, t.metric, cfg.threads)
    return dataclasses.replace(plan, **changes)


def scaled(cfg: ExperimentConfig, paper_scale: bool) -> ExperimentConfig:
    """Paper-scale runs use the full 150 x 150 ROI and ten times more frames per batch."""
    if not paper_scale:
        return cfg
    optics = cfg.optics.replace(roi=(C.ROI_SIDE, C.ROI_SIDE))
    task = dataclasses.replace(cfg.task, frames_per_batch=10 * cfg.task.frames_per_batch)
    return dataclasses.replace(cfg, source=dataclasses.replace(cfg.source, cfg=optics), task=task)


def etpa_medium(strength: float, cfg: ExperimentConfig, width: float | None = None) -> tuple:
    w = default_etpa_width(cfg.optics.entanglement_area) if width is None else width
    return (EtpaAbsorber(strength, w),)


def delta_x_mm(cfg: ExperimentConfig) -> list[float]:
    return [d * 1e-3 for d in cfg.task.delta_x_um]


def with_medium(cfg: ExperimentConfig, medium) -> ExperimentConfig:
    return dataclasses.replace(cfg, medium=tuple(medium))


def stray_light_matching_signal(cfg: ExperimentConfig) -> float:
    """Background photons per pixel equal to the mean source photons per ROI pixel."""
    return mean_photons_per_pixel(cfg.source)


# --------------------------------------------------------------------------- single tasks


def run_ratio_curve(cfg: ExperimentConfig, seed: int | None = None) -> RatioCurve:
    seed = cfg.seed if seed is None else seed
    curve = ratio_curve(plan_from(cfg), delta_x_mm(cfg), seed)
    curve.metadata["config_sha256"] = hashlib.sha256(serialize_config(cfg).encode()).hexdigest()
    return curve


def run_alpha_scan(cfg: ExperimentConfig, seed: int | None = None) -> tuple[AlphaScan, float]:
    seed = cfg.seed if seed is None else seed
    alphas = alpha_grid(cfg.task.alpha_points)
    scan = alpha_scan(plan_from(cfg), cfg.task.period_mm, alphas, cfg.task.planted_alpha, seed)
    return scan, calibrate_alpha(scan)


def correlation_image(cfg: ExperimentConfig, mask, frames: int, window: int,
                      seed: int | None = None) -> CorrelationImage:
    """Un-interpolated correlation image of one simulated run."""
    src = dataclasses.replace(cfg.source, mask=mask, seed=cfg.seed if seed is None else seed)
    sim = FrameSimulator(src, tuple(cfg.medium), cfg.detector)
    ny, nx = sim.shape
    win = (min(window, nx - 1), min(window, ny - 1))
    acc = CorrAccumulator(sim.shape, win)
    for chunk in sim.iter_frames(frames, cfg.threads):
        acc.accumulate_many(chunk)
    return acc.finalize()


def fit_areas(cfg: ExperimentConfig, frames: int = 4000, intensity_roi: int = 512,
              intensity_frames: int = 256, seed: int | None = None) -> tuple[GaussianFit, GaussianFit]:
    """Entanglement area from the flat-mask correlation peak, beam area from the mean image."""
    seed = cfg.seed if seed is None else seed
    img = correct_overlap(interpolate_artifacts(
        correlation_image(cfg, Flat(), frames, min(32, cfg.optics.roi[0] - 1), seed), "paper"),
        cfg.optics.roi[::-1])
    corr_fit = fit_gaussian_variance(img, cfg.optics, "correlation")
    big = cfg.optics.replace(roi=(intensity_roi, intensity_roi))
    src = dataclasses.replace(cfg.source, cfg=big, mask=Flat(), seed=point_seed(seed, 1))
    sim = FrameSimulator(src, tuple(cfg.medium), cfg.detector)
    total = np.zeros(sim.shape)
    for chunk in sim.iter_frames(intensity_frames, cfg.threads):
        total += chunk.sum(axis=0)
    # bias and smear are known detector calibrations; without undoing the smear its
    # column ramp widens the fitted beam by ~10%
    mean = remove_smear(total / intensity_frames - cfg.detector.bias, cfg.detector.smear)
    int_fit = fit_gaussian_variance(mean, big, "intensity")
    return corr_fit, int_fit


def simulate_to_file(cfg: ExperimentConfig, frames: int, path) -> dict[str, str]:
    tel = simulate_stack(cfg.source, tuple(cfg.medium), cfg.detector, frames, path, cfg.threads,
                         {"config_sha256": hashlib.sha256(serialize_config(cfg).encode()).hexdigest()})
    return {k: str(v) for k, v in dataclasses.asdict(tel).items()}


def analyze_stack(path, window: int = 64, interpolation: str = "paper",
                  center: tuple[int, int] = (0, 0), w: int = 1, batches: int = 1,
                  shuffle_seed: int | None = None) -> tuple[CorrelationImage, XiMeasurement]:
    """Correlation image and peak value of an existing stack.

    With ``batches > 1`` the stack is split into that many contiguous parts
    for the peak uncertainty. ``shuffle_seed`` switches to the shuffled
    null estimator (:func:`~biphoton_lab.g2.null_correlation`), a
    diagnostic that must show no genuine peak.
    """
    reader = BpfReader(path)
    n, h = len(reader), reader.header
    win = (min(window, h.width - 1), min(window, h.height - 1))
    digest = file_sha256(path)
    if shuffle_seed is not None:
        null = null_correlation(reader.take, n, win, shuffle_seed)
        img = CorrelationImage(null, n, win, ("shuffled",), digest)
        return interpolate_artifacts(img, interpolation), XiMeasurement(
            center, w, [extract_xi(interpolate_artifacts(img, interpolation), center, w)])
    per = n // batches
    imgs = []
    for b in range(batches):
        acc = CorrAccumulator((h.height, h.width), win)
        for lo in range(b * per, (b + 1) * per, 256):
            acc.accumulate_many(reader.frames(lo, min(lo + 256, (b + 1) * per)))
        imgs.append(acc.finalize(digest))
    img = imgs[0]
    if batches > 1:
        img = dataclasses.replace(img, values=np.mean([i.values for i in imgs], axis=0),
                                  frames=sum(i.frames for i in imgs))
    vals = [extract_xi(interpolate_artifacts(i, interpolation), center, w) for i in imgs]
    return interpolate_artifacts(img, interpolation), XiMeasurement(center, w, vals)


# --------------------------------------------------------------------------- presets


def _write_curve(res: RunResult, name: str, curve: RatioCurve) -> None:
    path = res.out_dir / f"{name}.csv"
    curve.write(path)
    res.add(name, path)


def _write_text(res: RunResult, name: str, text: str) -> None:
    path = res.out_dir / name
    _atomic_write(path, text)
    res.add(Path(name).stem, path)


# lags kept around a peak for the width and separation fits
FIT_HALFWIDTH = 15


def preset_fig2b(cfg: ExperimentConfig, res: RunResult) -> None:
    """Correlation images for a flat mask and three gratings, before and after interpolation."""
    frames = cfg.task.batches * cfg.task.frames_per_batch
    rows = ["delta_x_um,lambda_um,measured_delta_x_um"]
    variance = None
    for i, dx in enumerate([0.0, 0.08, 0.16, 0.32]):
        mask = Flat() if dx == 0 else Grating(grating_period_for(dx, cfg.optics.wavelength,
                                                                 cfg.optics.focal_length))
        img = correlation_image(cfg, mask, frames, cfg.task.window, point_seed(cfg.seed, i))
        tag = f"dx{int(round(dx * 1e3))}um"
        img.to_csv(res.out_dir / f"correlation_{tag}_raw.csv")
        res.add(f"correlation_{tag}_raw", res.out_dir / f"correlation_{tag}_raw.csv")
        interp = interpolate_artifacts(img, cfg.task.interpolation)
        interp.to_csv(res.out_dir / f"correlation_{tag}.csv")
        res.add(f"correlation_{tag}", res.out_dir / f"correlation_{tag}.csv")
        corrected = correct_overlap(interp, cfg.optics.roi[::-1])
        if dx == 0:
            # the flat peak fixes the width the grating fits use
            variance = fit_gaussian_variance(corrected.crop((FIT_HALFWIDTH,) * 2),
                                             cfg.optics).variance
        else:
            lam = mask.period * 1e3
            c = dx / (2 * cfg.optics.sample_pixel)
            near = corrected.crop((int(c) + FIT_HALFWIDTH, FIT_HALFWIDTH))
            measured = fit_peak_separation(near, cfg.optics, c, variance=variance)
            rows.append(f"{dx * 1e3!r},{lam!r},{measured * 1e3!r}")
    _write_text(res, "peak_separation.csv", "\n".join(rows) + "\n")


def preset_fig3a(cfg: ExperimentConfig, res: RunResult) -> None:
    media = {
        "air": ((), cfg.seed),
        "hexane": ((), point_seed(cfg.seed, 1001)),
        "rh6g": (etpa_medium(RH6G_STRENGTH, cfg), cfg.seed),
        "cdse": (etpa_medium(CDSE_STRENGTH, cfg), cfg.seed),
    }
    for name, (medium, seed) in media.items():
        curve = run_ratio_curve(with_medium(cfg, medium), seed)
        _write_curve(res, f"ratio_{name}", curve)
        res.summary[f"{name}.last_ratio"] = repr(curve.points[-1].ratio)


def preset_fig3b(cfg: ExperimentConfig, res: RunResult) -> None:
    sd = math.sqrt(cfg.optics.entanglement_area)
    stray = dataclasses.replace(cfg.detector, stray_light=stray_light_matching_signal(cfg))
    runs = {
        "air": cfg,
        "loss": with_medium(cfg, [LinearLoss(0.5)]),
        "scatter": with_medium(cfg, [Scatterer(0.5, sd / 2)]),
        "stray": dataclasses.replace(cfg, detector=stray),
    }
    for name, c in runs.items():
        _write_curve(res, f"ratio_{name}", run_ratio_curve(c))


def preset_fig3c(cfg: ExperimentConfig, res: RunResult) -> None:
    rows = ["medium,pair_rate,ratio,ratio_err"]
    dx = C.POWER_SCAN_DELTA_X
    for name, medium in (("air", ()), ("rh6g", etpa_medium(RH6G_STRENGTH, cfg))):
        for scale in (0.25, 0.5, 1.0):
            src = dataclasses.replace(cfg.source, pair_rate=cfg.source.pair_rate * scale)
            c = dataclasses.replace(with_medium(cfg, medium), source=src,
                                    task=dataclasses.replace(cfg.task, delta_x_um=(dx * 1e3,)))
            p = run_ratio_curve(c).points[0]
            rows.append(f"{name},{src.pair_rate!r},{p.ratio!r},{p.ratio_err!r}")
    _write_text(res, "power_scan.csv", "\n".join(rows) + "\n")


def preset_fig3d(cfg: ExperimentConfig, res: RunResult) -> None:
    for side in (64, 100, 150):
        optics = cfg.optics.replace(roi=(side, side))
        c = dataclasses.replace(cfg, source=dataclasses.replace(cfg.source, cfg=optics))
        _write_curve(res, f"ratio_roi{side}", run_ratio_curve(c))


def config2_delta_x(cfg1: ExperimentConfig) -> tuple[float, ...]:
    """Separations that land on the same lag pixels in configuration 2."""
    m1, m2 = C.CONFIG1_MAGNIFICATION, C.CONFIG2_MAGNIFICATION
    return tuple(d * m1 / m2 for d in cfg1.task.delta_x_um)


def preset_fig4a(cfg: ExperimentConfig, res: RunResult) -> None:
    side = cfg.optics.roi[0]
    cfg2 = dataclasses.replace(
        cfg, optics_preset="config2",
        source=dataclasses.replace(cfg.source, cfg=optics_preset("config2", (side, side))),
        task=dataclasses.replace(cfg.task, delta_x_um=config2_delta_x(cfg)))
    width = default_etpa_width(C.CONFIG2_ENTANGLEMENT_AREA)
    for name, c in (("config1", cfg), ("config2", cfg2)):
        _write_curve(res, f"ratio_{name}_air", run_ratio_curve(c))
        _write_curve(res, f"ratio_{name}_etpa",
                     run_ratio_curve(with_medium(c, etpa_medium(0.5, c, width))))


def preset_figS2(cfg: ExperimentConfig, res: RunResult) -> None:
    frames = cfg.task.batches * cfg.task.frames_per_batch
    side = cfg.optics.roi[0]
    for name in ("config1", "config2"):
        c = dataclasses.replace(cfg, optics_preset=name, source=dataclasses.replace(
            cfg.source, cfg=optics_preset(name, (side, side))))
        corr, inten = fit_areas(c, frames)
        _write_text(res, f"fit_{name}_correlation.txt", corr.report())
        _write_text(res, f"fit_{name}_intensity.txt", inten.report())
        res.summary[f"{name}.A_e"] = repr(corr.variance)
        res.summary[f"{name}.Sigma"] = repr(inten.variance)


def preset_figS4(cfg: ExperimentConfig, res: RunResult) -> None:
    scan, best = run_alpha_scan(cfg)
    path = res.out_dir / "alpha_scan.csv"
    scan.write(path)
    res.add("alpha_scan", path)
    res.summary["alpha_star"] = repr(best)


def preset_figS5(cfg: ExperimentConfig, res: RunResult) -> None:
    rows = ["phase_rad,xi0,xi0_err"]
    plan = plan_from(cfg)
    for phi in (0.0, math.pi / 8, math.pi / 4, math.pi / 2):
        xi = measure(plan, HalfPlane(phi), cfg.seed, (0, 0))
        rows.append(f"{phi!r},{xi.mean!r},{xi.stderr!r}")
    _write_text(res, "halfplane_scan.csv", "\n".join(rows) + "\n")


_PRESET_FUNCS: dict[str, Callable[[ExperimentConfig, RunResult], None]] = {
    "fig2b": preset_fig2b, "fig3a": preset_fig3a, "fig3b": preset_fig3b,
    "fig3c": preset_fig3c, "fig3d": preset_fig3d, "fig4a": preset_fig4a,
    "figS2": preset_figS2, "figS4": preset_figS4, "figS5": preset_figS5,
}


def preset_config(preset: str, seed: int = 0, paper_scale: bool = False,
                  base: ExperimentConfig | None = None) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    cfg = (base or default_config()).with_seed(seed)
    if preset == "figS4":
        cfg = dataclasses.replace(cfg, task=dataclasses.replace(cfg.task, planted_alpha=0.2,
                                                                period_mm=grating_period_for(
                                                                    0.32, cfg.optics.wavelength,
                                                                    cfg.optics.focal_length)))
    return scaled(cfg, paper_scale)


def write_manifest(res: RunResult, cfg: ExperimentConfig, preset: str, paper_scale: bool) -> Path:
    lines = [f"biphoton_lab_version = {__version__}", f"preset = {preset}",
             f"seed = {cfg.seed}", f"paper_scale = {str(paper_scale).lower()}"]
    lines += [f"summary.{k} = {v}" for k, v in sorted(res.summary.items())]
    for name, path in sorted(res.artifacts.items()):
        lines.append(f"artifact.{name} = {path.name} sha256:{file_sha256(path)}")
    lines.append("")
    lines.append("[config]")
    lines.append(serialize_config(cfg))
    path = res.out_dir / "manifest.txt"
    _atomic_write(path, "\n".join(lines))
    return path


def run_preset(preset: str, seed: int, out_dir, paper_scale: bool = False,
               base: ExperimentConfig | None = None) -> RunResult:
    cfg = preset_config(preset, seed, paper_scale, base)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = RunResult(out)
    try:
        _PRESET_FUNCS[preset](cfg, res)
    except Exception as exc:
        raise PipelineError(f"preset {preset}", exc) from exc
    write_manifest(res, cfg, preset, paper_scale)
    return res
