"""INI-style experiment configuration.

Sections and keys (all optional; missing keys take the defaults below)::

    [optics]    preset, wavelength_nm, focal_length_mm, A_e, Sigma,
                magnification, pixel_pitch_um, roi, relay_aperture_mm
    [source]    pair_rate, exposure_s, slm_efficiency, mask, period_mm,
                shift_rad, phase_rad, sampler_mode, pairing
    [medium]    elements
    [detector]  quantum_efficiency, gain, read_noise, smear, stray_light,
                bias, saturation
    [task]      delta_x_um, batches, frames_per_batch, peak_halfwidth,
                interpolation, overlap_correction, metric, window,
                alpha_points, planted_alpha, period_mm
    [run]       seed, threads
"""
from __future__ import annotations

import configparser
import dataclasses
import math
import re
from dataclasses import dataclass, field

from . import constants as C
from .detector import DetectorSpec
from .media import EtpaAbsorber, LinearLoss, Scatterer, describe_medium
from .optics import Flat, Grating, HalfPlane, OpticsConfig, OpticsError
from .sampler import PAIRINGS, SourceSpec


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def optics_preset(name: str, roi: tuple[int, int] = (C.ROI_SIDE, C.ROI_SIDE)) -> OpticsConfig:
    if name == "config1":
        return OpticsConfig(C.WAVELENGTH_NM, C.CONFIG1_FOCAL_LENGTH, C.CONFIG1_ENTANGLEMENT_AREA,
                            C.CONFIG1_BEAM_AREA, C.CONFIG1_MAGNIFICATION, C.PIXEL_PITCH_UM, roi)
    if name == "config2":
        return OpticsConfig(C.WAVELENGTH_NM, C.CONFIG2_FOCAL_LENGTH, C.CONFIG2_ENTANGLEMENT_AREA,
                            C.CONFIG2_BEAM_AREA, C.CONFIG2_MAGNIFICATION, C.PIXEL_PITCH_UM, roi)
    raise ConfigError(f"unknown optics preset {name!r} (expected config1 or config2)")


@dataclass(frozen=True)
class TaskConfig:
    delta_x_um: tuple[float, ...] = (0.0, 40.0, 80.0, 120.0, 160.0, 240.0, 320.0, 400.0)
    batches: int = C.BATCHES
    frames_per_batch: int = C.FRAMES_PER_BATCH
    peak_halfwidth: int = 0
    interpolation: str = "paper"
    overlap_correction: bool = True
    metric: str = "height"
    window: int = 64
    alpha_points: int = 8
    planted_alpha: float = 0.0
    period_mm: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    optics_preset: str = "config1"
    source: SourceSpec = field(default_factory=lambda: SourceSpec(1e6, C.EXPOSURE_S,
                                                                 cfg=optics_preset("config1")))
    medium: tuple = ()
    detector: DetectorSpec = field(default_factory=lambda: DetectorSpec(gain=C.EM_GAIN))
    task: TaskConfig = field(default_factory=TaskConfig)
    threads: int = 1
    defaulted: tuple[str, ...] = field(default=(), compare=False)

    @property
    def optics(self) -> OpticsConfig:
        return self.source.cfg

    @property
    def seed(self) -> int:
        return self.source.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, source=dataclasses.replace(self.source, seed=seed))


# --------------------------------------------------------------------------- value parsers


def _float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def _int(text: str) -> int:
    return int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _roi(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"\s*(\d+)\s*(?:x\s*(\d+))?\s*", text)
    if not m:
        raise ValueError(f"ROI must look like 64 or 64x48, got {text!r}")
    nx = int(m.group(1))
    return nx, int(m.group(2) or nx)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(_float(t) for t in text.replace(",", " ").split())


_ELEMENT = re.compile(r"(etpa|loss|scatter)\(([^)]*)\)")


def parse_medium(text: str) -> tuple:
    """Inverse of :func:`~biphoton_lab.media.describe_medium`."""
    text = text.strip()
    if text in ("", "none"):
        return ()
    out = []
    for part in text.split(";"):
        m = _ELEMENT.fullmatch(part.strip())
        if not m:
            raise ValueError(f"cannot parse medium element {part.strip()!r}")
        kw = {}
        for item in filter(None, (s.strip() for s in m.group(2).split(","))):
            k, _, v = item.partition("=")
            kw[k.strip()] = _float(v)
        cls = {"etpa": EtpaAbsorber, "loss": LinearLoss, "scatter": Scatterer}[m.group(1)]
        try:
            out.append(cls(**kw))
        except TypeError as exc:
            raise ValueError(f"bad parameters for {m.group(1)}: {exc}") from None
    return tuple(out)


# (section, key) -> (parser, default)
_SCHEMA = {
    "optics": {
        "preset": (str, "config1"),
        "wavelength_nm": (_float, None),
        "focal_length_mm": (_float, None),
        "A_e": (_float, None),
        "Sigma": (_float, None),
        "magnification": (_float, None),
        "pixel_pitch_um": (_float, None),
        "roi": (_roi, (C.ROI_SIDE, C.ROI_SIDE)),
        "relay_aperture_mm": (_float, None),
    },
    "source": {
        "pair_rate": (_float, 1e6),
        "exposure_s": (_float, C.EXPOSURE_S),
        "slm_efficiency": (_float, 1.0),
        "mask": (str, "flat"),
        "period_mm": (_float, 0.5),
        "shift_rad": (_float, 0.0),
        "phase_rad": (_float, 0.0),
        "sampler_mode": (str, "tabulated"),
        "pairing": (str, "image"),
    },
    "medium": {"elements": (parse_medium, ())},
    "detector": {
        "quantum_efficiency": (_float, 0.7),
        "gain": (_float, C.EM_GAIN),
        "read_noise": (_float, 10.0),
        "smear": (_float, 1e-3),
        "stray_light": (_float, 0.0),
        "bias": (_float, 100.0),
        "saturation": (_int, 65535),
    },
    "task": {
        "delta_x_um": (_floats, TaskConfig.delta_x_um),
        "batches": (_int, C.BATCHES),
        "frames_per_batch": (_int, C.FRAMES_PER_BATCH),
        "peak_halfwidth": (_int, 0),
        "interpolation": (str, "paper"),
        "overlap_correction": (_bool, True),
        "metric": (str, "height"),
        "window": (_int, 64),
        "alpha_points": (_int, 8),
        "planted_alpha": (_float, 0.0),
        "period_mm": (_float, 0.5),
    },
    "run": {"seed": (_int, 0), "threads": (_int, 1)},
}

_OPTICS_FIELDS = {"wavelength_nm": "wavelength_nm", "focal_length_mm": "focal_length",
                  "A_e": "entanglement_area", "Sigma": "beam_area",
                  "magnification": "magnification", "pixel_pitch_um": "pixel_pitch_um",
                  "relay_aperture_mm": "relay_aperture"}


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            lines[(section, "")] = no
        elif section and "=" in s and not s.startswith(("#", ";")):
            lines[(section, s.split("=", 1)[0].strip())] = no
    return lines


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate configuration text; see the module docstring for keys."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                   interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc), getattr(exc, "lineno", None)) from None
    where = _line_numbers(text)
    values, defaulted = {}, []
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]", where.get((section, "")))
        for key in cp[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", where.get((section, key)))
    for section, keys in _SCHEMA.items():
        for key, (conv, default) in keys.items():
            if cp.has_option(section, key):
                raw = cp.get(section, key)
                try:
                    values[(section, key)] = conv(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key} = {raw}: {exc}", where.get((section, key))) from None
            else:
                values[(section, key)] = default
                if default is not None:
                    defaulted.append(f"{section}.{key}")
    try:
        return _build(values, tuple(defaulted))
    except _Invalid as exc:
        sec, key, msg = exc.args
        raise ConfigError(f"[{sec}] {key}: {msg}", where.get((sec, key))) from None


class _Invalid(Exception):
    pass


def _check(cond: bool, sec: str, key: str, msg: str) -> None:
    if not cond:
        raise _Invalid(sec, key, msg)


def _build(v: dict, defaulted: tuple[str, ...]) -> ExperimentConfig:
    g = lambda s, k: v[(s, k)]
    preset = g("optics", "preset")
    roi = g("optics", "roi")
    _check(preset in ("config1", "config2", "custom"), "optics", "preset",
           f"must be config1, config2 or custom, got {preset!r}")
    _check(min(roi) >= 2, "optics", "roi", "ROI sides must be >= 2")
    base = optics_preset("config1" if preset == "custom" else preset, roi)
    changes = {}
    for key, fname in _OPTICS_FIELDS.items():
        val = g("optics", key)
        if val is not None:
            _check(val > 0, "optics", key, f"must be > 0, got {val}")
            changes[fname] = val
    try:
        cfg = base.replace(**changes) if changes else base
    except OpticsError as exc:
        raise _Invalid("optics", next(iter(changes), "preset"), str(exc)) from None

    mask_kind = g("source", "mask")
    if mask_kind == "flat":
        mask = Flat()
    elif mask_kind == "grating":
        _check(g("source", "period_mm") > 0, "source", "period_mm", "must be > 0")
        mask = Grating(g("source", "period_mm"), g("source", "shift_rad"))
    elif mask_kind == "halfplane":
        phi = g("source", "phase_rad")
        _check(0 <= phi < 2 * math.pi, "source", "phase_rad", "must lie in [0, 2pi)")
        mask = HalfPlane(phi)
    else:
        raise _Invalid("source", "mask", f"must be flat, grating or halfplane, got {mask_kind!r}")
    for key in ("pair_rate", "exposure_s"):
        _check(g("source", key) >= 0, "source", key, "must be >= 0")
    _check(0 < g("source", "slm_efficiency") <= 1, "source", "slm_efficiency", "must lie in (0, 1]")
    _check(g("source", "sampler_mode") in ("tabulated", "analytic"), "source", "sampler_mode",
           "must be tabulated or analytic")
    _check(g("source", "pairing") in PAIRINGS, "source", "pairing", f"must be one of {PAIRINGS}")
    seed = g("run", "seed")
    _check(0 <= seed < 2**64, "run", "seed", "must be a 64-bit unsigned integer")
    _check(g("run", "threads") >= 1, "run", "threads", "must be >= 1")
    src = SourceSpec(g("source", "pair_rate"), g("source", "exposure_s"),
                     g("source", "slm_efficiency"), mask, cfg, seed,
                     g("source", "sampler_mode"), g("source", "pairing"))

    det_kw = {k: g("detector", k) for k in _SCHEMA["detector"]}
    try:
        det = DetectorSpec(**det_kw)
    except ValueError as exc:
        bad = next((k for k in det_kw if k in str(exc).replace(" ", "_")), "gain")
        raise _Invalid("detector", bad, str(exc)) from None

    t = {k: g("task", k) for k in _SCHEMA["task"]}
    _check(t["batches"] >= 2, "task", "batches", "must be >= 2")
    _check(t["frames_per_batch"] >= 2, "task", "frames_per_batch", "must be >= 2")
    _check(t["peak_halfwidth"] >= 0, "task", "peak_halfwidth", "must be >= 0")
    _check(t["interpolation"] in ("paper", "full-column", "off"), "task", "interpolation",
           "must be paper, full-column or off")
    _check(t["metric"] in ("height", "area"), "task", "metric", "must be height or area")
    _check(t["window"] >= 1, "task", "window", "must be >= 1")
    _check(t["alpha_points"] >= 5, "task", "alpha_points", "must be >= 5")
    _check(t["period_mm"] > 0, "task", "period_mm", "must be > 0")
    dx = t["delta_x_um"]
    _check(all(d >= 0 for d in dx) and all(b > a for a, b in zip(dx, dx[1:])), "task",
           "delta_x_um", "must be non-negative and strictly increasing")
    return ExperimentConfig(preset, src, g("medium", "elements"), det, TaskConfig(**t),
                            g("run", "threads"), defaulted)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Text that :func:`parse_config` turns back into an equal configuration."""
    o, s, d, t = cfg.optics, cfg.source, cfg.detector, cfg.task
    mask = s.mask
    lines = [
        "[optics]",
        f"preset = {cfg.optics_preset}",
        f"wavelength_nm = {o.wavelength_nm!r}",
        f"focal_length_mm = {o.focal_length!r}",
        f"A_e = {o.entanglement_area!r}",
        f"Sigma = {o.beam_area!r}",
        f"magnification = {o.magnification!r}",
        f"pixel_pitch_um = {o.pixel_pitch_um!r}",
        f"roi = {o.roi[0]}x{o.roi[1]}",
        f"relay_aperture_mm = {o.relay_aperture!r}",
        "",
        "[source]",
        f"pair_rate = {s.pair_rate!r}",
        f"exposure_s = {s.exposure!r}",
        f"slm_efficiency = {s.slm_efficiency!r}",
    ]
    if isinstance(mask, Grating):
        lines += ["mask = grating", f"period_mm = {mask.period!r}", f"shift_rad = {mask.shift!r}"]
    elif isinstance(mask, HalfPlane):
        lines += ["mask = halfplane", f"phase_rad = {mask.phase!r}"]
    elif isinstance(mask, Flat):
        lines += ["mask = flat"]
    else:
        raise ConfigError("custom masks cannot be written to a configuration file")
    lines += [
        f"sampler_mode = {s.sampler_mode}",
        f"pairing = {s.pairing}",
        "",
        "[medium]",
        f"elements = {describe_medium(cfg.medium)}",
        "",
        "[detector]",
    ]
    lines += [f"{k} = {getattr(d, k)!r}" for k in _SCHEMA["detector"]]
    lines += ["", "[task]"]
    for k in _SCHEMA["task"]:
        val = getattr(t, k)
        if k == "delta_x_um":
            val = ", ".join(repr(x) for x in val)
        elif isinstance(val, bool):
            val = str(val).lower()
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{k} = {val}")
    lines += ["", "[run]", f"seed = {s.seed}", f"threads = {cfg.threads}", ""]
    return "\n".join(lines)
