"""EMCCD frame simulation.

Frames are produced in fixed-size chunks of exposures. Every chunk owns
three Philox streams (pairs, medium, detector) derived from the root seed
and the chunk index, so a stack is identical whatever the thread count and
two runs that differ only in the medium see the same pairs.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .media import MediumSpec, apply_medium, describe_medium
from .optics import OpticsConfig, mask_name
from .sampler import MinusSampler, SourceSpec, draw_pair_count, sum_variance
from .stackio import BpfWriter

CHUNK_FRAMES = 64
SATURATION = 65535
_PAIRS, _MEDIUM, _DETECTOR = 0, 1, 2


@dataclass(frozen=True)
class DetectorSpec:
    """EMCCD response.

    ``stray_light`` is the mean number of background photons per pixel per
    exposure, ``smear`` the fraction of charge picked up per pixel passed
    during the vertical shift.
    """

    quantum_efficiency: float = 0.7
    gain: float = 1000.0
    read_noise: float = 10.0
    smear: float = 1e-3
    stray_light: float = 0.0
    bias: float = 100.0
    saturation: int = SATURATION

    def __post_init__(self):
        if not 0 < self.quantum_efficiency <= 1:
            raise ValueError("quantum efficiency must lie in (0, 1]")
        if not self.gain > 0:
            raise ValueError("gain must be > 0")
        if not 0 <= self.smear < 1:
            raise ValueError("smear fraction must lie in [0, 1)")
        if self.read_noise < 0 or self.stray_light < 0 or self.bias < 0:
            raise ValueError("read noise, stray light and bias must be >= 0")
        if not 0 < self.saturation <= SATURATION:
            raise ValueError(f"saturation must lie in (0, {SATURATION}]")


@dataclass
class Telemetry:
    frames: int = 0
    pairs_emitted: int = 0
    pairs_transmitted: int = 0
    photons_at_camera: int = 0
    out_of_roi: int = 0

    def add(self, other: "Telemetry") -> None:
        for k in asdict(self):
            setattr(self, k, getattr(self, k) + getattr(other, k))


def chunk_rngs(seed: int, chunk: int) -> list[np.random.Generator]:
    """Pair, medium and detector generators of exposure chunk ``chunk``."""
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk, s))))
            for s in (_PAIRS, _MEDIUM, _DETECTOR)]


def project_to_pixels(positions: np.ndarray, cfg: OpticsConfig):
    """Map sample-plane positions (mm) to pixel indices of a centred ROI.

    Returns ``(ix, iy, inside)``; indices are only meaningful where
    ``inside`` is True.
    """
    pos = np.atleast_2d(positions)
    nx, ny = cfg.roi
    scale = 1.0 / cfg.sample_pixel
    ix = np.floor(pos[:, 0] * scale + nx / 2).astype(np.int64)
    iy = np.floor(pos[:, 1] * scale + ny / 2).astype(np.int64)
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    return ix, iy, inside


def apply_smear(frames: np.ndarray, beta: float) -> np.ndarray:
    """Add ``beta`` times the charge of all earlier rows of the same column.

    Works on a single frame or a stack with rows on axis -2.
    """
    if not 0 <= beta < 1:
        raise ValueError("smear fraction must lie in [0, 1)")
    s = np.asarray(frames, dtype=float)
    if beta == 0:
        return s.copy()
    above = np.cumsum(s, axis=-2) - s
    return s + beta * above


def remove_smear(frames: np.ndarray, beta: float) -> np.ndarray:
    """Invert :func:`apply_smear` exactly (rows on axis -2)."""
    if not 0 <= beta < 1:
        raise ValueError("smear fraction must lie in [0, 1)")
    s = np.asarray(frames, dtype=float)
    if beta == 0:
        return s.copy()
    # with T the running row sum of the clean image, s_i = T_i - (1 - beta) T_(i-1)
    total = np.empty_like(s)
    prev = np.zeros(s.shape[:-2] + s.shape[-1:])
    for i in range(s.shape[-2]):
        prev = s[..., i, :] + (1 - beta) * prev
        total[..., i, :] = prev
    return np.diff(total, axis=-2, prepend=0.0)


def electrons_to_counts(electrons: np.ndarray, det: DetectorSpec,
                        rng: np.random.Generator) -> np.ndarray:
    """EM gain, smear, readout noise, clamp and rounding, as uint16."""
    signal = np.zeros(electrons.shape)
    hit = electrons > 0
    if hit.any():
        # sum of n exponentials with mean g is Gamma(n, g)
        signal[hit] = rng.gamma(electrons[hit], det.gain)
    return readout(signal, det, rng)


def readout(signal: np.ndarray, det: DetectorSpec, rng: np.random.Generator) -> np.ndarray:
    """Smear, bias, readout noise, clamp and rounding of amplified charge, as uint16."""
    signal = apply_smear(signal, det.smear)
    signal += det.bias
    if det.read_noise > 0:
        signal += det.read_noise * rng.standard_normal(signal.shape)
    np.clip(signal, 0, det.saturation, out=signal)
    return np.rint(signal).astype(np.uint16)


def expose(hits: np.ndarray, det: DetectorSpec, rng: np.random.Generator) -> np.ndarray:
    """Turn a photon-count image (or stack) into detector counts."""
    hits = np.asarray(hits, dtype=np.int64)
    electrons = rng.binomial(hits, det.quantum_efficiency)
    if det.stray_light > 0:
        electrons += rng.poisson(det.stray_light * det.quantum_efficiency, hits.shape)
    return electrons_to_counts(electrons, det, rng)


@dataclass
class FrameSimulator:
    """Source, medium and detector bound together for chunked simulation."""

    source: SourceSpec
    medium: MediumSpec = ()
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    chunk_frames: int = CHUNK_FRAMES

    def __post_init__(self):
        self._sampler: MinusSampler = self.source.minus_sampler()
        self._sum_sd = math.sqrt(sum_variance(self.source.cfg))

    @property
    def shape(self) -> tuple[int, int]:
        nx, ny = self.source.cfg.roi
        return ny, nx

    def chunk(self, index: int, n_frames: int | None = None) -> tuple[np.ndarray, Telemetry]:
        """Frames of chunk ``index`` (truncated to ``n_frames``) and its telemetry."""
        k = self.chunk_frames if n_frames is None else n_frames
        full = self.chunk_frames
        src, det, cfg = self.source, self.detector, self.source.cfg
        rng_p, rng_m, rng_d = chunk_rngs(src.seed, index)

        # The whole chunk is always simulated, so a truncated chunk is a prefix of the full one.
        counts = draw_pair_count(src.pair_rate, src.exposure, rng_p, size=full)
        n = int(counts.sum())
        frame_of = np.repeat(np.arange(full), counts)
        d, ok = self._sampler.sample(n, rng_p)
        u = self._sum_sd * rng_p.standard_normal((n, 2))
        # Detection and gain of each photon come from the pair stream, so runs that differ
        # only in the medium differ only by the photons the medium removes.
        qe_draw = rng_p.random((2, n))
        gain_draw = det.gain * rng_p.standard_exponential((2, n))
        if src.pairing == "independent":
            sd = math.sqrt(cfg.beam_area)
            r1, r2 = sd * rng_p.standard_normal((2, n, 2))
        elif src.pairing == "fourier":
            r1, r2 = (u + d) / 2, (d - u) / 2
        else:
            r1, r2 = (u + d) / 2, (u - d) / 2
        r1, a1, r2, a2 = apply_medium(r1, r2, self.medium, rng_m)
        a1 &= ok
        a2 &= ok
        pos = np.concatenate([r1[a1], r2[a2]])
        fr = np.concatenate([frame_of[a1], frame_of[a2]])
        qe = np.concatenate([qe_draw[0][a1], qe_draw[1][a2]])
        gain = np.concatenate([gain_draw[0][a1], gain_draw[1][a2]])

        ny, nx = self.shape
        ix, iy, inside = project_to_pixels(pos, cfg)
        # QE thinning per photon, then one Exponential(g) charge per photoelectron
        detected = inside & (qe < det.quantum_efficiency)
        flat = (fr[detected] * ny + iy[detected]) * nx + ix[detected]
        signal = np.bincount(flat, weights=gain[detected],
                             minlength=full * ny * nx).reshape(full, ny, nx)
        if det.stray_light > 0:
            stray = rng_d.poisson(det.stray_light * det.quantum_efficiency, signal.shape)
            hit = stray > 0
            signal[hit] += rng_d.gamma(stray[hit], det.gain)
        frames = readout(signal, det, rng_d)[:k]

        kept = frame_of < k
        kept_photons = fr < k
        tel = Telemetry(frames=k, pairs_emitted=int(counts[:k].sum()),
                        pairs_transmitted=int((ok & kept).sum()),
                        photons_at_camera=int(kept_photons.sum()),
                        out_of_roi=int((~inside & kept_photons).sum()))
        return frames, tel

    def iter_frames(self, n_frames: int, threads: int = 1,
                    telemetry: Telemetry | None = None) -> Iterator[np.ndarray]:
        """Yield consecutive chunks of the first ``n_frames`` frames, in order."""
        jobs = [(i, min(self.chunk_frames, n_frames - i * self.chunk_frames))
                for i in range(math.ceil(n_frames / self.chunk_frames))]
        if threads <= 1:
            results = (self.chunk(i, k) for i, k in jobs)
            for frames, tel in results:
                if telemetry is not None:
                    telemetry.add(tel)
                yield frames
            return
        with ThreadPoolExecutor(threads) as pool:
            window = []
            for job in jobs:
                window.append(pool.submit(self.chunk, *job))
                if len(window) > 2 * threads:
                    frames, tel = window.pop(0).result()
                    if telemetry is not None:
                        telemetry.add(tel)
                    yield frames
            for fut in window:
                frames, tel = fut.result()
                if telemetry is not None:
                    telemetry.add(tel)
                yield frames

    def frames(self, n_frames: int, threads: int = 1) -> np.ndarray:
        return np.concatenate(list(self.iter_frames(n_frames, threads)))

    def metadata(self) -> dict[str, object]:
        src, det, cfg = self.source, self.detector, self.source.cfg
        meta = {f"optics.{k}": v for k, v in asdict(cfg).items()}
        meta.update({
            "source.pair_rate": src.pair_rate,
            "source.exposure": src.exposure,
            "source.slm_efficiency": src.slm_efficiency,
            "source.mask": mask_name(src.mask),
            "source.sampler_mode": src.sampler_mode,
            "source.pairing": src.pairing,
            "source.seed": src.seed,
            "medium": describe_medium(self.medium),
            "simulation.chunk_frames": self.chunk_frames,
        })
        meta.update({f"detector.{k}": v for k, v in asdict(det).items()})
        return meta


def simulate_frames(source: SourceSpec, medium: MediumSpec, det: DetectorSpec,
                    n_frames: int, threads: int = 1) -> np.ndarray:
    return FrameSimulator(source, medium, det).frames(n_frames, threads)


def simulate_stack(source: SourceSpec, medium: MediumSpec, det: DetectorSpec,
                   n_frames: int, path, threads: int = 1,
                   extra_metadata: dict | None = None) -> Telemetry:
    """Stream ``n_frames`` simulated frames into a BPF1 file at ``path``."""
    if n_frames < 2:
        raise ValueError("a stack needs at least 2 frames")
    sim = FrameSimulator(source, medium, det)
    tel = Telemetry()
    meta = sim.metadata()
    meta.update(extra_metadata or {})
    ny, nx = sim.shape
    with BpfWriter(path, nx, ny, meta) as writer:
        for frames in sim.iter_frames(n_frames, threads, tel):
            writer.write(frames)
    return tel


def mean_photons_per_pixel(source: SourceSpec) -> float:
    """Expected source photons per ROI pixel per exposure, before losses.

    Uses the Gaussian intensity profile of per-axis variance ``beam_area``
    centred on the ROI.
    """
    cfg = source.cfg
    sd = math.sqrt(2 * cfg.beam_area)
    nx, ny = cfg.roi
    accept = (math.erf(nx * cfg.sample_pixel / 2 / sd) * math.erf(ny * cfg.sample_pixel / 2 / sd))
    return 2 * source.mean_pairs * accept / (nx * ny)
