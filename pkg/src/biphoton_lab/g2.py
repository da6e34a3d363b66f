"""Minus-coordinate correlation images from EMCCD frame streams.

The estimator is the consecutive-frame covariance

    Gamma(delta) = (1/M) sum_m C(I_m, I_m)(delta)
                   - (1/n_cross) sum_m C(I_m, I_{m+1})(delta)

with the linear (zero-padded) correlation ``C(A, B)(delta) =
sum_r A(r + delta) B(r)``. Lag grids are indexed ``[dy + Ly, dx + Lx]``.

Accumulation is single-stream; parallel runs split the stream into
contiguous chunks whose accumulators are primed with the last frame of the
previous chunk and merged in a fixed order.
"""
from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import fft as sfft

MAX_FULL_ROI = 24
INTERPOLATION_MODES = ("paper", "full-column", "off")


class CorrelationError(ValueError):
    pass


def _check_window(shape: tuple[int, int], window: tuple[int, int]) -> tuple[int, int]:
    lx, ly = (int(w) for w in window)
    h, w = shape
    if lx < 0 or ly < 0 or lx >= w or ly >= h:
        raise CorrelationError(f"lag window ({lx}, {ly}) does not fit frames of shape {shape}")
    return lx, ly


def xcorr_naive(a: np.ndarray, b: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """Reference double loop over lags (vectorised over pixels)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise CorrelationError(f"frame shapes differ: {a.shape} vs {b.shape}")
    lx, ly = _check_window(a.shape, window)
    h, w = a.shape
    out = np.zeros((2 * ly + 1, 2 * lx + 1))
    for dy in range(-ly, ly + 1):
        for dx in range(-lx, lx + 1):
            # r ranges over pixels where both r and r + delta are inside
            ya, yb = max(dy, 0), h + min(dy, 0)
            xa, xb = max(dx, 0), w + min(dx, 0)
            out[dy + ly, dx + lx] = np.sum(a[ya:yb, xa:xb] * b[ya - dy:yb - dy, xa - dx:xb - dx])
    return out


def pad_shape(shape: tuple[int, int], window: tuple[int, int]) -> tuple[int, int]:
    """FFT size large enough that no lag inside the window wraps around."""
    h, w = shape
    lx, ly = window
    return sfft.next_fast_len(h + ly, real=True), sfft.next_fast_len(w + lx, real=True)


def _spectra(frames: np.ndarray, padded: tuple[int, int], workers: int = 1) -> np.ndarray:
    return sfft.rfft2(np.asarray(frames, dtype=float), s=padded, axes=(-2, -1), workers=workers)


def _window_from_spectrum(spec: np.ndarray, padded: tuple[int, int],
                          window: tuple[int, int]) -> np.ndarray:
    full = sfft.irfft2(spec, s=padded)
    lx, ly = window
    rows = np.r_[padded[0] - ly:padded[0], 0:ly + 1]
    cols = np.r_[padded[1] - lx:padded[1], 0:lx + 1]
    return full[np.ix_(rows, cols)]


def xcorr_fast(a: np.ndarray, b: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise CorrelationError(f"frame shapes differ: {a.shape} vs {b.shape}")
    window = _check_window(a.shape, window)
    padded = pad_shape(a.shape, window)
    fa, fb = _spectra(np.stack([a, b]), padded)
    return _window_from_spectrum(fa * np.conj(fb), padded, window)


def xcorr_lags(a: np.ndarray, b: np.ndarray, window: tuple[int, int],
               mode: str = "fast") -> np.ndarray:
    """Linear cross-correlation ``sum_r a(r + delta) b(r)`` over the lag window."""
    if mode == "fast":
        return xcorr_fast(a, b, window)
    if mode == "naive":
        return xcorr_naive(a, b, window)
    raise CorrelationError(f"unknown correlation mode {mode!r}")


# --------------------------------------------------------------------------- accumulation


@dataclass
class CorrAccumulator:
    """Running sums of the same-frame and consecutive-frame correlations.

    In ``fast`` mode the sums are kept as spectra and transformed to lags on
    demand; ``naive`` mode sums lag grids directly.
    """

    shape: tuple[int, int]
    window: tuple[int, int] = (64, 64)
    mode: str = "fast"
    batch: int = 32
    workers: int = 1
    frames_seen: int = 0
    cross_pairs: int = 0
    _prev: np.ndarray | None = field(default=None, repr=False)
    _prev_spec: np.ndarray | None = field(default=None, repr=False)
    _lag_auto: np.ndarray | None = field(default=None, repr=False)
    _lag_cross: np.ndarray | None = field(default=None, repr=False)
    _spec_auto: np.ndarray | None = field(default=None, repr=False)
    _spec_cross: np.ndarray | None = field(default=None, repr=False)
    _intensity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.window = _check_window(self.shape, self.window)
        if self.mode not in ("fast", "naive"):
            raise CorrelationError(f"unknown correlation mode {self.mode!r}")
        lx, ly = self.window
        self.padded = pad_shape(self.shape, self.window)
        if self._lag_auto is None:
            self._lag_auto = np.zeros((2 * ly + 1, 2 * lx + 1))
            self._lag_cross = np.zeros_like(self._lag_auto)
            spec_shape = (self.padded[0], self.padded[1] // 2 + 1)
            self._spec_auto = np.zeros(spec_shape, complex)
            self._spec_cross = np.zeros(spec_shape, complex)
            self._intensity = np.zeros(self.shape)

    @classmethod
    def primed(cls, previous: np.ndarray, **kwargs) -> "CorrAccumulator":
        """Empty accumulator that will pair its first frame with ``previous``.

        ``previous`` contributes only to the cross term and is not counted.
        """
        prev = np.asarray(previous, dtype=float)
        acc = cls(prev.shape, **kwargs)
        acc._hold(prev)
        return acc

    def _hold(self, frame: np.ndarray, spec: np.ndarray | None = None) -> None:
        self._prev = frame
        if self.mode == "fast":
            self._prev_spec = _spectra(frame, self.padded) if spec is None else spec

    def _check(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=float)
        if frames.shape[-2:] != self.shape:
            raise CorrelationError(f"frame shape {frames.shape[-2:]} != accumulator shape {self.shape}")
        return frames

    def accumulate(self, frame: np.ndarray) -> "CorrAccumulator":
        frame = self._check(frame)
        if frame.ndim != 2:
            raise CorrelationError("accumulate takes a single frame; use accumulate_many")
        return self.accumulate_many(frame[None])

    def accumulate_many(self, frames: np.ndarray) -> "CorrAccumulator":
        """Feed consecutive frames (shape ``(k, H, W)``) in order."""
        frames = self._check(frames)
        if frames.ndim != 3:
            raise CorrelationError("expected a (k, H, W) stack")
        for lo in range(0, frames.shape[0], self.batch):
            self._accumulate_batch(frames[lo:lo + self.batch])
        return self

    def _accumulate_batch(self, frames: np.ndarray) -> None:
        k = frames.shape[0]
        if k == 0:
            return
        self._intensity += frames.sum(axis=0)
        if self.mode == "naive":
            prev = self._prev
            for f in frames:
                self._lag_auto += xcorr_naive(f, f, self.window)
                if prev is not None:
                    self._lag_cross += xcorr_naive(prev, f, self.window)
                    self.cross_pairs += 1
                prev = f
            self._hold(frames[-1].copy())
        else:
            spec = _spectra(frames, self.padded, self.workers)
            self._spec_auto += np.sum(spec.real**2 + spec.imag**2, axis=0)
            if k > 1:
                self._spec_cross += np.sum(spec[:-1] * np.conj(spec[1:]), axis=0)
                self.cross_pairs += k - 1
            if self._prev_spec is not None:
                self._spec_cross += self._prev_spec * np.conj(spec[0])
                self.cross_pairs += 1
            self._hold(frames[-1].copy(), spec[-1].copy())
        self.frames_seen += k

    # sums in the lag domain
    @property
    def s_auto(self) -> np.ndarray:
        return self._lag_auto + _window_from_spectrum(self._spec_auto, self.padded, self.window)

    @property
    def s_cross(self) -> np.ndarray:
        return self._lag_cross + _window_from_spectrum(self._spec_cross, self.padded, self.window)

    @property
    def intensity_sum(self) -> np.ndarray:
        return self._intensity

    def merge(self, other: "CorrAccumulator") -> "CorrAccumulator":
        """Combine with the accumulator of the chunk that follows this one.

        ``other`` must have been primed with this chunk's last frame (or be
        empty). The result holds ``other``'s last frame.
        """
        if (self.shape, self.window, self.padded) != (other.shape, other.window, other.padded):
            raise CorrelationError("cannot merge accumulators with different ROI or lag window")
        out = CorrAccumulator(self.shape, self.window, self.mode, self.batch, self.workers,
                              self.frames_seen + other.frames_seen,
                              self.cross_pairs + other.cross_pairs,
                              _lag_auto=self._lag_auto + other._lag_auto,
                              _lag_cross=self._lag_cross + other._lag_cross,
                              _spec_auto=self._spec_auto + other._spec_auto,
                              _spec_cross=self._spec_cross + other._spec_cross,
                              _intensity=self._intensity + other._intensity)
        src = other if other.frames_seen else self
        out._prev, out._prev_spec = src._prev, src._prev_spec
        if out.mode == "fast" and out._prev is not None and out._prev_spec is None:
            out._prev_spec = _spectra(out._prev, out.padded)
        return out

    def finalize(self, source_hash: str = "") -> "CorrelationImage":
        if self.frames_seen < 2 or self.cross_pairs < 1:
            raise CorrelationError(f"need at least 2 frames, have {self.frames_seen}")
        gamma = self.s_auto / self.frames_seen - self.s_cross / self.cross_pairs
        return CorrelationImage(gamma, self.frames_seen, self.window, (),
                                source_hash, self._intensity / self.frames_seen)


# --------------------------------------------------------------------------- images


@dataclass(frozen=True, eq=False)
class CorrelationImage:
    values: np.ndarray
    frames: int
    window: tuple[int, int]
    flags: tuple[str, ...] = ()
    source_hash: str = ""
    mean_intensity: np.ndarray | None = field(default=None, repr=False)

    def at(self, dx: int, dy: int) -> float:
        lx, ly = self.window
        return float(self.values[dy + ly, dx + lx])

    def crop(self, window: tuple[int, int]) -> "CorrelationImage":
        """The same image restricted to ``|dx| <= window[0]``, ``|dy| <= window[1]``."""
        lx, ly = self.window
        wx, wy = min(window[0], lx), min(window[1], ly)
        mean = self.mean_intensity
        return CorrelationImage(self.values[ly - wy:ly + wy + 1, lx - wx:lx + wx + 1].copy(),
                                self.frames, (wx, wy), self.flags, self.source_hash, mean)

    @property
    def lags_x(self) -> np.ndarray:
        return np.arange(-self.window[0], self.window[0] + 1)

    @property
    def lags_y(self) -> np.ndarray:
        return np.arange(-self.window[1], self.window[1] + 1)

    def sidecar(self) -> str:
        lx, ly = self.window
        return (f"frames = {self.frames}\nwindow_x = {lx}\nwindow_y = {ly}\n"
                f"flags = {','.join(self.flags) or 'none'}\nsource_sha256 = {self.source_hash or 'none'}\n"
                "layout = rows dy from -window_y, columns dx from -window_x\n")

    def to_csv(self, path) -> None:
        path = Path(path)
        _atomic_write(path, _matrix_csv(self.values))
        _atomic_write(path.with_name(path.name + ".meta"), self.sidecar())

    @classmethod
    def from_csv(cls, path) -> "CorrelationImage":
        path = Path(path)
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        meta = dict(line.split(" = ", 1) for line in
                    path.with_name(path.name + ".meta").read_text().splitlines() if " = " in line)
        flags = () if meta.get("flags", "none") == "none" else tuple(meta["flags"].split(","))
        src = "" if meta.get("source_sha256", "none") == "none" else meta["source_sha256"]
        return cls(values, int(meta["frames"]), (int(meta["window_x"]), int(meta["window_y"])),
                   flags, src)


def _matrix_csv(values: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in values)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def interpolate_artifacts(img: CorrelationImage, mode: str = "paper") -> CorrelationImage:
    """Replace lags corrupted by shot noise and charge smearing.

    ``paper`` rewrites ``(0, 0)`` and ``(0, +-1)`` with the mean of their
    row neighbours at ``dx = +-1``; ``full-column`` does so for the whole
    ``dx = 0`` column.
    """
    if mode not in INTERPOLATION_MODES:
        raise CorrelationError(f"unknown interpolation mode {mode!r}")
    if mode == "off":
        return img
    lx, ly = img.window
    if lx < 1 or (mode == "paper" and ly < 1):
        raise CorrelationError("interpolation needs lags dx = +-1 (and dy = +-1 in paper mode)")
    v = img.values.copy()
    rows = [ly - 1, ly, ly + 1] if mode == "paper" else list(range(2 * ly + 1))
    for r in rows:
        v[r, lx] = 0.5 * (v[r, lx - 1] + v[r, lx + 1])
    return replace(img, values=v, flags=img.flags + (f"interpolated:{mode}",))


# --------------------------------------------------------------------------- chunked runs


def _run_chunk(frames: np.ndarray, previous: np.ndarray | None, **kwargs) -> CorrAccumulator:
    if previous is None:
        acc = CorrAccumulator(frames.shape[-2:], **kwargs)
    else:
        acc = CorrAccumulator.primed(previous, **kwargs)
    return acc.accumulate_many(frames)


def merge_tree(accs: Sequence[CorrAccumulator]) -> CorrAccumulator:
    """Pairwise merge in a fixed balanced order (deterministic rounding)."""
    accs = list(accs)
    if not accs:
        raise CorrelationError("nothing to merge")
    while len(accs) > 1:
        nxt = [accs[i].merge(accs[i + 1]) for i in range(0, len(accs) - 1, 2)]
        if len(accs) % 2:
            nxt.append(accs[-1])
        accs = nxt
    return accs[0]


def correlate_frames(frames: np.ndarray, window: tuple[int, int] = (64, 64), chunks: int = 1,
                     threads: int = 1, mode: str = "fast") -> CorrAccumulator:
    """Accumulate an in-memory stack split into ``chunks`` contiguous pieces.

    The chunk layout, not the thread count, fixes the result.
    """
    frames = np.asarray(frames)
    bounds = np.linspace(0, frames.shape[0], chunks + 1).astype(int)
    jobs = [(frames[lo:hi], frames[lo - 1] if lo > 0 else None)
            for lo, hi in zip(bounds[:-1], bounds[1:])]
    kw = dict(window=window, mode=mode)
    if threads <= 1 or chunks == 1:
        accs = [_run_chunk(f, p, **kw) for f, p in jobs]
    else:
        with ThreadPoolExecutor(threads) as pool:
            accs = list(pool.map(lambda job: _run_chunk(*job, **kw), jobs))
    return merge_tree(accs)


def correlate_stream(chunks: Iterable[np.ndarray], shape: tuple[int, int],
                     window: tuple[int, int] = (64, 64), hasher=None) -> CorrAccumulator:
    """Sequential accumulation of an iterable of frame chunks (bounded memory)."""
    acc = CorrAccumulator(shape, window)
    for frames in chunks:
        if hasher is not None:
            hasher.update(np.ascontiguousarray(frames, dtype="<u2").tobytes())
        acc.accumulate_many(frames)
    return acc


def correlate_file(path, window: tuple[int, int] = (64, 64), chunk: int = 256) -> CorrelationImage:
    from .stackio import BpfReader, file_sha256

    reader = BpfReader(path)
    h = reader.header
    acc = correlate_stream(reader.iter_chunks(chunk), (h.height, h.width), window)
    return acc.finalize(file_sha256(path))


# --------------------------------------------------------------------------- 4-D oracle


def g2_full(frames: np.ndarray) -> np.ndarray:
    """Literal four-index ``G2[y1, x1, y2, x2]`` for a small ROI.

    Same-frame products minus products of frame ``m`` (first index pair)
    with frame ``m + 1`` (second index pair).
    """
    f = np.asarray(frames, dtype=float)
    if f.ndim != 3 or f.shape[0] < 2:
        raise CorrelationError("need a (M >= 2, H, W) stack")
    m, h, w = f.shape
    if h > MAX_FULL_ROI or w > MAX_FULL_ROI:
        raise CorrelationError(f"ROI {h}x{w} too large for the 4-D tensor (max {MAX_FULL_ROI})")
    flat = f.reshape(m, h * w)
    auto = flat.T @ flat / m
    cross = flat[:-1].T @ flat[1:] / (m - 1)
    return (auto - cross).reshape(h, w, h, w)


def g2_auto_term(frames: np.ndarray) -> np.ndarray:
    """Same-frame part of :func:`g2_full`, symmetric under index-pair swap."""
    f = np.asarray(frames, dtype=float)
    m, h, w = f.shape
    flat = f.reshape(m, h * w)
    return (flat.T @ flat / m).reshape(h, w, h, w)


def _project(g: np.ndarray, sign: int) -> np.ndarray:
    h, w = g.shape[:2]
    out = np.zeros((2 * h - 1, 2 * w - 1))
    y = np.arange(h)
    x = np.arange(w)
    y1, x1, y2, x2 = np.meshgrid(y, x, y, x, indexing="ij")
    if sign < 0:
        iy, ix = y1 - y2 + h - 1, x1 - x2 + w - 1
    else:
        iy, ix = y1 + y2, x1 + x2
    np.add.at(out, (iy.ravel(), ix.ravel()), g.ravel())
    return out


def minus_projection(g: np.ndarray, window: tuple[int, int] | None = None) -> np.ndarray:
    """``sum_r G2(r + delta, r)`` on lags ``[dy + Ly, dx + Lx]``."""
    out = _project(g, -1)
    return _crop(out, g.shape[:2], window)


def sum_projection(g: np.ndarray, window: tuple[int, int] | None = None) -> np.ndarray:
    """``sum G2(r1, r2)`` over ``r1 + r2 - (N - 1) = s``, centred like the minus grid."""
    out = _project(g, +1)
    return _crop(out, g.shape[:2], window)


def _crop(out: np.ndarray, shape: tuple[int, int], window) -> np.ndarray:
    if window is None:
        return out
    h, w = shape
    lx, ly = _check_window(shape, window)
    return out[h - 1 - ly:h + ly, w - 1 - lx:w + lx]


def stack_digest(frames: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(frames, dtype="<u2").tobytes()).hexdigest()


def correlate_pairs(a: np.ndarray, b: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """``sum_m C(a_m, b_m)`` over two equally long frame stacks."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 3:
        raise CorrelationError("need two (k, H, W) stacks of equal shape")
    window = _check_window(a.shape[1:], window)
    padded = pad_shape(a.shape[1:], window)
    spec = np.sum(_spectra(a, padded) * np.conj(_spectra(b, padded)), axis=0)
    return _window_from_spectrum(spec, padded, window)


def null_correlation(take, n_frames: int, window: tuple[int, int], seed: int,
                     chunk: int = 256) -> np.ndarray:
    """Estimator with both terms built from shuffled, different frames.

    ``take(indices)`` returns the frames at ``indices``. The same-frame
    term is replaced by products of frames drawn from two independent
    permutations, so genuine coincidences cancel and the result scatters
    around zero.
    """
    if n_frames < 2:
        raise CorrelationError("need at least 2 frames")
    rng = np.random.default_rng(seed)
    p1, p2 = rng.permutation(n_frames), rng.permutation(n_frames)
    same = p1 == p2
    p2[same] = (p2[same] + 1) % n_frames
    first = np.zeros(1)
    second = np.zeros(1)
    for lo in range(0, n_frames, chunk):
        hi = min(lo + chunk, n_frames)
        first = first + correlate_pairs(take(p1[lo:hi]), take(p2[lo:hi]), window)
        nxt = min(hi + 1, n_frames)
        if nxt - lo > 1:
            second = second + correlate_pairs(take(p1[lo:nxt - 1]), take(p1[lo + 1:nxt]), window)
    return first / n_frames - second / (n_frames - 1)
