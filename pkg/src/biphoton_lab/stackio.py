"""BPF1 frame-stack files.

Layout (little-endian)::

    0   4s  magic b"BPF1"
    4   u16 version (1)
    6   u32 width
    10  u32 height
    14  u32 frame count
    18  u8  pixel encoding (0 = u16 little-endian)
    19  u32 metadata length
    23  metadata, UTF-8 "key = value" lines
    ..  frames, row-major, contiguous
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

MAGIC = b"BPF1"
VERSION = 1
ENCODING_U16 = 0
_HEADER = struct.Struct("<4sHIIIBI")
_COUNT_OFFSET = 14


class StackFormatError(ValueError):
    """Malformed or truncated BPF1 file."""


def format_metadata(meta: Mapping[str, object]) -> str:
    lines = []
    for key, value in meta.items():
        text = str(value)
        if "\n" in text or "=" in str(key):
            raise ValueError(f"metadata entry {key!r} cannot be written on one line")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_metadata(text: str) -> dict[str, str]:
    meta = {}
    for line in text.split("\n"):
        if not line:
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise StackFormatError(f"bad metadata line {line!r}")
        meta[key] = value
    return meta


@dataclass
class StackHeader:
    width: int
    height: int
    frame_count: int
    metadata: dict[str, str] = field(default_factory=dict)
    encoding: int = ENCODING_U16
    version: int = VERSION
    data_offset: int = 0

    @property
    def frame_bytes(self) -> int:
        return self.width * self.height * 2


class BpfWriter:
    """Streaming writer; the frame count is patched into the header on close.

    Output goes to a temporary file that replaces ``path`` atomically on a
    successful close.
    """

    def __init__(self, path, width: int, height: int, metadata: Mapping[str, object] = ()):
        self.path = Path(path)
        self.width, self.height = int(width), int(height)
        self._tmp = self.path.with_name(f".{self.path.name}.{os.getpid()}.tmp")
        self._fh = open(self._tmp, "wb")
        meta = format_metadata(dict(metadata)).encode("utf-8")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, self.width, self.height, 0, ENCODING_U16, len(meta)))
        self._fh.write(meta)
        self.count = 0

    def write(self, frames: np.ndarray) -> None:
        frames = np.asarray(frames)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.shape[1:] != (self.height, self.width):
            raise ValueError(f"frame shape {frames.shape[1:]} != ({self.height}, {self.width})")
        try:
            self._fh.write(np.ascontiguousarray(frames, dtype="<u2").tobytes())
        except OSError as exc:
            raise OSError(f"writing frame {self.count}: {exc}") from exc
        self.count += frames.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(_COUNT_OFFSET)
        self._fh.write(struct.pack("<I", self.count))
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        if not self._fh.closed:
            self._fh.close()
        self._tmp.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def read_header(path) -> StackHeader:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise StackFormatError(f"{path}: header truncated at byte {len(raw)} "
                                   f"(need {_HEADER.size})")
        magic, version, width, height, count, enc, meta_len = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise StackFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
        if version != VERSION:
            raise StackFormatError(f"{path}: unsupported version {version} at byte offset 4")
        if enc != ENCODING_U16:
            raise StackFormatError(f"{path}: unknown pixel encoding {enc} at byte offset 18")
        meta_raw = fh.read(meta_len)
        if len(meta_raw) < meta_len:
            raise StackFormatError(f"{path}: metadata truncated at byte {_HEADER.size + len(meta_raw)}")
    header = StackHeader(width, height, count, parse_metadata(meta_raw.decode("utf-8")),
                         enc, version, _HEADER.size + meta_len)
    payload = size - header.data_offset
    expected = count * header.frame_bytes
    if payload < expected:
        actual = payload // header.frame_bytes if header.frame_bytes else 0
        raise StackFormatError(
            f"{path}: truncated payload, header declares {count} frames but only {actual} "
            f"are present (file ends at byte {size}, expected {header.data_offset + expected})")
    if payload > expected:
        raise StackFormatError(f"{path}: {payload - expected} trailing bytes after frame {count}")
    return header


class BpfReader:
    """Validated, memory-bounded access to a BPF1 stack."""

    def __init__(self, path):
        self.path = Path(path)
        self.header = read_header(self.path)
        self._map = np.memmap(self.path, dtype="<u2", mode="r", offset=self.header.data_offset,
                              shape=(self.header.frame_count, self.header.height, self.header.width))

    def __len__(self) -> int:
        return self.header.frame_count

    @property
    def metadata(self) -> dict[str, str]:
        return self.header.metadata

    def frames(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        return np.asarray(self._map[start:stop])

    def take(self, indices) -> np.ndarray:
        """Frames at arbitrary indices, in the given order."""
        return np.asarray(self._map[np.asarray(indices)])

    def iter_chunks(self, size: int = 256, start: int = 0,
                    stop: int | None = None) -> Iterator[np.ndarray]:
        stop = len(self) if stop is None else stop
        for lo in range(start, stop, size):
            yield np.array(self._map[lo:min(lo + size, stop)])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
