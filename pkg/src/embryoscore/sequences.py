"""Raw time-lapse containers and construction of the model-ready frame sequence.

On-disk layout, one directory per embryo::

    frames.bin  little-endian header, then uint8 frames in (time, focal) order
    times.csv   frame_index,hpi,focal_index   (hpi with 3 decimals)

Header: magic ``TLF1`` (4 bytes), version u16, frame_count u32, num_focals u16,
height u16, width u16; 16 bytes in total.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

MAGIC = b"TLF1"
VERSION = 1
HEADER = struct.Struct("<4sHIHHH")
FRAMES_FILE = "frames.bin"
TIMES_FILE = "times.csv"

DEFAULT_START = 12.0
DEFAULT_COUNT = 128
DEFAULT_SIDE = 256
GAP_TOLERANCE_H = 0.5
END_TIME_RANGE = (108.0, 140.0)


class ContainerError(IOError):
    pass


class SequenceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RawSequence:
    """Native-resolution acquisitions across all focal planes of one embryo."""

    embryo_id: str
    frames: np.ndarray  # (N, H, W) uint8
    acquisition_times: np.ndarray  # (N,) hpi
    focal_index: np.ndarray  # (N,) int, 0 = most negative plane
    num_focals: int

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3 or frames.dtype != np.uint8:
            raise SequenceError(f"frames must be (N, H, W) uint8, got {frames.shape} {frames.dtype}")
        times = np.asarray(self.acquisition_times, dtype=np.float64)
        focal = np.asarray(self.focal_index, dtype=np.int64)
        if not (len(frames) == len(times) == len(focal)):
            raise SequenceError("frames, acquisition_times and focal_index lengths differ")
        if not 1 <= self.num_focals <= 65535:
            raise SequenceError(f"num_focals {self.num_focals} out of range")
        if len(focal) and (focal.min() < 0 or focal.max() >= self.num_focals):
            raise SequenceError("focal_index outside [0, num_focals)")
        for f in np.unique(focal):
            if np.any(np.diff(times[focal == f]) <= 0):
                raise SequenceError(f"acquisition times not strictly increasing on focal plane {f}")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "acquisition_times", times)
        object.__setattr__(self, "focal_index", focal)

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def central_focal(self) -> int:
        return self.num_focals // 2

    def plane(self, focal: int) -> tuple[np.ndarray, np.ndarray]:
        """Frames and times of one focal plane, in time order."""
        sel = np.flatnonzero(self.focal_index == focal)
        return self.frames[sel], self.acquisition_times[sel]

    def equals(self, other: "RawSequence") -> bool:
        return (
            self.embryo_id == other.embryo_id
            and self.num_focals == other.num_focals
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.acquisition_times, other.acquisition_times)
            and np.array_equal(self.focal_index, other.focal_index)
        )


@dataclass(frozen=True, eq=False)
class FrameSequence:
    data: np.ndarray  # (T, S, S) uint8
    validity_mask: np.ndarray  # (T,) bool
    target_times: np.ndarray  # (T,) hpi
    embryo_id: str

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.dtype != np.uint8:
            raise SequenceError("FrameSequence data must be (T, S, S) uint8")
        if not (len(self.data) == len(self.validity_mask) == len(self.target_times)):
            raise SequenceError("data, validity_mask and target_times lengths differ")

    def __len__(self):
        return len(self.data)


def frame_grid(start_offset: float = DEFAULT_START, count: int = DEFAULT_COUNT, spacing: float = 1.0) -> np.ndarray:
    """Target acquisition times ``start_offset + i * spacing`` for ``i < count``."""
    if count < 1:
        raise SequenceError("count must be >= 1")
    return start_offset + spacing * np.arange(count, dtype=np.float64)


def resize_frame(frame: np.ndarray, side: int) -> np.ndarray:
    if frame.shape == (side, side):
        return frame
    return cv2.resize(frame, (side, side), interpolation=cv2.INTER_LINEAR)


def sample_sequence(
    raw: RawSequence,
    targets,
    focal_offset: int = 0,
    end_time: float = END_TIME_RANGE[1],
    side: int = DEFAULT_SIDE,
    gap_tolerance: float = GAP_TOLERANCE_H,
) -> FrameSequence:
    """Pick one frame per target time from a single focal plane.

    The plane is ``num_focals // 2 + focal_offset`` clamped to the valid range.
    Each target at or before ``end_time`` takes the nearest frame in time
    (earlier frame on ties) if it is within ``gap_tolerance`` hours; every
    other slot stays all-zero with validity False. Frames are resized to
    ``side x side`` with bilinear interpolation.
    """
    if len(raw) == 0:
        raise SequenceError(f"{raw.embryo_id}: raw sequence is empty")
    if not END_TIME_RANGE[0] <= end_time <= END_TIME_RANGE[1]:
        raise SequenceError(f"end_time {end_time} outside {END_TIME_RANGE}")
    focal = min(max(raw.central_focal + int(focal_offset), 0), raw.num_focals - 1)
    frames, times = raw.plane(focal)
    if len(frames) == 0:
        raise SequenceError(f"{raw.embryo_id}: focal plane {focal} has no frames")

    targets = np.asarray(targets, dtype=np.float64)
    T = len(targets)
    data = np.zeros((T, side, side), dtype=np.uint8)
    valid = np.zeros(T, dtype=bool)

    right = np.clip(np.searchsorted(times, targets, side="left"), 0, len(times) - 1)
    left = np.clip(right - 1, 0, len(times) - 1)
    d_left = np.abs(targets - times[left])
    d_right = np.abs(times[right] - targets)
    nearest = np.where(d_left <= d_right, left, right)
    gap = np.minimum(d_left, d_right)
    ok = (targets <= end_time) & (gap <= gap_tolerance)

    cache: dict[int, np.ndarray] = {}
    for i in np.flatnonzero(ok):
        j = int(nearest[i])
        if j not in cache:
            cache[j] = resize_frame(frames[j], side)
        data[i] = cache[j]
        valid[i] = True
    return FrameSequence(data, valid, targets.copy(), raw.embryo_id)


# --- container I/O -------------------------------------------------------------


def write_container(directory: str | Path, raw: RawSequence) -> Path:
    """Write ``frames.bin`` and ``times.csv``; times are stored to 3 decimals."""
    directory = Path(directory)
    n, h, w = raw.frames.shape
    if n > 0xFFFFFFFF or h > 0xFFFF or w > 0xFFFF or raw.num_focals > 0xFFFF:
        raise ContainerError(f"dimensions overflow header fields: n={n} h={h} w={w}")
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / FRAMES_FILE, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, raw.num_focals, h, w))
        fh.write(np.ascontiguousarray(raw.frames).tobytes())
    with open(directory / TIMES_FILE, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame_index", "hpi", "focal_index"])
        for i, (t, f) in enumerate(zip(raw.acquisition_times, raw.focal_index)):
            wr.writerow([i, f"{t:.3f}", int(f)])
    return directory


def read_header(path: str | Path) -> tuple[int, int, int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, n, focals, h, w = HEADER.unpack(head)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if focals == 0 or (n > 0 and (h == 0 or w == 0)):
        raise ContainerError(f"{path}: zero dimension in header")
    return version, n, focals, h, w


def read_container(directory: str | Path, embryo_id: str | None = None, mmap: bool = False) -> RawSequence:
    """Inverse of :func:`write_container`. ``mmap=True`` maps frames lazily."""
    directory = Path(directory)
    path = directory / FRAMES_FILE
    _, n, focals, h, w = read_header(path)
    expected = HEADER.size + n * h * w
    actual = path.stat().st_size
    if actual < expected:
        raise ContainerError(f"{path}: truncated payload ({actual} < {expected} bytes)")
    if actual > expected:
        raise ContainerError(f"{path}: {actual - expected} trailing bytes after payload")
    if mmap:
        frames = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER.size, shape=(n, h, w))
    else:
        with open(path, "rb") as fh:
            fh.seek(HEADER.size)
            frames = np.frombuffer(fh.read(n * h * w), dtype=np.uint8).reshape(n, h, w)

    times = np.empty(n, dtype=np.float64)
    focal = np.empty(n, dtype=np.int64)
    with open(directory / TIMES_FILE, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["frame_index", "hpi", "focal_index"]:
        raise ContainerError(f"{directory / TIMES_FILE}: bad header")
    if len(rows) - 1 != n:
        raise ContainerError(f"{directory / TIMES_FILE}: {len(rows) - 1} rows for {n} frames")
    for k, row in enumerate(rows[1:]):
        if int(row[0]) != k:
            raise ContainerError(f"{directory / TIMES_FILE}: frame_index out of order at row {k}")
        times[k] = float(row[1])
        focal[k] = int(row[2])
    return RawSequence(embryo_id or directory.name, frames, times, focal, focals)


def payload_size(frame_count: int, height: int, width: int) -> int:
    return frame_count * height * width
