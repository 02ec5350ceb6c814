"""From M/L/B frame stacks to per-pixel normalized Rabi traces.

For each tau the frames of each kind are summed, optionally cropped and binned
(raw counts are summed over k x k blocks), and normalized pixel-wise as
``N = (M - B) / (L - B)``. Binning always happens before normalization.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .pgm import PGMFormatError, read_pgm, read_pgm_header
from .scene import KINDS, FrameStack

__all__ = [
    "Acquisition",
    "AcquisitionError",
    "CorruptFrameError",
    "DimensionMismatchError",
    "FrameCountError",
    "FramePipeline",
    "MissingFrameError",
    "NormalizedImage",
    "SummedImage",
    "TraceCube",
    "assemble_traces",
    "bin_image",
    "crop_image",
    "load_acquisition",
    "normalize",
    "read_trace_cube",
    "stack_sum",
    "write_trace_cube",
]

DEFAULT_EPSILON_FLOOR = 10.0


class AcquisitionError(Exception):
    """Problem with an acquisition directory; ``path`` names the offending file."""

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class MissingFrameError(AcquisitionError):
    pass


class DimensionMismatchError(AcquisitionError):
    pass


class CorruptFrameError(AcquisitionError):
    pass


class FrameCountError(AcquisitionError):
    pass


class Acquisition:
    """Frame stacks indexed by ``(kind, tau)``, read from a manifest directory.

    Headers of every frame are checked when the acquisition is opened; rasters
    are read when a stack is first requested unless ``lazy=False``.
    """

    def __init__(self, manifest_path, manifest, index, lazy=True):
        self.manifest_path = str(manifest_path)
        self.directory = os.path.dirname(self.manifest_path)
        self.manifest = manifest
        self._index = index
        self._cache = {}
        if not lazy:
            for key in index:
                self[key]

    @property
    def shape(self):
        return (self.manifest["height"], self.manifest["width"])

    @property
    def tau_list(self) -> np.ndarray:
        return np.asarray(sorted({tau for _, tau in self._index}))

    def keys(self):
        return self._index.keys()

    def __len__(self):
        return len(self._index)

    def __contains__(self, key):
        return key in self._index

    def __getitem__(self, key) -> FrameStack:
        kind, tau = key
        key = (kind, float(tau))
        if key not in self._cache:
            frames = []
            for name in self._index[key]:
                path = os.path.join(self.directory, name)
                try:
                    img = read_pgm(path)
                except PGMFormatError as exc:
                    raise CorruptFrameError(path, str(exc)) from exc
                if img.shape != self.shape:
                    raise DimensionMismatchError(path, f"shape {img.shape}, manifest says {self.shape}")
                frames.append(img)
            meta = {"kind": kind, "tau_ns": float(tau), "seed": self.manifest.get("seed")}
            self._cache[key] = FrameStack(kind, float(tau), np.stack(frames), meta)
        return self._cache[key]

    def summed(self, kind, tau) -> "SummedImage":
        """Sum of one stack, without keeping its frames."""
        stack = self[(kind, tau)]
        self._cache.pop((kind, float(tau)), None)
        return stack_sum(stack)


def load_acquisition(manifest_path, lazy=False) -> Acquisition:
    if not os.path.exists(manifest_path):
        raise MissingFrameError(manifest_path, "manifest not found")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptFrameError(manifest_path, f"manifest is not valid JSON ({exc})") from exc
    directory = os.path.dirname(str(manifest_path))
    shape = (manifest["height"], manifest["width"])
    expected_frames = manifest["plan"]["frames_per_kind"]
    index = {}
    for entry in manifest["stacks"]:
        kind, tau, names = entry["kind"], float(entry["tau_ns"]), entry["files"]
        if kind not in KINDS:
            raise CorruptFrameError(manifest_path, f"unknown image kind {kind!r}")
        if len(names) != expected_frames:
            raise FrameCountError(
                manifest_path, f"{kind} stack at tau={tau:g} lists {len(names)} frames, plan says {expected_frames}"
            )
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise MissingFrameError(path, "frame file missing")
            try:
                width, height, _ = read_pgm_header(path)
            except PGMFormatError as exc:
                raise CorruptFrameError(path, str(exc)) from exc
            if (height, width) != shape:
                raise DimensionMismatchError(path, f"shape {(height, width)}, manifest says {shape}")
        index[(kind, tau)] = list(names)
    taus = {tau for _, tau in index}
    for tau in taus:
        for kind in KINDS:
            if (kind, tau) not in index:
                raise FrameCountError(manifest_path, f"no {kind} stack for tau={tau:g}")
    return Acquisition(manifest_path, manifest, index, lazy=lazy)


@dataclass
class SummedImage:
    values: np.ndarray  # int64 counts, or float64 for noiseless frames
    n_frames: int
    dropped: tuple = (0, 0)  # trailing (columns, rows) lost to binning

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


def stack_sum(stack) -> SummedImage:
    frames = stack.frames if isinstance(stack, FrameStack) else np.asarray(stack)
    if frames.shape[0] == 0:
        raise ValueError("cannot sum an empty stack")
    if np.issubdtype(frames.dtype, np.integer):
        values = frames.sum(axis=0, dtype=np.int64)
    else:
        # reduce frame by frame, in order
        values = np.add.reduce(frames.astype(np.float64), axis=0)
    return SummedImage(values, int(frames.shape[0]))


def crop_image(img, roi) -> SummedImage:
    """Crop to ``roi = (x, y, w, h)`` in pixels of ``img``."""
    x, y, w, h = (int(v) for v in roi)
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise ValueError(f"ROI {roi} outside image of size {img.width}x{img.height}")
    return SummedImage(img.values[y : y + h, x : x + w].copy(), img.n_frames)


def bin_image(img, k) -> SummedImage:
    """Sum k x k blocks. Trailing rows/columns that do not fill a block are dropped."""
    k = int(k)
    if k <= 0:
        raise ValueError(f"bin size must be >= 1, got {k}")
    h, w = img.shape
    nh, nw = h // k, w // k
    if nh == 0 or nw == 0:
        raise ValueError(f"bin size {k} exceeds image size {w}x{h}")
    dropped = (w - nw * k, h - nh * k)
    if any(dropped):
        warnings.warn(f"binning {w}x{h} by {k} drops {dropped[0]} columns and {dropped[1]} rows")
    v = img.values[: nh * k, : nw * k].reshape(nh, k, nw, k)
    if np.issubdtype(v.dtype, np.integer):
        out = v.sum(axis=(1, 3), dtype=np.int64)
    else:
        out = v.sum(axis=(1, 3))
    return SummedImage(out, img.n_frames, dropped)


@dataclass
class NormalizedImage:
    values: np.ndarray
    mask: np.ndarray  # True where valid

    @property
    def shape(self):
        return self.values.shape


def normalize(m, l, b, epsilon_floor=DEFAULT_EPSILON_FLOOR) -> NormalizedImage:
    """Pixel-wise ``(M - B) / (L - B)``; pixels with ``L - B <= epsilon_floor`` are masked."""
    if not (m.shape == l.shape == b.shape):
        raise ValueError(f"image shapes differ: M{m.shape} L{l.shape} B{b.shape}")
    if not (m.n_frames == l.n_frames == b.n_frames):
        raise ValueError("M, L and B sums have different frame counts")
    num = m.values.astype(np.float64) - b.values
    den = l.values.astype(np.float64) - b.values
    mask = den > epsilon_floor
    values = np.zeros(m.shape)
    np.divide(num, den, out=values, where=mask)
    return NormalizedImage(values, mask)


@dataclass
class TraceCube:
    tau_list: np.ndarray
    values: np.ndarray  # (height, width, n_tau)
    mask: np.ndarray  # (height, width), True where valid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tau_list = np.asarray(self.tau_list, dtype=float)
        if self.values.shape[:2] != self.mask.shape or self.values.shape[2] != self.tau_list.size:
            raise ValueError("trace cube dimensions are inconsistent")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape[:2]


def assemble_traces(images, tau_list) -> TraceCube:
    tau_list = np.asarray(tau_list, dtype=float)
    if len(images) != tau_list.size:
        raise ValueError(f"{len(images)} images for {tau_list.size} tau values")
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ValueError(f"images have differing shapes {sorted(shapes)}")
    values = np.stack([img.values for img in images], axis=-1)
    mask = np.logical_and.reduce([img.mask for img in images])
    return TraceCube(tau_list, values, mask)


_CUBE_MAGIC = b"NVTC"
_CUBE_VERSION = 1


def write_trace_cube(path, cube):
    """Little-endian: magic, version, width, height, n_tau (u32), tau (f64),
    pixel-major values (f64), one mask byte per pixel."""
    h, w, n = cube.values.shape
    with open(path, "wb") as fh:
        fh.write(_CUBE_MAGIC + struct.pack("<4I", _CUBE_VERSION, w, h, n))
        fh.write(cube.tau_list.astype("<f8").tobytes())
        fh.write(np.ascontiguousarray(cube.values, dtype="<f8").tobytes())
        fh.write(cube.mask.astype(np.uint8).tobytes())


def read_trace_cube(path) -> TraceCube:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _CUBE_MAGIC:
        raise ValueError(f"{path}: not a trace cube (magic {buf[:4]!r})")
    version, w, h, n = struct.unpack_from("<4I", buf, 4)
    if version != _CUBE_VERSION:
        raise ValueError(f"{path}: unsupported trace cube version {version}")
    off = 20
    need = off + 8 * n + 8 * w * h * n + w * h
    if len(buf) != need:
        raise ValueError(f"{path}: size {len(buf)} bytes, expected {need}")
    tau = np.frombuffer(buf, "<f8", n, off)
    off += 8 * n
    values = np.frombuffer(buf, "<f8", w * h * n, off).reshape(h, w, n)
    off += 8 * w * h * n
    mask = np.frombuffer(buf, np.uint8, w * h, off).reshape(h, w).astype(bool)
    return TraceCube(tau.astype(float), values.astype(float), mask)


class FramePipeline(TransformerMixin, BaseEstimator):
    """Turn per-tau M/L/B sums into a :class:`TraceCube`.

    Parameters
    ----------
    bin : int or "full"
        Block size for summing raw counts; ``"full"`` integrates the whole
        (cropped) frame into a single trace.
    roi : (x, y, w, h) or None
        Crop applied before binning.
    epsilon_floor : float
        Minimum ``L - B`` summed counts for a pixel to be valid.
    """

    def __init__(self, bin=1, roi=None, epsilon_floor=DEFAULT_EPSILON_FLOOR):
        self.bin = bin
        self.roi = roi
        self.epsilon_floor = epsilon_floor

    def fit(self, X=None, y=None):
        return self

    def _reduce(self, img):
        if self.roi is not None:
            img = crop_image(img, self.roi)
        if self.bin == "full":
            return SummedImage(img.values.sum(keepdims=True).reshape(1, 1), img.n_frames)
        return bin_image(img, self.bin)

    def transform(self, X) -> TraceCube:
        """``X`` is an :class:`Acquisition` or a mapping ``(kind, tau) -> SummedImage``."""
        if isinstance(X, Acquisition):
            taus = X.tau_list
            get = X.summed
        else:
            taus = np.asarray(sorted({tau for _, tau in X}))
            get = lambda kind, tau: X[(kind, tau)]  # noqa: E731
        images = []
        for tau in taus:
            m, l, b = (self._reduce(get(kind, tau)) for kind in KINDS)
            images.append(normalize(m, l, b, self.epsilon_floor))
        cube = assemble_traces(images, taus)
        cube.meta = {"bin": self.bin, "roi": self.roi}
        return cube
