"""Volume resampling to the fixed training shapes.

Slices are resized in-plane with bicubic interpolation, then the stack is
resampled along the depth axis with the same 1D cubic kernel so the depth is
exactly half the side. The kernel is the Catmull-Rom-family cubic convolution
kernel (a = -0.5) with half-pixel center alignment and clamp-to-edge padding,
which makes a same-size resize the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import RawVolume
from .errors import ConfigError, DataError

CUBIC_A = -0.5


@dataclass(frozen=True)
class SizePreset:
    """A target shape: side x side in-plane, depth = side/2."""

    name: str
    side: int
    depth: int

    def __post_init__(self):
        if self.side < 2 or self.depth * 2 != self.side:
            raise ConfigError(f"preset {self.name!r}: depth must be exactly side/2")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.depth, self.side, self.side)


SMALL = SizePreset("small", 128, 64)
MEDIUM = SizePreset("medium", 256, 128)
LARGE = SizePreset("large", 320, 160)
PRESETS = {p.name: p for p in (SMALL, MEDIUM, LARGE)}


def preset_by_name(name: str) -> SizePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"preset: unknown name {name!r}, expected one of {sorted(PRESETS)}") from None


def preset_for_dims(d: int, h: int, w: int) -> SizePreset | None:
    for preset in PRESETS.values():
        if (d, h, w) == preset.dims:
            return preset
    return None


@dataclass
class PreprocessedVolume:
    """Single-channel float volume with values in [0, 1].

    ``preset`` is set when the dims match one of the named presets; ad-hoc
    shapes (tests, intermediates) carry ``preset=None``.
    """

    voxels: np.ndarray
    scan_id: str
    preset: SizePreset | None = None

    def __post_init__(self):
        v = self.voxels
        if v.ndim != 3:
            raise DataError(f"shape error: preprocessed volume must be 3D, got ndim={v.ndim}")
        if not np.isfinite(v).all():
            raise DataError("numeric error: preprocessed volume contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise DataError("numeric error: preprocessed volume values outside [0, 1]")
        if self.preset is not None and v.shape != self.preset.dims:
            raise DataError(
                f"shape error: voxels {v.shape} do not match preset {self.preset.name} "
                f"{self.preset.dims}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


def cubic_kernel(t: np.ndarray) -> np.ndarray:
    """Cubic convolution kernel with a = -0.5, evaluated elementwise."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    a = CUBIC_A
    near = (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
    far = a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def resample_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Dense (n_dst x n_src) matrix applying the 1D cubic resample.

    Half-pixel alignment: destination index j samples the source at
    (j + 0.5) * n_src / n_dst - 0.5; the four taps around that position are
    weighted by the kernel, with out-of-range taps clamped to the edge.
    """
    if n_src < 1 or n_dst < 1:
        raise ConfigError(f"parameter error: resample sizes must be >= 1, got {n_src}->{n_dst}")
    positions = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    base = np.floor(positions).astype(np.int64)
    matrix = np.zeros((n_dst, n_src), dtype=np.float64)
    rows = np.arange(n_dst)
    for offset in (-1, 0, 1, 2):
        taps = base + offset
        weights = cubic_kernel(positions - taps)
        np.add.at(matrix, (rows, np.clip(taps, 0, n_src - 1)), weights)
    return matrix


def bicubic_resize_2d(slice_: np.ndarray, target_side: int) -> np.ndarray:
    """Resize one slice to target_side x target_side; output clipped to [0, 1]."""
    slice_ = np.asarray(slice_, dtype=np.float64)
    if slice_.ndim != 2:
        raise DataError(f"shape error: slice must be 2D, got ndim={slice_.ndim}")
    if not np.isfinite(slice_).all():
        raise DataError("numeric error: slice contains non-finite values")
    if target_side < 1:
        raise ConfigError(f"parameter error: target_side must be >= 1, got {target_side}")
    h, w = slice_.shape
    out = resample_matrix(h, target_side) @ slice_ @ resample_matrix(w, target_side).T
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def cubic_resample_1d(volume: np.ndarray, target_depth: int) -> np.ndarray:
    """Resample along the depth axis only; output clipped to [0, 1]."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DataError(f"shape error: volume must be 3D, got ndim={volume.ndim}")
    if not np.isfinite(volume).all():
        raise DataError("numeric error: volume contains non-finite values")
    if target_depth < 1:
        raise ConfigError(f"parameter error: target_depth must be >= 1, got {target_depth}")
    matrix = resample_matrix(volume.shape[0], target_depth)
    out = np.tensordot(matrix, volume.astype(np.float64), axes=1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess_volume(raw: RawVolume, preset: SizePreset) -> PreprocessedVolume:
    """Full preprocessing: scale to [0,1], resize in-plane, then resample depth."""
    scaled = raw.voxels.astype(np.float64) / 255.0
    w_h = resample_matrix(scaled.shape[1], preset.side)
    w_w = resample_matrix(scaled.shape[2], preset.side)
    planes = np.empty((scaled.shape[0], preset.side, preset.side), dtype=np.float32)
    for i in range(scaled.shape[0]):
        planes[i] = np.clip(w_h @ scaled[i] @ w_w.T, 0.0, 1.0)
    voxels = cubic_resample_1d(planes, preset.depth)
    return PreprocessedVolume(voxels=voxels, scan_id=raw.scan_id, preset=preset)
