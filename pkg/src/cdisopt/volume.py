"""Dense 3D voxel containers and resampling.

Arrays are held with shape ``(nx, ny, nz)``; the flat on-disk ordering is
x-fastest, which is numpy's Fortran order for that shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STANDARD_DIMS = (224, 224, 25)


class InvalidDimensionsError(ValueError):
    pass


@dataclass(frozen=True)
class Dims:
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if int(n) != n or n < 1:
                raise InvalidDimensionsError(f"{name} must be a positive integer, got {n!r}")
            object.__setattr__(self, name, int(n))
        if self.size > np.iinfo(np.intp).max:
            raise InvalidDimensionsError(f"voxel count {self.size} is not addressable")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    @classmethod
    def of(cls, dims) -> "Dims":
        if isinstance(dims, Dims):
            return dims
        return cls(*dims)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable grid of finite float64 intensities, shape ``(nx, ny, nz)``."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float64)
        if arr.ndim != 3 or 0 in arr.shape:
            raise InvalidDimensionsError(f"volume must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "array", _frozen(arr))

    @property
    def dims(self) -> Dims:
        return Dims(*self.array.shape)

    @property
    def flat(self) -> np.ndarray:
        """Values in x-fastest order."""
        return self.array.ravel(order="F")

    @classmethod
    def from_flat(cls, dims, data) -> "Volume3D":
        dims = Dims.of(dims)
        data = np.asarray(data, dtype=np.float64)
        if data.size != dims.size:
            raise InvalidDimensionsError(f"expected {dims.size} values for {dims.shape}, got {data.size}")
        return cls(data.reshape(dims.shape, order="F"))

    @classmethod
    def full(cls, dims, value: float) -> "Volume3D":
        return cls(np.full(Dims.of(dims).shape, float(value)))

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(np.array_equal(self.array, other.array))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Mask3D:
    """Immutable binary label grid, shape ``(nx, ny, nz)``, values exactly 0 or 1."""

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.ndim != 3 or 0 in arr.shape:
            raise InvalidDimensionsError(f"mask must be a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype == bool:
            arr = arr.astype(np.uint8)
        elif not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "array", _frozen(arr.astype(np.uint8)))

    @property
    def dims(self) -> Dims:
        return Dims(*self.array.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.array.ravel(order="F")

    @property
    def boolean(self) -> np.ndarray:
        return self.array.astype(bool)

    @classmethod
    def from_flat(cls, dims, data) -> "Mask3D":
        dims = Dims.of(dims)
        data = np.asarray(data)
        if data.size != dims.size:
            raise InvalidDimensionsError(f"expected {dims.size} values for {dims.shape}, got {data.size}")
        return cls(data.reshape(dims.shape, order="F"))

    def __eq__(self, other):
        if not isinstance(other, Mask3D):
            return NotImplemented
        return self.array.shape == other.array.shape and bool(np.array_equal(self.array, other.array))

    __hash__ = None


def _source_coords(src_n: int, dst_n: int) -> np.ndarray:
    # Corner-aligned: first and last output samples land on the source corners.
    if dst_n == 1:
        return np.array([(src_n - 1) / 2.0])
    return np.arange(dst_n) * (src_n - 1) / (dst_n - 1)


def _linear_axis(arr: np.ndarray, axis: int, dst_n: int) -> np.ndarray:
    src_n = arr.shape[axis]
    if src_n == dst_n:
        return arr
    coords = _source_coords(src_n, dst_n)
    i0 = np.clip(np.floor(coords).astype(np.intp), 0, src_n - 1)
    i1 = np.minimum(i0 + 1, src_n - 1)
    w = coords - i0
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = dst_n
    w = w.reshape(shape)
    out = a + w * (b - a)
    # a + w*(b - a) can round one ulp past an endpoint; keep the result bracketed.
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def _nearest_index(src_n: int, dst_n: int) -> np.ndarray:
    coords = _source_coords(src_n, dst_n)
    return np.clip(np.floor(coords + 0.5).astype(np.intp), 0, src_n - 1)


def resample_trilinear(vol: Volume3D, target) -> Volume3D:
    """Trilinearly resample a volume onto a new voxel grid.

    Parameters
    ----------
    vol : Volume3D
        Source volume.
    target : Dims or tuple of int
        Output voxel counts ``(nx, ny, nz)``.

    Returns
    -------
    Volume3D
        Volume of shape ``target``. Sampling is corner-aligned, so resampling
        to the source dims returns the input unchanged and output values stay
        within the input range.
    """
    target = Dims.of(target)
    arr = vol.array
    if arr.size == 0:
        raise InvalidDimensionsError("cannot resample an empty volume")
    for axis, n in enumerate(target.shape):
        arr = _linear_axis(arr, axis, n)
    return Volume3D(arr)


def resample_nearest(mask: Mask3D, target) -> Mask3D:
    """Nearest-neighbour resampling for label masks (no blending)."""
    target = Dims.of(target)
    arr = mask.array
    if arr.size == 0:
        raise InvalidDimensionsError("cannot resample an empty mask")
    ix, iy, iz = (_nearest_index(s, d) for s, d in zip(arr.shape, target.shape))
    return Mask3D(arr[np.ix_(ix, iy, iz)])


def standardize(vol: Volume3D) -> Volume3D:
    """Resample to the fixed 224 x 224 x 25 classifier input grid."""
    return resample_trilinear(vol, STANDARD_DIMS)
