"""Mono-exponential diffusion decay: per-voxel ADC/S0 fitting and signal synthesis."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import Volume3D

EPS = 1e-6


class InsufficientDataError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class DwiSeries:
    """Co-registered DWI volumes, one per b-value (s/mm^2), b ascending."""

    b_values: tuple[float, ...]
    volumes: tuple[Volume3D, ...]

    def __post_init__(self):
        b = tuple(float(v) for v in self.b_values)
        vols = tuple(self.volumes)
        if len(b) != len(vols):
            raise ShapeError(f"{len(b)} b-values but {len(vols)} volumes")
        if len(b) < 2:
            raise InsufficientDataError("at least two b-values are required")
        if any(v < 0 or not np.isfinite(v) for v in b):
            raise ValueError(f"b-values must be finite and non-negative: {b}")
        if any(b1 <= b0 for b0, b1 in zip(b, b[1:])):
            raise ValueError(f"b-values must be strictly ascending: {b}")
        shapes = {v.array.shape for v in vols}
        if len(shapes) != 1:
            raise ShapeError(f"volumes have mismatched dims: {sorted(shapes)}")
        object.__setattr__(self, "b_values", b)
        object.__setattr__(self, "volumes", vols)

    @property
    def dims(self):
        return self.volumes[0].dims

    def index_of(self, b: float, tol: float = 1e-6) -> int:
        """Index of the volume acquired at ``b``; raises KeyError if absent."""
        for i, bv in enumerate(self.b_values):
            if abs(bv - b) <= tol:
                return i
        raise KeyError(b)

    def volume_at(self, b: float) -> Volume3D:
        return self.volumes[self.index_of(b)]


@dataclass(frozen=True)
class AdcFit:
    adc: Volume3D
    s0: Volume3D


def fit_adc(series: DwiSeries) -> AdcFit:
    """Fit ``ln S = ln S0 - b * ADC`` per voxel by ordinary least squares.

    Signals are clamped to ``EPS`` before taking logs. Voxels whose
    unconstrained slope gives a negative ADC are refit with ADC fixed at 0,
    which makes ``ln S0`` the mean log-signal (the constrained least-squares
    solution).

    Parameters
    ----------
    series : DwiSeries

    Returns
    -------
    AdcFit
    """
    b = np.asarray(series.b_values)
    logs = np.stack([np.log(np.maximum(v.array, EPS)) for v in series.volumes], axis=-1)
    b_mean = b.mean()
    db = b - b_mean
    y_mean = logs.mean(axis=-1)
    slope = (logs - y_mean[..., None]) @ db / (db @ db)
    adc = -slope
    log_s0 = y_mean - slope * b_mean
    negative = adc < 0
    adc = np.where(negative, 0.0, adc)
    log_s0 = np.where(negative, y_mean, log_s0)
    return AdcFit(adc=Volume3D(adc), s0=Volume3D(np.exp(log_s0)))


def synthesize_signal(fit: AdcFit, b: float) -> Volume3D:
    """Evaluate ``S0 * exp(-b * ADC)`` at an arbitrary b-value."""
    if not b >= 0:
        raise ValueError(f"b-value must be non-negative, got {b}")
    out = fit.s0.array * np.exp(-float(b) * fit.adc.array)
    # Stay strictly positive when the exponential underflows.
    return Volume3D(np.maximum(out, np.finfo(np.float64).tiny))


def synthesize_series(fit: AdcFit, b_values: Sequence[float]) -> list[Volume3D]:
    return [synthesize_signal(fit, b) for b in b_values]
