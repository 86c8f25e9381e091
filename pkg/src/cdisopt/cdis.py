"""Synthetic correlated diffusion signal mixing, calibration and DWI fusion."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import EPS, DwiSeries, fit_adc, synthesize_signal
from .volume import STANDARD_DIMS, Volume3D, standardize

# exp() overflows just above 709.78; keep mixed signals finite and positive.
_LOG_LIMIT = 700.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationSpec:
    """Percentile window mapped linearly onto [0, 1]."""

    low: float = 0.1
    high: float = 99.9

    def __post_init__(self):
        if not (0 <= self.low < self.high <= 100):
            raise ConfigError(f"need 0 <= low < high <= 100, got ({self.low}, {self.high})")


@dataclass(frozen=True)
class CdisConfig:
    native_b: tuple[float, ...]
    synthetic_b: tuple[float, ...] = ()
    exponents: tuple[float, ...] | None = None
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)

    def __post_init__(self):
        native = tuple(float(b) for b in self.native_b)
        synthetic = tuple(float(b) for b in self.synthetic_b)
        n = len(native) + len(synthetic)
        if n == 0:
            raise ConfigError("config must declare at least one signal")
        if any(b < 0 for b in native + synthetic):
            raise ConfigError("b-values must be non-negative")
        # Unit exponents are the unoptimized baseline.
        exps = (1.0,) * n if self.exponents is None else tuple(float(r) for r in self.exponents)
        if len(exps) != n:
            raise ConfigError(f"{len(exps)} exponents for {n} signals")
        object.__setattr__(self, "native_b", native)
        object.__setattr__(self, "synthetic_b", synthetic)
        object.__setattr__(self, "exponents", exps)

    @property
    def n_signals(self) -> int:
        return len(self.native_b) + len(self.synthetic_b)

    def with_exponents(self, exponents) -> "CdisConfig":
        return replace(self, exponents=tuple(float(r) for r in exponents))

    def to_dict(self) -> dict:
        return {
            "native_b": list(self.native_b),
            "synthetic_b": list(self.synthetic_b),
            "exponents": list(self.exponents),
            "calibration": {"low": self.calibration.low, "high": self.calibration.high},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CdisConfig":
        try:
            cal = d.get("calibration") or {}
            return cls(
                native_b=tuple(d.get("native_b", ())),
                synthetic_b=tuple(d.get("synthetic_b", ())),
                exponents=None if d.get("exponents") is None else tuple(d["exponents"]),
                calibration=CalibrationSpec(
                    low=float(cal.get("low", CalibrationSpec.low)),
                    high=float(cal.get("high", CalibrationSpec.high)),
                ),
            )
        except (TypeError, AttributeError) as e:
            raise ConfigError(f"malformed CDIs config: {e}") from e

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CdisConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CdisConfig":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class MultiparametricVolume:
    """Named channels on the standard grid; channel 0 is the calibrated CDIs."""

    names: tuple[str, ...]
    channels: tuple[Volume3D, ...]

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ConfigError("a multiparametric volume needs at least two channels")
        if len(self.names) != len(self.channels):
            raise ConfigError("one name per channel is required")
        shapes = {c.array.shape for c in self.channels}
        if shapes != {STANDARD_DIMS}:
            raise ConfigError(f"channels must all have dims {STANDARD_DIMS}, got {sorted(shapes)}")

    def __len__(self):
        return len(self.channels)

    def as_array(self) -> np.ndarray:
        """Channels-first array of shape (C, nx, ny, nz)."""
        return np.stack([c.array for c in self.channels])


def mix_signals(signals: Sequence[Volume3D], exponents: Sequence[float]) -> Volume3D:
    """Exponent-weighted product of signals, ``prod_i S_i ** rho_i``.

    Signals are clamped to ``EPS`` first. The product of powers is used where
    it is representable (it is exact for unit and zero exponents); voxels that
    would overflow or underflow fall back to ``exp(sum_i rho_i ln S_i)`` with
    the log clipped to keep the result finite and positive.
    """
    signals = list(signals)
    rho = np.asarray(exponents, dtype=np.float64).ravel()
    if len(signals) == 0:
        raise ConfigError("at least one signal is required")
    if rho.size != len(signals):
        raise ConfigError(f"{rho.size} exponents for {len(signals)} signals")
    shapes = {s.array.shape for s in signals}
    if len(shapes) != 1:
        raise ConfigError(f"signals have mismatched dims: {sorted(shapes)}")

    clamped = [np.maximum(s.array, EPS) for s in signals]
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        out = np.ones_like(clamped[0])
        for s, r in zip(clamped, rho):
            if r != 0.0:
                out = out * np.power(s, r)
    bad = ~np.isfinite(out) | (out <= 0)
    if bad.any():
        log_sum = sum(r * np.log(s[bad]) for s, r in zip(clamped, rho))
        out[bad] = np.exp(np.clip(log_sum, -_LOG_LIMIT, _LOG_LIMIT))
    return Volume3D(out)


def calibrate(vol: Volume3D, spec: CalibrationSpec | None = None) -> Volume3D:
    """Clip to the ``[low, high]`` percentile window and rescale to [0, 1].

    Percentiles use linear interpolation between order statistics. A window of
    zero width maps the whole volume to 0.
    """
    spec = spec or CalibrationSpec()
    v = vol.array
    lo, hi = np.percentile(v, [spec.low, spec.high], method="linear")
    if not hi > lo:
        return Volume3D(np.zeros_like(v))
    return Volume3D((np.clip(v, lo, hi) - lo) / (hi - lo))


def cdis_signals(series: DwiSeries, config: CdisConfig) -> list[Volume3D]:
    """Native volumes followed by synthesized ones, in config order."""
    native = []
    for b in config.native_b:
        try:
            native.append(series.volume_at(b))
        except KeyError:
            raise ConfigError(f"native b-value {b:g} not present in series {series.b_values}") from None
    synthetic = []
    if config.synthetic_b:
        fit = fit_adc(series)
        synthetic = [synthesize_signal(fit, b) for b in config.synthetic_b]
    return native + synthetic


def compute_cdis(series: DwiSeries, config: CdisConfig) -> Volume3D:
    """Calibrated CDIs volume for one patient under ``config``."""
    return calibrate(mix_signals(cdis_signals(series, config), config.exponents), config.calibration)


def fuse_multiparametric(
    cdis: Volume3D,
    series: DwiSeries,
    dwi_channels: Sequence[float],
    calibration: CalibrationSpec | None = None,
) -> MultiparametricVolume:
    """Stack the CDIs with calibrated native DWI channels on the standard grid.

    Each DWI channel is calibrated on its native grid and then standardized;
    channels follow the order of ``dwi_channels``.
    """
    if len(dwi_channels) == 0:
        raise ConfigError("at least one DWI channel must be fused with the CDIs")
    names = ["cdis"]
    channels = [standardize(cdis)]
    for b in dwi_channels:
        try:
            vol = series.volume_at(b)
        except KeyError:
            raise ConfigError(f"DWI b-value {b:g} not present in series {series.b_values}") from None
        names.append(f"dwi_b{b:g}")
        channels.append(standardize(calibrate(vol, calibration)))
    return MultiparametricVolume(names=tuple(names), channels=tuple(channels))
