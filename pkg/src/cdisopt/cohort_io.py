"""RVF volume files, RVF-T tensors, cohort manifests and phantom cohorts.

RVF layout (little-endian)::

    0   4   magic b"RVF1"
    4   4   uint32 dtype code: 1 = float32, 2 = uint8 mask
    8   12  uint32 nx, ny, nz
    20  12  reserved, zero
    32  ..  payload, x-fastest

RVF-T layout (little-endian)::

    0   4   magic b"RVT1"
    4   4   uint32 channel count C
    8   12C uint32 (nx, ny, nz) per channel
    ..  ..  float32 payload, channels first, each channel x-fastest

An exported tensor therefore reads as a C-order array of shape
``(C, nz, ny, nx)``, i.e. ``(C, 25, 224, 224)`` for standardized volumes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cdis import MultiparametricVolume
from .diffusion import DwiSeries
from .volume import Dims, Mask3D, Volume3D

RVF_MAGIC = b"RVF1"
RVT_MAGIC = b"RVT1"
RVF_HEADER_SIZE = 32
DTYPE_FLOAT32 = 1
DTYPE_MASK = 2
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_MASK: np.dtype("u1")}
_MAX_VOXELS = np.iinfo(np.intp).max // 8


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CohortError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- RVF -------------------------------------------------------------------


def encode_volume(vol: Volume3D | Mask3D) -> bytes:
    if isinstance(vol, Mask3D):
        code, payload = DTYPE_MASK, vol.flat.astype("u1")
    elif isinstance(vol, Volume3D):
        code, payload = DTYPE_FLOAT32, vol.flat.astype("<f4")
    else:
        raise TypeError(f"expected Volume3D or Mask3D, got {type(vol).__name__}")
    header = RVF_MAGIC + struct.pack("<4I", code, *vol.dims.shape) + bytes(12)
    return header + payload.tobytes()


def decode_volume(buf: bytes) -> Volume3D | Mask3D:
    if len(buf) < 4 or buf[:4] != RVF_MAGIC:
        raise FormatError("bad magic, not an RVF file", 0)
    if len(buf) < RVF_HEADER_SIZE:
        raise FormatError("truncated header", len(buf))
    code, nx, ny, nz = struct.unpack_from("<4I", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 4)
    if min(nx, ny, nz) < 1:
        raise FormatError(f"zero dimension in ({nx}, {ny}, {nz})", 8)
    n = nx * ny * nz
    if n > _MAX_VOXELS:
        raise FormatError(f"dims ({nx}, {ny}, {nz}) overflow the addressable range", 8)
    dtype = _DTYPES[code]
    expected = RVF_HEADER_SIZE + n * dtype.itemsize
    if len(buf) < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, got {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"payload longer than header dims: {len(buf)} > {expected} bytes", expected)
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=RVF_HEADER_SIZE)
    if code == DTYPE_MASK:
        if np.any(data > 1):
            bad = int(np.flatnonzero(data > 1)[0])
            raise FormatError("mask value other than 0/1", RVF_HEADER_SIZE + bad)
        return Mask3D.from_flat((nx, ny, nz), data)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise FormatError("non-finite voxel value", RVF_HEADER_SIZE + 4 * bad)
    return Volume3D.from_flat((nx, ny, nz), data.astype(np.float64))


def write_volume(vol: Volume3D | Mask3D, path) -> None:
    """Write a volume (as float32) or mask (as uint8) to an RVF file."""
    atomic_write_bytes(path, encode_volume(vol))


def read_volume(path) -> Volume3D | Mask3D:
    return decode_volume(Path(path).read_bytes())


def read_mask(path) -> Mask3D:
    m = read_volume(path)
    if not isinstance(m, Mask3D):
        raise FormatError(f"{path} holds a float volume, expected a mask", 4)
    return m


def read_float_volume(path) -> Volume3D:
    v = read_volume(path)
    if not isinstance(v, Volume3D):
        raise FormatError(f"{path} holds a mask, expected a float volume", 4)
    return v


# --- RVF-T -----------------------------------------------------------------


def encode_tensor(channels: Sequence[Volume3D]) -> bytes:
    if len(channels) == 0:
        raise ValueError("tensor needs at least one channel")
    parts = [RVT_MAGIC, struct.pack("<I", len(channels))]
    parts += [struct.pack("<3I", *c.dims.shape) for c in channels]
    parts += [c.flat.astype("<f4").tobytes() for c in channels]
    return b"".join(parts)


def decode_tensor(buf: bytes) -> list[np.ndarray]:
    """Channels as float32 arrays of shape ``(nz, ny, nx)``."""
    if len(buf) < 4 or buf[:4] != RVT_MAGIC:
        raise FormatError("bad magic, not an RVF-T file", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    (c,) = struct.unpack_from("<I", buf, 4)
    if c < 1:
        raise FormatError("zero channels", 4)
    head = 8 + 12 * c
    if len(buf) < head:
        raise FormatError("truncated channel dims table", len(buf))
    dims = [struct.unpack_from("<3I", buf, 8 + 12 * i) for i in range(c)]
    sizes = []
    for i, d in enumerate(dims):
        if min(d) < 1:
            raise FormatError(f"zero dimension in channel {i}", 8 + 12 * i)
        sizes.append(d[0] * d[1] * d[2])
    expected = head + 4 * sum(sizes)
    if len(buf) != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, got {len(buf)}", min(len(buf), expected))
    out, off = [], head
    for (nx, ny, nz), n in zip(dims, sizes):
        out.append(np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(nz, ny, nx))
        off += 4 * n
    return out


def export_tensor(mp: MultiparametricVolume | Sequence[Volume3D], path) -> None:
    """Write a channels-first float32 tensor for an external classifier."""
    channels = mp.channels if isinstance(mp, MultiparametricVolume) else list(mp)
    try:
        atomic_write_bytes(path, encode_tensor(channels))
    except OSError as e:
        raise OSError(f"cannot write tensor to {path}: {e}") from e


def read_tensor(path) -> np.ndarray:
    """Read an RVF-T file with equal channel dims as a ``(C, nz, ny, nx)`` array."""
    chans = decode_tensor(Path(path).read_bytes())
    if len({c.shape for c in chans}) != 1:
        raise FormatError("channels have differing dims; use decode_tensor", 8)
    return np.stack(chans)


def tensor_channels(path) -> list[Volume3D]:
    """Read an RVF-T file back into ``Volume3D`` channels."""
    return [Volume3D(c.transpose(2, 1, 0).astype(np.float64)) for c in decode_tensor(Path(path).read_bytes())]


# --- cohorts ---------------------------------------------------------------


@dataclass
class Patient:
    id: str
    series: DwiSeries
    tumor: Mask3D
    roi: Mask3D | None = None
    pcr_label: int | None = None


@dataclass
class Cohort:
    patients: list[Patient]

    def __post_init__(self):
        ids = [p.id for p in self.patients]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise CohortError(f"duplicate patient ids: {dup}")

    def __len__(self):
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def labeled(self) -> list[Patient]:
        """Patients with a pCR label (the classification view)."""
        return [p for p in self.patients if p.pcr_label is not None]

    def class_counts(self) -> dict[int, int]:
        labels = [p.pcr_label for p in self.labeled()]
        return {0: labels.count(0), 1: labels.count(1)}

    def class_proportions(self) -> dict[int, float]:
        counts = self.class_counts()
        total = sum(counts.values())
        if total == 0:
            return {0: float("nan"), 1: float("nan")}
        return {k: v / total for k, v in counts.items()}

    @property
    def n_unlabeled(self) -> int:
        return sum(p.pcr_label is None for p in self.patients)


@dataclass
class ManifestEntry:
    id: str
    dwi: list[tuple[float, Path]]
    tumor_mask: Path
    roi_mask: Path | None = None
    pcr_label: int | None = None


def _parse_label(value, pid):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int | float) or value not in (0, 1):
        raise CohortError(f"patient {pid}: pcr_label must be 0, 1 or null, got {value!r}")
    return int(value)


def read_manifest(path) -> list[ManifestEntry]:
    """Parse and validate a manifest without loading any volumes.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CohortError(f"cannot read manifest {path}: {e}") from e
    raw = doc.get("patients") if isinstance(doc, dict) else None
    if not isinstance(raw, list):
        raise CohortError(f"{path}: manifest needs a 'patients' list")
    if not raw:
        raise CohortError(f"{path}: manifest lists no patients")
    root = path.parent
    entries, seen = [], set()
    for i, p in enumerate(raw):
        try:
            pid = str(p["id"])
            dwi = []
            for item in p["dwi"]:
                b, rel = (item["b_value"], item["path"]) if isinstance(item, dict) else item
                dwi.append((float(b), root / rel))
            tumor = root / p["tumor_mask"]
            roi = root / p["roi_mask"] if p.get("roi_mask") else None
        except (KeyError, TypeError, ValueError) as e:
            raise CohortError(f"{path}: patient entry {i} is malformed: {e!r}") from e
        if pid in seen:
            raise CohortError(f"{path}: duplicate patient id {pid!r}")
        seen.add(pid)
        bs = [b for b, _ in dwi]
        if any(b1 <= b0 for b0, b1 in zip(bs, bs[1:])):
            raise CohortError(f"patient {pid}: b-values must be strictly ascending, got {bs}")
        for f in [q for _, q in dwi] + [tumor] + ([roi] if roi else []):
            if not f.is_file():
                raise CohortError(f"patient {pid}: cannot resolve {f}")
        entries.append(ManifestEntry(pid, dwi, tumor, roi, _parse_label(p.get("pcr_label"), pid)))
    return entries


def load_patient(entry: ManifestEntry) -> Patient:
    series = DwiSeries(
        b_values=tuple(b for b, _ in entry.dwi),
        volumes=tuple(read_float_volume(q) for _, q in entry.dwi),
    )
    return Patient(
        id=entry.id,
        series=series,
        tumor=read_mask(entry.tumor_mask),
        roi=read_mask(entry.roi_mask) if entry.roi_mask else None,
        pcr_label=entry.pcr_label,
    )


def load_cohort(path) -> Cohort:
    """Load every patient in a manifest.

    Patients without a pCR label stay in the cohort (they still serve
    delineation) but are left out of ``Cohort.labeled()``.
    """
    return Cohort([load_patient(e) for e in read_manifest(path)])


def write_cohort(cohort: Cohort, out_dir) -> Path:
    """Write every patient's volumes plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patients = []
    for p in cohort.patients:
        pdir = out_dir / p.id
        pdir.mkdir(exist_ok=True)
        dwi = []
        for b, vol in zip(p.series.b_values, p.series.volumes):
            name = f"dwi_b{b:g}.rvf"
            write_volume(vol, pdir / name)
            dwi.append({"b_value": b, "path": f"{p.id}/{name}"})
        write_volume(p.tumor, pdir / "tumor.rvf")
        entry = {"id": p.id, "dwi": dwi, "tumor_mask": f"{p.id}/tumor.rvf"}
        if p.roi is not None:
            write_volume(p.roi, pdir / "roi.rvf")
            entry["roi_mask"] = f"{p.id}/roi.rvf"
        entry["pcr_label"] = p.pcr_label
        patients.append(entry)
    manifest = out_dir / "manifest.json"
    atomic_write_text(manifest, json.dumps({"patients": patients}, indent=2) + "\n")
    return manifest


# --- phantoms --------------------------------------------------------------


@dataclass(frozen=True)
class PhantomSpec:
    """Spherical-tumour DWI phantom cohort.

    ``tumor_s0`` lets the tumour differ from the background at b = 0 too,
    which makes the best exponent mix non-trivial.
    """

    dims: tuple[int, int, int] = (48, 48, 12)
    n_patients: int = 5
    b_values: tuple[float, ...] = (0.0, 400.0, 800.0)
    tumor_adc: float = 0.0010
    background_adc: float = 0.0025
    radius_range: tuple[float, float] = (3.0, 5.0)
    noise_sigma: float = 0.0
    seed: int = 0
    s0: float = 1.0
    tumor_s0: float | None = None

    def __post_init__(self):
        d = Dims.of(self.dims)
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if len(self.b_values) < 2:
            raise ValueError("need at least two b-values")
        if not 0 < self.tumor_adc < self.background_adc:
            raise ValueError("need 0 < tumor_adc < background_adc")
        r_min, r_max = self.radius_range
        if not 0 < r_min <= r_max:
            raise ValueError("radius range must satisfy 0 < min <= max")
        if r_max > min(d.shape) / 2:
            raise ValueError(f"tumour radius {r_max} does not fit in volume {d.shape}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.s0 <= 0 or (self.tumor_s0 is not None and self.tumor_s0 <= 0):
            raise ValueError("S0 values must be positive")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "n_patients": self.n_patients,
            "b_values": list(self.b_values),
            "tumor_adc": self.tumor_adc,
            "background_adc": self.background_adc,
            "radius_range": list(self.radius_range),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "s0": self.s0,
            "tumor_s0": self.tumor_s0,
        }


def sphere_mask(dims, center, radius: float) -> np.ndarray:
    grid = np.indices(Dims.of(dims).shape, dtype=float)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    return ((grid - c) ** 2).sum(axis=0) <= radius ** 2


def generate_phantom(spec: PhantomSpec) -> Cohort:
    """Seeded cohort of centred spherical tumours with mono-exponential decay.

    Each patient gets a radius drawn uniformly from ``radius_range``, a pCR
    label, and additive Gaussian noise of standard deviation ``noise_sigma``
    on every DWI volume. Equal specs give identical cohorts.
    """
    d = Dims.of(spec.dims)
    rng = np.random.default_rng(spec.seed)
    center = [(n - 1) / 2 for n in d.shape]
    tumor_s0 = spec.s0 if spec.tumor_s0 is None else spec.tumor_s0
    patients = []
    for i in range(spec.n_patients):
        radius = rng.uniform(*spec.radius_range)
        label = int(rng.integers(0, 2))
        inside = sphere_mask(d, center, radius)
        adc = np.where(inside, spec.tumor_adc, spec.background_adc)
        s0 = np.where(inside, tumor_s0, spec.s0)
        vols = []
        for b in spec.b_values:
            signal = s0 * np.exp(-b * adc)
            if spec.noise_sigma > 0:
                signal = signal + rng.normal(0.0, spec.noise_sigma, size=d.shape)
            vols.append(Volume3D(signal))
        patients.append(
            Patient(
                id=f"phantom_{i:03d}",
                series=DwiSeries(tuple(spec.b_values), tuple(vols)),
                tumor=Mask3D(inside),
                pcr_label=label,
            )
        )
    return Cohort(patients)
