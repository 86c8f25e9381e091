import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdisopt.cdis import CdisConfig, compute_cdis, fuse_multiparametric
from cdisopt.cohort_io import (
    Cohort,
    CohortError,
    FormatError,
    Patient,
    PhantomSpec,
    decode_tensor,
    decode_volume,
    encode_tensor,
    encode_volume,
    export_tensor,
    generate_phantom,
    load_cohort,
    read_manifest,
    read_tensor,
    read_volume,
    tensor_channels,
    write_cohort,
    write_volume,
)
from cdisopt.diffusion import fit_adc
from cdisopt.metrics import voxel_auc
from cdisopt.volume import Mask3D, Volume3D


def f32_volume(rng, shape):
    a = rng.normal(scale=10, size=shape).astype(np.float32)
    a.flat[0] = -0.0
    a.flat[-1] = 0.0
    return Volume3D(a.astype(np.float64))


# --- RVF -------------------------------------------------------------------


def test_rvf_2x2x2_layout(tmp_path):
    vals = np.array([0.5, -1.25, 3.0, -0.0, 7.75, 1e-3, 2.5e6, -42.0], dtype=np.float32)
    vol = Volume3D.from_flat((2, 2, 2), vals)
    path = tmp_path / "v.rvf"
    write_volume(vol, path)
    raw = path.read_bytes()
    assert len(raw) == 32 + 32
    assert raw[:4] == b"RVF1"
    assert struct.unpack("<4I", raw[4:20]) == (1, 2, 2, 2)
    assert raw[20:32] == bytes(12)
    assert raw[32:] == vals.astype("<f4").tobytes()
    back = read_volume(path)
    assert back.flat.astype(np.float32).tobytes() == vals.tobytes()


def test_rvf_mask_round_trip(tmp_path, rng):
    m = Mask3D(rng.integers(0, 2, size=(5, 3, 4)))
    path = tmp_path / "m.rvf"
    write_volume(m, path)
    assert path.stat().st_size == 32 + 60
    assert read_volume(path) == m


def test_rvf_empty_file():
    with pytest.raises(FormatError) as e:
        decode_volume(b"")
    assert e.value.offset == 0


def test_rvf_truncated_payload(rng):
    buf = encode_volume(f32_volume(rng, (3, 3, 3)))
    with pytest.raises(FormatError, match="truncated") as e:
        decode_volume(buf[:-4])
    assert e.value.offset == len(buf) - 4


def test_rvf_trailing_bytes(rng):
    buf = encode_volume(f32_volume(rng, (2, 2, 2)))
    with pytest.raises(FormatError):
        decode_volume(buf + b"\0")


def test_rvf_dim_overflow():
    buf = b"RVF1" + struct.pack("<4I", 1, 2**32 - 1, 2**32 - 1, 2**32 - 1) + bytes(12)
    with pytest.raises(FormatError, match="overflow"):
        decode_volume(buf)


def test_rvf_bad_dtype():
    with pytest.raises(FormatError):
        decode_volume(b"RVF1" + struct.pack("<4I", 9, 1, 1, 1) + bytes(12) + bytes(4))


@settings(max_examples=100, deadline=None)
@given(
    dims=st.tuples(*[st.integers(1, 6)] * 3),
    data=st.data(),
)
def test_rvf_bit_exact_property(dims, data):
    n = dims[0] * dims[1] * dims[2]
    vals = data.draw(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=n, max_size=n))
    vals = np.array(vals, dtype=np.float32)
    vals[data.draw(st.integers(0, n - 1))] = -0.0
    vol = Volume3D.from_flat(dims, vals)
    back = decode_volume(encode_volume(vol))
    assert back.flat.astype(np.float32).tobytes() == vals.tobytes()


def test_signed_zero_survives(tmp_path):
    vol = Volume3D.from_flat((2, 1, 1), [-0.0, 0.0])
    write_volume(vol, tmp_path / "z.rvf")
    back = read_volume(tmp_path / "z.rvf").flat
    assert np.signbit(back[0]) and not np.signbit(back[1])


# --- RVF-T -----------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(
    dims=st.tuples(*[st.integers(1, 5)] * 3),
    c=st.integers(1, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_rvt_bit_exact_property(dims, c, seed):
    r = np.random.default_rng(seed)
    chans = []
    for _ in range(c):
        a = r.normal(scale=1e3, size=dims).astype(np.float32)
        a.flat[r.integers(a.size)] = -0.0
        chans.append(Volume3D(a.astype(np.float64)))
    decoded = decode_tensor(encode_tensor(chans))
    for ch, arr in zip(chans, decoded):
        assert arr.shape == dims[::-1]
        assert arr.tobytes() == ch.flat.astype("<f4").tobytes()


def test_rvt_layout():
    chans = [Volume3D.from_flat((2, 1, 1), [1.0, 2.0]), Volume3D.from_flat((2, 1, 1), [3.0, 4.0])]
    buf = encode_tensor(chans)
    assert buf[:4] == b"RVT1"
    assert struct.unpack("<I", buf[4:8]) == (2,)
    assert struct.unpack("<6I", buf[8:32]) == (2, 1, 1, 2, 1, 1)
    assert np.frombuffer(buf[32:], "<f4").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_rvt_errors():
    with pytest.raises(FormatError):
        decode_tensor(b"RVF1....")
    buf = encode_tensor([Volume3D.full((2, 2, 2), 1.0)])
    with pytest.raises(FormatError):
        decode_tensor(buf[:-1])


@pytest.fixture(scope="module")
def small_cohort():
    return generate_phantom(PhantomSpec(dims=(12, 10, 6), n_patients=3, radius_range=(2.0, 3.0), noise_sigma=0.02, seed=3))


def test_export_fused_tensor(tmp_path, small_cohort):
    p = small_cohort.patients[0]
    cdis = compute_cdis(p.series, CdisConfig(native_b=(0.0, 800.0)))
    mp = fuse_multiparametric(cdis, p.series, [800.0])
    path = tmp_path / "t.rvt"
    export_tensor(mp, path)
    assert path.stat().st_size == 8 + 12 * 2 + 4 * 2 * 25 * 224 * 224
    t = read_tensor(path)
    assert t.shape == (2, 25, 224, 224)
    np.testing.assert_array_equal(t[0], mp.channels[0].array.astype(np.float32).transpose(2, 1, 0))
    back = tensor_channels(path)
    for a, b in zip(back, mp.channels):
        np.testing.assert_array_equal(a.array, b.array.astype(np.float32))


def test_export_bad_path(tmp_path, small_cohort):
    with pytest.raises(OSError, match="missing"):
        export_tensor([Volume3D.full((1, 1, 1), 1.0)], tmp_path / "missing" / "t.rvt")


# --- phantoms --------------------------------------------------------------


def test_phantom_noise_free_recovers_adc():
    spec = PhantomSpec(dims=(16, 16, 8), n_patients=2, radius_range=(2.0, 3.5), tumor_adc=0.0012, seed=9)
    for p in generate_phantom(spec).patients:
        fit = fit_adc(p.series)
        inside = p.tumor.boolean
        assert inside.any()
        np.testing.assert_allclose(fit.adc.array[inside], 0.0012, rtol=1e-9)
        np.testing.assert_allclose(fit.adc.array[~inside], 0.0025, rtol=1e-9)


def _digest(cohort, tmp_path, name):
    out = tmp_path / name
    write_cohort(cohort, out)
    h = hashlib.sha256()
    for f in sorted(out.rglob("*")):
        if f.is_file():
            h.update(f.relative_to(out).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def test_phantom_determinism(tmp_path):
    spec = PhantomSpec(dims=(12, 12, 6), n_patients=3, radius_range=(2.0, 3.0), noise_sigma=0.1, seed=42)
    assert _digest(generate_phantom(spec), tmp_path, "a") == _digest(generate_phantom(spec), tmp_path, "b")
    other = PhantomSpec(dims=(12, 12, 6), n_patients=3, radius_range=(2.0, 3.0), noise_sigma=0.1, seed=43)
    assert _digest(generate_phantom(other), tmp_path, "c") != _digest(generate_phantom(spec), tmp_path, "d")


def test_phantom_high_b_auc_is_perfect():
    spec = PhantomSpec(dims=(16, 16, 8), n_patients=2, b_values=(0.0, 800.0), radius_range=(2.0, 3.5),
                       tumor_adc=0.0010, background_adc=0.0025, seed=5)
    for p in generate_phantom(spec).patients:
        s = p.series.volume_at(800.0)
        assert voxel_auc(s, p.tumor) == 1.0
        # sign analysis: exp(-0.8) > exp(-2.0), so every tumour voxel outranks every background voxel
        assert s.array[p.tumor.boolean].min() > s.array[~p.tumor.boolean].max()


def test_phantom_spec_validation():
    with pytest.raises(ValueError, match="fit"):
        PhantomSpec(dims=(10, 10, 4), radius_range=(1.0, 3.0))
    with pytest.raises(ValueError):
        PhantomSpec(tumor_adc=0.003, background_adc=0.002)
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-1)


# --- manifests -------------------------------------------------------------


def test_cohort_write_load_round_trip(tmp_path, small_cohort):
    manifest = write_cohort(small_cohort, tmp_path / "c")
    loaded = load_cohort(manifest)
    assert [p.id for p in loaded] == [p.id for p in small_cohort]
    for a, b in zip(loaded, small_cohort):
        assert a.series.b_values == b.series.b_values
        assert a.tumor == b.tumor
        assert a.pcr_label == b.pcr_label
        for va, vb in zip(a.series.volumes, b.series.volumes):
            np.testing.assert_array_equal(va.array, vb.array.astype(np.float32))


def _manifest_with_labels(tmp_path, labels):
    vol = tmp_path / "v.rvf"
    mask = tmp_path / "m.rvf"
    write_volume(Volume3D.full((2, 2, 2), 1.0), vol)
    m = np.zeros((2, 2, 2), dtype=np.uint8)
    m[0, 0, 0] = 1
    write_volume(Mask3D(m), mask)
    patients = []
    for i, lab in enumerate(labels):
        entry = {"id": f"p{i}", "dwi": [{"b_value": 0, "path": "v.rvf"}, [800, "v.rvf"]], "tumor_mask": "m.rvf"}
        if lab != "omit":
            entry["pcr_label"] = lab
        patients.append(entry)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"patients": patients}))
    return path


def test_null_label_filter(tmp_path):
    cohort = load_cohort(_manifest_with_labels(tmp_path, [1, 0, None, 1]))
    assert len(cohort) == 4
    assert len(cohort.labeled()) == 3
    assert cohort.n_unlabeled == 1
    assert len(cohort.labeled()) + cohort.n_unlabeled == len(cohort)


def test_absent_label_is_unlabeled(tmp_path):
    cohort = load_cohort(_manifest_with_labels(tmp_path, [1, "omit"]))
    assert cohort.n_unlabeled == 1


def test_class_balance_report(tmp_path):
    labels = [0] * round(253 * 0.676) + [1] * round(253 * 0.324)
    assert len(labels) == 253
    cohort = load_cohort(_manifest_with_labels(tmp_path, labels))
    assert cohort.class_counts() == {0: 171, 1: 82}
    props = cohort.class_proportions()
    assert round(100 * props[0], 1) == 67.6 and round(100 * props[1], 1) == 32.4


def test_empty_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text('{"patients": []}')
    with pytest.raises(CohortError, match="no patients"):
        load_cohort(path)


def test_duplicate_ids(tmp_path):
    path = _manifest_with_labels(tmp_path, [0, 1])
    doc = json.loads(path.read_text())
    doc["patients"][1]["id"] = "p0"
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortError, match="duplicate"):
        read_manifest(path)


def test_unresolvable_path(tmp_path):
    path = _manifest_with_labels(tmp_path, [0])
    doc = json.loads(path.read_text())
    doc["patients"][0]["tumor_mask"] = "nope.rvf"
    path.write_text(json.dumps(doc))
    with pytest.raises(CohortError, match="nope.rvf"):
        read_manifest(path)


def test_bad_label(tmp_path):
    with pytest.raises(CohortError, match="pcr_label"):
        read_manifest(_manifest_with_labels(tmp_path, [2]))


def test_cohort_rejects_duplicate_ids(small_cohort):
    p = small_cohort.patients[0]
    with pytest.raises(CohortError):
        Cohort([p, Patient(id=p.id, series=p.series, tumor=p.tumor)])
