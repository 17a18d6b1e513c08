import struct

import numpy as np
import pytest

from mdgsr.dataio import (
    BicubicUpsampler,
    FieldNormalizer,
    GrfSpec,
    bicubic_upsample,
    build_split,
    catmull_rom,
    denormalize,
    generate_synthetic,
    normalize,
    read_tensor,
    split_time_ordered,
    subsample,
    synthetic_groups,
    write_tensor,
)
from mdgsr.exceptions import (
    BadMagicError,
    BadOffsetError,
    TensorFileError,
    TooFewSnapshotsError,
    TruncatedFileError,
    UnsupportedDtypeError,
    ZeroVarianceError,
)
from mdgsr.model import Architecture, forward
from mdgsr.nn import nearest_upsample
from mdgsr.spectral import global_mle, wavenumber_spectrum


# ---------------------------------------------------------------- tensor files

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_roundtrip_bit_exact(tmp_path, dtype):
    x = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(dtype)
    x.flat[0] = np.nan
    x.flat[1] = -0.0
    write_tensor(tmp_path / "x.dsrt", x)
    y = read_tensor(tmp_path / "x.dsrt")
    assert y.dtype == x.dtype and y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_tensor_metadata_roundtrip(tmp_path):
    write_tensor(tmp_path / "m.dsrt", np.zeros(2), {"subregion": 3, "time": 7})
    arr, meta = read_tensor(tmp_path / "m.dsrt", with_metadata=True)
    assert meta == {"subregion": 3, "time": 7}
    np.testing.assert_array_equal(arr, 0)


def test_tensor_header_layout(tmp_path):
    write_tensor(tmp_path / "h.dsrt", np.ones((2, 3), dtype=np.float32))
    raw = (tmp_path / "h.dsrt").read_bytes()
    assert raw[:4] == b"DSRT"
    assert struct.unpack_from("<HHH", raw, 4) == (1, 1, 2)
    assert struct.unpack_from("<II", raw, 10) == (2, 3)
    assert len(raw) == 18 + 6 * 4


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.dsrt"
    write_tensor(path, np.ones(3))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_tensor(path)


def test_tensor_truncated_payload(tmp_path):
    path = tmp_path / "t.dsrt"
    write_tensor(path, np.ones((4, 4)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(TruncatedFileError):
        read_tensor(path)


def test_tensor_unknown_dtype_code(tmp_path):
    path = tmp_path / "d.dsrt"
    write_tensor(path, np.ones(2))
    raw = bytearray(path.read_bytes())
    raw[6:8] = struct.pack("<H", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDtypeError):
        read_tensor(path)


def test_tensor_bad_version_and_dtype(tmp_path):
    path = tmp_path / "v.dsrt"
    write_tensor(path, np.ones(2))
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(TensorFileError):
        read_tensor(path)
    with pytest.raises(UnsupportedDtypeError):
        write_tensor(tmp_path / "i.dsrt", np.ones(2, dtype=np.int32))


def test_tensor_dangling_trailer(tmp_path):
    path = tmp_path / "g.dsrt"
    write_tensor(path, np.ones(2))
    path.write_bytes(path.read_bytes() + b"\x01\x02")
    with pytest.raises(TruncatedFileError):
        read_tensor(path)


# ---------------------------------------------------------------- synthetic data

def test_spectrum_normalization():
    spec = GrfSpec(grid=(16, 16), pixel_variance=2.0, dc_power=0.25)
    s = spec.spectrum()
    assert np.all(s >= 0)
    assert s.mean() == pytest.approx(2.0)
    assert s[0, 0] / s.sum() == pytest.approx(0.25)


def test_generator_is_reproducible():
    spec = GrfSpec(grid=(8, 8), seed=3)
    a, amp_a = generate_synthetic(spec, 5)
    b, amp_b = generate_synthetic(spec, 5)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(amp_a, amp_b)
    assert np.all(amp_a > 0)


def test_homoscedastic_generator_matches_spectrum():
    spec = GrfSpec(grid=(8, 8), sigma_het=0.0, mean_level=0.0, seed=4)
    fields, amp = generate_synthetic(spec, 10_000)
    np.testing.assert_array_equal(amp, 1.0)
    s_hat = global_mle(fields, eps_s=0.0)
    target = spec.spectrum()
    keep = target > 0.05 * target.max()
    np.testing.assert_allclose(s_hat[keep], target[keep], rtol=0.05)


def test_heteroscedastic_generator_scales_by_amplitude_moment():
    spec = GrfSpec(grid=(8, 8), sigma_het=0.3, mean_level=0.0, seed=5)
    fields, _ = generate_synthetic(spec, 10_000)
    expected = spec.spectrum() * np.exp(2 * 0.3 ** 2)
    keep = expected > 0.05 * expected.max()
    np.testing.assert_allclose(global_mle(fields, 0.0)[keep], expected[keep], rtol=0.05)


def test_ring_peak_bin():
    spec = GrfSpec(grid=(64, 64), ring_center=5.0, dc_power=0.0)
    fields, _ = generate_synthetic(spec, 200)
    k, mean_s, _ = wavenumber_spectrum(global_mle(fields - fields.mean(axis=(1, 2), keepdims=True)))
    assert k[np.argmax(mean_s)] == 5


def test_spec_validation():
    with pytest.raises(ValueError):
        GrfSpec(dc_power=1.5)
    with pytest.raises(ValueError):
        GrfSpec(sigma_het=-1)


# ---------------------------------------------------------------- normalization

def test_normalize_roundtrip_and_idempotence():
    x = np.random.default_rng(6).normal(5, 3, (4, 8, 8))
    z, m, s = normalize(x)
    assert z.mean() == pytest.approx(0, abs=1e-12) and z.std() == pytest.approx(1)
    np.testing.assert_allclose(denormalize(z, m, s), x, atol=1e-6)
    z2, m2, s2 = normalize(z)
    assert m2 == pytest.approx(0, abs=1e-6) and s2 == pytest.approx(1, abs=1e-6)
    np.testing.assert_allclose(z2, z, atol=1e-6)


def test_normalize_constant_raises():
    with pytest.raises(ZeroVarianceError):
        normalize(np.full((2, 3, 3), 4.0))


def test_field_normalizer_estimator():
    x = np.random.default_rng(7).normal(2, 5, (3, 4, 4))
    est = FieldNormalizer().fit(x)
    np.testing.assert_allclose(est.inverse_transform(est.transform(x)), x)


# ---------------------------------------------------------------- degradation

def test_subsample_examples():
    np.testing.assert_array_equal(subsample(np.full((64, 64), 3.0)), np.full((8, 8), 3.0))
    rows, cols = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    lr = subsample(100.0 * rows + cols)
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    np.testing.assert_array_equal(lr, 800 * i + 8 * j)


def test_subsample_inverts_nearest_replication():
    x = np.random.default_rng(8).standard_normal((1, 1, 8, 8))
    up = nearest_upsample(nearest_upsample(nearest_upsample(x))).data
    np.testing.assert_array_equal(subsample(up[0, 0], 8, 0), x[0, 0])


def test_subsample_bad_offset():
    with pytest.raises(BadOffsetError):
        subsample(np.zeros((16, 16)), 8, 8)
    with pytest.raises(BadOffsetError):
        subsample(np.zeros((16, 16)), 8, -1)


def test_catmull_rom_kernel():
    np.testing.assert_allclose(catmull_rom([0, 1, 2, 3]), [1, 0, 0, 0], atol=1e-15)
    t = np.linspace(0, 1, 11)
    total = catmull_rom(t + 1) + catmull_rom(t) + catmull_rom(1 - t) + catmull_rom(2 - t)
    np.testing.assert_allclose(total, 1.0)


def test_bicubic_examples():
    np.testing.assert_allclose(bicubic_upsample(np.full((8, 8), 1.7)), np.full((64, 64), 1.7))
    lr = np.random.default_rng(9).standard_normal((8, 8))
    for offset in (0, 3):
        hr = bicubic_upsample(lr, 8, offset)
        np.testing.assert_allclose(subsample(hr, 8, offset), lr, atol=1e-12)


def test_bicubic_reproduces_linear_ramp():
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    lr = 2.0 * i - 0.5 * j + 1
    hr = bicubic_upsample(lr, 8)
    I, J = np.meshgrid(np.arange(64) / 8, np.arange(64) / 8, indexing="ij")
    interior = (slice(8, 48), slice(8, 48))
    np.testing.assert_allclose(hr[interior], (2.0 * I - 0.5 * J + 1)[interior], atol=1e-5)


def test_bicubic_estimator_batches():
    lr = np.random.default_rng(10).standard_normal((3, 4, 4))
    est = BicubicUpsampler(factor=4)
    np.testing.assert_allclose(est.fit(lr).transform(lr)[1], bicubic_upsample(lr[1], 4))


# ---------------------------------------------------------------- splits

def test_split_full_layout_per_subregion():
    groups = {r: list(range(214)) for r in range(4)}
    train, test = split_time_ordered(groups)
    assert (len(train), len(test)) == (640, 216)


def test_split_full_layout_global_count():
    groups = {r: list(range(214)) for r in range(4)}
    train, test = split_time_ordered(groups, mode="global_count")
    assert (len(train), len(test)) == (642, 214)


def test_split_small_and_ordered():
    train, test = split_time_ordered({0: ["a", "b", "c", "d"]})
    assert [x[2] for x in train] == ["a", "b", "c"] and [x[2] for x in test] == ["d"]
    groups = {1: list("pqrstuvw"), 0: list("abcdefgh")}
    train, test = split_time_ordered(groups)
    assert [(r, t) for r, t, _ in train] == [(1, t) for t in range(6)] + [(0, t) for t in range(6)]
    assert {(r, t) for r, t, _ in train}.isdisjoint({(r, t) for r, t, _ in test})


def test_split_too_few_snapshots():
    with pytest.raises(TooFewSnapshotsError):
        split_time_ordered({0: [1, 2, 3]})


def test_build_split_shapes_and_normalization():
    spec = GrfSpec(grid=(16, 16), seed=11)
    groups = synthetic_groups(spec, 2, 8)
    split = build_split(groups, factor=4)
    assert split.hr_train.shape == (12, 16, 16) and split.lr_test.shape == (4, 4, 4)
    assert split.factor == 4
    pooled = np.concatenate([split.hr_train, split.hr_test])
    assert pooled.mean() == pytest.approx(0, abs=1e-12) and pooled.std() == pytest.approx(1)
    np.testing.assert_array_equal(split.lr_train, subsample(split.hr_train, 4))
    assert split.meta_test == [(0, 6), (0, 7), (1, 6), (1, 7)]
    train_only = build_split(groups, factor=4, normalization="train")
    assert train_only.hr_train.mean() == pytest.approx(0, abs=1e-12)


def test_forward_shapes_match_degradation():
    arch = Architecture(factor=8, channels=4)
    from mdgsr.model import init_params

    params = init_params(arch, np.random.default_rng(0), np.float64)
    out = forward(params, np.zeros((2, 8, 8)), arch)
    assert out.shape == (2, 1, 64, 64)
