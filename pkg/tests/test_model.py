import numpy as np
import pytest
from sklearn.base import clone

from mdgsr.dataio import GrfSpec, build_split, synthetic_groups
from mdgsr.exceptions import (
    CollapseWarning,
    NonPositiveVarianceError,
    ShapeMismatchError,
    TrainingDivergenceError,
)
from mdgsr.model import (
    Architecture,
    SRCNNRegressor,
    TrainConfig,
    evaluate_loss,
    forward,
    init_params,
    is_collapsed,
    mdg_loss,
    mse_loss,
    predict,
    spatial_variance_ratio,
    train,
    train_stage1,
    train_stage3,
)
from mdgsr.nn import LRSchedule, Tensor, conv2d, nearest_upsample
from mdgsr.uq import mape

import oracles


@pytest.fixture(scope="module")
def tiny_split():
    spec = GrfSpec(grid=(16, 16), ring_center=2.0, seed=5)
    return build_split(synthetic_groups(spec, 2, 12), factor=4)


# ---------------------------------------------------------------- architecture

def test_default_architecture():
    arch = Architecture()
    assert arch.factor == 8 and arch.n_upsample == 3
    assert [arch.upsample_before(i) for i in range(6)] == [False, True, True, True, False, False]
    channels = [(w[1], w[0]) for w, _ in arch.layer_shapes()]
    assert channels == [(1, 32)] + [(32, 32)] * 4 + [(32, 1)]
    assert arch.n_params == 37601
    assert len(arch.param_names()) == 12


def test_forward_intermediate_sizes():
    arch = Architecture()
    params = init_params(arch, np.random.default_rng(0))
    h = Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32))
    sizes = []
    for i in range(arch.n_layers):
        if arch.upsample_before(i):
            h = nearest_upsample(h)
        h = conv2d(h, params[2 * i], params[2 * i + 1])
        sizes.append(h.shape[-1])
    assert sizes == [8, 16, 32, 64, 64, 64]
    assert forward(params, np.zeros((3, 8, 8), np.float32), arch).shape == (3, 1, 64, 64)


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(factor=3)
    with pytest.raises(ValueError):
        Architecture(factor=8, n_layers=3)
    with pytest.raises(ShapeMismatchError):
        forward(init_params(Architecture(), np.random.default_rng(0)), np.zeros((1, 2, 8, 8)), Architecture())


def test_zero_weights_give_zero_output():
    arch = Architecture(channels=4)
    params = [np.zeros_like(p) for p in init_params(arch, np.random.default_rng(0))]
    out = forward(params, np.random.default_rng(1).standard_normal((2, 8, 8)), arch)
    np.testing.assert_array_equal(out.data, 0)


def test_identical_inputs_identical_outputs():
    arch = Architecture(factor=4, channels=8)
    params = init_params(arch, np.random.default_rng(2))
    x = np.random.default_rng(3).standard_normal((1, 8, 8)).astype(np.float32)
    out = forward(params, np.concatenate([x, x]), arch).data
    np.testing.assert_array_equal(out[0], out[1])


def test_init_is_seeded():
    arch = Architecture(channels=4)
    a = init_params(arch, np.random.default_rng(7))
    b = init_params(arch, np.random.default_rng(7))
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert all(np.all(p == 0) for p in a[1::2])


# ---------------------------------------------------------------- losses

def test_mse_loss_examples():
    assert mse_loss(np.zeros(2), np.array([1.0, 2.0]))[0] == 5.0
    y = np.random.default_rng(4).standard_normal((3, 4))
    loss, grad = mse_loss(y, y)
    assert loss == 0.0 and np.all(grad == 0)


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(5)
    mu, y = rng.standard_normal((2, 3, 4, 4))
    _, grad = mse_loss(mu, y)
    fd = oracles.central_difference_grad(lambda m: mse_loss(m, y)[0], mu)
    assert oracles.rel_err(grad, fd) < 1e-6


def test_mdg_unit_spectrum_equals_mse_exactly():
    rng = np.random.default_rng(6)
    mu, y = rng.standard_normal((2, 5, 8, 8))
    assert mdg_loss(mu, y, np.ones((8, 8)))[0] == pytest.approx(mse_loss(mu, y)[0], rel=1e-13)


def test_mdg_matches_dense_oracle_and_fd():
    rng = np.random.default_rng(7)
    mu, y = rng.standard_normal((2, 4, 4))
    s = rng.uniform(0.3, 2.0, (4, 4))
    s = 0.5 * (s + np.roll(s[::-1, ::-1], (1, 1), (0, 1)))
    e = (y - mu).ravel()
    dense = np.real(e @ np.linalg.solve(oracles.dense_covariance(s), e))
    loss, grad = mdg_loss(mu, y, s)
    assert loss == pytest.approx(dense, rel=1e-6)
    assert mdg_loss(y, y, s)[0] == pytest.approx(0.0, abs=1e-12)
    fd = oracles.central_difference_grad(lambda m: mdg_loss(m, y, s)[0], mu)
    assert oracles.rel_err(grad, fd) < 1e-5


def test_mdg_rejects_nonpositive_spectrum():
    with pytest.raises(NonPositiveVarianceError):
        mdg_loss(np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 2)))


@pytest.mark.parametrize("use_mdg", [False, True])
def test_full_network_gradient_finite_difference(use_mdg):
    arch = Architecture(factor=2, channels=3, n_layers=2)
    rng = np.random.default_rng(8)
    params = init_params(arch, rng, np.float64)
    params = [p + 0.1 * rng.standard_normal(p.shape) for p in params]
    x = rng.standard_normal((2, 3, 3))
    y = rng.standard_normal((2, 6, 6))
    s = rng.uniform(0.5, 2.0, (6, 6))
    s = 0.5 * (s + np.roll(s[::-1, ::-1], (1, 1), (0, 1)))
    spectra = s if use_mdg else None

    from mdgsr.model import _as_tensors, _batch_loss

    tensors = _as_tensors(params)
    inv = None if spectra is None else 1.0 / spectra
    _batch_loss(tensors, x, y, arch, inv).backward()
    for k, p in enumerate(params):
        def f(v, k=k):
            trial = list(params)
            trial[k] = v
            return evaluate_loss(trial, x, y, arch, spectra)
        fd = oracles.central_difference_grad(f, p)
        assert oracles.rel_err(tensors[k].grad, fd) < 1e-4


# ---------------------------------------------------------------- training

def test_train_config_defaults():
    assert TrainConfig().epochs == 300
    assert TrainConfig(stage=1).schedule(250) == 1e-2
    s3 = TrainConfig(stage=3).schedule
    assert s3(0) == 1e-2 and s3(1000) == 1e-4
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_stage1_descends_and_reports_fixed_lr(tiny_split):
    arch = Architecture(factor=4, channels=8)
    params, curves = train_stage1(tiny_split, arch, TrainConfig(epochs=8, batch_size=4, seed=1))
    assert len(curves) == 9
    assert curves[-1]["train_loss"] <= curves[0]["train_loss"]
    assert all(c["lr"] == 1e-2 for c in curves)
    assert set(curves[0]) == {"epoch", "train_loss", "test_loss", "lr"}


def test_stage1_is_bit_reproducible(tiny_split):
    arch = Architecture(factor=4, channels=8)
    cfg = TrainConfig(epochs=3, batch_size=4, seed=2)
    p1, c1 = train_stage1(tiny_split, arch, cfg)
    p2, c2 = train_stage1(tiny_split, arch, TrainConfig(epochs=3, batch_size=4, seed=2))
    assert c1 == c2
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p1, p2))


def test_stage3_unit_spectrum_continues_mse(tiny_split):
    arch = Architecture(factor=4, channels=8)
    p1, _ = train_stage1(tiny_split, arch, TrainConfig(epochs=2, batch_size=4, seed=3))
    ones = np.ones(tiny_split.hr_train.shape[1:])
    _, c3, _, _ = train_stage3(tiny_split, arch, p1, ones, ones, TrainConfig(epochs=1, batch_size=4, stage=3))
    x = tiny_split.lr_train.astype(np.float32)
    mse = evaluate_loss(p1, x, tiny_split.hr_train.astype(np.float32), arch) / len(x)
    assert c3[0]["train_loss"] == pytest.approx(mse, rel=1e-6)


def test_stage3_zero_lr_reproduces_stage1(tiny_split):
    arch = Architecture(factor=4, channels=8)
    p1, _ = train_stage1(tiny_split, arch, TrainConfig(epochs=2, batch_size=4, seed=4))
    s_g = np.full(tiny_split.hr_train.shape[1:], 0.5)
    cfg = TrainConfig(epochs=2, batch_size=4, stage=3, schedule=LRSchedule("fixed", 0.0))
    p3, _, _, _ = train_stage3(tiny_split, arch, p1, s_g, s_g, cfg)
    x = tiny_split.lr_test.astype(np.float32)
    m1 = [mape(y, mu) for y, mu in zip(tiny_split.hr_test, predict(p1, x, arch))]
    m3 = [mape(y, mu) for y, mu in zip(tiny_split.hr_test, predict(p3, x, arch))]
    assert m1 == m3


def test_stage3_does_not_modify_stage1_params(tiny_split):
    arch = Architecture(factor=4, channels=4)
    p1 = init_params(arch, np.random.default_rng(0))
    before = [p.copy() for p in p1]
    s_g = np.ones(tiny_split.hr_train.shape[1:])
    train_stage3(tiny_split, arch, p1, s_g, s_g, TrainConfig(epochs=1, batch_size=4, stage=3))
    assert all(np.array_equal(a, b) for a, b in zip(before, p1))


def test_collapse_is_flagged(tiny_split):
    arch = Architecture(factor=4, channels=4)
    flat = [np.zeros_like(p) for p in init_params(arch, np.random.default_rng(0))]
    s_g = np.ones(tiny_split.hr_train.shape[1:])
    cfg = TrainConfig(epochs=1, batch_size=4, stage=3, schedule=LRSchedule("fixed", 0.0))
    with pytest.warns(CollapseWarning):
        _, _, collapsed, ratio = train_stage3(tiny_split, arch, flat, s_g, s_g, cfg)
    assert collapsed and ratio == 0.0
    y = tiny_split.hr_test
    assert not is_collapsed(y, y) and spatial_variance_ratio(y, y) == pytest.approx(1.0)


def test_divergence_is_detected():
    arch = Architecture(factor=2, channels=2, n_layers=2)
    params = init_params(arch, np.random.default_rng(0))
    x = np.full((2, 4, 4), np.inf, dtype=np.float32)
    with pytest.raises(TrainingDivergenceError):
        train(params, arch, x, np.zeros((2, 8, 8)), TrainConfig(epochs=1))


def test_per_image_spectra_need_test_spectra(tiny_split):
    arch = Architecture(factor=4, channels=4)
    params = init_params(arch, np.random.default_rng(0))
    s = np.ones(tiny_split.hr_train.shape)
    with pytest.raises(ShapeMismatchError):
        train(params, arch, tiny_split.lr_train, tiny_split.hr_train, TrainConfig(epochs=1, stage=3),
              spectra_train=s, x_test=tiny_split.lr_test, y_test=tiny_split.hr_test)


# ---------------------------------------------------------------- estimator

def test_regressor_api(tiny_split):
    est = SRCNNRegressor(factor=4, channels=4, epochs=2, batch_size=4, random_state=0)
    assert clone(est).get_params() == est.get_params()
    est.fit(tiny_split.lr_train, tiny_split.hr_train, eval_set=(tiny_split.lr_test, tiny_split.hr_test))
    pred = est.predict(tiny_split.lr_test)
    assert pred.shape == tiny_split.hr_test.shape
    assert est.n_params_ == Architecture(4, 4).n_params
    assert np.isfinite(est.score(tiny_split.lr_test, tiny_split.hr_test))
    assert est.collapse_ratio(tiny_split.lr_test, tiny_split.hr_test) >= 0
    with pytest.raises(ShapeMismatchError):
        est.fit(tiny_split.lr_train, tiny_split.hr_train[:, :8, :8])


def test_regressor_warm_start_mdg(tiny_split):
    est = SRCNNRegressor(factor=4, channels=4, epochs=1, batch_size=4, random_state=0)
    est.fit(tiny_split.lr_train, tiny_split.hr_train)
    start = [p.copy() for p in est.params_]
    frozen = est.copy().set_params(warm_start=True, lr=0.0)
    frozen.fit(tiny_split.lr_train, tiny_split.hr_train, spectra=np.ones((16, 16)))
    assert all(np.array_equal(a, b) for a, b in zip(start, frozen.params_))
    moving = est.copy().set_params(warm_start=True)
    moving.fit(tiny_split.lr_train, tiny_split.hr_train, spectra=np.full((16, 16), 0.5))
    assert moving.curves_[0]["train_loss"] == pytest.approx(2 * est.copy().set_params(
        warm_start=True, lr=0.0).fit(tiny_split.lr_train, tiny_split.hr_train).curves_[0]["train_loss"], rel=1e-5)
