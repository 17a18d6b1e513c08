"""Super-resolution CNN, its losses, and the two training stages.

The network is a plain stack of replicate-padded convolutions with ReLU after
every layer but the last, and a nearest-neighbour x2 upsample in front of
layers 2, 3, ... until the requested upscale factor is reached (an 8x model
upsamples before layers 2, 3 and 4).
"""

import copy
import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fields
from .exceptions import (
    CollapseWarning,
    NonPositiveVarianceError,
    ShapeMismatchError,
    TrainingDivergenceError,
)
from .nn import (
    AdamState,
    LRSchedule,
    Tensor,
    adam_step,
    conv2d,
    nearest_upsample,
    relu,
    spectral_quadratic_sum,
    squared_error_sum,
)

COLLAPSE_RATIO = 0.01


@dataclass(frozen=True)
class Architecture:
    factor: int = 8
    channels: int = 32
    n_layers: int = 6
    kernel_size: int = 3

    def __post_init__(self):
        n_up = math.log2(self.factor)
        if self.factor < 1 or n_up != int(n_up):
            raise ValueError(f"upscale factor must be a power of two, got {self.factor}")
        if self.n_layers < int(n_up) + 1:
            raise ValueError(f"{self.n_layers} layers cannot host {int(n_up)} upsampling stages")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")

    @property
    def n_upsample(self):
        return int(math.log2(self.factor))

    def upsample_before(self, layer):
        """True if a x2 upsample precedes 0-based conv ``layer``."""
        return 1 <= layer <= self.n_upsample

    def layer_shapes(self):
        k = self.kernel_size
        shapes = []
        for i in range(self.n_layers):
            cin = 1 if i == 0 else self.channels
            cout = 1 if i == self.n_layers - 1 else self.channels
            shapes.append(((cout, cin, k, k), (cout,)))
        return shapes

    @property
    def n_params(self):
        return sum(math.prod(w) + math.prod(b) for w, b in self.layer_shapes())

    def param_names(self):
        names = []
        for i in range(self.n_layers):
            names += [f"conv{i}.weight", f"conv{i}.bias"]
        return names


def init_params(arch, rng, dtype=np.float32):
    """Uniform fan-in initialization ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases.

    The full He bound ``sqrt(6/fan_in)`` makes the random initial output so
    large that the first fixed-rate Adam steps switch off most ReLUs; this
    smaller bound trains reliably across seeds.

    Returns a flat list ``[w0, b0, w1, b1, ...]`` in ``arch.param_names()`` order.
    """
    params = []
    for wshape, bshape in arch.layer_shapes():
        fan_in = wshape[1] * wshape[2] * wshape[3]
        bound = 1.0 / math.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=wshape).astype(dtype))
        params.append(np.zeros(bshape, dtype=dtype))
    return params


def forward(params, x, arch):
    """Network output ``(B, 1, H*f, W*f)`` as a :class:`Tensor`.

    ``params`` may hold arrays or Tensors; ``x`` is ``(B, h, w)`` or ``(B, 1, h, w)``.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatchError(f"expected (B, 1, h, w) input, got {x.shape}")
    if len(params) != 2 * arch.n_layers:
        raise ShapeMismatchError(f"expected {2 * arch.n_layers} parameter arrays, got {len(params)}")
    h = Tensor(x)
    for i in range(arch.n_layers):
        if arch.upsample_before(i):
            h = nearest_upsample(h, 2)
        h = conv2d(h, params[2 * i], params[2 * i + 1])
        if i < arch.n_layers - 1:
            h = relu(h)
    return h


def mse_loss(mu, y):
    """Summed squared error; returns ``(loss, grad_wrt_mu)`` for arrays."""
    mu_t = Tensor(np.asarray(mu, dtype=np.float64), requires_grad=True)
    loss = squared_error_sum(mu_t, y)
    loss.backward()
    return float(loss.data), mu_t.grad


def _inverse_spectra(s):
    s = np.asarray(s, dtype=np.float64)
    if not np.all(s > 0):
        raise NonPositiveVarianceError("spectral variances must be strictly positive")
    return 1.0 / s


def mdg_loss(mu, y, s):
    """Whitened quadratic ``(y-mu)^T phi diag(1/s) phi^H (y-mu)``, summed over the batch.

    ``mu`` and ``y`` are ``(H, W)`` or ``(B, H, W)``; ``s`` broadcasts against
    them. Returns ``(loss, grad_wrt_mu)``. The log-determinant is omitted as it
    does not depend on ``mu``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    squeeze = mu.ndim == 2
    mu3 = mu[None] if squeeze else mu
    y3 = np.asarray(y, dtype=np.float64).reshape(mu3.shape)
    mu_t = Tensor(mu3[:, None], requires_grad=True)
    loss = spectral_quadratic_sum(mu_t, y3[:, None], _inverse_spectra(s))
    loss.backward()
    grad = mu_t.grad[:, 0]
    return float(loss.data), grad[0] if squeeze else grad


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    schedule: LRSchedule = None
    seed: int = 0
    stage: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.schedule is None:
            self.schedule = (
                LRSchedule("fixed", 1e-2) if self.stage == 1
                else LRSchedule("exp_decay", 1e-2, 0.95, 1e-4)
            )


def _as_tensors(params):
    return [Tensor(p, requires_grad=True) for p in params]


def _batch_loss(params_t, x, y, arch, inv_s):
    mu = forward(params_t, x, arch)
    target = y[:, None].astype(mu.data.dtype, copy=False)
    if inv_s is None:
        return squared_error_sum(mu, target)
    return spectral_quadratic_sum(mu, target, inv_s)


def evaluate_loss(params, x, y, arch, spectra=None, batch_size=64):
    """Loss summed over all images (no gradients)."""
    total = 0.0
    inv = None if spectra is None else _inverse_spectra(spectra)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        inv_b = None if inv is None else (inv if inv.ndim == 2 else inv[sl])
        total += float(_batch_loss(params, x[sl], y[sl], arch, inv_b).data)
    return total


def predict(params, x, arch, batch_size=64):
    """Mean predictions ``(n, H, W)`` for a stack of low-resolution inputs."""
    out = [forward(params, x[i:i + batch_size], arch).data[:, 0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def train(params, arch, x_train, y_train, cfg, spectra_train=None,
          x_test=None, y_test=None, spectra_test=None, callback=None):
    """Minibatch Adam on the MSE (``spectra_train is None``) or MDG loss.

    Args:
        params: initial parameter arrays; copied, not modified.
        spectra_train: ``(n_train, H, W)`` per-image or ``(H, W)`` shared spectra.

    Returns:
        ``(params, curves)`` where ``curves`` is a list of dicts with keys
        ``epoch, train_loss, test_loss, lr``. Row 0 evaluates the initial
        parameters; later rows report the mean minibatch loss of the epoch and
        the test loss after it, both per image.

    Raises:
        TrainingDivergenceError: if a loss becomes non-finite.
    """
    rng = np.random.default_rng(cfg.seed)
    dtype = params[0].dtype
    x_train = np.asarray(x_train, dtype=dtype)
    y_train = np.asarray(y_train, dtype=dtype)
    has_test = x_test is not None and len(x_test) > 0
    if has_test:
        x_test = np.asarray(x_test, dtype=dtype)
        y_test = np.asarray(y_test, dtype=dtype)
    inv_train = None if spectra_train is None else _inverse_spectra(spectra_train)
    spectra_eval = spectra_test if spectra_test is not None else spectra_train
    if spectra_train is not None and has_test and spectra_test is None and np.ndim(spectra_train) == 3:
        raise ShapeMismatchError("per-image training spectra need matching spectra_test")

    current = [np.array(p, copy=True) for p in params]
    state = AdamState.for_params(current, schedule=cfg.schedule)
    n = len(x_train)

    def test_loss():
        if not has_test:
            return float("nan")
        return evaluate_loss(current, x_test, y_test, arch, spectra_eval) / len(x_test)

    curves = [{
        "epoch": 0,
        "train_loss": evaluate_loss(current, x_train, y_train, arch, spectra_train) / n,
        "test_loss": test_loss(),
        "lr": cfg.schedule(0),
    }]
    _check_finite(curves[-1])

    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch - 1
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tensors = _as_tensors(current)
            inv_b = None if inv_train is None else (inv_train if inv_train.ndim == 2 else inv_train[idx])
            loss = _batch_loss(tensors, x_train[idx], y_train[idx], arch, inv_b)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            adam_step(current, [t.grad for t in tensors], state)
            running += float(loss.data)
        row = {"epoch": epoch, "train_loss": running / n, "test_loss": test_loss(), "lr": cfg.schedule(epoch - 1)}
        _check_finite(row)
        curves.append(row)
        if callback is not None:
            callback(row)
    return current, curves


def _check_finite(row):
    for key in ("train_loss", "test_loss"):
        v = row[key]
        if not (np.isfinite(v) or (key == "test_loss" and np.isnan(v))):
            raise TrainingDivergenceError(f"non-finite {key} at epoch {row['epoch']}")


def spatial_variance_ratio(mu, y):
    """Mean per-image pixel variance of predictions over that of targets."""
    mu = np.asarray(mu, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(mu.var(axis=(-2, -1)).mean() / y.var(axis=(-2, -1)).mean())


def is_collapsed(mu, y, threshold=COLLAPSE_RATIO):
    return spatial_variance_ratio(mu, y) < threshold


def train_stage1(split, arch, cfg, init=None):
    """MSE training from a seeded initialization (or ``init`` when given)."""
    params = init if init is not None else init_params(arch, np.random.default_rng(cfg.seed))
    return train(params, arch, split.lr_train, split.hr_train, cfg,
                 x_test=split.lr_test, y_test=split.hr_test)


def train_stage3(split, arch, stage1_params, spectra_train, spectra_test, cfg):
    """MDG retraining from Stage 1 weights.

    Returns ``(params, curves, collapsed, ratio)``; warns with
    :class:`CollapseWarning` if test predictions have less than 1% of the
    target spatial variance.
    """
    params, curves = train(stage1_params, arch, split.lr_train, split.hr_train, cfg,
                           spectra_train=spectra_train, x_test=split.lr_test,
                           y_test=split.hr_test, spectra_test=spectra_test)
    ratio = spatial_variance_ratio(predict(params, split.lr_test.astype(params[0].dtype), arch), split.hr_test)
    collapsed = ratio < COLLAPSE_RATIO
    if collapsed:
        warnings.warn(
            f"stage 3 predictions collapsed: test spatial variance ratio {ratio:.2e}",
            CollapseWarning, stacklevel=2,
        )
    return params, curves, collapsed, ratio


class SRCNNRegressor(BaseEstimator, RegressorMixin):
    """Super-resolution CNN with the scikit-learn estimator interface.

    ``fit(X, y)`` trains on the summed squared error. Passing ``spectra``
    switches to the multidimensional Gaussian loss with those per-image (or
    shared) Fourier variances. With ``warm_start=True`` a fitted model
    continues from its current weights with a fresh optimizer, which is how
    the MDG stage reuses the MSE solution.

    Args:
        factor: Upscale factor, a power of two.
        channels: Feature channels per hidden layer.
        n_layers: Number of convolution layers.
        kernel_size: Odd convolution kernel size.
        epochs: Passes over the training set per ``fit``.
        batch_size: Minibatch size.
        lr_schedule: ``"fixed"`` or ``"exp_decay"``.
        lr: Base learning rate.
        lr_rate: Per-epoch decay for ``exp_decay``.
        lr_floor: Lower bound on the decayed rate.
        random_state: Seed for initialization and shuffling.
        warm_start: Continue from the current weights on repeated ``fit``.
        dtype: Training precision, ``"float32"`` or ``"float64"``.
    """

    def __init__(self, factor=8, channels=32, n_layers=6, kernel_size=3, epochs=300,
                 batch_size=32, lr_schedule="fixed", lr=1e-2, lr_rate=0.95, lr_floor=1e-4,
                 random_state=0, warm_start=False, dtype="float32"):
        self.factor = factor
        self.channels = channels
        self.n_layers = n_layers
        self.kernel_size = kernel_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.lr = lr
        self.lr_rate = lr_rate
        self.lr_floor = lr_floor
        self.random_state = random_state
        self.warm_start = warm_start
        self.dtype = dtype

    def _architecture(self):
        return Architecture(self.factor, self.channels, self.n_layers, self.kernel_size)

    def _config(self):
        schedule = LRSchedule(self.lr_schedule, self.lr, self.lr_rate, self.lr_floor)
        return TrainConfig(self.epochs, self.batch_size, schedule, self.random_state)

    def fit(self, X, y, spectra=None, eval_set=None):
        """Train on low-resolution ``X`` (n, h, w) and targets ``y`` (n, h*f, w*f).

        ``eval_set`` is ``(X_test, y_test)`` or ``(X_test, y_test, spectra_test)``
        and only feeds the ``curves_`` test column.
        """
        X = check_fields(X, name="X")
        y = check_fields(y, name="y")
        arch = self._architecture()
        if len(X) != len(y) or y.shape[1:] != (X.shape[1] * arch.factor, X.shape[2] * arch.factor):
            raise ShapeMismatchError(f"targets {y.shape} do not match inputs {X.shape} at factor {arch.factor}")
        if spectra is not None:
            spectra = np.asarray(spectra, dtype=np.float64)
        if self.warm_start and hasattr(self, "params_"):
            init = self.params_
        else:
            init = init_params(arch, np.random.default_rng(self.random_state), np.dtype(self.dtype))
        Xe = ye = se = None
        if eval_set is not None:
            Xe, ye = check_fields(eval_set[0], name="X_test"), check_fields(eval_set[1], name="y_test")
            se = eval_set[2] if len(eval_set) > 2 else None
        self.params_, self.curves_ = train(init, arch, X, y, self._config(), spectra_train=spectra,
                                           x_test=Xe, y_test=ye, spectra_test=se)
        self.architecture_ = arch
        self.n_params_ = arch.n_params
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_fields(X, name="X").astype(self.params_[0].dtype)
        return predict(self.params_, X, self.architecture_)

    def score(self, X, y, sample_weight=None):
        """Coefficient of determination over all pixels."""
        from sklearn.metrics import r2_score

        pred = self.predict(X)
        y = check_fields(y, name="y")
        return r2_score(y.reshape(len(y), -1).ravel(), pred.reshape(len(pred), -1).ravel())

    def collapse_ratio(self, X, y):
        """Prediction-to-target spatial variance ratio on ``(X, y)``."""
        return spatial_variance_ratio(self.predict(X), check_fields(y, name="y"))

    def copy(self):
        return copy.deepcopy(self)
