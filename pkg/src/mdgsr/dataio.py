"""Dataset generation, preprocessing, and the ``.dsrt`` tensor container.

File layout of a tensor file (all little-endian)::

    b"DSRT"             4 bytes magic
    version             u16 (currently 1)
    dtype code          u16 (1 = float32, 2 = float64)
    ndim                u16
    dims                u32 * ndim
    payload             prod(dims) * itemsize bytes, row-major
    [metadata]          optional UTF-8 JSON, followed by its byte length as u32
"""

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fields
from .exceptions import (
    BadMagicError,
    BadOffsetError,
    ShapeMismatchError,
    TensorFileError,
    TooFewSnapshotsError,
    TruncatedFileError,
    UnsupportedDtypeError,
    ZeroVarianceError,
)
from .spectral import dft2_inverse, hermitian_normal, wavenumber_magnitude

MAGIC = b"DSRT"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def write_tensor(path, array, metadata=None):
    """Write ``array`` atomically (temp file then rename)."""
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype}; use float32 or float64")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<HHH", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    trailer = b""
    if metadata is not None:
        blob = json.dumps(metadata, sort_keys=True).encode("utf-8")
        trailer = blob + struct.pack("<I", len(blob))

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".dsrt")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + payload + trailer)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor(path, with_metadata=False):
    """Read a tensor file; optionally return ``(array, metadata)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 10:
        if raw[:4] != MAGIC[: len(raw[:4])]:
            raise BadMagicError(f"{path}: not a DSRT file")
        raise TruncatedFileError(f"{path}: header truncated")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim = struct.unpack_from("<HHH", raw, 4)
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported format version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
    offset = 10 + 4 * ndim
    if len(raw) < offset:
        raise TruncatedFileError(f"{path}: dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", raw, 10)
    dtype = _DTYPES[code]
    nbytes = math.prod(dims) * dtype.itemsize
    end = offset + nbytes
    if len(raw) < end:
        raise TruncatedFileError(f"{path}: payload has {len(raw) - offset} bytes, header claims {nbytes}")
    arr = np.frombuffer(raw, dtype=dtype, count=math.prod(dims), offset=offset).reshape(dims).copy()
    meta = None
    rest = len(raw) - end
    if rest:
        if rest < 4:
            raise TruncatedFileError(f"{path}: dangling trailer of {rest} bytes")
        (n,) = struct.unpack_from("<I", raw, len(raw) - 4)
        if n + 4 != rest:
            raise TruncatedFileError(f"{path}: metadata length {n} does not match trailer size {rest - 4}")
        meta = json.loads(raw[end:end + n].decode("utf-8"))
    return (arr, meta) if with_metadata else arr


@dataclass
class GrfSpec:
    """Spectral recipe for synthetic heteroscedastic wind-speed-like fields.

    A unit-amplitude image has mean per-pixel variance ``pixel_variance``, of
    which the fraction ``dc_power`` sits in the image-mean mode and the rest
    follows a Gaussian ring in ``|k|`` (peak ``ring_power``) over a flat
    ``background_power`` floor. Image ``i`` is scaled by a log-normal
    amplitude ``a_i = exp(sigma_het * z_i)`` and shifted by ``mean_level``.
    """

    grid: tuple = (64, 64)
    dc_power: float = 0.1
    ring_center: float = 5.0
    ring_width: float = 1.5
    ring_power: float = 1.0
    background_power: float = 0.02
    pixel_variance: float = 2.0
    sigma_het: float = 0.5
    mean_level: float = 8.0
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if min(self.ring_power, self.background_power) < 0 or not 0 <= self.dc_power <= 1:
            raise ValueError("spectral powers must be non-negative and dc_power at most 1")
        if self.ring_width <= 0 or self.pixel_variance <= 0 or self.sigma_het < 0:
            raise ValueError("ring_width and pixel_variance must be positive, sigma_het non-negative")

    def spectrum(self):
        """Mode variances of a unit-amplitude image, shape ``grid``."""
        k = wavenumber_magnitude(self.grid)
        profile = self.ring_power * np.exp(-0.5 * ((k - self.ring_center) / self.ring_width) ** 2)
        profile = profile + self.background_power
        profile[0, 0] = 0.0
        n_p = profile.size
        # the pixel variance of phi diag(s) phi^H is mean(s)
        total = self.pixel_variance * n_p
        if profile.sum() > 0:
            s = profile * ((1.0 - self.dc_power) * total / profile.sum())
        elif self.dc_power < 1:
            raise ValueError("ring_power and background_power are both zero but dc_power < 1")
        else:
            s = profile
        s[0, 0] = self.dc_power * total
        return s


def generate_synthetic(spec, n_images, rng=None):
    """Draw ``n_images`` fields; returns ``(fields, amplitudes)``.

    A fresh generator seeded from ``spec.seed`` is used unless ``rng`` is given.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    s = spec.spectrum()
    amplitudes = np.exp(spec.sigma_het * rng.standard_normal(n_images))
    z = hermitian_normal(rng, spec.grid, size=(n_images,))
    fluct = dft2_inverse(np.sqrt(s) * z)
    fields = spec.mean_level + amplitudes[:, None, None] * fluct
    return fields, amplitudes


def normalize(fields, mean=None, std=None):
    """Scale to zero mean, unit std using one scalar pair over all pixels."""
    fields = np.asarray(fields, dtype=np.float64)
    if mean is None:
        mean = float(fields.mean())
    if std is None:
        std = float(fields.std())
    if not std > 0:
        raise ZeroVarianceError("cannot normalize data with zero variance")
    return (fields - mean) / std, mean, std


def denormalize(fields, mean, std):
    return np.asarray(fields) * std + mean


class FieldNormalizer(BaseEstimator, TransformerMixin):
    """Scalar standardization of field stacks (one mean/std over all pixels)."""

    def fit(self, X, y=None):
        X = check_fields(X, name="X")
        _, self.mean_, self.std_ = normalize(X)
        return self

    def transform(self, X):
        check_is_fitted(self)
        return normalize(check_fields(X, name="X"), self.mean_, self.std_)[0]

    def inverse_transform(self, X):
        check_is_fitted(self)
        return denormalize(np.asarray(X, dtype=np.float64), self.mean_, self.std_)


def subsample(hr, factor=8, offset=0):
    """Strided decimation ``lr[i, j] = hr[factor*i + offset, factor*j + offset]``.

    Works on a single field or on any leading batch axes.
    """
    hr = np.asarray(hr)
    if not 0 <= offset < factor:
        raise BadOffsetError(f"offset must be in [0, {factor}), got {offset}")
    H, W = hr.shape[-2:]
    if H % factor or W % factor:
        raise ShapeMismatchError(f"grid {H}x{W} is not divisible by factor {factor}")
    return np.ascontiguousarray(hr[..., offset::factor, offset::factor])


def catmull_rom(t, a=-0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _cubic_matrix(n_lr, factor, offset, a=-0.5):
    """1-D interpolation matrix mapping ``n_lr`` samples to ``n_lr*factor`` points."""
    n_hr = n_lr * factor
    u = (np.arange(n_hr) - offset) / factor
    base = np.floor(u).astype(int)
    M = np.zeros((n_hr, n_lr))
    rows = np.arange(n_hr)
    for tap in range(-1, 3):
        idx = base + tap
        w = catmull_rom(u - idx, a)
        np.add.at(M, (rows, np.clip(idx, 0, n_lr - 1)), w)
    return M


def bicubic_upsample(lr, factor=8, offset=0, a=-0.5):
    """Separable Catmull-Rom upsampling with replicated edges.

    Low-resolution sample ``(i, j)`` lands on high-resolution pixel
    ``(factor*i + offset, factor*j + offset)``, so ``subsample`` with the same
    offset is an exact left inverse.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    lr = np.asarray(lr, dtype=np.float64)
    h, w = lr.shape[-2:]
    Mr = _cubic_matrix(h, factor, offset, a)
    Mc = _cubic_matrix(w, factor, offset, a)
    return Mr @ lr @ Mc.T


class BicubicUpsampler(BaseEstimator, TransformerMixin):
    """Interpolation baseline with the estimator interface."""

    def __init__(self, factor=8, offset=0):
        self.factor = factor
        self.offset = offset

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return bicubic_upsample(check_fields(X, name="X"), self.factor, self.offset)

    predict = transform


@dataclass
class DatasetSplit:
    """Paired low/high resolution fields with a train/test partition.

    ``meta_train``/``meta_test`` hold ``(subregion, time)`` pairs in the same
    order as the field stacks.
    """

    hr_train: np.ndarray
    hr_test: np.ndarray
    lr_train: np.ndarray
    lr_test: np.ndarray
    mean: float = 0.0
    std: float = 1.0
    meta_train: list = field(default_factory=list)
    meta_test: list = field(default_factory=list)

    @property
    def factor(self):
        return self.hr_train.shape[-1] // self.lr_train.shape[-1]


def split_time_ordered(groups, mode="per_subregion", train_fraction=0.75):
    """Time-ordered train/test split per subregion.

    Args:
        groups: mapping ``subregion -> sequence of items`` in time order.
        mode: ``"per_subregion"`` takes ``floor(train_fraction * n)`` from
            each subregion. ``"global_count"`` targets
            ``round(train_fraction * total)`` training items overall,
            distributing the remainder one extra item at a time over the
            first subregions.

    Returns:
        ``(train, test)`` lists of ``(subregion, time_index, item)`` tuples,
        ordered subregion-major then by time.
    """
    keys = list(groups)
    sizes = {k: len(groups[k]) for k in keys}
    short = [k for k in keys if sizes[k] < 4]
    if short:
        raise TooFewSnapshotsError(f"subregions {short} have fewer than 4 snapshots")
    n_train = {k: math.floor(train_fraction * sizes[k]) for k in keys}
    if mode == "global_count":
        target = round(train_fraction * sum(sizes.values()))
        extra = target - sum(n_train.values())
        for k in keys:
            if extra <= 0:
                break
            if n_train[k] < sizes[k] - 1:
                n_train[k] += 1
                extra -= 1
    elif mode != "per_subregion":
        raise ValueError(f"unknown split mode {mode!r}")
    train, test = [], []
    for k in keys:
        for t, item in enumerate(groups[k]):
            (train if t < n_train[k] else test).append((k, t, item))
    return train, test


def build_split(hr_groups, factor=8, offset=0, mode="per_subregion", normalization="combined",
                train_fraction=0.75):
    """Split, normalize and degrade grouped high-resolution fields.

    ``normalization="combined"`` uses one mean/std over train and test;
    ``"train"`` fits them on the training images only.
    """
    train, test = split_time_ordered(hr_groups, mode=mode, train_fraction=train_fraction)
    hr_train = np.stack([np.asarray(f, dtype=np.float64) for _, _, f in train])
    hr_test = np.stack([np.asarray(f, dtype=np.float64) for _, _, f in test])
    if normalization == "combined":
        pool = np.concatenate([hr_train, hr_test])
    elif normalization == "train":
        pool = hr_train
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    _, mean, std = normalize(pool)
    hr_train = normalize(hr_train, mean, std)[0]
    hr_test = normalize(hr_test, mean, std)[0]
    return DatasetSplit(
        hr_train=hr_train,
        hr_test=hr_test,
        lr_train=subsample(hr_train, factor, offset),
        lr_test=subsample(hr_test, factor, offset),
        mean=mean,
        std=std,
        meta_train=[(r, t) for r, t, _ in train],
        meta_test=[(r, t) for r, t, _ in test],
    )


def synthetic_groups(spec, n_subregions, n_snapshots):
    """Synthetic fields arranged as ``{subregion: [time-ordered fields]}``."""
    fields, _ = generate_synthetic(spec, n_subregions * n_snapshots)
    fields = fields.reshape(n_subregions, n_snapshots, *spec.grid)
    return {r: list(fields[r]) for r in range(n_subregions)}
