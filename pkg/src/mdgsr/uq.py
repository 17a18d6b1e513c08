"""Sampling from predicted Gaussians and distributional evaluation."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from ._validation import check_same_shape
from .exceptions import IndexOutOfRangeError, NonPositiveVarianceError, TooFewSamplesError
from .spectral import dft2_inverse, hermitian_normal

EPS_DIV = 1e-6


def sample_rng(seed, image_id=0, sample_id=0):
    """Independent generator per (image, sample); order of draws does not matter."""
    return np.random.default_rng([int(seed), int(image_id), int(sample_id)])


def sample_mdg(mu, s, n, seed=0, image_id=0, allow_zero=False):
    """Draw ``n`` fields from ``N(mu, phi diag(s) phi^H)``.

    Returns an ``(n, H, W)`` array. ``s`` must be strictly positive unless
    ``allow_zero`` is set (degenerate, zero-variance modes).
    """
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    check_same_shape(mu, s, names=("mu", "s"))
    if np.any(s < 0) or (not allow_zero and np.any(s == 0)):
        raise NonPositiveVarianceError("spectral variances must be positive")
    root = np.sqrt(s)
    out = np.empty((n,) + mu.shape)
    for k in range(n):
        z = hermitian_normal(sample_rng(seed, image_id, k), mu.shape)
        out[k] = mu + dft2_inverse(root * z)
    return out


def mape(y, mu, eps_div=EPS_DIV):
    """Mean of ``|y - mu| / max(|y|, eps_div)`` over all pixels."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    check_same_shape(y, mu, names=("y", "mu"))
    return float(np.mean(np.abs(y - mu) / np.maximum(np.abs(y), eps_div)))


def _forward_gradients(f):
    return np.concatenate([np.diff(f, axis=0).ravel(), np.diff(f, axis=1).ravel()])


def gradient_mape(y, mu, eps_div=EPS_DIV):
    """MAPE between forward-difference gradient fields.

    Pixels where both gradients are exactly zero count as zero error.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    check_same_shape(y, mu, names=("y", "mu"))
    gy, gm = _forward_gradients(y), _forward_gradients(mu)
    err = np.abs(gy - gm)
    ratio = np.where(err == 0, 0.0, err / np.maximum(np.abs(gy), eps_div))
    return float(np.mean(ratio))


def band_depth(samples):
    """Modified band depth with bands from pairs of samples.

    For each sample, the fraction of pixels lying inside ``[min(g, h), max(g, h)]``
    (boundaries inclusive), averaged over all unordered pairs of the ensemble.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.shape[0]
    if n < 2:
        raise TooFewSamplesError("band depth needs at least two samples")
    flat = samples.reshape(n, -1)
    below = rankdata(flat, method="min", axis=0) - 1    # strictly smaller
    above = n - rankdata(flat, method="max", axis=0)    # strictly larger
    pairs = n * (n - 1) / 2
    inside = pairs - below * (below - 1) / 2 - above * (above - 1) / 2
    return inside.mean(axis=1) / pairs


@dataclass
class SampleEnsemble:
    samples: np.ndarray
    depth: np.ndarray
    seed: int = 0

    @classmethod
    def draw(cls, mu, s, n=100, seed=0, image_id=0):
        samples = sample_mdg(mu, s, n, seed=seed, image_id=image_id)
        return cls(samples, band_depth(samples), seed)


@dataclass
class SurfaceBoxplot:
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    fence_lower: np.ndarray
    fence_upper: np.ndarray


def surface_boxplot(ensemble, factor=1.5):
    """Functional boxplot of a 2-D ensemble ordered by band depth.

    The median is the deepest sample (lowest index on ties), the central
    region is the pointwise envelope of the ``ceil(n/2)`` deepest samples and
    the fences sit ``factor`` envelope widths beyond it.
    """
    if isinstance(ensemble, SampleEnsemble):
        samples, depth = ensemble.samples, ensemble.depth
    else:
        samples = np.asarray(ensemble, dtype=np.float64)
        depth = band_depth(samples) if len(samples) >= 2 else None
    n = len(samples)
    if n < 4:
        raise TooFewSamplesError(f"surface boxplot needs at least 4 samples, got {n}")
    order = np.argsort(-depth, kind="stable")
    central = samples[order[:math.ceil(n / 2)]]
    lower = central.min(axis=0)
    upper = central.max(axis=0)
    width = upper - lower
    return SurfaceBoxplot(
        median=samples[order[0]].copy(),
        lower=lower,
        upper=upper,
        fence_lower=lower - factor * width,
        fence_upper=upper + factor * width,
    )


def coverage(target, boxplot):
    """Percentage of target pixels inside the central region, bounds inclusive."""
    target = np.asarray(target, dtype=np.float64)
    check_same_shape(target, boxplot.lower, names=("target", "boxplot"))
    inside = (target >= boxplot.lower) & (target <= boxplot.upper)
    return 100.0 * float(inside.mean())


def slice_boxplot(boxplot, target, row):
    """One row of every boxplot surface plus the target, as a dict of 1-D arrays."""
    target = np.asarray(target, dtype=np.float64)
    H = boxplot.median.shape[0]
    if not -H <= row < H:
        raise IndexOutOfRangeError(f"row {row} outside grid of height {H}")
    return {
        "median": boxplot.median[row],
        "lower": boxplot.lower[row],
        "upper": boxplot.upper[row],
        "fence_lower": boxplot.fence_lower[row],
        "fence_upper": boxplot.fence_upper[row],
        "target": target[row],
    }


def default_slice_rows(height):
    return [0, height // 2, height - 1]


def evaluate_image(y, mu, s=None, n_samples=100, seed=0, image_id=0, eps_div=EPS_DIV):
    """Point metrics and, when ``s`` is given, ensemble coverage for one image."""
    out = {"mape": mape(y, mu, eps_div), "grad_mape": gradient_mape(y, mu, eps_div)}
    box = None
    if s is not None:
        box = surface_boxplot(SampleEnsemble.draw(mu, s, n_samples, seed, image_id))
        out["coverage"] = coverage(y, box)
    return out, box
