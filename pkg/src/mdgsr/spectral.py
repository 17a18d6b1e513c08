"""Covariance estimation in the unitary 2-D Fourier basis.

Every covariance here is circulant on the torus, ``Sigma = phi diag(s) phi^H``
where ``phi`` is the unitary inverse DFT matrix. The vector ``s`` (stored as an
``(H, W)`` array of mode variances) is therefore the eigen-spectrum of
``Sigma``, and all likelihood computations reduce to per-mode arithmetic on
``|c(k)|**2`` with ``c = dft2_forward(error)``.

Arrays of spectral variances are plain ``ndarray`` objects whose shape is the
grid shape; stacks of per-image spectra are ``(n, H, W)``.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_field, check_fields, check_same_shape
from .exceptions import (
    FewerThanTwoImagesError,
    NonHermitianInputError,
    NonPositiveVarianceError,
    NoConvergenceError,
    ShapeMismatchError,
)

EPS_S = 1e-8
EPS_SIGMA = 1e-12
HERMITIAN_TOL = 1e-5


def dft2_forward(field):
    """Unitary 2-D DFT over the last two axes."""
    return np.fft.fft2(np.asarray(field), norm="ortho")


def dft2_inverse(coeffs, tol=HERMITIAN_TOL):
    """Inverse unitary 2-D DFT returning a real field.

    Raises:
        NonHermitianInputError: if the imaginary part of the reconstruction
            exceeds ``tol`` times the norm of the full reconstruction.
    """
    out = np.fft.ifft2(np.asarray(coeffs), norm="ortho")
    residue = np.linalg.norm(out.imag)
    scale = np.linalg.norm(out)
    if residue > tol * scale:
        raise NonHermitianInputError(
            f"imaginary residue {residue:.3g} exceeds {tol:g} of field norm {scale:.3g}"
        )
    return np.ascontiguousarray(out.real)


def mode_energy(errors):
    """``|c(k)|**2`` for each field in a stack, shape preserved."""
    return np.abs(dft2_forward(errors)) ** 2


def conjugate_modes(shape):
    """Flat index of ``-k mod (H, W)`` for every mode ``k``."""
    H, W = shape
    kx = (-np.arange(H)) % H
    ky = (-np.arange(W)) % W
    return (kx[:, None] * W + ky[None, :]).ravel()


def hermitian_normal(rng, shape, size=()):
    """Standard complex normal coefficients with Hermitian symmetry.

    Conjugate pairs share one complex draw divided by sqrt(2); self-conjugate
    modes (DC and the Nyquist lines) come out as real standard normals. Every
    mode has ``E|z|**2 == 1``, so ``dft2_inverse(sqrt(s) * z)`` is a real field
    with covariance ``phi diag(s) phi^H``.
    """
    size = tuple(np.atleast_1d(size)) if size != () else ()
    H, W = shape
    z = (rng.standard_normal(size + (H, W)) + 1j * rng.standard_normal(size + (H, W))) / np.sqrt(2)
    flipped = np.roll(z[..., ::-1, ::-1], shift=(1, 1), axis=(-2, -1))
    return (z + np.conj(flipped)) / np.sqrt(2)


def global_mle(errors, eps_s=EPS_S):
    """Closed-form global spectral variances from a stack of error fields.

    ``s_g(k) = max(eps_s, mean_i |c_i(k)|**2)``, the exact minimizer of
    ``n log|Sigma| + sum_i e_i^T Sigma^{-1} e_i`` over circulant ``Sigma``.
    """
    errors = check_fields(errors, name="errors")
    return np.maximum(eps_s, mode_energy(errors).mean(axis=0))


def image_mle_unregularized(error, eps_s=EPS_S):
    """Per-image maximum-likelihood spectrum, ``max(eps_s, |c(k)|**2)``.

    Accepts one field or an ``(n, H, W)`` stack.
    """
    arr = np.asarray(error)
    if arr.ndim == 2:
        arr = check_field(arr, name="error")
    else:
        arr = check_fields(arr, name="errors")
    return np.maximum(eps_s, mode_energy(arr))


def _check_variances(s, shape):
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-2:] != tuple(shape[-2:]):
        raise ShapeMismatchError(f"spectrum grid {s.shape} does not match error grid {shape}")
    if not np.all(s > 0):
        raise NonPositiveVarianceError("spectral variances must be strictly positive")
    return s


def mdg_nll(error, s):
    """Multidimensional Gaussian negative log-likelihood of one error field.

    Returns ``sum_k log s(k) + |c(k)|**2 / s(k)``, which equals
    ``log|Sigma| + e^T Sigma^{-1} e`` (the ``2 pi`` constant dropped).
    """
    error = check_field(error, name="error")
    s = _check_variances(s, error.shape)
    a = mode_energy(error)
    return float(np.sum(np.log(s) + a / s))


def global_objective(errors, s):
    """Summed NLL of a stack of errors under one shared spectrum."""
    errors = check_fields(errors, name="errors")
    s = _check_variances(s, errors.shape)
    a = mode_energy(errors)
    return float(errors.shape[0] * np.sum(np.log(s)) + np.sum(a / s))


def prior_sigma(unreg, kappa, eps_sigma=EPS_SIGMA):
    """Prior standard deviation for information sharing.

    ``sqrt(Var_i s_i(k)) / kappa`` with the population variance across
    images; modes with zero dispersion get ``eps_sigma``.
    """
    unreg = np.asarray(unreg, dtype=np.float64)
    if unreg.ndim != 3 or unreg.shape[0] < 2:
        raise FewerThanTwoImagesError("prior_sigma needs spectra from at least two images")
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    var = unreg.var(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.sqrt(var) / kappa
    return np.where(var > 0, sigma, eps_sigma)


def _cubic(s, a, s_g, beta):
    # s**2 * g'(s); shares the sign of g' for s > 0
    return beta * s * s * (s - s_g) + s - a


def _cubic_prime(s, s_g, beta):
    return 3.0 * beta * s * s - 2.0 * beta * s_g * s + 1.0


def regularized_objective(s, a, s_g, sigma_g):
    """Per-mode objective ``log s + a/s + (s - s_g)**2 / sigma_g**2``."""
    return np.log(s) + a / s + (s - s_g) ** 2 / sigma_g ** 2


def regularized_gradient(s, a, s_g, sigma_g):
    """Derivative of :func:`regularized_objective` with respect to ``s``."""
    return 1.0 / s - a / s ** 2 + 2.0 * (s - s_g) / sigma_g ** 2


def _solve_increasing_root(lo, hi, a, s_g, beta, tol, max_iter):
    """Safeguarded Newton for a sign change of the cubic from - at lo to + at hi."""
    x = 0.5 * (lo + hi)
    done = np.zeros(x.shape, dtype=bool)
    for _ in range(max_iter):
        hx = _cubic(x, a, s_g, beta)
        done = (np.abs(hx) < tol * x * x) | (hi - lo <= 8 * np.finfo(float).eps * np.abs(x)) | (hx == 0)
        if done.all():
            break
        lo = np.where(hx < 0, x, lo)
        hi = np.where(hx > 0, x, hi)
        dh = _cubic_prime(x, s_g, beta)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - hx / dh
        ok = (newton > lo) & (newton < hi) & np.isfinite(newton)
        x = np.where(done, x, np.where(ok, newton, 0.5 * (lo + hi)))
    return x, done


def regularized_variances(a, s_g, sigma_g, eps_s=EPS_S, selection="prior", tol=1e-10,
                          max_iter=200):
    """Minimize the information-sharing objective independently per mode.

    Args:
        a: mode energies ``|c(k)|**2``, shape ``(..., H, W)``.
        s_g: global spectrum, broadcastable against ``a``.
        sigma_g: prior standard deviation, broadcastable against ``a``.
            ``inf`` disables the prior, ``0`` pins every mode to ``s_g``.
        eps_s: lower bound on the returned variances.
        selection: which local minimum to return when there are two.
            ``"prior"`` keeps the one nearest ``s_g``, the branch that
            continues the ``sigma_g = 0`` solution and the one descent from
            ``s_g`` reaches. ``"global"`` keeps the lowest objective.

    Returns:
        Array of the same shape as ``a`` holding the selected minimizer over
        ``s >= eps_s`` at every mode.

    All stationary points lie between ``a`` and ``s_g``. The derivative times
    ``s**2`` is a cubic, so that interval splits into at most three monotone
    pieces, and each piece holding a minus-to-plus crossing is solved. The
    objective has a second minimum near ``a`` once ``a / s_g`` is small
    enough; with ``"global"`` such modes drop to ``s ~ a`` even at large
    kappa, which gives single near-zero energies enormous weight.
    """
    a = np.asarray(a, dtype=np.float64)
    s_g, sigma_g, a = np.broadcast_arrays(
        np.asarray(s_g, dtype=np.float64), np.asarray(sigma_g, dtype=np.float64), a
    )
    out_shape = a.shape
    a = np.atleast_1d(a)
    s_g = np.atleast_1d(np.array(s_g))
    sigma_g = np.atleast_1d(np.array(sigma_g))
    if np.any(sigma_g < 0) or np.any(np.isnan(sigma_g)):
        raise ValueError("sigma_g must be non-negative")

    no_prior = np.isinf(sigma_g)
    pinned = sigma_g == 0
    solve = ~(no_prior | pinned)
    sig = np.where(solve, sigma_g, 1.0)
    beta = np.where(solve, 2.0 / sig ** 2, 0.0)

    lo = np.maximum(np.minimum(a, s_g), eps_s)
    hi = np.maximum(np.maximum(a, s_g), eps_s)

    # Boundary candidate: eps_s is a constrained minimum when g is increasing there.
    if selection not in ("prior", "global"):
        raise ValueError(f"selection must be 'prior' or 'global', got {selection!r}")

    def score(x, idx=...):
        # lower is better: distance to s_g, or the objective itself
        if selection == "prior":
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.abs(np.log(x / s_g[idx]))
        return regularized_objective(x, a[idx], s_g[idx], sig[idx])

    h_lo = _cubic(lo, a, s_g, beta)
    best = np.where(h_lo >= 0, lo, np.nan)
    best_val = np.where(h_lo >= 0, score(lo), np.inf)

    disc = s_g ** 2 - 1.5 * sig ** 2
    root = np.sqrt(np.where(disc > 0, disc, 0.0))
    c1 = np.where(disc > 0, (s_g - root) / 3.0, lo)
    c2 = np.where(disc > 0, (s_g + root) / 3.0, lo)
    knots = [lo, np.clip(c1, lo, hi), np.clip(c2, lo, hi), hi]

    unconverged = np.zeros(a.shape, dtype=bool)
    for left, right in zip(knots[:-1], knots[1:]):
        h_left = _cubic(left, a, s_g, beta)
        h_right = _cubic(right, a, s_g, beta)
        crossing = solve & (h_left < 0) & (h_right >= 0) & (right > left)
        if not crossing.any():
            continue
        idx = np.nonzero(crossing)
        x, done = _solve_increasing_root(
            left[idx], right[idx], a[idx], s_g[idx], beta[idx], tol, max_iter
        )
        val = score(x, idx)
        better = val < best_val[idx]
        best[idx] = np.where(better, x, best[idx])
        best_val[idx] = np.where(better, val, best_val[idx])
        unconverged[idx] |= ~done

    if unconverged[solve].any():
        bad = np.flatnonzero(unconverged & solve)
        raise NoConvergenceError(
            f"regularized fit did not converge at {bad.size} mode(s), first flat index {bad[0]}",
            modes=bad,
        )

    out = np.where(solve, best, 0.0)
    out = np.where(no_prior, np.maximum(a, eps_s), out)
    out = np.where(pinned, np.maximum(s_g, eps_s), out)
    return out.reshape(out_shape)


def image_fit_regularized(error, s_g, sigma_g, eps_s=EPS_S, selection="prior"):
    """Information-sharing spectrum for one error field or a stack of them."""
    arr = np.asarray(error)
    arr = check_field(arr, name="error") if arr.ndim == 2 else check_fields(arr, name="errors")
    s_g = np.asarray(s_g, dtype=np.float64)
    check_same_shape(arr.shape[-2:], s_g.shape, names=("error grid", "s_g"))
    return regularized_variances(mode_energy(arr), s_g, sigma_g, eps_s=eps_s, selection=selection)


def covariance_function(s):
    """Circulant covariance ``cov(dx, dy)`` at every wrapped offset."""
    return np.fft.ifft2(np.asarray(s, dtype=np.float64)).real


def covariance_by_separation(s):
    """Average covariance as a function of rounded grid separation.

    Every ordered pair of grid points contributes the circulant covariance at
    its wrapped offset, binned by the rounded Euclidean length of its
    unwrapped offset. Large separations therefore pick up the periodic
    wrap-around of the Fourier basis.

    Returns:
        ``(separations, mean_covariance)`` as integer and float arrays.
    """
    s = np.asarray(s, dtype=np.float64)
    H, W = s.shape
    cov = covariance_function(s)
    dx = np.arange(-(H - 1), H)
    dy = np.arange(-(W - 1), W)
    DX, DY = np.meshgrid(dx, dy, indexing="ij")
    counts = (H - np.abs(DX)) * (W - np.abs(DY))
    values = cov[DX % H, DY % W]
    r = np.rint(np.hypot(DX, DY)).astype(int).ravel()
    weight = counts.ravel().astype(np.float64)
    total = np.bincount(r, weights=weight * values.ravel())
    norm = np.bincount(r, weights=weight)
    present = norm > 0
    return np.flatnonzero(present), total[present] / norm[present]


def centered_wavenumbers(shape):
    """Centered integer frequencies ``(kx, ky)`` laid out in FFT order."""
    H, W = shape
    kx = np.fft.fftfreq(H, d=1.0 / H)
    ky = np.fft.fftfreq(W, d=1.0 / W)
    return np.meshgrid(kx, ky, indexing="ij")


def wavenumber_magnitude(shape):
    KX, KY = centered_wavenumbers(shape)
    return np.hypot(KX, KY)


def wavenumber_spectrum(s):
    """Mean spectral variance per rounded wavenumber ``|k|``.

    Returns:
        ``(k_bins, mean_s, centered)`` where ``centered`` is ``s`` rearranged
        so the DC mode sits at the grid centre.
    """
    s = np.asarray(s, dtype=np.float64)
    k = np.rint(wavenumber_magnitude(s.shape)).astype(int).ravel()
    total = np.bincount(k, weights=s.ravel())
    count = np.bincount(k)
    present = count > 0
    return np.flatnonzero(present), total[present] / count[present], np.fft.fftshift(s)


class GlobalSpectralCovariance(BaseEstimator, TransformerMixin):
    """Homoscedastic covariance: one spectrum shared by every image.

    Args:
        eps_s: Floor on the fitted mode variances.

    Attributes:
        spectral_variances_: Fitted global spectrum, shape (H, W).
    """

    def __init__(self, eps_s=EPS_S):
        self.eps_s = eps_s

    def fit(self, errors, y=None):
        errors = check_fields(errors, name="errors")
        self.spectral_variances_ = global_mle(errors, self.eps_s)
        self.grid_shape_ = errors.shape[1:]
        return self

    def transform(self, errors):
        """Broadcast the shared spectrum to one copy per input field."""
        check_is_fitted(self)
        errors = check_fields(errors, name="errors", shape=self.grid_shape_)
        return np.broadcast_to(self.spectral_variances_, errors.shape).copy()

    def score(self, errors, y=None):
        """Mean per-image log-likelihood (up to a constant)."""
        check_is_fitted(self)
        errors = check_fields(errors, name="errors", shape=self.grid_shape_)
        return -global_objective(errors, self.spectral_variances_) / errors.shape[0]


class InformationSharingCovariance(BaseEstimator, TransformerMixin):
    """Image-specific spectra shrunk toward the global spectrum.

    ``fit`` estimates the global spectrum and the prior width from a set of
    error fields; ``transform`` returns one regularized spectrum per field.

    Args:
        kappa: Dispersion reduction factor. ``np.inf`` returns the global
            spectrum for every image; ``0`` disables the prior.
        eps_s: Floor on the mode variances.
        eps_sigma: Floor on the prior width.
        selection: ``"prior"`` or ``"global"``, see ``regularized_variances``.
    """

    def __init__(self, kappa=5.5, eps_s=EPS_S, eps_sigma=EPS_SIGMA, selection="prior"):
        self.kappa = kappa
        self.eps_s = eps_s
        self.eps_sigma = eps_sigma
        self.selection = selection

    def fit(self, errors, y=None):
        errors = check_fields(errors, name="errors")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        self.grid_shape_ = errors.shape[1:]
        self.global_variances_ = global_mle(errors, self.eps_s)
        self.unregularized_variances_ = image_mle_unregularized(errors, self.eps_s)
        if self.kappa == 0:
            self.prior_sigma_ = np.full(self.grid_shape_, np.inf)
        else:
            self.prior_sigma_ = prior_sigma(self.unregularized_variances_, self.kappa, self.eps_sigma)
        return self

    def transform(self, errors):
        check_is_fitted(self)
        errors = check_fields(errors, name="errors", shape=self.grid_shape_)
        if np.isinf(self.kappa):
            return np.broadcast_to(self.global_variances_, errors.shape).copy()
        return regularized_variances(
            mode_energy(errors), self.global_variances_, self.prior_sigma_, eps_s=self.eps_s,
            selection=self.selection,
        )
