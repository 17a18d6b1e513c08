"""Super-resolution of 2-D fields with spectrally parameterized Gaussian errors.

The pieces, bottom up:

* :mod:`mdgsr.spectral` - circulant covariances in the unitary DFT basis,
  their maximum-likelihood fits, and the information-sharing regularizer.
* :mod:`mdgsr.nn` - a small reverse-mode autodiff engine with convolution,
  ReLU, nearest upsampling, the two losses, and Adam.
* :mod:`mdgsr.model` - the super-resolution CNN and its training stages.
* :mod:`mdgsr.dataio` - synthetic fields, degradation, bicubic baseline,
  splits, and the ``.dsrt`` tensor container.
* :mod:`mdgsr.uq` - sampling, band depth, surface boxplots, coverage, MAPE.
* :mod:`mdgsr.pipeline` / :mod:`mdgsr.cli` - the staged command line workflow.
"""

from .dataio import BicubicUpsampler, FieldNormalizer, GrfSpec, read_tensor, write_tensor
from .model import Architecture, SRCNNRegressor
from .spectral import GlobalSpectralCovariance, InformationSharingCovariance
from .uq import SampleEnsemble, surface_boxplot

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "BicubicUpsampler",
    "FieldNormalizer",
    "GlobalSpectralCovariance",
    "GrfSpec",
    "InformationSharingCovariance",
    "SRCNNRegressor",
    "SampleEnsemble",
    "read_tensor",
    "surface_boxplot",
    "write_tensor",
]
