"""Neural wavelet flow: a learnable integer lifting transform used as a
lossless image codec, with progressive decoding, sampling-based upscaling
and filter analysis."""
from ._backend import name as backend_name
from .codec import (bpd_actual, bpd_theoretical, compress, decompress, progressive_decode,
                    upsample)
from .lifting import (LatentPyramid, LiftingOverflow, WaveletFlow, build_flow, init_haar,
                      init_legall, wavelet_forward, wavelet_inverse)
from .modelfile import load as load_model, save as save_model
from .numerics import ContractError
from .prior import Priors, UniformPrior

__version__ = "0.1.0"

__all__ = [
    "ContractError", "LatentPyramid", "LiftingOverflow", "Priors", "UniformPrior", "WaveletFlow",
    "backend_name", "bpd_actual", "bpd_theoretical", "build_flow", "compress", "decompress",
    "init_haar", "init_legall", "load_model", "progressive_decode", "save_model", "upsample",
    "wavelet_forward", "wavelet_inverse",
]
