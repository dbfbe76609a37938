"""Hyperspectral pansharpening: DIP upsampling with a learnable spectral
response, HyperKite residual reconstruction, Wald-protocol data synthesis
and reference-based quality metrics.
"""

from .datamodel import FusionSample, HSICube, PANImage, read_cube, validate_sample, write_cube
from .degrade import DegradeSpec, blur_downsample, make_sample, synthesize_pan
from .errors import HSPanError
from .metrics import MetricReport, evaluate

__version__ = "0.1.0"

__all__ = [
    "DegradeSpec",
    "FusionSample",
    "HSICube",
    "HSPanError",
    "MetricReport",
    "PANImage",
    "blur_downsample",
    "evaluate",
    "make_sample",
    "read_cube",
    "synthesize_pan",
    "validate_sample",
    "write_cube",
]
