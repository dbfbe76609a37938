"""Wald-protocol data synthesis: Gaussian blur + decimation, PAN averaging, patching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .datamodel import FusionSample, HSICube, PANImage, validate_sample
from .errors import DimensionMismatchError, ParameterError

SIGMA_PER_BETA = 0.4247


@dataclass(frozen=True)
class DegradeSpec:
    """Parameters of the reduced-resolution degradation.

    ``sigma`` follows 0.4247 * beta unless ``sigma_override`` is given.
    """

    beta: int
    pan_band_count: int
    kernel_size: int = 8
    boundary: str = "reflect"
    sigma_override: Optional[float] = None

    def __post_init__(self):
        if int(self.beta) != self.beta or self.beta < 1:
            raise ParameterError(f"beta must be a positive integer, got {self.beta!r}")
        if self.pan_band_count < 1:
            raise ParameterError(f"pan_band_count must be >= 1, got {self.pan_band_count}")
        if self.kernel_size < 1:
            raise ParameterError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.boundary != "reflect":
            raise ParameterError(f"unsupported boundary mode {self.boundary!r}")
        if self.sigma_override is not None and self.sigma_override <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma_override}")

    @property
    def sigma(self) -> float:
        if self.sigma_override is not None:
            return float(self.sigma_override)
        return SIGMA_PER_BETA * self.beta

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "pan_band_count": self.pan_band_count,
            "kernel_size": self.kernel_size,
            "boundary": self.boundary,
            "sigma": self.sigma,
            "sigma_override": self.sigma_override,
        }


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized isotropic Gaussian sampled on a ``size x size`` grid.

    Tap ``t`` sits at offset ``t - (size - 1) / 2`` from the center, so an
    even-size kernel is centered between its two middle taps.
    """
    if size < 1:
        raise ParameterError(f"kernel size must be >= 1, got {size}")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def kernel_anchor(size: int) -> int:
    """Tap index aligned with output pixel ``i``: out[i] = sum_t k[t] * in[i + t - anchor]."""
    return (size - 1) // 2


def reflect_indices(n: int, before: int, after: int) -> np.ndarray:
    """Source indices for reflect padding (edge sample not repeated)."""
    return np.pad(np.arange(n), (before, after), mode="reflect")


def blur(data: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate every band of a (bands, H, W) array with ``kernel`` under reflect padding."""
    kh, kw = kernel.shape
    ah, aw = kernel_anchor(kh), kernel_anchor(kw)
    _, h, w = data.shape
    rows = reflect_indices(h, ah, kh - 1 - ah)
    cols = reflect_indices(w, aw, kw - 1 - aw)
    padded = data[:, rows][:, :, cols].astype(np.float64, copy=False)
    out = np.zeros(data.shape, dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            out += kernel[a, b] * padded[:, a : a + h, b : b + w]
    return out


def blur_downsample(ref: HSICube, spec: DegradeSpec) -> HSICube:
    """Blur each band with the Gaussian from ``spec``, then keep every beta-th pixel from offset 0."""
    beta = spec.beta
    if ref.height % beta or ref.width % beta:
        raise DimensionMismatchError(
            f"reference dims {ref.height}x{ref.width} not divisible by beta={beta}",
            axis="height" if ref.height % beta else "width",
        )
    kernel = gaussian_kernel(spec.kernel_size, spec.sigma)
    low = blur(ref.data, kernel)[:, ::beta, ::beta]
    return HSICube(low.astype(ref.data.dtype), value_range=ref.value_range, name=ref.name)


def synthesize_pan(ref: HSICube, pan_band_count: int) -> PANImage:
    if not 1 <= pan_band_count <= ref.bands:
        raise ParameterError(f"pan_band_count must be in [1, {ref.bands}], got {pan_band_count}")
    pan = ref.data[:pan_band_count].astype(np.float64).mean(axis=0)
    return PANImage(pan.astype(ref.data.dtype))


def partition_patches(scene: HSICube, patch: int) -> List[HSICube]:
    """Split into non-overlapping ``patch x patch`` tiles in row-major order."""
    if patch < 1:
        raise ParameterError(f"patch size must be >= 1, got {patch}")
    if scene.height % patch or scene.width % patch:
        raise DimensionMismatchError(
            f"scene dims {scene.height}x{scene.width} not divisible by patch={patch}",
            axis="height" if scene.height % patch else "width",
        )
    tiles = []
    for r in range(0, scene.height, patch):
        for c in range(0, scene.width, patch):
            tiles.append(
                HSICube(scene.data[:, r : r + patch, c : c + patch], value_range=scene.value_range, name=scene.name)
            )
    return tiles


def make_sample(ref: HSICube, spec: DegradeSpec, patch_id: str = "", dataset_name: str = "") -> FusionSample:
    sample = FusionSample(
        lr_hsi=blur_downsample(ref, spec),
        pan=synthesize_pan(ref, spec.pan_band_count),
        reference=ref,
        beta=spec.beta,
        patch_id=patch_id,
        dataset_name=dataset_name or ref.name,
    )
    validate_sample(sample)
    return sample
