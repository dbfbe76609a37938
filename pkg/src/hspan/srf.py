"""Learnable spectral response: band-wise global average pooling, a bias-free
two-layer bottleneck, and normalization to a convex band weighting used to
predict the PAN image from an upsampled cube.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import HSICube, PANImage
from .errors import DimensionMismatchError, ParameterError

TensorLike = Union[torch.Tensor, HSICube, np.ndarray]


def default_bottleneck(bands: int) -> int:
    return max(bands // 8, 4)


def _tensor(x: TensorLike, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, (HSICube, PANImage)):
        x = x.data
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class SRFParams(nn.Module):
    """Bottleneck weights w1 (r x l) and w2 (l x r).

    ``normalization="softmax"`` yields non-negative weights summing to one.
    ``"sigmoid"`` applies an element-wise sigmoid instead; those weights are
    in (0, 1) but do not sum to one.
    """

    def __init__(
        self,
        bands: int,
        bottleneck_dim: Optional[int] = None,
        normalization: str = "softmax",
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if bands < 1:
            raise ParameterError(f"bands must be >= 1, got {bands}")
        r = default_bottleneck(bands) if bottleneck_dim is None else bottleneck_dim
        if r < 1:
            raise ParameterError(f"bottleneck_dim must be >= 1, got {r}")
        if normalization not in ("softmax", "sigmoid"):
            raise ParameterError(f"unknown normalization {normalization!r}")
        self.bands = bands
        self.bottleneck_dim = r
        self.normalization = normalization
        self.w1 = nn.Parameter(self._uniform((r, bands), bands, generator, dtype))
        self.w2 = nn.Parameter(self._uniform((bands, r), r, generator, dtype))

    @staticmethod
    def _uniform(shape, fan_in, generator, dtype):
        bound = 1.0 / math.sqrt(fan_in)
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2.0 - 1.0) * bound

    @property
    def trainable(self) -> bool:
        return self.w1.requires_grad and self.w2.requires_grad

    def freeze(self) -> "SRFParams":
        self.requires_grad_(False)
        return self

    def zero_(self) -> "SRFParams":
        with torch.no_grad():
            self.w1.zero_()
            self.w2.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return excite(squeeze(x), self)


def squeeze(x: TensorLike) -> torch.Tensor:
    """Per-band spatial mean; works on (l, H, W) or batched (B, l, H, W)."""
    x = _tensor(x)
    if x.dim() < 3:
        raise DimensionMismatchError(f"squeeze expects (..., l, H, W), got {tuple(x.shape)}", axis="ndim")
    return x.mean(dim=(-2, -1))


def logits(q: torch.Tensor, params: SRFParams) -> torch.Tensor:
    if q.shape[-1] != params.bands:
        raise DimensionMismatchError(
            f"descriptor length {q.shape[-1]} != SRF band count {params.bands}", axis="bands"
        )
    w1 = params.w1.to(q.dtype)
    w2 = params.w2.to(q.dtype)
    return F.relu(q @ w1.T) @ w2.T


def normalize(a: torch.Tensor, normalization: str = "softmax") -> torch.Tensor:
    if normalization == "softmax":
        return torch.softmax(a, dim=-1)
    if normalization == "sigmoid":
        return torch.sigmoid(a)
    raise ParameterError(f"unknown normalization {normalization!r}")


def excite(q: torch.Tensor, params: SRFParams) -> torch.Tensor:
    return normalize(logits(q, params), params.normalization)


def predict_pan(x: TensorLike, s: TensorLike) -> torch.Tensor:
    """Band-weighted sum sum_i s[i] * x[i]; batched inputs take s of shape (B, l)."""
    x = _tensor(x)
    s = _tensor(s, dtype=x.dtype).to(x.dtype)
    if s.shape[-1] != x.shape[-3]:
        raise DimensionMismatchError(
            f"response length {s.shape[-1]} != cube band count {x.shape[-3]}", axis="bands"
        )
    return (s[..., :, None, None] * x).sum(dim=-3)


def spatial_energy(x: TensorLike, pan: TensorLike, params: SRFParams) -> torch.Tensor:
    """Mean absolute difference between the SRF-predicted PAN and the observed PAN."""
    x = _tensor(x)
    pan = _tensor(pan, dtype=x.dtype).to(x.dtype)
    pred = predict_pan(x, params(x))
    if pred.shape[-2:] != pan.shape[-2:]:
        raise DimensionMismatchError(
            f"PAN dims {tuple(pan.shape[-2:])} != cube dims {tuple(pred.shape[-2:])}", axis="height"
        )
    return (pred - pan).abs().mean()


def save_response(s: TensorLike, path: Union[str, Path]) -> None:
    values = _tensor(s).detach().cpu().double().reshape(-1).tolist()
    Path(path).write_text(json.dumps(values) + "\n", encoding="utf-8")
