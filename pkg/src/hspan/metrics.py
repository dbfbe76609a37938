"""Reference-based fusion quality measures.

All functions take (fused, reference) as HSICube or (bands, H, W) arrays and
compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .datamodel import HSICube
from .errors import DimensionMismatchError, MetricDomainError

METRIC_NAMES = ("cc", "sam_deg", "rmse", "rsnr_db", "ergas", "psnr_db")


def _pair(x, ref):
    x = np.asarray(x.data if isinstance(x, HSICube) else x, dtype=np.float64)
    ref = np.asarray(ref.data if isinstance(ref, HSICube) else ref, dtype=np.float64)
    if x.ndim != 3 or ref.ndim != 3:
        raise DimensionMismatchError(f"expected 3-D cubes, got {x.shape} and {ref.shape}", axis="ndim")
    if x.shape != ref.shape:
        for axis, a, b in zip(("bands", "height", "width"), x.shape, ref.shape):
            if a != b:
                raise DimensionMismatchError(f"{axis} differ: {a} vs {b}", axis=axis)
    return x, ref


def cc_per_band(x, ref) -> np.ndarray:
    x, ref = _pair(x, ref)
    l = x.shape[0]
    a = x.reshape(l, -1)
    b = ref.reshape(l, -1)
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    saa = (a * a).sum(axis=1)
    sbb = (b * b).sum(axis=1)
    for i in range(l):
        if sbb[i] == 0:
            raise MetricDomainError(f"CC undefined: reference band {i} is constant")
        if saa[i] == 0:
            raise MetricDomainError(f"CC undefined: fused band {i} is constant")
    return np.clip((a * b).sum(axis=1) / np.sqrt(saa * sbb), -1.0, 1.0)


def cc(x, ref) -> float:
    """Mean over bands of the per-band Pearson correlation."""
    return float(cc_per_band(x, ref).mean())


def sam_with_skips(x, ref):
    """Mean spectral angle in degrees plus the number of skipped zero-spectrum pixels."""
    x, ref = _pair(x, ref)
    l = x.shape[0]
    a = x.reshape(l, -1)
    b = ref.reshape(l, -1)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    valid = (na > 0) & (nb > 0)
    skipped = int((~valid).sum())
    if not valid.any():
        raise MetricDomainError("SAM undefined: every pixel has a zero spectrum")
    # half-angle form: arccos loses ~1e-8 rad near identical spectra
    u = a[:, valid] / na[valid]
    v = b[:, valid] / nb[valid]
    angles = np.degrees(2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0)))
    return float(angles.mean()), skipped


def sam(x, ref) -> float:
    return sam_with_skips(x, ref)[0]


def rmse_per_band(x, ref) -> np.ndarray:
    x, ref = _pair(x, ref)
    l = x.shape[0]
    d = (x - ref).reshape(l, -1)
    return np.sqrt((d * d).mean(axis=1))


def rmse(x, ref) -> float:
    """Root of the mean squared error over all n*l entries."""
    x, ref = _pair(x, ref)
    d = x - ref
    return float(np.sqrt((d * d).mean()))


def rsnr(x, ref) -> float:
    """10 log10(||ref||^2 / ||x - ref||^2); +inf when x == ref."""
    x, ref = _pair(x, ref)
    num = float((ref * ref).sum())
    den = float(((x - ref) ** 2).sum())
    if den == 0:
        return math.inf
    if num == 0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def ergas(x, ref, beta: float, as_printed: bool = False) -> float:
    """Relative dimensionless global error.

    Default is the usual ``100 / beta * sqrt(mean_i (RMSE_i / mu_i)^2)``.
    ``as_printed`` uses ``100 / beta**2 * sqrt(mean_i RMSE_i / mu_i)`` instead.
    """
    x, ref = _pair(x, ref)
    if beta <= 0:
        raise MetricDomainError(f"beta must be positive, got {beta}")
    l = x.shape[0]
    mu = ref.reshape(l, -1).mean(axis=1)
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise MetricDomainError(f"ERGAS undefined: reference band {int(zero[0])} has zero mean")
    ratio = rmse_per_band(x, ref) / mu
    if as_printed:
        return float(100.0 / beta**2 * math.sqrt(max(ratio.mean(), 0.0)))
    return float(100.0 / beta * math.sqrt((ratio * ratio).mean()))


def psnr_per_band(x, ref) -> np.ndarray:
    """Per-band PSNR in dB; +inf for bands reproduced exactly."""
    x, ref = _pair(x, ref)
    l = x.shape[0]
    peak = ref.reshape(l, -1).max(axis=1)
    zero = np.flatnonzero(peak == 0)
    if zero.size:
        raise MetricDomainError(f"PSNR undefined: reference band {int(zero[0])} has max 0")
    err = rmse_per_band(x, ref)
    out = np.full(l, np.inf)
    ok = err > 0
    out[ok] = 10.0 * np.log10((peak[ok] / err[ok]) ** 2)
    return out


def psnr(x, ref) -> float:
    """Mean per-band PSNR over bands with nonzero error; +inf if every band is exact."""
    per_band = psnr_per_band(x, ref)
    finite = per_band[np.isfinite(per_band)]
    if finite.size == 0:
        return math.inf
    return float(finite.mean())


@dataclass
class MetricReport:
    cc: float
    sam_deg: float
    rmse: float
    rsnr_db: float
    ergas: float
    psnr_db: float
    n_pixels: int
    n_bands: int
    sam_skipped: int = 0
    psnr_excluded_bands: list = field(default_factory=list)
    per_band: Optional[dict] = None

    def scalars(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
            if isinstance(v, list):
                return [clean(u) for u in v]
            if isinstance(v, dict):
                return {k: clean(u) for k, u in v.items()}
            return v

        return clean(asdict(self))


def evaluate(x, ref, beta: float, per_band: bool = False, ergas_as_printed: bool = False) -> MetricReport:
    x, ref = _pair(x, ref)
    psnr_bands = psnr_per_band(x, ref)
    sam_value, skipped = sam_with_skips(x, ref)
    report = MetricReport(
        cc=cc(x, ref),
        sam_deg=sam_value,
        rmse=rmse(x, ref),
        rsnr_db=rsnr(x, ref),
        ergas=ergas(x, ref, beta, as_printed=ergas_as_printed),
        psnr_db=psnr(x, ref),
        n_pixels=x.shape[1] * x.shape[2],
        n_bands=x.shape[0],
        sam_skipped=skipped,
        psnr_excluded_bands=[int(i) for i in np.flatnonzero(~np.isfinite(psnr_bands))],
    )
    if per_band:
        report.per_band = {
            "cc": cc_per_band(x, ref).tolist(),
            "rmse": rmse_per_band(x, ref).tolist(),
            "psnr": psnr_bands.tolist(),
        }
    return report
