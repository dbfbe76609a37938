"""Deep-image-prior upsampling of an LR hyperspectral cube.

A skip-connected encoder/decoder maps fixed uniform noise to the upsampled
cube. Its weights (and the spectral-response bottleneck) are fitted per
sample to

    mean|d(x_dip) - y| + lambda * mean|sum_i s[i] x_dip[i] - p|

where ``d`` downsamples by beta. ``d`` defaults to the same Gaussian
blur + decimation that produced ``y``; a Lanczos2 resampler is available.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import FusionSample, HSICube, validate_sample
from .degrade import SIGMA_PER_BETA, gaussian_kernel, kernel_anchor, reflect_indices
from .errors import DimensionMismatchError, NumericalError, ParameterError
from .srf import SRFParams, spatial_energy

log = logging.getLogger(__name__)

METHODS = ("dip-qss", "dip-spectral", "nearest", "bicubic")


@dataclass
class DIPConfig:
    noise_channels: int = 32
    noise_high: float = 0.1
    n_down: Tuple[int, ...] = (128,) * 5
    k_down: Tuple[int, ...] = (3,) * 5
    n_up: Tuple[int, ...] = (128,) * 5
    k_up: Tuple[int, ...] = (3,) * 5
    n_skip: Tuple[int, ...] = (4,) * 5
    k_skip: Tuple[int, ...] = (1,) * 5
    iterations: int = 1300
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    leaky_slope: float = 0.2
    lam: float = 0.8
    seed: int = 0
    use_spatial: bool = True
    downsampler: str = "matched"
    kernel_size: int = 8
    sigma: Optional[float] = None
    srf_normalization: str = "softmax"
    bottleneck_dim: Optional[int] = None
    train_srf: bool = True

    def __post_init__(self):
        for name in ("n_down", "k_down", "n_up", "k_up", "n_skip", "k_skip", "betas"):
            setattr(self, name, tuple(getattr(self, name)))
        depth = len(self.n_down)
        if not (len(self.k_down) == len(self.n_up) == len(self.k_up) == len(self.n_skip) == len(self.k_skip) == depth):
            raise ParameterError("DIP block lists must all have the same length")
        if depth < 1:
            raise ParameterError("DIP generator needs at least one block")
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.iterations < 1:
            raise ParameterError(f"iterations must be >= 1, got {self.iterations}")
        if min(self.n_down + self.n_up + self.k_down + self.k_up + (self.noise_channels,)) < 1:
            raise ParameterError("all widths and kernel sizes must be >= 1")
        if min(self.n_skip) < 0 or min(self.k_skip) < 1:
            raise ParameterError("skip widths must be >= 0 and skip kernels >= 1")
        if self.downsampler not in ("matched", "lanczos2"):
            raise ParameterError(f"unknown downsampler {self.downsampler!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class DIPState:
    z: torch.Tensor
    theta: dict
    srf: SRFParams
    iteration: int = 0
    energy_trace: List[Tuple[int, float, float]] = field(default_factory=list)
    response: Optional[np.ndarray] = None

    def z_digest(self) -> str:
        return hashlib.sha256(self.z.detach().cpu().numpy().tobytes()).hexdigest()


class Energy(NamedTuple):
    total: torch.Tensor
    spectral: torch.Tensor
    spatial: torch.Tensor


# --- generator ---------------------------------------------------------------


class _BatchNorm(nn.BatchNorm2d):
    # a 1x1 map with batch 1 has no spread to normalize; pass it through
    def forward(self, x):
        if self.training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
            return x
        return super().forward(x)


class _NoSkip(nn.Module):
    def forward(self, x):
        return x[:, :0]


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class Generator(nn.Module):
    """U-Net-like DIP generator: stride-2 conv down, bilinear up, 1x1 skips."""

    def __init__(self, config: DIPConfig, out_bands: int):
        super().__init__()
        c = config
        act = lambda: nn.LeakyReLU(c.leaky_slope)  # noqa: E731
        self.down = nn.ModuleList()
        self.skip = nn.ModuleList()
        self.up = nn.ModuleList()
        cin = c.noise_channels
        for n, k, ns, ks in zip(c.n_down, c.k_down, c.n_skip, c.k_skip):
            self.skip.append(
                nn.Sequential(_conv(cin, ns, ks), _BatchNorm(ns), act()) if ns > 0 else _NoSkip()
            )
            self.down.append(
                nn.Sequential(
                    _conv(cin, n, k, stride=2), _BatchNorm(n), act(),
                    _conv(n, n, k), _BatchNorm(n), act(),
                )
            )
            cin = n
        deeper = c.n_down[-1]
        ups = []
        for i in reversed(range(len(c.n_up))):
            cat = deeper + c.n_skip[i]
            ups.append(
                nn.Sequential(
                    _BatchNorm(cat),
                    _conv(cat, c.n_up[i], c.k_up[i]), _BatchNorm(c.n_up[i]), act(),
                    _conv(c.n_up[i], c.n_up[i], 1), _BatchNorm(c.n_up[i]), act(),
                )
            )
            deeper = c.n_up[i]
        # stored deepest-first, matching the decoder loop order
        self.up.extend(ups)
        self.head = nn.Conv2d(c.n_up[0], out_bands, 1)
        self.out_bands = out_bands

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        skips = []
        x = z
        for down, skip in zip(self.down, self.skip):
            skips.append(skip(x))
            x = down(x)
        for up, s in zip(self.up, reversed(skips)):
            x = F.interpolate(x, size=s.shape[-2:], mode="bilinear", align_corners=False)
            x = up(torch.cat([x, s], dim=1))
        return torch.sigmoid(self.head(x))


def build_generator(config: DIPConfig, out_bands: int) -> Generator:
    return Generator(config, out_bands)


# --- downsampling operators d(.) ---------------------------------------------


def _lanczos(u: np.ndarray, a: int = 2) -> np.ndarray:
    out = np.sinc(u) * np.sinc(u / a)
    out[np.abs(u) >= a] = 0.0
    return out


def lanczos_matrix(n_in: int, beta: int, a: int = 2) -> np.ndarray:
    """(n_in // beta, n_in) antialiased Lanczos-a decimation matrix, reflect boundary."""
    n_out = n_in // beta
    mat = np.zeros((n_out, n_in))
    reach = int(math.ceil(a * beta))
    for o in range(n_out):
        center = (o + 0.5) * beta - 0.5
        taps = np.arange(int(math.floor(center)) - reach, int(math.ceil(center)) + reach + 1)
        w = _lanczos((taps - center) / beta, a)
        keep = w != 0
        taps, w = taps[keep], w[keep]
        src = reflect_indices(n_in, reach + beta, reach + beta)[taps + reach + beta]
        np.add.at(mat[o], src, w)
        mat[o] /= mat[o].sum()
    return mat


def _gaussian_downsample(x: torch.Tensor, beta: int, kernel_size: int, sigma: float) -> torch.Tensor:
    kernel = torch.as_tensor(gaussian_kernel(kernel_size, sigma), dtype=x.dtype)
    anchor = kernel_anchor(kernel_size)
    h, w = x.shape[-2:]
    rows = torch.as_tensor(reflect_indices(h, anchor, kernel_size - 1 - anchor))
    cols = torch.as_tensor(reflect_indices(w, anchor, kernel_size - 1 - anchor))
    xp = x.index_select(-2, rows).index_select(-1, cols)
    lead = xp.shape[:-2]
    flat = xp.reshape(-1, 1, *xp.shape[-2:])
    out = F.conv2d(flat, kernel[None, None], stride=beta)
    return out.reshape(*lead, *out.shape[-2:])


def downsample(
    x: torch.Tensor, beta: int, mode: str = "matched", kernel_size: int = 8, sigma: Optional[float] = None
) -> torch.Tensor:
    """Apply d(.) to a (..., H, W) tensor."""
    if x.shape[-2] % beta or x.shape[-1] % beta:
        raise DimensionMismatchError(f"dims {tuple(x.shape[-2:])} not divisible by beta={beta}", axis="height")
    if mode == "matched":
        return _gaussian_downsample(x, beta, kernel_size, SIGMA_PER_BETA * beta if sigma is None else sigma)
    if mode == "lanczos2":
        mr = torch.as_tensor(lanczos_matrix(x.shape[-2], beta), dtype=x.dtype)
        mc = torch.as_tensor(lanczos_matrix(x.shape[-1], beta), dtype=x.dtype)
        return mr @ x @ mc.T
    raise ParameterError(f"unknown downsampler {mode!r}")


def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    if hasattr(x, "data") and isinstance(x.data, np.ndarray):
        x = x.data
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def spectral_energy(x_dip, y, beta: int, mode: str = "matched", kernel_size: int = 8, sigma=None) -> torch.Tensor:
    """Mean absolute difference between d(x_dip) and y."""
    x_dip = _as_tensor(x_dip)
    y = _as_tensor(y, x_dip.dtype).to(x_dip.dtype)
    if x_dip.shape[-2] != beta * y.shape[-2] or x_dip.shape[-1] != beta * y.shape[-1]:
        raise DimensionMismatchError(
            f"x_dip dims {tuple(x_dip.shape[-2:])} != beta * y dims {tuple(y.shape[-2:])}", axis="height"
        )
    if x_dip.shape[-3] != y.shape[-3]:
        raise DimensionMismatchError(f"band counts differ: {x_dip.shape[-3]} vs {y.shape[-3]}", axis="bands")
    return (downsample(x_dip, beta, mode, kernel_size, sigma) - y).abs().mean()


def qss_energy(x_dip, y, pan, srf: SRFParams, lam: float, beta: int, mode: str = "matched",
               kernel_size: int = 8, sigma=None) -> Energy:
    spec = spectral_energy(x_dip, y, beta, mode, kernel_size, sigma)
    spat = spatial_energy(_as_tensor(x_dip), _as_tensor(pan, spec.dtype).to(spec.dtype), srf)
    return Energy(spec + lam * spat, spec, spat)


# --- optimization ---------------------------------------------------------------


def make_noise(channels: int, height: int, width: int, high: float, generator: torch.Generator) -> torch.Tensor:
    return torch.rand((1, channels, height, width), generator=generator) * high


def optimize_dip(sample: FusionSample, config: DIPConfig) -> Tuple[HSICube, DIPState]:
    """Fit the generator (and SRF) to one sample; returns the upsampled cube and the run state."""
    validate_sample(sample)
    beta = sample.beta
    y_cube = sample.lr_hsi
    bands = y_cube.bands
    height, width = sample.pan.height, sample.pan.width

    torch.manual_seed(config.seed)
    rng = torch.Generator().manual_seed(config.seed)
    net = build_generator(config, bands)
    srf = SRFParams(bands, config.bottleneck_dim, config.srf_normalization, generator=rng)
    if not config.train_srf:
        srf.freeze()
    z = make_noise(config.noise_channels, height, width, config.noise_high, rng)
    z.requires_grad_(False)

    y = torch.as_tensor(np.array(y_cube.data, dtype=np.float32))[None]
    pan = torch.as_tensor(np.array(sample.pan.data, dtype=np.float32))[None]

    params = list(net.parameters()) + [p for p in srf.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    state = DIPState(z=z, theta={}, srf=srf)
    net.train()
    for it in range(config.iterations):
        opt.zero_grad(set_to_none=True)
        x = net(z)
        spec = spectral_energy(x, y, beta, config.downsampler, config.kernel_size, config.sigma)
        if config.use_spatial:
            spat = spatial_energy(x, pan, srf)
            total = spec + config.lam * spat
        else:
            with torch.no_grad():
                spat = spatial_energy(x, pan, srf)
            total = spec
        if not (torch.isfinite(spec) and torch.isfinite(spat)):
            raise NumericalError(
                f"non-finite DIP energy at iteration {it}: spectral={spec.item()} spatial={spat.item()}"
            )
        state.energy_trace.append((it, float(spec.item()), float(spat.item())))
        total.backward()
        opt.step()
        state.iteration = it + 1
        if log.isEnabledFor(logging.DEBUG) and it % 100 == 0:
            log.debug("iter %d spectral %.6f spatial %.6f", it, spec.item(), spat.item())

    with torch.no_grad():
        x = net(z)[0]
        state.response = srf(x[None])[0].double().numpy()
    state.theta = {k: v.detach().clone() for k, v in net.state_dict().items()}
    cube = HSICube(x.numpy().astype(np.float32), value_range=y_cube.value_range, name=y_cube.name)
    return cube, state


# --- classical baselines ----------------------------------------------------------


def _keys_cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def cubic_matrix(n_in: int, beta: int) -> np.ndarray:
    """(beta * n_in, n_in) Catmull-Rom upsampling matrix, half-pixel centers, clamped edges."""
    n_out = n_in * beta
    mat = np.zeros((n_out, n_in))
    for o in range(n_out):
        src = (o + 0.5) / beta - 0.5
        base = int(math.floor(src))
        taps = np.arange(base - 1, base + 3)
        w = _keys_cubic(src - taps)
        np.add.at(mat[o], np.clip(taps, 0, n_in - 1), w)
    return mat


def baseline_upsample(y: HSICube, beta: int, method: str) -> HSICube:
    if beta < 1:
        raise ParameterError(f"beta must be >= 1, got {beta}")
    data = np.asarray(y.data, dtype=np.float64)
    if method == "nearest":
        out = np.repeat(np.repeat(data, beta, axis=1), beta, axis=2)
    elif method == "bicubic":
        mr = cubic_matrix(y.height, beta)
        mc = cubic_matrix(y.width, beta)
        out = np.einsum("ri,bij,cj->brc", mr, data, mc)
    else:
        raise ParameterError(f"unknown upsampling method {method!r}; expected nearest or bicubic")
    return HSICube(out.astype(y.data.dtype), value_range=y.value_range, name=y.name)


def upsample(sample: FusionSample, method: str, config: Optional[DIPConfig] = None):
    """Dispatch on method name. Returns (cube, state-or-None)."""
    if method in ("nearest", "bicubic"):
        return baseline_upsample(sample.lr_hsi, sample.beta, method), None
    if method not in ("dip-qss", "dip-spectral"):
        raise ParameterError(f"unknown method {method!r}; expected one of {METHODS}")
    config = config or DIPConfig()
    if method == "dip-spectral":
        config = DIPConfig(**{**config.to_dict(), "use_spatial": False})
    return optimize_dip(sample, config)
