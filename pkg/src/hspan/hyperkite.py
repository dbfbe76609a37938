"""Over-complete residual network.

The encoder *upsamples* (x2, x4, x8) instead of pooling, so every extra
layer sees a smaller patch of the input and stays focused on edges and fine
structure. The decoder brings features back down with bilinear resampling
and skip concatenation; a final 3x3 conv maps to the band count.

    F1  = ifen([x_dip, p])                      1x
    F2  = enc2(up F1), F4 = enc4(up F2), F8 = enc8(up F4)
    G4  = dec4(down F8 ++ F4), G2 = dec2(down G4 ++ F2)
    G1  = down G2
    res = frrn(G1 ++ F1)
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import HSICube, PANImage
from .errors import CorruptHeaderError, DimensionMismatchError, NumericalError, ParameterError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HKITE01\n"


@dataclass
class HyperKiteConfig:
    widths: Tuple[int, ...] = (32, 64, 128, 128, 64, 32, -1)
    kernels: Tuple[int, ...] = (3,) * 7
    epochs: int = 2500
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    leaky_slope: float = 0.2
    seed: int = 0
    crop_size: Optional[int] = None

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.kernels = tuple(self.kernels)
        self.betas = tuple(self.betas)
        if len(self.widths) != 7 or len(self.kernels) != 7:
            raise ParameterError("HyperKite needs exactly 7 widths and 7 kernel sizes")
        if min(self.widths[:6]) < 1 or min(self.kernels) < 1:
            raise ParameterError("widths and kernel sizes must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")

    def for_bands(self, bands: int) -> "HyperKiteConfig":
        """Copy with the output width set to ``bands``."""
        if self.widths[6] not in (-1, bands):
            raise DimensionMismatchError(
                f"configured output width {self.widths[6]} != band count {bands}", axis="bands"
            )
        return HyperKiteConfig(**{**asdict(self), "widths": self.widths[:6] + (bands,)})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def receptive_field(layer_index: int, k: int) -> float:
    """Receptive area (input pixels^2) of a k x k filter at over-complete layer ``layer_index``."""
    if layer_index < 1 or k < 1:
        raise ParameterError(f"need layer_index >= 1 and k >= 1, got {layer_index}, {k}")
    return 0.5 ** (2 * (layer_index - 1)) * k * k


class ConvBlock(nn.Sequential):
    """conv -> BN -> LeakyReLU"""

    def __init__(self, cin: int, cout: int, k: int, slope: float):
        super().__init__(
            nn.Conv2d(cin, cout, k, padding=k // 2),
            nn.BatchNorm2d(cout),
            nn.LeakyReLU(slope),
        )


def _resize(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class HyperKite(nn.Module):
    def __init__(self, bands: int, config: Optional[HyperKiteConfig] = None):
        super().__init__()
        config = (config or HyperKiteConfig()).for_bands(bands)
        n, k, a = config.widths, config.kernels, config.leaky_slope
        self.bands = bands
        self.config = config
        self.ifen = ConvBlock(bands + 1, n[0], k[0], a)
        self.enc2 = ConvBlock(n[0], n[1], k[1], a)
        self.enc4 = ConvBlock(n[1], n[2], k[2], a)
        self.enc8 = ConvBlock(n[2], n[3], k[3], a)
        self.dec4 = ConvBlock(n[3] + n[2], n[4], k[4], a)
        self.dec2 = ConvBlock(n[4] + n[1], n[5], k[5], a)
        self.frrn = nn.Conv2d(n[5] + n[0], n[6], k[6], padding=k[6] // 2)
        # start from a zero residual so the untrained net returns x_dip unchanged
        nn.init.zeros_(self.frrn.weight)
        nn.init.zeros_(self.frrn.bias)

    def forward(self, x_dip: torch.Tensor, pan: torch.Tensor, return_features: bool = False):
        if x_dip.dim() == 3:
            x_dip = x_dip[None]
        if pan.dim() == 2:
            pan = pan[None, None]
        elif pan.dim() == 3:
            pan = pan[:, None]
        if x_dip.shape[1] != self.bands:
            raise DimensionMismatchError(f"expected {self.bands} bands, got {x_dip.shape[1]}", axis="bands")
        if x_dip.shape[-2:] != pan.shape[-2:]:
            raise DimensionMismatchError(
                f"x_dip dims {tuple(x_dip.shape[-2:])} != PAN dims {tuple(pan.shape[-2:])}", axis="height"
            )
        h, w = x_dip.shape[-2:]
        f1 = self.ifen(torch.cat([x_dip, pan.to(x_dip.dtype)], dim=1))
        f2 = self.enc2(_resize(f1, (2 * h, 2 * w)))
        f4 = self.enc4(_resize(f2, (4 * h, 4 * w)))
        f8 = self.enc8(_resize(f4, (8 * h, 8 * w)))
        g4 = self.dec4(torch.cat([_resize(f8, (4 * h, 4 * w)), f4], dim=1))
        g2 = self.dec2(torch.cat([_resize(g4, (2 * h, 2 * w)), f2], dim=1))
        g1 = _resize(g2, (h, w))
        res = self.frrn(torch.cat([g1, f1], dim=1))
        if return_features:
            return res, {"F_D1": f1, "F_D2": f2, "F_D4": f4, "F_D8": f8, "G_D4": g4, "G_D2": g2, "G_D1": g1}
        return res


def incremental_receptive_area(model: HyperKite, level: int) -> float:
    """Measured input-pixel area seen by one filter of encoder ``level`` (1..4).

    Backpropagates a single centre output pixel of that level's conv to the
    level's own input map, counts the pixels with nonzero gradient, and
    divides by the squared scale of that map relative to the input.
    """
    blocks = [model.ifen, model.enc2, model.enc4, model.enc8]
    if not 1 <= level <= len(blocks):
        raise ParameterError(f"level must be in [1, {len(blocks)}], got {level}")
    conv = blocks[level - 1][0]
    k = conv.kernel_size[0]
    size = 4 * k + 1
    inp = torch.randn(1, conv.in_channels, size, size, dtype=torch.float64, requires_grad=True)
    weight = conv.weight.detach().double().abs() + 1e-3
    out = F.conv2d(inp, weight, padding=conv.padding)
    out[0, 0, size // 2, size // 2].backward()
    support = (inp.grad[0].abs().sum(dim=0) > 0).sum().item()
    scale = 2 ** (level - 1)
    return support / scale**2


def fuse(x_dip: HSICube, x_res: HSICube, clamp: bool = True) -> HSICube:
    """x = x_res + x_dip, clamped to x_dip's declared value range."""
    if x_dip.shape != x_res.shape:
        raise DimensionMismatchError(f"shape mismatch {x_dip.shape} vs {x_res.shape}", axis="bands")
    out = np.asarray(x_dip.data, dtype=np.float64) + np.asarray(x_res.data, dtype=np.float64)
    if clamp:
        lo, hi = x_dip.value_range
        out = np.clip(out, lo, hi)
    return HSICube(out.astype(np.result_type(x_dip.data.dtype, x_res.data.dtype)), value_range=x_dip.value_range, name=x_dip.name)


# --- training ---------------------------------------------------------------------


def _stack(samples: Sequence[tuple]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    xs, ps, targets = [], [], []
    for x_dip, pan, x_ref in samples:
        x_dip = np.asarray(getattr(x_dip, "data", x_dip), dtype=np.float32)
        pan = np.asarray(getattr(pan, "data", pan), dtype=np.float32)
        x_ref = np.asarray(getattr(x_ref, "data", x_ref), dtype=np.float32)
        if x_ref.shape != x_dip.shape:
            raise DimensionMismatchError(f"x_ref {x_ref.shape} != x_dip {x_dip.shape}", axis="bands")
        xs.append(x_dip)
        ps.append(pan.reshape(pan.shape[-2:]))
        targets.append(x_ref - x_dip)
    return torch.as_tensor(np.stack(xs)), torch.as_tensor(np.stack(ps)), torch.as_tensor(np.stack(targets))


def train(samples: Sequence[tuple], config: Optional[HyperKiteConfig] = None, model: Optional[HyperKite] = None):
    """Fit HyperKite to residual targets ``x_ref - x_dip`` with a mean L1 loss.

    ``samples`` holds (x_dip, pan, x_ref) triples. Returns (model, history)
    where history[e] is the mean batch loss of epoch e.
    """
    if not samples:
        raise ParameterError("train needs at least one sample")
    config = config or HyperKiteConfig()
    x, p, target = _stack(samples)
    torch.manual_seed(config.seed)
    if model is None:
        model = HyperKite(x.shape[1], config)
    rng = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)
    history: List[float] = []
    model.train()
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, pb, tb = x[idx], p[idx], target[idx]
            if config.crop_size and config.crop_size < xb.shape[-1]:
                xb, pb, tb = _random_crop(xb, pb, tb, config.crop_size, rng)
            if xb.shape[0] == 1 and model.training:
                # BN needs spread; a lone trailing sample is paired with itself
                xb, pb, tb = (torch.cat([t, t]) for t in (xb, pb, tb))
            opt.zero_grad(set_to_none=True)
            loss = (model(xb, pb) - tb).abs().mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {batches}")
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        history.append(total / batches)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("epoch %d loss %.6f", epoch, history[-1])
    model.eval()
    return model, history


def _random_crop(xb, pb, tb, size, rng):
    h, w = xb.shape[-2:]
    r = int(torch.randint(0, h - size + 1, (1,), generator=rng))
    c = int(torch.randint(0, w - size + 1, (1,), generator=rng))
    sl = (Ellipsis, slice(r, r + size), slice(c, c + size))
    return xb[sl], pb[sl], tb[sl]


@torch.no_grad()
def predict(model: HyperKite, x_dip: HSICube, pan: PANImage, tile: Optional[int] = None, overlap: int = 8) -> HSICube:
    """Residual for one sample. With ``tile`` set, runs on overlapping tiles and keeps each tile's core."""
    model.eval()
    x = torch.as_tensor(np.array(x_dip.data, dtype=np.float32))[None]
    p = torch.as_tensor(np.array(pan.data, dtype=np.float32))[None]
    h, w = x.shape[-2:]
    if not tile or (tile >= h and tile >= w):
        res = model(x, p)[0]
    else:
        res = torch.zeros_like(x[0])
        step = max(tile - 2 * overlap, 1)
        for r0 in range(0, h, step):
            for c0 in range(0, w, step):
                r1, c1 = min(r0 + step, h), min(c0 + step, w)
                rs, cs = max(r0 - overlap, 0), max(c0 - overlap, 0)
                re, ce = min(r1 + overlap, h), min(c1 + overlap, w)
                out = model(x[..., rs:re, cs:ce], p[..., rs:re, cs:ce])[0]
                res[:, r0:r1, c0:c1] = out[:, r0 - rs : r1 - rs, c0 - cs : c1 - cs]
    return HSICube(res.numpy(), value_range=x_dip.value_range, name=x_dip.name)


# --- checkpoints --------------------------------------------------------------------


def save_checkpoint(model: HyperKite, path, extra: Optional[dict] = None) -> None:
    """Single file: magic, u64 header length, JSON header, torch state dict."""
    header = {"bands": model.bands, "config": model.config.to_dict(), "seed": model.config.seed}
    if extra:
        header.update(extra)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[HyperKite, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CorruptHeaderError(f"{path} is not a HyperKite checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<Q", raw[off : off + 8])
    try:
        header = json.loads(raw[off + 8 : off + 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"bad checkpoint header in {path}: {exc}") from None
    config = HyperKiteConfig(**header["config"])
    model = HyperKite(header["bands"], config)
    state = torch.load(io.BytesIO(raw[off + 8 + n :]), weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, header
