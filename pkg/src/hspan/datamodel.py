"""Core array types and the on-disk cube container.

Arrays are laid out (band, row, col). A container is a directory holding
``meta.json`` and ``data.f32`` (raw little-endian float32, band-sequential,
row-major within each band).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    NonFiniteError,
    PayloadSizeMismatchError,
    UnsupportedDtypeError,
)

META_NAME = "meta.json"
DATA_NAME = "data.f32"

PathLike = Union[str, os.PathLike]


def _as_float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"{what} contains non-finite value at index {idx}", index=idx)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HSICube:
    """Hyperspectral cube of shape (bands, height, width).

    The array is copied and made read-only on construction.
    """

    data: np.ndarray
    value_range: Tuple[float, float] = (0.0, 1.0)
    name: str = ""

    def __post_init__(self):
        arr = _as_float_array(self.data)
        if arr.ndim != 3:
            raise DimensionMismatchError(
                f"HSICube needs a 3-D (band, row, col) array, got shape {arr.shape}", axis="ndim"
            )
        for axis, n in zip(("bands", "height", "width"), arr.shape):
            if n < 1:
                raise DimensionMismatchError(f"HSICube {axis} must be >= 1, got {n}", axis=axis)
        _check_finite(arr, "HSICube")
        object.__setattr__(self, "data", _frozen(arr))
        lo, hi = self.value_range
        object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, HSICube):
            return NotImplemented
        return (
            self.value_range == other.value_range
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"HSICube(bands={self.bands}, height={self.height}, width={self.width}, dtype={self.data.dtype})"


@dataclass(frozen=True, eq=False)
class PANImage:
    """Single-band image of shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.data)
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise DimensionMismatchError(f"PANImage needs a 2-D array, got shape {arr.shape}", axis="ndim")
        if min(arr.shape) < 1:
            raise DimensionMismatchError(f"PANImage has empty axis: {arr.shape}", axis="height")
        _check_finite(arr, "PANImage")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __repr__(self):
        return f"PANImage(height={self.height}, width={self.width})"


@dataclass(frozen=True)
class FusionSample:
    lr_hsi: HSICube
    pan: PANImage
    reference: Optional[HSICube] = None
    beta: int = 1
    patch_id: str = ""
    dataset_name: str = ""
    extra: dict = field(default_factory=dict, compare=False)


def validate_sample(sample: FusionSample) -> None:
    """Raise if the (y, p, x_ref, beta) shape relations do not hold.

    Every mismatch names the offending axis. Non-finite values are already
    rejected when the cube/image objects are built, but arrays are re-checked
    here in case a caller bypassed the constructors.
    """
    beta = sample.beta
    if not isinstance(beta, (int, np.integer)) or beta < 1:
        raise DimensionMismatchError(f"beta must be a positive integer, got {beta!r}", axis="beta")
    y = sample.lr_hsi
    _check_finite(y.data, "lr_hsi")
    _check_finite(sample.pan.data, "pan")
    hi_h, hi_w = beta * y.height, beta * y.width
    if sample.pan.height != hi_h:
        raise DimensionMismatchError(
            f"pan height {sample.pan.height} != beta*lr height {hi_h}", axis="height"
        )
    if sample.pan.width != hi_w:
        raise DimensionMismatchError(f"pan width {sample.pan.width} != beta*lr width {hi_w}", axis="width")
    ref = sample.reference
    if ref is None:
        return
    _check_finite(ref.data, "reference")
    if ref.bands != y.bands:
        raise DimensionMismatchError(f"reference bands {ref.bands} != lr bands {y.bands}", axis="bands")
    if ref.height != hi_h:
        raise DimensionMismatchError(f"reference height {ref.height} != beta*lr height {hi_h}", axis="height")
    if ref.width != hi_w:
        raise DimensionMismatchError(f"reference width {ref.width} != beta*lr width {hi_w}", axis="width")


# --- container -------------------------------------------------------------


def write_cube(cube: HSICube, path: PathLike, dataset_name: Optional[str] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "dtype": "float32",
        "byte_order": "little-endian",
        "layout": "band-sequential",
        "value_range": list(cube.value_range),
        "dataset_name": cube.name if dataset_name is None else dataset_name,
    }
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes(order="C")
    (path / DATA_NAME).write_bytes(payload)
    (path / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_meta(path: PathLike) -> dict:
    meta_path = Path(path) / META_NAME
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptHeaderError(f"missing {meta_path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptHeaderError(f"unparseable {meta_path}: {exc}") from None
    if not isinstance(meta, dict):
        raise CorruptHeaderError(f"{meta_path} is not a JSON object")
    for key in ("bands", "height", "width", "dtype"):
        if key not in meta:
            raise CorruptHeaderError(f"{meta_path} lacks key {key!r}")
    for key in ("bands", "height", "width"):
        if not isinstance(meta[key], int) or isinstance(meta[key], bool) or meta[key] < 1:
            raise CorruptHeaderError(f"{meta_path}: {key} must be a positive integer, got {meta[key]!r}")
    if meta["dtype"] != "float32":
        raise UnsupportedDtypeError(f"unsupported dtype {meta['dtype']!r}; only float32 is supported")
    if meta.get("byte_order", "little-endian") != "little-endian":
        raise UnsupportedDtypeError(f"unsupported byte order {meta['byte_order']!r}")
    if meta.get("layout", "band-sequential") != "band-sequential":
        raise CorruptHeaderError(f"unsupported layout {meta['layout']!r}")
    return meta


def read_cube(path: PathLike) -> HSICube:
    path = Path(path)
    meta = read_meta(path)
    shape = (meta["bands"], meta["height"], meta["width"])
    try:
        payload = (path / DATA_NAME).read_bytes()
    except FileNotFoundError:
        raise PayloadSizeMismatchError(f"missing payload {path / DATA_NAME}") from None
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(payload) != expected:
        raise PayloadSizeMismatchError(
            f"payload has {len(payload)} bytes, header implies {expected} for shape {shape}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    value_range = tuple(meta.get("value_range", (0.0, 1.0)))
    return HSICube(data, value_range=value_range, name=meta.get("dataset_name", ""))


def write_pan(pan: PANImage, path: PathLike, dataset_name: str = "") -> None:
    """PAN images are stored as 1-band containers."""
    write_cube(HSICube(pan.data[None]), path, dataset_name)


def read_pan(path: PathLike) -> PANImage:
    cube = read_cube(path)
    if cube.bands != 1:
        raise DimensionMismatchError(f"PAN container must have 1 band, found {cube.bands}", axis="bands")
    return PANImage(cube.data[0])
