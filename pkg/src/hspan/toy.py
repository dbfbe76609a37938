"""Deterministic synthetic scenes: Gaussian blobs and rectangles of a few
materials, each with its own spectrum. Used by the test suite and the
``toygen`` command so that everything runs without external data.
"""

from __future__ import annotations

import numpy as np

from .datamodel import HSICube

TOY_BANDS = 4
TOY_TILE = 32


def _spectra(rng: np.random.Generator, materials: int, bands: int) -> np.ndarray:
    # smooth-ish spectra: random walk clipped to a reflectance-like range
    base = rng.uniform(0.1, 0.9, size=(materials, 1))
    steps = rng.normal(0.0, 0.2, size=(materials, bands)).cumsum(axis=1)
    return np.clip(base + steps - steps.mean(axis=1, keepdims=True), 0.05, 0.95)


def toy_tile(rng: np.random.Generator, spectra: np.ndarray, size: int = TOY_TILE) -> np.ndarray:
    """One (bands, size, size) tile mixing the rows of ``spectra`` (materials x bands)."""
    materials = spectra.shape[0]
    abundance = np.zeros((materials, size, size))
    abundance[rng.integers(0, materials)] = 1.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(rng.integers(2, 5)):
        m = rng.integers(0, materials)
        cy, cx = rng.uniform(0, size, 2)
        s = rng.uniform(size / 16, size / 5)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        abundance *= 1.0 - blob
        abundance[m] += blob
    for _ in range(rng.integers(2, 6)):
        m = rng.integers(0, materials)
        h, w = rng.integers(2, size // 2, 2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        abundance[:, r : r + h, c : c + w] = 0.0
        abundance[m, r : r + h, c : c + w] = 1.0
    cube = np.einsum("ml,mhw->lhw", spectra, abundance)
    return np.clip(cube, 0.0, 1.0)


def toy_scene(
    seed: int = 0, rows: int = 4, cols: int = 4, bands: int = TOY_BANDS, tile: int = TOY_TILE, materials: int = 6
) -> HSICube:
    """A (bands, rows*tile, cols*tile) scene of independent tiles sharing one material library."""
    rng = np.random.default_rng(seed)
    # one library per scene, like a real acquisition
    spectra = _spectra(rng, materials, bands)
    scene = np.zeros((bands, rows * tile, cols * tile))
    for r in range(rows):
        for c in range(cols):
            scene[:, r * tile : (r + 1) * tile, c * tile : (c + 1) * tile] = toy_tile(rng, spectra, tile)
    return HSICube(scene.astype(np.float32), name="toy")
