"""Synthetic lesion phantoms: bright ellipsoids on a smooth textured background."""

from __future__ import annotations

from importlib import resources

import numpy as np
from scipy import ndimage

from .voxel import LabelMask, Volume, rescale_unit


def ellipsoid_mask(shape, center, radii, rotation=None) -> np.ndarray:
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1).T - np.asarray(center, dtype=np.float64)
    if rotation is not None:
        grid = grid @ rotation
    inside = ((grid / np.asarray(radii, dtype=np.float64)) ** 2).sum(axis=1) <= 1.0
    return inside.reshape(shape)


def sphere_mask(shape, center, radius) -> np.ndarray:
    return ellipsoid_mask(shape, center, (radius,) * 3)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def make_phantom(shape=(24, 24, 24), rng=None, n_lesions=(1, 2), radii=(4.0, 8.0), contrast: float = 0.45,
                 noise: float = 0.03) -> tuple[Volume, LabelMask]:
    """One phantom volume (rescaled to [0, 1]) and its lesion mask."""
    rng = np.random.default_rng(rng)
    shape = tuple(shape)
    texture = ndimage.gaussian_filter(rng.normal(size=shape), sigma=2.0)
    texture = 0.3 + 0.1 * texture / (np.abs(texture).max() + 1e-12)
    mask = np.zeros(shape, dtype=bool)
    for _ in range(rng.integers(n_lesions[0], n_lesions[1] + 1)):
        r = rng.uniform(*radii, size=3)
        margin = np.ceil(r.max()) + 1
        center = [rng.uniform(margin, n - 1 - margin) for n in shape]
        mask |= ellipsoid_mask(shape, center, r, _random_rotation(rng))
    data = texture + contrast * mask + noise * rng.normal(size=shape)
    data, _ = rescale_unit(data)
    return Volume(data), LabelMask(mask.astype(np.uint8))


def make_dataset(n: int, shape=(24, 24, 24), seed: int = 0, **kwargs) -> list[tuple[Volume, LabelMask]]:
    rng = np.random.default_rng(seed)
    return [make_phantom(shape, rng, **kwargs) for _ in range(n)]


def toy_model_path():
    """Bundled MNET1 file: X=5, dilations capped at 4, trained on 24^3 phantoms."""
    return resources.files("meshvox") / "data" / "toy_model.mnet"
