"""Volumetric data model and conforming to the canonical 1 mm grid."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CANONICAL_SHAPE = (256, 256, 256)
CANONICAL_SPACING = (1.0, 1.0, 1.0)

DTYPE_TAGS = {"u8": np.uint8, "i16": np.int16, "f32": np.float32}


class DegenerateVolumeWarning(UserWarning):
    """Raised (as a warning) when a constant volume cannot be min-max rescaled."""


def _tag_for(dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in DTYPE_TAGS.items():
        if dtype == dt:
            return tag
    return "f32"


def spacing_from_affine(affine: np.ndarray) -> tuple[float, float, float]:
    return tuple(float(s) for s in np.linalg.norm(np.asarray(affine)[:3, :3], axis=0))


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with its voxel-to-world affine.

    ``data`` is indexed ``[i, j, k]`` in voxel order; ``affine`` maps
    ``(i, j, k, 1)`` to world millimetres. ``spacing`` defaults to the column
    norms of the affine.
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    spacing: tuple[float, float, float] | None = None
    dtype_tag: str | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive extents, got shape {data.shape}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0, 0, 0, 1)")
        spacing = self.spacing if self.spacing is not None else spacing_from_affine(affine)
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {spacing}")
        tag = self.dtype_tag or _tag_for(data.dtype)
        if tag not in DTYPE_TAGS:
            raise ValueError(f"unknown dtype tag {tag!r}")
        data = data.view()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dtype_tag", tag)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def as_float32(self) -> np.ndarray:
        return np.asarray(self.data, dtype=np.float32)


@dataclass(frozen=True, eq=False)
class LabelMask(Volume):
    """Binary lesion mask: 0 is background, 1 is lesion."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind == "u":
            bad = data.size and data.max() > 1
        else:
            bad = data.size and not np.isin(data, (0, 1)).all()
        if bad:
            raise ValueError("label mask values must be in {0, 1}")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))
        object.__setattr__(self, "dtype_tag", "u8")
        super().__post_init__()


def lesion_volume(mask: LabelMask) -> int:
    """Number of voxels labelled as lesion."""
    return int(np.count_nonzero(mask.data == 1))


def rescale_unit(data: np.ndarray) -> tuple[np.ndarray, bool]:
    """Global min-max rescale to [0, 1]. Returns (data, degenerate)."""
    data = np.asarray(data, dtype=np.float32)
    lo = data.min()
    hi = data.max()
    if not hi > lo:
        return np.zeros(data.shape, dtype=np.float32), True
    out = (data - lo) / (hi - lo)
    # guard the endpoints against rounding in the division
    out[data == hi] = 1.0
    return out.astype(np.float32, copy=False), False


def conformed_affine(affine: np.ndarray, in_shape, target_shape, target_spacing) -> np.ndarray:
    """Affine of the target grid: same orientation and same world centre as the input."""
    affine = np.asarray(affine, dtype=np.float64)
    direction = affine[:3, :3] / np.linalg.norm(affine[:3, :3], axis=0)
    out = np.eye(4)
    out[:3, :3] = direction * np.asarray(target_spacing, dtype=np.float64)
    in_center = (np.asarray(in_shape, dtype=np.float64) - 1) / 2
    out_center = (np.asarray(target_shape, dtype=np.float64) - 1) / 2
    world_center = affine[:3, :3] @ in_center + affine[:3, 3]
    out[:3, 3] = world_center - out[:3, :3] @ out_center
    return out


def conform(
    v: Volume,
    target_shape=CANONICAL_SHAPE,
    target_spacing_mm=CANONICAL_SPACING,
    interp: str = "trilinear",
    rescale: bool = True,
) -> Volume:
    """Resample ``v`` onto a grid of ``target_shape`` at ``target_spacing_mm``.

    The target grid keeps the input orientation and world-space centre; samples
    falling outside the input field of view read as 0. With ``rescale`` the
    result is min-max mapped to [0, 1]; a constant volume yields zeros and a
    :class:`DegenerateVolumeWarning`. Use ``interp="nearest"`` (and
    ``rescale=False``) for label masks.
    """
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"interp must be 'nearest' or 'trilinear', got {interp!r}")
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or any(s < 1 for s in target_shape):
        raise ValueError(f"target_shape must be three positive ints, got {target_shape}")
    target_spacing = tuple(float(s) for s in target_spacing_mm)
    if any(s <= 0 for s in target_spacing):
        raise ValueError("target spacing must be positive")
    if abs(np.linalg.det(v.affine[:3, :3])) < 1e-12:
        raise ValueError("input affine is not invertible")

    out_affine = conformed_affine(v.affine, v.shape, target_shape, target_spacing)
    src = v.as_float32()
    if v.shape == target_shape and np.allclose(out_affine, v.affine, rtol=0, atol=1e-9):
        out_affine = v.affine
        resampled = src
    else:
        # output voxel -> input voxel
        mapping = np.linalg.inv(v.affine) @ out_affine
        resampled = ndimage.affine_transform(
            src,
            mapping[:3, :3],
            offset=mapping[:3, 3],
            output_shape=target_shape,
            order=0 if interp == "nearest" else 1,
            mode="grid-constant",
            cval=0.0,
            prefilter=False,
            output=np.float32,
        )

    if rescale:
        # a constant input has no contrast to rescale, even if padding adds zeros
        if src.size and src.min() == src.max():
            resampled = np.zeros(target_shape, dtype=np.float32)
        resampled, degenerate = rescale_unit(resampled)
        if degenerate:
            warnings.warn("constant volume: rescale undefined, returning zeros", DegenerateVolumeWarning, stacklevel=2)
    cls = LabelMask if isinstance(v, LabelMask) else Volume
    if cls is LabelMask:
        resampled = np.rint(resampled).astype(np.uint8)
        return LabelMask(resampled, out_affine, target_spacing)
    return Volume(np.ascontiguousarray(resampled, dtype=np.float32), out_affine, target_spacing, "f32")


def conform_labels(m: LabelMask, target_shape=CANONICAL_SHAPE, target_spacing_mm=CANONICAL_SPACING) -> LabelMask:
    return conform(m, target_shape, target_spacing_mm, interp="nearest", rescale=False)
