"""Dilated 3D convolution, batch normalization, ReLU, softmax and the
weighted label-smoothed cross-entropy, with forward and backward passes.

Arrays are channel-first feature maps of shape ``(C, D, H, W)``; the batch
size is always 1. Every function is dtype-generic (float32 for training and
inference, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np


def _triple(v) -> tuple[int, int, int]:
    if np.ndim(v) == 0:
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or a 3-tuple, got {v}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] | int = 3
    dilation: tuple[int, int, int] | int = 1
    padding: tuple[int, int, int] | int | None = None
    has_bias: bool = True

    def __post_init__(self):
        kernel = _triple(self.kernel)
        dilation = _triple(self.dilation)
        if any(k not in (1, 3) for k in kernel):
            raise ValueError(f"kernel size must be 1 or 3 per axis, got {kernel}")
        if any(d < 1 for d in dilation):
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        same = tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))
        padding = same if self.padding is None else _triple(self.padding)
        if padding != same:
            raise ValueError(f"padding {padding} is not shape-preserving for kernel {kernel}, dilation {dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        object.__setattr__(self, "kernel", kernel)
        object.__setattr__(self, "dilation", dilation)
        object.__setattr__(self, "padding", padding)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)

    @property
    def n_parameters(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_channels if self.has_bias else 0)


@dataclass
class ConvWeights:
    weights: np.ndarray
    bias: np.ndarray

    def check(self, spec: ConvSpec):
        if self.weights.shape != spec.weight_shape:
            raise ValueError(f"weight shape {self.weights.shape} does not match {spec.weight_shape}")
        if self.bias.shape != (spec.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} does not match ({spec.out_channels},)")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1):
        return cls(
            np.ones(channels, dtype),
            np.zeros(channels, dtype),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
            eps,
            momentum,
        )

    def copy(self) -> "BatchNormState":
        return BatchNormState(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(), self.running_var.copy(), self.eps, self.momentum
        )


@dataclass(frozen=True)
class LossSpec:
    label_smoothing: float = 0.01
    class_weights: tuple[float, ...] = field(default=(0.5, 1.0))

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label smoothing must be in [0, 1)")
        w = tuple(float(x) for x in self.class_weights)
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError("class weights must be >= 0 and not all zero")
        object.__setattr__(self, "class_weights", w)


def conv_taps(spec: ConvSpec, spatial: tuple[int, int, int]):
    """Yield ``(kz, ky, kx, out_slices, in_slices)`` in ascending tap order.

    Taps whose footprint lies entirely in the zero padding are skipped; the
    slices select the overlap of the shifted input with the output grid.
    """
    per_axis = []
    for n, k, d, p in zip(spatial, spec.kernel, spec.dilation, spec.padding):
        axis = []
        for t in range(k):
            off = t * d - p
            lo, hi = max(0, -off), min(n, n - off)
            axis.append((t, slice(lo, hi), slice(lo + off, hi + off)) if hi > lo else (t, None, None))
        per_axis.append(axis)
    for (kz, oz, iz), (ky, oy, iy), (kx, ox, ix) in product(*per_axis):
        if oz is None or oy is None or ox is None:
            continue
        yield kz, ky, kx, (oz, oy, ox), (iz, iy, ix)


def _check_input(x: np.ndarray, spec: ConvSpec, w: ConvWeights):
    if x.ndim != 4:
        raise ValueError(f"feature map must be (C, D, H, W), got shape {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ValueError(f"input has {x.shape[0]} channels, conv expects {spec.in_channels}")
    w.check(spec)


def conv3d_forward(x, spec: ConvSpec, w: ConvWeights, out=None, scratch=None):
    """Shape-preserving dilated 3D convolution with zero padding.

    Each output voxel accumulates ``w * x`` over ``(c_in, kz, ky, kx)`` in
    ascending order, then adds the bias, so results are bitwise reproducible
    for any spatial decomposition. Passing ``out`` (C_out, D, H, W) and a
    single-channel ``scratch`` (D, H, W) runs without temporaries.
    """
    x = np.asarray(x)
    _check_input(x, spec, w)
    spatial = x.shape[1:]
    wt = w.weights
    dtype = np.result_type(x.dtype, wt.dtype)
    if out is None:
        out = np.zeros((spec.out_channels, *spatial), dtype=dtype)
    else:
        if out.shape != (spec.out_channels, *spatial):
            raise ValueError(f"output buffer shape {out.shape} does not match {(spec.out_channels, *spatial)}")
        out[...] = 0
    taps = list(conv_taps(spec, spatial))

    if scratch is None:
        for c in range(spec.in_channels):
            xc = x[c]
            for kz, ky, kx, osl, isl in taps:
                out[(slice(None), *osl)] += wt[:, c, kz, ky, kx, None, None, None] * xc[isl]
        if spec.has_bias:
            out += w.bias[:, None, None, None].astype(dtype, copy=False)
        return out

    for o in range(spec.out_channels):
        oc = out[o]
        for c in range(spec.in_channels):
            xc = x[c]
            for kz, ky, kx, osl, isl in taps:
                tmp = scratch[osl]
                np.multiply(wt[o, c, kz, ky, kx], xc[isl], out=tmp)
                np.add(oc[osl], tmp, out=oc[osl])
        if spec.has_bias:
            np.add(oc, w.bias[o], out=oc)
    return out


def conv3d_backward(x, spec: ConvSpec, w: ConvWeights, grad_out):
    """Gradients of ``sum(grad_out * conv3d_forward(x))``.

    Returns ``(grad_x, grad_w, grad_bias)``.
    """
    x = np.asarray(x)
    _check_input(x, spec, w)
    if grad_out.shape != (spec.out_channels, *x.shape[1:]):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output shape")
    grad_x = np.zeros_like(x, dtype=np.result_type(x, grad_out))
    grad_w = np.zeros(spec.weight_shape, dtype=np.result_type(x, grad_out))
    axes = ([1, 2, 3], [1, 2, 3])
    for kz, ky, kx, osl, isl in conv_taps(spec, x.shape[1:]):
        g = grad_out[(slice(None), *osl)]
        grad_w[:, :, kz, ky, kx] = np.tensordot(g, x[(slice(None), *isl)], axes=axes)
        grad_x[(slice(None), *isl)] += np.tensordot(w.weights[:, :, kz, ky, kx], g, axes=(0, 0))
    grad_b = grad_out.sum(axis=(1, 2, 3)) if spec.has_bias else np.zeros(spec.out_channels, grad_w.dtype)
    return grad_x, grad_w, grad_b


def _bshape(v):
    return v[:, None, None, None]


def batchnorm_stats(x):
    mean = x.mean(axis=(1, 2, 3))
    var = ((x - _bshape(mean)) ** 2).mean(axis=(1, 2, 3))
    return mean, var


def batchnorm_forward(x, bn: BatchNormState, mode: str = "eval", update_stats: bool = True, out=None):
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` per channel.

    In ``train`` mode the statistics are those of ``x`` over (D, H, W) and the
    running estimates are updated in place (unbiased variance, as is usual);
    ``eval`` uses the running estimates. ``out`` may alias ``x`` in eval mode.
    """
    if x.shape[0] != bn.gamma.shape[0]:
        raise ValueError(f"input has {x.shape[0]} channels, batchnorm expects {bn.gamma.shape[0]}")
    if mode == "train":
        mean, var = batchnorm_stats(x)
        if update_stats:
            n = x[0].size
            unbiased = var * (n / (n - 1)) if n > 1 else var
            m = bn.momentum
            bn.running_mean[...] = (1 - m) * bn.running_mean + m * mean
            bn.running_var[...] = (1 - m) * bn.running_var + m * unbiased
    elif mode == "eval":
        mean, var = bn.running_mean, bn.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = x.dtype
    scale = (bn.gamma / np.sqrt(var + bn.eps)).astype(dtype, copy=False)
    if mode == "train" and out is None:
        return (x - _bshape(mean.astype(dtype, copy=False))) * _bshape(scale) + _bshape(bn.beta.astype(dtype, copy=False))
    shift = (bn.beta - mean * scale).astype(dtype, copy=False)
    if out is None:
        return x * _bshape(scale) + _bshape(shift)
    for ch in range(x.shape[0]):
        np.multiply(x[ch], scale[ch], out=out[ch])
        np.add(out[ch], shift[ch], out=out[ch])
    return out


def batchnorm_backward(x, bn: BatchNormState, grad_out, mode: str = "train"):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    if mode == "train":
        mean, var = batchnorm_stats(x)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - _bshape(mean)) * _bshape(inv_std)
    grad_beta = grad_out.sum(axis=(1, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(1, 2, 3))
    if mode != "train":
        return grad_out * _bshape(bn.gamma * inv_std), grad_gamma, grad_beta
    n = x[0].size
    grad_x = _bshape(bn.gamma * inv_std) * (grad_out - _bshape(grad_beta / n) - xhat * _bshape(grad_gamma / n))
    return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta


ACTIVATIONS = ("relu",)


def activation(x, kind: str = "relu", out=None):
    if kind != "relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return np.maximum(x, 0, out=out)


def activation_backward(x, grad_out, kind: str = "relu"):
    """Gradient through the activation; the subgradient at 0 is 0."""
    if kind != "relu":
        raise ValueError(f"unsupported activation {kind!r}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def log_softmax_channels(x):
    shifted = x - x.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def softmax_channels(x):
    if x.shape[0] < 2:
        raise ValueError("softmax needs at least 2 channels")
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def argmax_channels(x) -> np.ndarray:
    """Per-voxel class index; ties go to the lower index."""
    if x.shape[0] < 2:
        raise ValueError("argmax needs at least 2 channels")
    return np.argmax(x, axis=0).astype(np.uint8)


def weighted_smoothed_ce(logits, target, spec: LossSpec):
    """Class-weighted cross-entropy against label-smoothed targets.

    The smoothed target is ``(1 - eps) * onehot + eps / C``; each voxel's loss
    is scaled by the weight of its true class and the total is divided by the
    sum of applied weights. Returns ``(loss, grad_logits)``.
    """
    n_classes = logits.shape[0]
    if len(spec.class_weights) != n_classes:
        raise ValueError(f"{len(spec.class_weights)} class weights for {n_classes} classes")
    target = np.asarray(target)
    if target.shape != logits.shape[1:]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape[1:]}")
    if target.size and (target.min() < 0 or target.max() >= n_classes):
        raise ValueError(f"target values must lie in [0, {n_classes - 1}]")
    target = target.astype(np.intp, copy=False)
    eps = spec.label_smoothing
    logp = log_softmax_channels(logits)
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, target[None], 1.0, axis=0)
    y = (1 - eps) * onehot + eps / n_classes
    wv = np.asarray(spec.class_weights, dtype=logits.dtype)[target]
    total_w = wv.sum()
    if total_w == 0:
        return 0.0, np.zeros_like(logits)
    per_voxel = -wv * (y * logp).sum(axis=0)
    loss = float(per_voxel.sum() / total_w)
    grad = (np.exp(logp) - y) * (wv / total_w)[None]
    return loss, grad.astype(logits.dtype, copy=False)
