"""Whole-volume inference with explicit memory planning.

Because MeshNet has no skip connections, layer ``i + 1`` only needs the
output of layer ``i``: two activation buffers used ping-pong suffice for the
whole network. When even that does not fit the budget, the volume is cut into
cubic tiles, each extended by a halo equal to the receptive-field radius so
that tile logits are exactly the whole-volume logits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .meshnet import MeshNetConfig, Model, receptive_field
from .voxel import LabelMask, Volume

F32 = 4


@dataclass(frozen=True)
class MemoryPlan:
    strategy: str  # "whole_volume" | "tiled"
    buffer_bytes: int
    n_buffers: int
    logits_bytes: int
    workspace_bytes: int
    est_peak_bytes: int
    input_shape: tuple[int, int, int]
    tile_shape: tuple[int, int, int] | None = None
    halo: int = 0
    workers: int = 1
    keep_logits: bool = False

    def describe(self) -> str:
        lines = [
            f"strategy:        {self.strategy}",
            f"buffer bytes:    {self.buffer_bytes:,} x {self.n_buffers}",
            f"logits bytes:    {self.logits_bytes:,}",
            f"workspace bytes: {self.workspace_bytes:,}",
            f"est. peak bytes: {self.est_peak_bytes:,}",
        ]
        if self.strategy == "tiled":
            lines.insert(1, f"tile:            {self.tile_shape} + halo {self.halo}")
        return "\n".join(lines)


class BudgetTooSmallError(ValueError):
    def __init__(self, minimum: int, budget: int):
        super().__init__(f"memory budget {budget:,} bytes is too small; minimum feasible budget is {minimum:,} bytes")
        self.minimum = minimum
        self.budget = budget


def _whole_volume_plan(config: MeshNetConfig, shape, keep_logits=True) -> MemoryPlan:
    n = int(np.prod(shape))
    buf = config.channels * n * F32
    logits = config.n_classes * n * F32
    # single-channel scratch, float32 copy of the input, uint8 labels, and one
    # int64 argmax slab
    workspace = n * F32 + n * F32 + n + shape[1] * shape[2] * 8
    return MemoryPlan("whole_volume", buf, 2, logits, workspace, 2 * buf + logits + workspace, tuple(shape),
                      keep_logits=keep_logits)


def _tile_cost(config: MeshNetConfig, shape, padded: int, keep_logits: bool, workers: int) -> tuple[int, int, int, int]:
    """(buffer, full-logits, workspace, peak) bytes for tiles of padded edge ``padded``."""
    n_full = int(np.prod(shape))
    dims = [min(padded, n) for n in shape]
    n_tile = int(np.prod(dims))
    buf = config.channels * n_tile * F32
    # per worker: tile logits, single-channel scratch, one int64 argmax slab
    per_worker = config.n_classes * n_tile * F32 + n_tile * F32 + dims[1] * dims[2] * 8
    full_logits = config.n_classes * n_full * F32 if keep_logits else 0
    # float32 copy of the input plus the uint8 label volume
    workspace = workers * per_worker + n_full * F32 + n_full
    peak = workers * 2 * buf + full_logits + workspace
    return buf, full_logits, workspace, peak


def plan(config: MeshNetConfig, input_shape, budget_bytes: int, workers: int = 1, keep_logits: bool = False) -> MemoryPlan:
    """Choose whole-volume or halo-tiled execution to fit ``budget_bytes``.

    The tiled plan picks the largest cubic tile whose padded extent
    (tile + 2 * halo, halo = receptive-field radius) keeps the estimated peak
    within budget.
    """
    if budget_bytes <= 0:
        raise ValueError("budget must be positive")
    shape = tuple(int(s) for s in input_shape)
    whole = _whole_volume_plan(config, shape, keep_logits=True)
    if whole.est_peak_bytes <= budget_bytes:
        return whole
    halo = (receptive_field(config) - 1) // 2
    best = None
    for t in range(max(shape), 0, -1):
        buf, logits, workspace, peak = _tile_cost(config, shape, t + 2 * halo, keep_logits, workers)
        if peak <= budget_bytes:
            best = MemoryPlan("tiled", buf, 2 * workers, logits, workspace, peak, shape, (t, t, t), halo, workers,
                              keep_logits)
            break
    if best is None:
        minimum = _tile_cost(config, shape, 1 + 2 * halo, keep_logits, workers)[3]
        raise BudgetTooSmallError(minimum, budget_bytes)
    return best


def _run_layers(model: Model, x: np.ndarray, buffers, scratch, logits_out):
    """Layer-by-layer ping-pong execution. Returns the logits array."""
    src = x
    n = len(model.layers)
    for i, layer in enumerate(model.layers):
        dst = logits_out if i == n - 1 else buffers[i % 2]
        K.conv3d_forward(src, layer.spec, layer.conv, out=dst, scratch=scratch)
        if layer.bn is not None:
            K.batchnorm_forward(dst, layer.bn, "eval", out=dst)
        if layer.activation:
            K.activation(dst, layer.activation, out=dst)
        src = dst
    return logits_out


def _labels_into(logits: np.ndarray, out: np.ndarray):
    for z in range(logits.shape[1]):
        out[z] = np.argmax(logits[:, z], axis=0)


def _check_input(model: Model, v: Volume):
    expected = model.config.input_shape
    if expected is not None and tuple(v.shape) != tuple(expected):
        raise ValueError(f"input shape {v.shape} does not match the model grid {expected}; conform the volume first")


def _as_input(v: Volume) -> np.ndarray:
    data = v.data if v.data.dtype == np.float32 else v.data.astype(np.float32)
    return data[None]


def infer(model: Model, v: Volume, plan: MemoryPlan | None = None, return_logits: bool = False, workers: int | None = None):
    """Segment ``v``. Returns a LabelMask, or ``(LabelMask, logits)``.

    The model is run in eval mode (batchnorm uses running statistics); a
    folded model skips the batchnorm step. Tiled and whole-volume plans give
    bitwise-identical logits.
    """
    _check_input(model, v)
    if plan is None:
        plan = _whole_volume_plan(model.config, v.shape)
    if tuple(plan.input_shape) != tuple(v.shape):
        raise ValueError(f"plan was made for shape {plan.input_shape}, volume has {v.shape}")
    model = model.astype(np.float32) if model.layers[0].conv.weights.dtype != np.float32 else model
    x = _as_input(v)
    shape = v.shape
    labels = np.empty(shape, dtype=np.uint8)

    if plan.strategy == "whole_volume":
        buffers = [np.empty((model.config.channels, *shape), np.float32) for _ in range(2)]
        scratch = np.empty(shape, np.float32)
        logits = np.empty((model.config.n_classes, *shape), np.float32)
        _run_layers(model, x, buffers, scratch, logits)
        del buffers, scratch
        _labels_into(logits, labels)
        mask = LabelMask(labels, v.affine, v.spacing)
        return (mask, logits) if return_logits else mask

    full_logits = np.empty((model.config.n_classes, *shape), np.float32) if return_logits else None
    tiles = list(iter_tiles(shape, plan.tile_shape, plan.halo))

    def run_tile(tile):
        core, region = tile
        sub = x[(slice(None), *region)]
        sub_shape = sub.shape[1:]
        buffers = [np.empty((model.config.channels, *sub_shape), np.float32) for _ in range(2)]
        scratch = np.empty(sub_shape, np.float32)
        tile_logits = np.empty((model.config.n_classes, *sub_shape), np.float32)
        _run_layers(model, sub, buffers, scratch, tile_logits)
        inner = tuple(slice(c.start - r.start, c.stop - r.start) for c, r in zip(core, region))
        core_logits = tile_logits[(slice(None), *inner)]
        _labels_into(core_logits, labels[core])
        if full_logits is not None:
            full_logits[(slice(None), *core)] = core_logits

    n_workers = workers or plan.workers
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            list(pool.map(run_tile, tiles))
    else:
        for tile in tiles:
            run_tile(tile)
    mask = LabelMask(labels, v.affine, v.spacing)
    return (mask, full_logits) if return_logits else mask


def iter_tiles(shape, tile_shape, halo: int):
    """Yield ``(core, region)`` slice triples covering ``shape``.

    ``core`` is the block whose outputs a tile owns; ``region`` is the core
    grown by ``halo`` and clipped to the volume, so zero padding only ever
    happens at true volume borders.
    """
    ranges = []
    for n, t in zip(shape, tile_shape):
        ranges.append([(s, min(s + t, n)) for s in range(0, n, t)])
    for (z0, z1) in ranges[0]:
        for (y0, y1) in ranges[1]:
            for (x0, x1) in ranges[2]:
                core = (slice(z0, z1), slice(y0, y1), slice(x0, x1))
                region = tuple(
                    slice(max(0, lo - halo), min(n, hi + halo)) for (lo, hi), n in zip(((z0, z1), (y0, y1), (x0, x1)), shape)
                )
                yield core, region
