"""MeshNet: a stack of shape-preserving dilated 3x3x3 convolutions followed by
a 1x1x1 classifier, with no down-sampling and no skip connections."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels as K
from .kernels import BatchNormState, ConvSpec, ConvWeights

CANONICAL_DILATIONS = (1, 2, 4, 8, 16, 16, 8, 4, 2)
ORIGINAL_DILATIONS = (1, 1, 2, 4, 8, 16, 1, 1)  # 2017 MeshNet; documented only

ROLES = ("conv_w", "conv_b", "bn_gamma", "bn_beta", "bn_mean", "bn_var")
TRAINABLE_ROLES = ("conv_w", "conv_b", "bn_gamma", "bn_beta")


@dataclass(frozen=True)
class MeshNetConfig:
    """Architecture of a MeshNet.

    ``dilations`` lists the body layers (each a 3x3x3 conv + BN + activation);
    the 1x1x1 classifier is appended implicitly. ``strict`` requires the
    9-layer body; turn it off for ad hoc stacks.
    """

    channels: int
    dilations: tuple[int, ...] = CANONICAL_DILATIONS
    n_classes: int = 2
    activation: str = "relu"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    input_shape: tuple[int, int, int] | None = None
    strict: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.input_shape is not None:
            object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be non-empty and >= 1, got {self.dilations}")
        if self.strict and len(self.dilations) != 9:
            raise ValueError(f"expected 9 body dilations, got {len(self.dilations)}")
        if self.activation not in K.ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0 < self.bn_momentum < 1 or self.bn_eps < 0:
            raise ValueError("bn momentum must be in (0, 1) and eps >= 0")

    def conv_specs(self) -> list[ConvSpec]:
        specs = []
        c_in = 1
        for d in self.dilations:
            specs.append(ConvSpec(c_in, self.channels, 3, d))
            c_in = self.channels
        specs.append(ConvSpec(c_in, self.n_classes, 1, 1))
        return specs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeshNetConfig":
        d = dict(d)
        if d.get("input_shape") is not None:
            d["input_shape"] = tuple(d["input_shape"])
        d["dilations"] = tuple(d["dilations"])
        return cls(**d)


def capped_dilations(cap: int, base=CANONICAL_DILATIONS) -> tuple[int, ...]:
    """The canonical up-down schedule with every dilation clipped at ``cap``."""
    return tuple(min(d, cap) for d in base)


@dataclass
class Layer:
    spec: ConvSpec
    conv: ConvWeights
    bn: BatchNormState | None = None
    activation: str | None = None


@dataclass
class WeightSet:
    """Ordered ``(layer_id, role, array)`` triples."""

    tensors: list[tuple[int, str, np.ndarray]] = field(default_factory=list)

    @property
    def n_parameters(self) -> int:
        return sum(a.size for _, role, a in self.tensors if role in TRAINABLE_ROLES)

    def get(self, layer_id: int, role: str) -> np.ndarray:
        for i, r, a in self.tensors:
            if i == layer_id and r == role:
                return a
        raise KeyError((layer_id, role))

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)


class Model:
    """A built MeshNet: a list of layers plus its config."""

    def __init__(self, config: MeshNetConfig, layers: list[Layer], folded: bool = False):
        self.config = config
        self.layers = layers
        self.folded = folded

    @property
    def n_parameters(self) -> int:
        total = 0
        for layer in self.layers:
            total += layer.spec.n_parameters
            if layer.bn is not None:
                total += 2 * layer.bn.gamma.size
        return total

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.config)

    def weight_set(self) -> WeightSet:
        ws = WeightSet()
        for i, layer in enumerate(self.layers):
            ws.tensors.append((i, "conv_w", layer.conv.weights))
            ws.tensors.append((i, "conv_b", layer.conv.bias))
            if layer.bn is not None:
                ws.tensors.append((i, "bn_gamma", layer.bn.gamma))
                ws.tensors.append((i, "bn_beta", layer.bn.beta))
                ws.tensors.append((i, "bn_mean", layer.bn.running_mean))
                ws.tensors.append((i, "bn_var", layer.bn.running_var))
        return ws

    def astype(self, dtype) -> "Model":
        layers = []
        for layer in self.layers:
            conv = ConvWeights(layer.conv.weights.astype(dtype), layer.conv.bias.astype(dtype))
            bn = None
            if layer.bn is not None:
                b = layer.bn
                bn = BatchNormState(
                    b.gamma.astype(dtype), b.beta.astype(dtype), b.running_mean.astype(dtype),
                    b.running_var.astype(dtype), b.eps, b.momentum,
                )
            layers.append(Layer(layer.spec, conv, bn, layer.activation))
        return Model(self.config, layers, self.folded)

    def copy(self) -> "Model":
        return self.astype(self.layers[0].conv.weights.dtype)

    def forward(self, x, mode: str = "eval", update_stats: bool = False, keep: bool = False):
        """Run the network on a (D, H, W) volume or a (1, D, H, W) map.

        Returns the logits, or ``(logits, cache)`` with ``keep=True``; the cache
        holds each layer's input, pre-BN and pre-activation maps for
        :meth:`backward`.
        """
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        dtype = self.layers[0].conv.weights.dtype
        h = x.astype(dtype, copy=False)
        cache = []
        for layer in self.layers:
            z = K.conv3d_forward(h, layer.spec, layer.conv)
            a = z
            if layer.bn is not None:
                a = K.batchnorm_forward(z, layer.bn, mode, update_stats=update_stats)
            out = K.activation(a, layer.activation) if layer.activation else a
            if keep:
                cache.append((h, z, a))
            h = out
        return (h, cache) if keep else h

    def backward(self, cache, grad_logits, mode: str = "train") -> list[dict[str, np.ndarray]]:
        """Parameter gradients given the forward cache, one dict per layer."""
        grads: list[dict[str, np.ndarray]] = [None] * len(self.layers)
        g = grad_logits
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            h, z, a = cache[i]
            if layer.activation:
                g = K.activation_backward(a, g, layer.activation)
            entry = {}
            if layer.bn is not None:
                g, entry["bn_gamma"], entry["bn_beta"] = K.batchnorm_backward(z, layer.bn, g, mode)
            g, entry["conv_w"], entry["conv_b"] = K.conv3d_backward(h, layer.spec, layer.conv, g)
            grads[i] = entry
        return grads

    def parameters(self) -> list[tuple[int, str, np.ndarray]]:
        """Trainable arrays, for in-place optimiser updates."""
        return [t for t in self.weight_set() if t[1] in TRAINABLE_ROLES]


def build(config: MeshNetConfig, dtype=np.float32) -> Model:
    """Model with identity batchnorm and zero conv weights (see init_weights)."""
    layers = []
    specs = config.conv_specs()
    for i, spec in enumerate(specs):
        conv = ConvWeights(np.zeros(spec.weight_shape, dtype), np.zeros(spec.out_channels, dtype))
        if i < len(specs) - 1:
            bn = BatchNormState.identity(spec.out_channels, dtype, config.bn_eps, config.bn_momentum)
            layers.append(Layer(spec, conv, bn, config.activation))
        else:
            layers.append(Layer(spec, conv))
    return Model(config, layers)


def count_parameters(config: MeshNetConfig) -> int:
    """Trainable parameters: conv weights and biases plus BN scale and shift."""
    total = 0
    for spec in config.conv_specs()[:-1]:
        total += spec.n_parameters + 2 * spec.out_channels
    return total + config.conv_specs()[-1].n_parameters


def receptive_field_of(kernels, dilations) -> int:
    """Receptive field of a stride-1 conv stack: ``1 + sum((k - 1) * d)``."""
    return 1 + sum((k - 1) * d for k, d in zip(kernels, dilations))


def receptive_field(config: MeshNetConfig) -> int:
    specs = config.conv_specs()
    return receptive_field_of([s.kernel[0] for s in specs], [s.dilation[0] for s in specs])


def init_weights(config: MeshNetConfig, seed: int, dtype=np.float32, a: float = math.sqrt(5)) -> WeightSet:
    """Seeded Kaiming-uniform conv weights, zero biases, identity batchnorm.

    Weights are drawn from ``U(-b, b)`` with ``b = sqrt(6 / ((1 + a^2) fan_in))``;
    the default ``a = sqrt(5)`` gives ``b = 1 / sqrt(fan_in)`` (the usual conv
    default), ``a = 0`` gives the ReLU-gain variant.
    """
    rng = np.random.default_rng(seed)
    ws = WeightSet()
    specs = config.conv_specs()
    for i, spec in enumerate(specs):
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        bound = math.sqrt(6.0 / ((1.0 + a * a) * fan_in))
        ws.tensors.append((i, "conv_w", rng.uniform(-bound, bound, spec.weight_shape).astype(dtype)))
        ws.tensors.append((i, "conv_b", np.zeros(spec.out_channels, dtype)))
        if i < len(specs) - 1:
            c = spec.out_channels
            ws.tensors.append((i, "bn_gamma", np.ones(c, dtype)))
            ws.tensors.append((i, "bn_beta", np.zeros(c, dtype)))
            ws.tensors.append((i, "bn_mean", np.zeros(c, dtype)))
            ws.tensors.append((i, "bn_var", np.ones(c, dtype)))
    return ws


def from_weights(config: MeshNetConfig, ws: WeightSet) -> Model:
    """Assemble a model from a weight set; folded if it has no BN tensors."""
    specs = config.conv_specs()
    has_bn = any(role.startswith("bn_") for _, role, _ in ws)
    layers = []
    for i, spec in enumerate(specs):
        conv = ConvWeights(ws.get(i, "conv_w"), ws.get(i, "conv_b"))
        conv.check(spec)
        body = i < len(specs) - 1
        bn = None
        if body and has_bn:
            bn = BatchNormState(
                ws.get(i, "bn_gamma"), ws.get(i, "bn_beta"), ws.get(i, "bn_mean"), ws.get(i, "bn_var"),
                config.bn_eps, config.bn_momentum,
            )
        layers.append(Layer(spec, conv, bn, config.activation if body else None))
    return Model(config, layers, folded=not has_bn)


def init_model(config: MeshNetConfig, seed: int, dtype=np.float32) -> Model:
    return from_weights(config, init_weights(config, seed, dtype))


def fold_batchnorm(model: Model) -> Model:
    """Absorb each eval-mode batchnorm into the preceding convolution."""
    layers = []
    for layer in model.layers:
        if layer.bn is None:
            layers.append(Layer(layer.spec, ConvWeights(layer.conv.weights.copy(), layer.conv.bias.copy()), None, layer.activation))
            continue
        bn = layer.bn
        dtype = layer.conv.weights.dtype
        scale = bn.gamma.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
        w = (layer.conv.weights * scale[:, None, None, None, None]).astype(dtype)
        b = (bn.beta + (layer.conv.bias - bn.running_mean) * scale).astype(dtype)
        layers.append(Layer(layer.spec, ConvWeights(w, b), None, layer.activation))
    return Model(model.config, layers, folded=True)


# -- MNET1 weight files ------------------------------------------------------

MAGIC = b"MNET1"
ALIGN = 64


class WeightFileError(ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class ShapeMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def save_weights(ws: WeightSet, config: MeshNetConfig, path) -> None:
    """Write an MNET1 file.

    Layout: ``MNET1``, u32 LE header length, UTF-8 JSON header (config and an
    ordered manifest of name, role, shape, dtype, offset, length), then raw
    little-endian float32 tensors, each at a 64-byte aligned absolute offset.
    """
    manifest = []
    arrays = []
    for layer_id, role, arr in ws:
        a = np.ascontiguousarray(arr, dtype="<f4")
        arrays.append(a)
        manifest.append(
            {"name": f"layer{layer_id}.{role}", "layer": layer_id, "role": role, "shape": list(a.shape),
             "dtype": "f32", "offset": 0, "length": a.nbytes}
        )

    def header_bytes():
        return json.dumps({"format": "MNET1", "config": config.to_dict(), "tensors": manifest}).encode("utf-8")

    # offsets depend on header length, which depends on offsets: iterate to a fixed point
    for _ in range(10):
        pos = _align(len(MAGIC) + 4 + len(header_bytes()))
        changed = False
        for entry in manifest:
            if entry["offset"] != pos:
                entry["offset"] = pos
                changed = True
            pos = _align(pos + entry["length"])
        if not changed:
            break
    header = header_bytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for entry, a in zip(manifest, arrays):
            f.write(b"\x00" * (entry["offset"] - f.tell()))
            f.write(a.tobytes())


def load_weights(path) -> tuple[MeshNetConfig, WeightSet]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not a meshvox weight file")
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedFileError("truncated weight file: missing header length")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise TruncatedFileError("truncated weight file: header incomplete")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"corrupt weight file header: {exc}") from exc
    config = MeshNetConfig.from_dict(header["config"])
    ws = WeightSet()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * 4
        if entry["length"] != expected:
            raise ShapeMismatchError(
                f"tensor {entry['name']}: manifest length {entry['length']} bytes does not match shape {shape} ({expected} bytes)"
            )
        off = entry["offset"]
        if off + expected > len(blob):
            raise TruncatedFileError(f"truncated weight file: tensor {entry['name']} extends past end of file")
        arr = np.frombuffer(blob, dtype="<f4", count=expected // 4, offset=off).reshape(shape).astype(np.float32)
        ws.tensors.append((entry["layer"], entry["role"], arr))
    specs = config.conv_specs()
    for layer_id, role, arr in ws:
        if role == "conv_w" and arr.shape != specs[layer_id].weight_shape:
            raise ShapeMismatchError(f"tensor layer{layer_id}.conv_w has shape {arr.shape}, config implies {specs[layer_id].weight_shape}")
    return config, ws


def save_model(model: Model, path) -> None:
    save_weights(model.weight_set(), model.config, path)


def load_model(path) -> Model:
    config, ws = load_weights(path)
    return from_weights(config, ws)
