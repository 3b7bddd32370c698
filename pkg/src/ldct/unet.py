"""Encoder-decoder network with skip connections, assembled from nnops kernels.

Architecture, parameterized by (depth, base_channels, bottleneck_features):

  contracting, per level l = 0..depth-1:
      conv3x3-same -> ReLU -> conv3x3-same -> ReLU   (channels: base * 2**l)
      -> maxpool2               (the pre-pool activation feeds the skip)
  bottleneck:
      conv3x3-same -> ReLU -> conv3x3-same -> ReLU   (channels: base * 2**depth)
      -> conv1x1 -> ReLU        (collects bottleneck_features channels)
  expansive, per level l = depth-1..0:
      upconv2 -> concat(skip_l, .) -> conv3x3-same -> ReLU -> conv3x3-same -> ReLU
  head:
      conv1x1 to 1 channel, linear output (clamping is the caller's job)

The network is fully convolutional: any input whose H and W divide by
2**depth is accepted, whatever input_size the config declares.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nnops
from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolation,
)

Array = np.ndarray

CHECKPOINT_MAGIC = b"LDCT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    bottleneck_features: int = 64
    input_size: int = 64
    in_channels: int = 1
    out_channels: int = 1

    def validate(self) -> None:
        if self.depth < 1:
            raise ContractViolation(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ContractViolation(f"base_channels must be >= 1, got {self.base_channels}")
        if self.bottleneck_features < 1:
            raise ContractViolation(
                f"bottleneck_features must be >= 1, got {self.bottleneck_features}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ContractViolation("in_channels and out_channels are fixed at 1")
        if self.input_size % (1 << self.depth) != 0:
            raise ContractViolation(
                f"input_size {self.input_size} not divisible by 2^depth = {1 << self.depth}")


@dataclass
class UNetParams:
    config: UNetConfig
    tensors: dict[str, Array] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def copy(self) -> "UNetParams":
        return UNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def parameter_spec(config: UNetConfig) -> list[tuple[str, tuple, int]]:
    """Ordered (name, shape, fan_in) for every weight and bias.

    Shapes are a pure function of the config; names are stable across
    save/load. fan_in is 0 for biases (initialized to zero).
    """
    config.validate()
    base = config.base_channels
    spec: list[tuple[str, tuple, int]] = []

    def conv(name, cin, cout, k):
        spec.append((f"{name}.w", (cout, cin, k, k), cin * k * k))
        spec.append((f"{name}.b", (cout,), 0))

    def upconv(name, cin, cout):
        spec.append((f"{name}.w", (cin, cout, 2, 2), cin * 4))
        spec.append((f"{name}.b", (cout,), 0))

    for lvl in range(config.depth):
        cin = config.in_channels if lvl == 0 else base * (1 << (lvl - 1))
        cout = base * (1 << lvl)
        conv(f"enc{lvl}.conv1", cin, cout, 3)
        conv(f"enc{lvl}.conv2", cout, cout, 3)

    mid = base * (1 << config.depth)
    conv("bottleneck.conv1", base * (1 << (config.depth - 1)), mid, 3)
    conv("bottleneck.conv2", mid, mid, 3)
    conv("bottleneck.proj", mid, config.bottleneck_features, 1)

    for lvl in reversed(range(config.depth)):
        cin = config.bottleneck_features if lvl == config.depth - 1 else base * (1 << (lvl + 1))
        cout = base * (1 << lvl)
        upconv(f"dec{lvl}.up", cin, cout)
        conv(f"dec{lvl}.conv1", 2 * cout, cout, 3)
        conv(f"dec{lvl}.conv2", cout, cout, 3)

    conv("head", base, config.out_channels, 1)
    return spec


def build(config: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> UNetParams:
    """He-normal weights, zero biases, in the spec's fixed order."""
    tensors: dict[str, Array] = {}
    for name, shape, fan_in in parameter_spec(config):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            tensors[name] = nnops.he_init(shape, fan_in, rng, dtype=dtype)
    return UNetParams(config=config, tensors=tensors)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class UNetCache:
    input_shape: tuple
    steps: dict[str, object] = field(default_factory=dict)
    consumed: bool = False


def _conv_relu(params, name, x, steps):
    y, c = nnops.conv2d_forward(x, params.tensors[f"{name}.w"], params.tensors[f"{name}.b"])
    steps[name] = c
    y, r = nnops.relu_forward(y)
    steps[f"{name}.relu"] = r
    return y


def forward(params: UNetParams, x: Array) -> tuple[Array, UNetCache]:
    """Runs the network; output spatial shape equals input spatial shape."""
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ContractViolation(
            f"input must be Nx{cfg.in_channels}xHxW, got shape {x.shape}")
    div = 1 << cfg.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise ContractViolation(
            f"input H,W {x.shape[2]}x{x.shape[3]} not divisible by 2^depth = {div}")

    steps: dict[str, object] = {}
    skips: list[Array] = []
    h = x
    for lvl in range(cfg.depth):
        h = _conv_relu(params, f"enc{lvl}.conv1", h, steps)
        h = _conv_relu(params, f"enc{lvl}.conv2", h, steps)
        skips.append(h)
        h, pc = nnops.maxpool2_forward(h)
        steps[f"enc{lvl}.pool"] = pc

    h = _conv_relu(params, "bottleneck.conv1", h, steps)
    h = _conv_relu(params, "bottleneck.conv2", h, steps)
    h = _conv_relu(params, "bottleneck.proj", h, steps)

    for lvl in reversed(range(cfg.depth)):
        h, uc = nnops.upconv2_forward(
            h, params.tensors[f"dec{lvl}.up.w"], params.tensors[f"dec{lvl}.up.b"])
        steps[f"dec{lvl}.up"] = uc
        h, cc = nnops.concat_channels(skips[lvl], h)
        steps[f"dec{lvl}.concat"] = cc
        h = _conv_relu(params, f"dec{lvl}.conv1", h, steps)
        h = _conv_relu(params, f"dec{lvl}.conv2", h, steps)

    y, hc = nnops.conv2d_forward(h, params.tensors["head.w"], params.tensors["head.b"])
    steps["head"] = hc
    return y, UNetCache(input_shape=x.shape, steps=steps)


def backward(params: UNetParams, cache: UNetCache, grad_y: Array) -> dict[str, Array]:
    """Gradients w.r.t. every parameter, keyed like UNetParams.

    Consumes the cache: a second call on the same cache is an error.
    Gradients from the two paths leaving each skip fork are summed.
    """
    if cache.consumed:
        raise ContractViolation("stale cache: backward already consumed this forward pass")
    cache.consumed = True
    cfg = params.config
    steps = cache.steps
    grads: dict[str, Array] = {}

    def conv_relu_back(name, g):
        g = nnops.relu_backward(steps[f"{name}.relu"], g)
        g, gw, gb = nnops.conv2d_backward(steps[name], g)
        grads[f"{name}.w"] = gw
        grads[f"{name}.b"] = gb
        return g

    g, gw, gb = nnops.conv2d_backward(steps["head"], grad_y)
    grads["head.w"] = gw
    grads["head.b"] = gb

    skip_grads: dict[int, Array] = {}
    for lvl in range(cfg.depth):
        g = conv_relu_back(f"dec{lvl}.conv2", g)
        g = conv_relu_back(f"dec{lvl}.conv1", g)
        g_skip, g = nnops.concat_backward(steps[f"dec{lvl}.concat"], g)
        skip_grads[lvl] = g_skip
        g, gw, gb = nnops.upconv2_backward(steps[f"dec{lvl}.up"], g)
        grads[f"dec{lvl}.up.w"] = gw
        grads[f"dec{lvl}.up.b"] = gb

    g = conv_relu_back("bottleneck.proj", g)
    g = conv_relu_back("bottleneck.conv2", g)
    g = conv_relu_back("bottleneck.conv1", g)

    for lvl in reversed(range(cfg.depth)):
        g = nnops.maxpool2_backward(steps[f"enc{lvl}.pool"], g)
        g = g + skip_grads[lvl]  # fork: pool path plus concat path
        g = conv_relu_back(f"enc{lvl}.conv2", g)
        g = conv_relu_back(f"enc{lvl}.conv1", g)

    return {name: grads[name] for name in params.tensors}


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: magic "LDCT" | u32 version | u32 header length | JSON header |
# raw little-endian parameter data. The header carries the config, dtype,
# and the ordered (name, shape, offset) table; offsets are element counts
# into the data section.


def save_checkpoint(params: UNetParams, path) -> None:
    dtype = np.dtype(params.tensors[next(iter(params.tensors))].dtype)
    entries = []
    offset = 0
    for name, tensor in params.tensors.items():
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset})
        offset += tensor.size
    header = {
        "config": {
            "depth": params.config.depth,
            "base_channels": params.config.base_channels,
            "bottleneck_features": params.config.bottleneck_features,
            "input_size": params.config.input_size,
            "in_channels": params.config.in_channels,
            "out_channels": params.config.out_channels,
        },
        "dtype": dtype.name,
        "params": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    le = dtype.newbyteorder("<")
    for tensor in params.tensors.values():
        buf.write(np.ascontiguousarray(tensor, dtype=le).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> UNetParams:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"not a checkpoint file: {path}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    if len(blob) < 12 + header_len:
        raise CheckpointTruncatedError(f"truncated checkpoint header: {path}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        config = UNetConfig(**header["config"])
        dtype = np.dtype(header["dtype"])
        entries = header["params"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"unparseable checkpoint header: {exc}") from exc

    expected = {name: shape for name, shape, _ in parameter_spec(config)}
    if [e["name"] for e in entries] != list(expected):
        raise CheckpointShapeError("checkpoint parameter names disagree with config")
    for e in entries:
        if tuple(e["shape"]) != expected[e["name"]]:
            raise CheckpointShapeError(
                f"parameter {e['name']} has shape {tuple(e['shape'])}, "
                f"config requires {expected[e['name']]}")

    data = blob[12 + header_len:]
    le = dtype.newbyteorder("<")
    tensors: dict[str, Array] = {}
    for e in entries:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"] * dtype.itemsize
        end = start + count * dtype.itemsize
        if end > len(data):
            raise CheckpointTruncatedError(
                f"truncated checkpoint payload at parameter {e['name']}")
        tensors[e["name"]] = np.frombuffer(
            data[start:end], dtype=le).astype(dtype).reshape(shape)
    return UNetParams(config=config, tensors=tensors)
