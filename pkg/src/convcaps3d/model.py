"""3DConvCaps network and its all-convolutional baseline.

Both builders return a :class:`Network`: named parameters, an ordered layer
list and a forward pass producing per-voxel class probabilities, a coarse
class map at 1/8 resolution and a reconstruction of the input.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import capsule
from .tensor import ConvSpec, Tensor, conv3d, ops, upsample3d

ARCHITECTURES = ("convcaps", "conv_baseline")
MAGIC = b"3DCC\x00001"


@dataclass
class ModelConfig:
    in_channels: int = 2
    classes: int = 4
    visual_channels: tuple[int, ...] = (16, 32, 64)
    visual_kernel: int = 5
    visual_dilations: tuple[int, ...] = (1, 3, 3)
    encoder_channels: tuple[int, ...] = (128, 128)
    encoder_kernel: int = 3
    capsule_types: tuple[int, ...] = (8, 8)
    capsule_dims: tuple[int, ...] = (16, 16, 32)
    capsule_kernel: int = 3
    routing_iterations: int = 3
    first_capsule_stride: int = 2
    decoder_channels: tuple[int, ...] = (128, 64, 32)
    recon_hidden: int = 64
    margin_weight: float = 1.0
    ce_weight: float = 1.0
    reconstruction_weight: float = 1.0

    def __post_init__(self):
        for name in ("visual_channels", "visual_dilations", "encoder_channels",
                     "capsule_types", "capsule_dims", "decoder_channels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("classes must be at least 2")
        if len(self.visual_channels) != 3 or len(self.visual_dilations) != 3:
            raise ValueError("visual stage needs three channel counts and three dilations")
        if len(self.encoder_channels) != 2:
            raise ValueError("conv encoder has exactly two stride-2 stages")
        if len(self.capsule_types) != 2 or len(self.capsule_dims) != 3:
            raise ValueError("capsule encoder needs two type counts and three pose dims")
        if len(self.decoder_channels) != 3:
            raise ValueError("decoder has exactly three upsampling stages")
        ints = (self.in_channels, self.visual_kernel, self.encoder_kernel,
                self.capsule_kernel, self.routing_iterations, self.first_capsule_stride,
                self.recon_hidden, *self.visual_channels, *self.visual_dilations,
                *self.encoder_channels, *self.capsule_types, *self.capsule_dims,
                *self.decoder_channels)
        if any(v < 1 for v in ints):
            raise ValueError("all extents, channels and counts must be positive")
        if self.first_capsule_stride != 2:
            raise ValueError("the first capsule layer must have stride 2 to reach 1/8 resolution")
        if self.encoder_channels[-1] % self.capsule_types[0]:
            raise ValueError(
                f"encoder output {self.encoder_channels[-1]} not divisible into "
                f"{self.capsule_types[0]} primary capsule types"
            )
        if min(self.margin_weight, self.ce_weight, self.reconstruction_weight) < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def primary_dim(self) -> int:
        return self.encoder_channels[-1] // self.capsule_types[0]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(
            in_channels=1, classes=2, visual_channels=(4, 4, 8),
            encoder_channels=(16, 16), capsule_types=(2, 2), capsule_dims=(4, 4, 8),
            decoder_channels=(16, 8, 4), recon_hidden=8,
        )
        base.update(overrides)
        return cls(**base)


def _he_uniform(rng, shape, fan_in, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv:
    """3D convolution + optional ReLU with a ``weight`` and ``bias`` parameter."""

    kind = "conv"

    def __init__(self, name, cin, cout, kernel=3, stride=1, dilation=1, relu=True):
        self.name = name
        self.spec = ConvSpec(kernel, stride, dilation)
        self.cin, self.cout, self.relu = cin, cout, relu
        self.params: dict[str, Tensor] = {}

    def init(self, rng, dtype):
        k = self.spec.kernel
        fan_in = k[0] * k[1] * k[2] * self.cin
        self.params = {
            "weight": Tensor(_he_uniform(rng, (*k, self.cin, self.cout), fan_in, dtype),
                             requires_grad=True),
            "bias": Tensor(np.zeros(self.cout, dtype=dtype), requires_grad=True),
        }

    def __call__(self, x: Tensor) -> Tensor:
        y = conv3d(x, self.params["weight"], self.params["bias"], self.spec)
        return ops.relu(y) if self.relu else y

    def out_shape(self, shape):
        return (*self.spec.output_shape(shape[:3]), self.cout)


class ConvCapsLayer:
    """Convolutional capsule layer with per-voxel dynamic routing."""

    kind = "conv_capsule"

    def __init__(self, name, tin, ain, tout, aout, kernel=3, stride=1, iterations=3):
        self.name = name
        self.spec = ConvSpec(kernel, stride, 1)
        self.tin, self.ain, self.tout, self.aout = tin, ain, tout, aout
        self.iterations = iterations
        self.params: dict[str, Tensor] = {}

    def init(self, rng, dtype):
        k = self.spec.kernel
        shape = (*k, self.tin, self.tout, self.ain, self.aout)
        # He fan-in of one vote (Ain), rescaled for the coupling-weighted sum of
        # k^3*Tin votes over Tout outputs so lengths start mid-range, not at 0 or 1
        taps = k[0] * k[1] * k[2]
        fan_in = self.ain * math.sqrt(taps * self.tin) / self.tout
        self.params = {"weight": Tensor(_he_uniform(rng, shape, fan_in, dtype),
                                        requires_grad=True)}

    def __call__(self, caps: Tensor) -> Tensor:
        return capsule.conv_capsule(caps, self.params["weight"], self.spec, self.iterations)

    def out_shape(self, shape):
        return (*self.spec.output_shape(shape[:3]), self.tout, self.aout)


@dataclass
class Network:
    """Ordered layers with uniquely named parameters."""

    config: ModelConfig
    architecture: str
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture tag {self.architecture!r}")
        self._by_name = {}

    def add(self, layer):
        if layer.name in self._by_name:
            raise ValueError(f"duplicate layer name {layer.name}")
        self.layers.append(layer)
        self._by_name[layer.name] = layer
        return layer

    def __getitem__(self, name):
        return self._by_name[name]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{layer.name}.{key}": p
                for layer in self.layers for key, p in layer.params.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for key, p in layer.params.items():
                layer.params[key] = Tensor(p.data.astype(dtype), requires_grad=True)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def __call__(self, x, keep_stages: bool = False) -> dict:
        return forward(self, x, keep_stages)


def _build_common(cfg: ModelConfig, architecture: str) -> Network:
    net = Network(cfg, architecture)
    chans = (cfg.in_channels, *cfg.visual_channels)
    for i, dil in enumerate(cfg.visual_dilations):
        net.add(Conv(f"visual{i + 1}", chans[i], chans[i + 1], cfg.visual_kernel, 1, dil))
    enc = (cfg.visual_channels[-1], *cfg.encoder_channels)
    for i in range(2):
        net.add(Conv(f"encoder{i + 1}", enc[i], enc[i + 1], cfg.encoder_kernel, 2))
    return net


def _add_decoder(net: Network, cfg: ModelConfig) -> None:
    skips = (cfg.encoder_channels[1], cfg.encoder_channels[0], cfg.visual_channels[-1])
    prev = cfg.classes * cfg.capsule_dims[2]
    for i, (skip, out) in enumerate(zip(skips, cfg.decoder_channels)):
        net.add(Conv(f"decoder{i + 1}", prev + skip, out, 3))
        prev = out
    net.add(Conv("segment", prev, cfg.classes, 1, relu=False))
    net.add(Conv("recon1", prev, cfg.recon_hidden, 1))
    net.add(Conv("recon2", cfg.recon_hidden, cfg.in_channels, 1, relu=False))


def _initialize(net: Network, seed: int, dtype) -> Network:
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        layer.init(rng, dtype)
    return net


def build_convcaps(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    net = _build_common(cfg, "convcaps")
    t1, t2 = cfg.capsule_types
    a1, a2, a3 = cfg.capsule_dims
    k, r = cfg.capsule_kernel, cfg.routing_iterations
    net.add(ConvCapsLayer("caps1", t1, cfg.primary_dim, t1, a1, k, cfg.first_capsule_stride, r))
    net.add(ConvCapsLayer("caps2", t1, a1, t2, a2, k, 1, r))
    net.add(ConvCapsLayer("caps3", t2, a2, cfg.classes, a3, k, 1, r))
    _add_decoder(net, cfg)
    return _initialize(net, seed, dtype)


def build_conv_baseline(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Same topology with every capsule layer replaced by a 3^3 conv + ReLU.

    A 1^3 conv + softmax head at 1/8 resolution stands in for the capsule
    lengths so both networks train on the same three losses.
    """
    net = _build_common(cfg, "conv_baseline")
    t1, t2 = cfg.capsule_types
    a1, a2, a3 = cfg.capsule_dims
    k = cfg.capsule_kernel
    c_in = cfg.encoder_channels[-1]
    net.add(Conv("caps1", c_in, t1 * a1, k, cfg.first_capsule_stride))
    net.add(Conv("caps2", t1 * a1, t2 * a2, k, 1))
    net.add(Conv("caps3", t2 * a2, cfg.classes * a3, k, 1))
    net.add(Conv("coarse_head", cfg.classes * a3, cfg.classes, 1, relu=False))
    _add_decoder(net, cfg)
    return _initialize(net, seed, dtype)


def build(cfg: ModelConfig, architecture: str = "convcaps", seed: int = 0, dtype=np.float32):
    if architecture in ("convcaps",):
        return build_convcaps(cfg, seed, dtype)
    if architecture in ("conv_baseline", "baseline"):
        return build_conv_baseline(cfg, seed, dtype)
    raise ValueError(f"unknown architecture tag {architecture!r}")


def _check_input(net: Network, x: Tensor) -> bool:
    if x.ndim not in (4, 5):
        raise ValueError(f"input must be [X,Y,Z,M] or [N,X,Y,Z,M], got {x.shape}")
    spatial = x.shape[-4:-1]
    if any(n % 8 for n in spatial):
        raise ValueError(f"spatial extents {spatial} must be divisible by 8")
    if x.shape[-1] != net.config.in_channels:
        raise ValueError(f"expected {net.config.in_channels} input channels, got {x.shape[-1]}")
    return x.ndim == 5


def forward(net: Network, x, keep_stages: bool = False) -> dict:
    """Run the network.

    Returns ``seg`` (per-voxel class probabilities), ``recon`` and either
    ``caps_len`` (capsule lengths at 1/8 resolution, convcaps) or ``coarse``
    (softmax probabilities at 1/8 resolution, baseline). With
    ``keep_stages`` a ``stages`` dict of intermediate shapes is included.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=net.dtype))
    batched = _check_input(net, x)
    if not batched:
        x = ops.reshape(x, (1,) + x.shape)
    cfg = net.config
    stages = {}

    h = x
    for i in range(3):
        h = net[f"visual{i + 1}"](h)
    visual = h
    half = net["encoder1"](visual)
    quarter = net["encoder2"](half)
    stages.update(visual=visual.shape, half=half.shape, quarter=quarter.shape)

    out = {}
    if net.architecture == "convcaps":
        caps = capsule.primary_caps(quarter, cfg.capsule_types[0])
        stages["primary"] = caps.shape
        for name in ("caps1", "caps2", "caps3"):
            caps = net[name](caps)
            stages[name] = caps.shape
        out["caps_len"] = capsule.capsule_length(caps)
        code = ops.reshape(caps, caps.shape[:4] + (caps.shape[4] * caps.shape[5],))
    else:
        h = quarter
        for name in ("caps1", "caps2", "caps3"):
            h = net[name](h)
            stages[name] = h.shape
        out["coarse"] = ops.softmax(net["coarse_head"](h), axis=-1)
        code = h

    h = code
    for name, skip in zip(("decoder1", "decoder2", "decoder3"), (quarter, half, visual)):
        h = net[name](ops.concat([upsample3d(h), skip], axis=-1))
        stages[name] = h.shape
    out["seg"] = ops.softmax(net["segment"](h), axis=-1)
    out["recon"] = net["recon2"](net["recon1"](h))

    if not batched:
        out = {k: ops.reshape(v, v.shape[1:]) for k, v in out.items()}
    if keep_stages:
        out["stages"] = stages
    return out


def count_params(net: Network) -> int:
    return int(sum(p.data.size for p in net.parameters()))


def layer_table(net: Network, spatial=(32, 32, 32)) -> list[tuple[str, tuple, int]]:
    """(layer name, output shape, parameter count) for a nominal unbatched input."""
    cfg = net.config
    if any(n % 8 for n in spatial):
        raise ValueError(f"spatial extents {spatial} must be divisible by 8")
    rows = []

    def add(layer, shape):
        rows.append((layer.name, tuple(shape),
                     int(sum(p.data.size for p in layer.params.values()))))
        return shape

    shape = (*spatial, cfg.in_channels)
    for i in range(3):
        shape = add(net[f"visual{i + 1}"], net[f"visual{i + 1}"].out_shape(shape))
    visual = shape
    half = add(net["encoder1"], net["encoder1"].out_shape(visual))
    quarter = add(net["encoder2"], net["encoder2"].out_shape(half))
    if net.architecture == "convcaps":
        shape = (*quarter[:3], cfg.capsule_types[0], cfg.primary_dim)
        rows.append(("primary_caps", shape, 0))
        for name in ("caps1", "caps2", "caps3"):
            shape = add(net[name], net[name].out_shape(shape))
        rows.append(("caps_len", shape[:4], 0))
        shape = (*shape[:3], shape[3] * shape[4])
    else:
        shape = quarter
        for name in ("caps1", "caps2", "caps3"):
            shape = add(net[name], net[name].out_shape(shape))
        add(net["coarse_head"], net["coarse_head"].out_shape(shape))
    for name, skip in zip(("decoder1", "decoder2", "decoder3"), (quarter, half, visual)):
        up = (*(2 * n for n in shape[:3]), shape[3] + skip[3])
        shape = add(net[name], net[name].out_shape(up))
    add(net["segment"], net["segment"].out_shape(shape))
    hidden = add(net["recon1"], net["recon1"].out_shape(shape))
    add(net["recon2"], net["recon2"].out_shape(hidden))
    return rows


class CheckpointError(ValueError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(net: Network, path) -> None:
    """Binary checkpoint: magic, JSON header, then named little-endian f32 tensors."""
    header = json.dumps(
        {"architecture": net.architecture, "config": net.config.to_dict()},
        sort_keys=True, separators=(",", ":"),
    )
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_pack_str(header))
    for name, p in net.named_parameters().items():
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or unsupported version (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    header = json.loads(take_str())
    arch = header.get("architecture")
    if arch not in ARCHITECTURES:
        raise CheckpointError(f"{path}: unknown architecture tag {arch!r}")
    net = build(ModelConfig.from_dict(header["config"]), arch)
    params = net.named_parameters()
    seen = set()
    while pos < len(raw):
        name = take_str()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        data = np.frombuffer(take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        if name not in params:
            raise CheckpointError(f"{path}: unexpected parameter {name}")
        if tuple(shape) != params[name].shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        params[name].data = data.astype(np.float32)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: truncated checkpoint, missing {sorted(missing)[:3]}")
    return net
