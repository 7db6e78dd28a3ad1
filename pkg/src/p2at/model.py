"""Full network: ResNet-style encoder, aggregator, fusion path, decoder, head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .blocks import BiF, Aggregator, DecoderBlock, GCE, Refine
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBN, Module
from .tensor import Tensor, count_flops_scope, no_grad

OUTPUT_STRIDE = 32

PRESETS = {
    "tiny": dict(encoder_widths=(16, 32, 64, 128), encoder_blocks=(2, 2, 2, 2), block="basic", decoder_width=32),
    "s": dict(encoder_widths=(32, 64, 128, 256), encoder_blocks=(2, 2, 2, 2), block="basic", decoder_width=64),
    "m": dict(encoder_widths=(32, 64, 128, 256), encoder_blocks=(3, 4, 6, 3), block="basic", decoder_width=64),
    "l": dict(encoder_widths=(64, 128, 256, 512), encoder_blocks=(3, 4, 6, 3), block="bottleneck", decoder_width=64),
}


@dataclass
class ModelConfig:
    num_classes: int = 4
    in_channels: int = 3
    encoder_widths: tuple = (16, 32, 64, 128)
    encoder_blocks: tuple = (2, 2, 2, 2)
    block: str = "basic"
    aggregator_depth: int = 2
    heads: int = 4
    ffn_ratio: int = 2
    decoder_width: int = 32
    max_attn_len: int = 16
    size_preset: str = "tiny"

    def __post_init__(self):
        self.encoder_widths = tuple(int(v) for v in self.encoder_widths)
        self.encoder_blocks = tuple(int(v) for v in self.encoder_blocks)
        self.validate()

    def validate(self):
        if len(self.encoder_widths) != 4 or len(self.encoder_blocks) != 4:
            raise ConfigError("the encoder has exactly 4 stages (strides 4, 8, 16, 32)")
        if min(self.encoder_widths) < 1 or min(self.encoder_blocks) < 1:
            raise ConfigError("encoder widths and block counts must be positive")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown residual block type {self.block!r}")
        if self.block == "bottleneck" and min(self.encoder_widths) < 4:
            raise ConfigError("bottleneck stages need widths >= 4")
        if self.num_classes < 1 or self.in_channels < 1 or self.decoder_width < 1:
            raise ConfigError("num_classes, in_channels and decoder_width must be positive")
        if self.aggregator_depth < 0 or self.ffn_ratio < 1 or self.max_attn_len < 1:
            raise ConfigError("invalid aggregator settings")
        if self.heads < 1 or self.encoder_widths[3] % self.heads:
            raise ConfigError(f"heads={self.heads} must divide the deepest width {self.encoder_widths[3]}")

    @classmethod
    def preset(cls, name, num_classes=4, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[name], size_preset=name, num_classes=num_classes)
        values.update(overrides)
        return cls(**values)

    def echo(self):
        """Canonical ``key = value`` text, stored in checkpoints."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines)

    @classmethod
    def from_echo(cls, text):
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            values[key] = parse_field(cls, key, raw)
        return cls(**values)


def parse_field(cls, key, raw):
    default = {f.name: f.default for f in dataclasses.fields(cls)}[key]
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# encoder


class BasicBlock(Module):
    def __init__(self, in_ch, out_ch, stride, rng):
        super().__init__()
        self.conv1 = ConvBN(in_ch, out_ch, 3, rng, stride=stride, act="relu")
        self.conv2 = ConvBN(out_ch, out_ch, 3, rng)
        self.shortcut = ConvBN(in_ch, out_ch, 1, rng, stride=stride) if stride != 1 or in_ch != out_ch else None

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.conv2(self.conv1(x)) + skip)


class Bottleneck(Module):
    def __init__(self, in_ch, out_ch, stride, rng, reduction=4):
        super().__init__()
        mid = max(out_ch // reduction, 1)
        self.conv1 = ConvBN(in_ch, mid, 1, rng, act="relu")
        self.conv2 = ConvBN(mid, mid, 3, rng, stride=stride, act="relu")
        self.conv3 = ConvBN(mid, out_ch, 1, rng)
        self.shortcut = ConvBN(in_ch, out_ch, 1, rng, stride=stride) if stride != 1 or in_ch != out_ch else None

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.conv3(self.conv2(self.conv1(x))) + skip)


class Encoder(Module):
    """Two stride-2 3x3 stem convs, then four residual stages at strides 4, 8, 16, 32."""

    def __init__(self, cfg, rng):
        super().__init__()
        w = cfg.encoder_widths
        stem = max(w[0] // 2, 1)
        self.stem1 = ConvBN(cfg.in_channels, stem, 3, rng, stride=2, act="relu")
        self.stem2 = ConvBN(stem, w[0], 3, rng, stride=2, act="relu")
        unit = BasicBlock if cfg.block == "basic" else Bottleneck
        in_ch = w[0]
        self._stages = []
        for s, (width, depth) in enumerate(zip(w, cfg.encoder_blocks)):
            blocks = []
            for b in range(depth):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(unit(in_ch, width, stride, rng))
                in_ch = width
            stage = Stage(blocks)
            setattr(self, f"stage{s + 1}", stage)
            self._stages.append(stage)

    def forward(self, x):
        x = self.stem2(self.stem1(x))
        feats = []
        for stage in self._stages:
            x = stage(x)
            feats.append(x)
        return feats  # strides 4, 8, 16, 32


class Stage(Module):
    def __init__(self, blocks):
        super().__init__()
        self.blocks = list(blocks)

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x


# ---------------------------------------------------------------------------
# full network


class P2AT(Module):
    """Segmentation network producing ``N x K x H x W`` logits.

    Deep path: aggregator over the stride-32 feature, decoder stage 5, fusion
    with the stride-16 feature (BiF + GCE), decoder stage 4, fusion with the
    stride-8 feature, decoder stage 3. The stride-8 result is upsampled x2,
    refined at stride 4, classified by a 1x1 head and resized to the input.
    """

    def __init__(self, cfg, seed=0):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(seed)
        w, dw = cfg.encoder_widths, cfg.decoder_width
        self.encoder = Encoder(cfg, rng)
        self.aggregator = Aggregator(w[3], cfg.aggregator_depth, cfg.heads, cfg.ffn_ratio, rng, cfg.max_attn_len)
        self.dec5 = DecoderBlock(w[3], 5, rng)
        self.bif4 = BiF(w[3], w[2], dw, rng)
        self.gce4 = GCE(dw, rng)
        self.dec4 = DecoderBlock(dw, 4, rng)
        self.bif3 = BiF(dw, w[1], dw, rng)
        self.gce3 = GCE(dw, rng)
        self.dec3 = DecoderBlock(dw, 3, rng)
        self.refine = Refine(dw, rng)
        self.head = Conv2d(dw, cfg.num_classes, 1, rng)
        self.assign_names()

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected N x {self.config.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise DimensionError(f"input size {h}x{w} must be a multiple of {OUTPUT_STRIDE}")
        f2, f3, f4, f5 = self.encoder(x)
        d5 = self.dec5(self.aggregator(f5))
        d4 = self.dec4(self.gce4(self.bif4(d5, f4, f4)))
        d3 = self.dec3(self.gce3(self.bif3(d4, f3, f3)))
        r = self.refine(F.bilinear_upsample(d3, f2.shape[2], f2.shape[3]))
        return F.bilinear_upsample(self.head(r), h, w)


def build(config, seed=0):
    config.validate()
    return P2AT(config, seed=seed)


def count_params(model):
    return int(sum(p.size for p in model.parameters()))


def flop_breakdown(model, input_shape):
    """Per-kernel analytic FLOPs of one eval-mode forward at ``input_shape``."""
    was_training = model.training
    model.eval()
    try:
        with no_grad(), count_flops_scope() as counter:
            model(Tensor(np.zeros(input_shape)))
    finally:
        model.train(was_training)
    return dict(counter.by_op)


def count_flops(model, input_shape):
    return int(sum(flop_breakdown(model, input_shape).values()))
