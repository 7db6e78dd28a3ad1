"""P2AT building blocks.

Aggregator side: :class:`PyramidPool`, :class:`AxialAttention`,
:class:`P2A2Layer` and :class:`Aggregator`. Fusion side: :class:`SFU`,
:class:`LFR`, :class:`BiF`, :class:`GCE`. Decoding: :class:`DecoderBlock`
and :class:`Refine`.

Blocks whose output is a residual branch zero-initialize the branch's last
projection so that a freshly built block is an exact identity on that path.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, ConvBN, Module
from .tensor import Parameter

POOL_KERNELS = (3, 5, 7)
DECODER_KERNELS = {5: 3, 4: 5, 3: 7}


class PyramidPool(Module):
    """Cascaded 3/5/7 average pools summed with their input, then a depthwise 3x3.

    ``x = theta(f)``; ``p1 = avg3(x)``, ``p2 = avg5(p1)``, ``p3 = avg7(p2)``,
    all stride 1 with same padding; output ``dw3x3(x + p1 + p2 + p3)``.
    """

    def __init__(self, channels, rng):
        super().__init__()
        self.theta = Conv2d(channels, channels, 1, rng)
        self.dw = Conv2d(channels, channels, 3, rng, groups=channels)

    def forward(self, f):
        x = self.theta(f)
        total = x
        p = x
        for k in POOL_KERNELS:
            p = F.avg_pool2d(p, k, stride=1, padding=k // 2)
            total = total + p
        return self.dw(total)


class AxialAttention(Module):
    """Multi-head self-attention along the height axis, then along the width axis.

    Each pass has its own q/k/v/out 1x1 projections and a per-head relative
    position bias table of length ``2 * max_len - 1`` added to the logits;
    a residual connection wraps each pass.
    """

    def __init__(self, channels, heads, rng, max_len=16):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"channels={channels} not divisible by heads={heads}")
        self.channels, self.heads, self.max_len = channels, heads, max_len
        self.head_dim = channels // heads
        self.scale = self.head_dim ** -0.5
        self.q_h = Conv2d(channels, channels, 1, rng)
        self.k_h = Conv2d(channels, channels, 1, rng)
        self.v_h = Conv2d(channels, channels, 1, rng)
        self.out_h = Conv2d(channels, channels, 1, rng)
        self.pos_h = Parameter(np.zeros((heads, 2 * max_len - 1), dtype=np.float32))
        self.q_w = Conv2d(channels, channels, 1, rng)
        self.k_w = Conv2d(channels, channels, 1, rng)
        self.v_w = Conv2d(channels, channels, 1, rng)
        self.out_w = Conv2d(channels, channels, 1, rng)
        self.pos_w = Parameter(np.zeros((heads, 2 * max_len - 1), dtype=np.float32))
        self.out_h.zero_()
        self.out_w.zero_()

    def relative_bias(self, table, length):
        if length > self.max_len:
            raise DimensionError(f"axis length {length} exceeds positional table size {self.max_len}")
        pos = np.arange(length)
        idx = pos[:, None] - pos[None, :] + self.max_len - 1
        return F.take(table, idx, axis=1)  # (heads, L, L)

    def axis_pass(self, x, axis):
        """Attention output (before the residual add) along ``axis`` ("h" or "w")."""
        n, c, h, w = x.shape
        if c != self.channels:
            raise DimensionError(f"expected {self.channels} channels, got {c}")
        hd, nh = self.head_dim, self.heads
        if axis == "h":
            q_proj, k_proj, v_proj, out_proj, table = self.q_h, self.k_h, self.v_h, self.out_h, self.pos_h
            perm, length = (0, 1, 4, 3, 2), h  # -> (n, heads, w, h, d)
            inv = (0, 1, 4, 3, 2)
        elif axis == "w":
            q_proj, k_proj, v_proj, out_proj, table = self.q_w, self.k_w, self.v_w, self.out_w, self.pos_w
            perm, length = (0, 1, 3, 4, 2), w  # -> (n, heads, h, w, d)
            inv = (0, 1, 4, 2, 3)
        else:
            raise ValueError(f"axis must be 'h' or 'w', got {axis!r}")

        def split(t):
            return t.reshape(n, nh, hd, h, w).transpose(perm)

        q, k, v = split(q_proj(x)), split(k_proj(x)), split(v_proj(x))
        logits = F.matmul(q, k.transpose(0, 1, 2, 4, 3)) * self.scale
        bias = self.relative_bias(table, length).reshape(1, nh, 1, length, length)
        attn = F.softmax(logits + bias, axis=-1)
        ctx = F.matmul(attn, v).transpose(inv).reshape(n, c, h, w)
        return out_proj(ctx)

    def forward(self, x):
        x = x + self.axis_pass(x, "h")
        return x + self.axis_pass(x, "w")


class FFN(Module):
    def __init__(self, channels, ratio, rng):
        super().__init__()
        self.expand = Conv2d(channels, channels * ratio, 1, rng)
        self.project = Conv2d(channels * ratio, channels, 1, rng)
        self.project.zero_()

    def forward(self, x):
        return self.project(F.hardswish(self.expand(x)))


class P2A2Layer(Module):
    """One aggregator layer: ``z' = attn(pool(z)) + z``; ``out = ffn(z') + z'``."""

    def __init__(self, channels, heads, ffn_ratio, rng, max_len=16):
        super().__init__()
        self.pool = PyramidPool(channels, rng)
        self.attn = AxialAttention(channels, heads, rng, max_len)
        self.ffn = FFN(channels, ffn_ratio, rng)

    def forward(self, z):
        z = self.attn(self.pool(z)) + z
        return self.ffn(z) + z

    def zero_terminals(self):
        """Zero every residual-branch terminal so the layer is an exact identity."""
        self.pool.dw.zero_()
        self.attn.out_h.zero_()
        self.attn.out_w.zero_()
        self.ffn.project.zero_()


class Aggregator(Module):
    def __init__(self, channels, depth, heads, ffn_ratio, rng, max_len=16):
        super().__init__()
        self.depth = depth
        for i in range(depth):
            setattr(self, f"layer{i}", P2A2Layer(channels, heads, ffn_ratio, rng, max_len))

    @property
    def layers(self):
        return [getattr(self, f"layer{i}") for i in range(self.depth)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class SFU(Module):
    """Semantic feature upsampler core: ``alpha(d) * softmax_channels(beta(d))``."""

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.alpha = Conv2d(in_ch, out_ch, 1, rng)
        self.beta = Conv2d(in_ch, out_ch, 1, rng)

    def gates(self, d):
        return F.softmax(self.beta(d), axis=1)

    def forward(self, d):
        return self.alpha(d) * self.gates(d)


class LFR(Module):
    """Local feature refinement: a spatial sigmoid map plus a global descriptor gates ``f``."""

    def __init__(self, channels, rng):
        super().__init__()
        self.eta = Conv2d(channels, channels, 1, rng)
        self.gamma = Conv2d(channels, channels, 1, rng)
        self.mix = Conv2d(channels, channels, 1, rng)

    def forward(self, f):
        spatial = F.sigmoid(self.eta(f))
        glob = self.gamma(F.global_avg_pool2d(f))
        local = self.mix(spatial + glob)
        return local * f


class BiF(Module):
    """Bidirectional fusion of a deep descriptor with a shallow stage feature.

    ``fuse(concat[lfr(f_low), up2(sfu(d)), proj(f_stage)])`` where ``fuse`` is
    3x3 conv + BN + hardswish and ``up2`` doubles the spatial size.
    """

    def __init__(self, deep_ch, low_ch, out_ch, rng):
        super().__init__()
        self.sfu = SFU(deep_ch, out_ch, rng)
        self.lfr = LFR(low_ch, rng)
        self.proj = Conv2d(low_ch, out_ch, 1, rng)
        self.fuse = ConvBN(low_ch + 2 * out_ch, out_ch, 3, rng, act="hardswish")

    def forward(self, d, f_low, f_stage):
        s = self.sfu(d)
        s = F.bilinear_upsample(s, 2 * s.shape[2], 2 * s.shape[3])
        if s.shape[2:] != f_stage.shape[2:] or f_low.shape[2:] != f_stage.shape[2:]:
            raise DimensionError(
                f"fusion operands disagree spatially: semantic {s.shape[2:]}, "
                f"low {f_low.shape[2:]}, stage {f_stage.shape[2:]}"
            )
        return self.fuse(F.concat([self.lfr(f_low), s, self.proj(f_stage)], axis=1))


class GCE(Module):
    """Squeeze-style global gate with a residual: ``b + b * sigmoid(w2(relu(w1(gap(b)))))``."""

    def __init__(self, channels, rng, ratio=4):
        super().__init__()
        hidden = max(channels // ratio, 1)
        self.squeeze = Conv2d(channels, hidden, 1, rng)
        self.excite = Conv2d(hidden, channels, 1, rng)

    def forward(self, b):
        g = F.sigmoid(self.excite(F.relu(self.squeeze(F.global_avg_pool2d(b)))))
        return b + b * g


class DecoderBlock(Module):
    """``d + pw2(hardswish(pw1(bn(dw_kxk(d)))))`` with k = 3, 5, 7 for stages 5, 4, 3."""

    def __init__(self, channels, stage, rng, expansion=2):
        super().__init__()
        if stage not in DECODER_KERNELS:
            raise ConfigError(f"decoder stage must be one of {sorted(DECODER_KERNELS)}, got {stage}")
        k = DECODER_KERNELS[stage]
        self.stage, self.kernel = stage, k
        self.dw = Conv2d(channels, channels, k, rng, groups=channels, bias=False)
        self.bn = BatchNorm2d(channels)
        self.pw1 = Conv2d(channels, channels * expansion, 1, rng)
        self.pw2 = Conv2d(channels * expansion, channels, 1, rng)
        self.pw2.zero_()

    def forward(self, d):
        return d + self.pw2(F.hardswish(self.pw1(self.bn(self.dw(d)))))


class Refine(Module):
    """Residual 3x3 conv-BN-hardswish followed by a single-channel spatial sigmoid gate."""

    def __init__(self, channels, rng):
        super().__init__()
        self.conv = ConvBN(channels, channels, 3, rng, act="hardswish")
        self.gate = Conv2d(channels, 1, 1, rng)

    def forward(self, x):
        y = x + self.conv(x)
        return y * F.sigmoid(self.gate(y))
