"""Shared fixtures: small block instances and their gradient-check drivers."""

from __future__ import annotations

import numpy as np

from p2at import ModelConfig, Parameter, Tensor, build
from p2at import functional as F
from p2at.blocks import GCE, LFR, SFU, AxialAttention, BiF, DecoderBlock, P2A2Layer, PyramidPool, Refine
from p2at.gradcheck import gradcheck, randomize, weighted_sum_loss

N_PROBES = 24


def _input(rng, shape):
    return Parameter(rng.standard_normal(shape))


def block_cases():
    """``name -> builder``; each builder returns ``(module, forward, inputs)``."""

    def pool(rng):
        m = PyramidPool(8, rng)
        x = _input(rng, (2, 8, 7, 6))
        return m, lambda: m(x), [("x", x)]

    def axial(rng):
        m = AxialAttention(8, 2, rng, max_len=8)
        x = _input(rng, (2, 8, 5, 6))
        return m, lambda: m(x), [("x", x)]

    def p2a2(rng):
        m = P2A2Layer(8, 2, 2, rng, max_len=8)
        x = _input(rng, (2, 8, 4, 5))
        return m, lambda: m(x), [("x", x)]

    def sfu(rng):
        m = SFU(8, 6, rng)
        x = _input(rng, (2, 8, 3, 4))
        return m, lambda: m(x), [("x", x)]

    def lfr(rng):
        m = LFR(6, rng)
        x = _input(rng, (2, 6, 4, 4))
        return m, lambda: m(x), [("x", x)]

    def bif(rng):
        m = BiF(8, 4, 6, rng)
        d, f = _input(rng, (2, 8, 2, 3)), _input(rng, (2, 4, 4, 6))
        return m, lambda: m(d, f, f), [("d", d), ("f", f)]

    def gce(rng):
        m = GCE(8, rng)
        x = _input(rng, (2, 8, 4, 3))
        return m, lambda: m(x), [("x", x)]

    def decoder(rng):
        m = DecoderBlock(6, 4, rng)
        x = _input(rng, (2, 6, 6, 6))
        return m, lambda: m(x), [("x", x)]

    def refine(rng):
        m = Refine(6, rng)
        x = _input(rng, (2, 6, 5, 4))
        return m, lambda: m(x), [("x", x)]

    return dict(pyramid_pool=pool, axial_attention=axial, p2a2_layer=p2a2, sfu=sfu, lfr=lfr, bif=bif, gce=gce,
                decoder_block=decoder, refine=refine)


def check_block(name, seed=0, n_probes=N_PROBES):
    rng = np.random.default_rng(seed)
    module, fwd, inputs = block_cases()[name](rng)
    randomize(module, seed=seed + 1)
    module.train()
    out_shape = fwd().shape
    targets = [(f"param:{k}", p) for k, p in module.named_parameters()] + inputs
    return gradcheck(weighted_sum_loss(fwd, out_shape), targets, modules=[module], n_probes=n_probes, seed=seed)


def check_model(seed=0, n_probes=N_PROBES, training=True):
    model = build(ModelConfig.preset("tiny", 4), seed=seed)
    model.train(training)
    x = Tensor(np.random.default_rng(100 + seed).standard_normal((2, 3, 64, 64)))

    def loss():
        return F.mean(model(x))

    return gradcheck(loss, list(model.named_parameters()), modules=[model], n_probes=n_probes, seed=seed)


def attention_oracle_case(rng, axis, length, channels, heads):
    """Random axial module on a 1-wide grid plus the brute-force expectation."""
    from oracles import full_self_attention

    m = AxialAttention(channels, heads, rng, max_len=16)
    randomize(m, seed=int(rng.integers(1 << 30)))
    m.pos_h.data[...] = 0
    m.pos_w.data[...] = 0
    shape = (1, channels, length, 1) if axis == "h" else (1, channels, 1, length)
    x = rng.standard_normal(shape)

    def proj(conv):
        return conv.weight.data[:, :, 0, 0].astype(np.float64), conv.bias.data.astype(np.float64)

    tokens = x.reshape(channels, length).T
    # pass along the long axis sees every token; the pass along the unit axis sees one token at a time
    long_w = [proj(c) for c in ((m.q_h, m.k_h, m.v_h, m.out_h) if axis == "h" else (m.q_w, m.k_w, m.v_w, m.out_w))]
    unit_w = [proj(c) for c in ((m.q_w, m.k_w, m.v_w, m.out_w) if axis == "h" else (m.q_h, m.k_h, m.v_h, m.out_h))]

    def attend(tok, ws):
        flat = [a for pair in ws for a in pair]
        return full_self_attention(tok, *flat, heads)

    if axis == "h":
        mid = tokens + attend(tokens, long_w)
        expect = mid + np.vstack([attend(mid[i : i + 1], unit_w) for i in range(length)])
    else:
        mid = tokens + np.vstack([attend(tokens[i : i + 1], unit_w) for i in range(length)])
        expect = mid + attend(mid, long_w)
    return m, x, expect.T.reshape(shape), attend(tokens, long_w).T.reshape(shape)
