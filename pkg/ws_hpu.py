"""
ws_hpu.py — High-frequency Preservation Update operator.

One update iteration, coarse to fine (1/16 → 1/8 → 1/4):

    fh, fl  = ifa(fh0[s], hidden[s])              iteration-local adaptation
    hidden' = hp_lstm_step(fl, fh, x_s)           c = f⊙fh + i⊙g, h = o⊙tanh(c)

with inputs
    x_16 = resize(hidden_8, ½)
    x_8  = [resize(hidden_4, ½), up(hidden'_16)]
    x_4  = [motion(C, d), up(hidden'_8)]

and Δd decoded from hidden'_4. fh0 is the extractor output and is never
rebuilt or written; every iteration adapts it afresh.

The ConvGRU update of the baseline (and of the no_hpu ablation, which feeds
the high-frequency features into the GRU input) follows the same schedule.
"""

import hashlib
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from ws_backbone import MultiScaleFeatures
from ws_correlation import CorrelationVolume, lookup
from ws_tensor import (
    ConfigError, DimensionError, ParameterStore, Tensor, add, concat, conv, global_pool,
    init_conv, mul, relu, resize_bilinear, sigmoid, tanh,
)

logger = logging.getLogger("ws.hpu")

SCALES = (4, 8, 16)
PREFIX_HPU = "hpu"
PREFIX_GRU = "gru"
PREFIX_MOTION = "motion"
PREFIX_HEAD = "head"
_GATES = ("i", "f", "g", "o")


@dataclass(frozen=True)
class HpuState:
    """Recurrent state of one forward pass. `fh0` is None for the baseline."""
    hidden: MultiScaleFeatures
    fh0: Optional[MultiScaleFeatures]
    d: Tensor
    k: int = 0


def features_checksum(feats: MultiScaleFeatures) -> str:
    digest = hashlib.sha256()
    for t in (feats.f4, feats.f8, feats.f16):
        digest.update(str(t.shape).encode("ascii"))
        digest.update(np.ascontiguousarray(t.data).tobytes())
    return digest.hexdigest()


def motion_channels(cfg: dict) -> int:
    m = cfg["model"]
    return m["encoder_g_channels"][1] + m["encoder_d_channels"][1] + 1


def _input_channels(cfg: dict, scale: int) -> int:
    c = cfg["model"]["feature_channels"]
    base = {16: c, 8: 2 * c, 4: motion_channels(cfg) + c}[scale]
    if cfg["model"]["variant"] == "no_hpu":
        base += c
    return base


# ==============================================================================
# Parameters
# ==============================================================================

def init_update(store: ParameterStore, cfg: dict, rng: np.random.Generator) -> None:
    """Motion encoders, per-scale recurrent cells, Δd head, in that order."""
    m = cfg["model"]
    c = m["feature_channels"]
    g1, g2 = m["encoder_g_channels"]
    e1, e2 = m["encoder_d_channels"]
    corr_ch = m["pyramid_levels"] * (2 * m["lookup_radius"] + 1)
    init_conv(store, f"{PREFIX_MOTION}.enc_g.conv1", g1, corr_ch, 1, rng)
    init_conv(store, f"{PREFIX_MOTION}.enc_g.conv2", g2, g1, 3, rng)
    init_conv(store, f"{PREFIX_MOTION}.enc_d.conv1", e1, 1, 7, rng)
    init_conv(store, f"{PREFIX_MOTION}.enc_d.conv2", e2, e1, 3, rng)

    use_hpu = m["variant"] in ("full", "no_fh")
    for s in SCALES:
        cin = c + _input_channels(cfg, s)
        if use_hpu:
            p = f"{PREFIX_HPU}.s{s}"
            init_conv(store, f"{p}.lsa", c, c, 1, rng, weight_key="w1", bias_key="b1")
            init_conv(store, f"{p}.lsa", c, c, 1, rng, weight_key="w2", bias_key="b2")
            if m["hsa_pooling"] == "channel":
                init_conv(store, f"{p}.hsa", 1, 2, 7, rng, weight_key="w3", bias_key="b3")
            else:
                init_conv(store, f"{p}.hsa", c, 2 * c, 7, rng, weight_key="w3", bias_key="b3")
            for gate in _GATES:
                init_conv(store, f"{p}.lstm", c, cin, 3, rng, weight_key=f"w_{gate}", bias_key=f"b_{gate}")
        else:
            p = f"{PREFIX_GRU}.s{s}"
            for gate in ("z", "r", "q"):
                init_conv(store, f"{p}", c, cin, 3, rng, weight_key=f"w_{gate}", bias_key=f"b_{gate}")

    init_conv(store, f"{PREFIX_HEAD}.conv1", m["head_channels"], c, 3, rng)
    init_conv(store, f"{PREFIX_HEAD}.conv2", 1, m["head_channels"], 3, rng, zero=m["head_zero_init"])


# ==============================================================================
# Attention and the frequency adapter
# ==============================================================================

def lsa(fl: Tensor, params: ParameterStore, prefix: str = "hpu.s4.lsa") -> Tensor:
    """Channel attention A_L = σ(ReLU(W1·GMP(fl)) + ReLU(W2·GAP(fl))), N×C×1×1."""
    z_max = relu(conv(global_pool("max", "spatial", fl), params, prefix, weight_key="w1", bias_key="b1"))
    z_avg = relu(conv(global_pool("avg", "spatial", fl), params, prefix, weight_key="w2", bias_key="b2"))
    return sigmoid(add(z_max, z_avg))


def hsa(fh: Tensor, params: ParameterStore, prefix: str = "hpu.s4.hsa", pooling: str = "channel") -> Tensor:
    """
    High-frequency attention through a 7×7 conv W3.

    channel pooling: per-pixel max/mean over channels → N×1×H×W map.
    spatial pooling: GMP/GAP over space, W3 on the 1×1 stack → N×C×1×1.
    """
    if pooling == "channel":
        pooled = concat([global_pool("max", "channel", fh), global_pool("avg", "channel", fh)], axis=1)
    elif pooling == "spatial":
        pooled = concat([global_pool("max", "spatial", fh), global_pool("avg", "spatial", fh)], axis=1)
    else:
        raise ConfigError(f"hsa pooling must be 'channel' or 'spatial', got {pooling!r}")
    return sigmoid(conv(pooled, params, prefix, pad=3, weight_key="w3", bias_key="b3"))


def ifa(fh0: Tensor, fl: Tensor, n_j: int, params: ParameterStore,
        prefix: str = "hpu.s4", pooling: str = "channel") -> Tuple[Tensor, Tensor]:
    """Alternate n_j rounds: odd rounds fh ← LSA(fl)⊙fh, even rounds fl ← HSA(fh)⊙fl."""
    if n_j < 1:
        raise ConfigError(f"IFA needs at least one round, got n_j={n_j}")
    if fh0.shape[0] != fl.shape[0] or fh0.shape[2:] != fl.shape[2:]:
        raise DimensionError(f"IFA inputs disagree: fh {fh0.shape} vs fl {fl.shape}")
    fh = fh0
    for j in range(1, n_j + 1):
        if j % 2:
            fh = mul(lsa(fl, params, f"{prefix}.lsa"), fh)
        else:
            fl = mul(hsa(fh, params, f"{prefix}.hsa", pooling), fl)
    return fh, fl


# ==============================================================================
# Recurrent cells
# ==============================================================================

def hp_lstm_step(hidden: Tensor, fh_adapted: Tensor, x_k: Tensor, params: ParameterStore,
                 prefix: str = "hpu.s4.lstm") -> Tensor:
    """LSTM step whose carried cell state is replaced by the adapted high-frequency features."""
    if hidden.shape != fh_adapted.shape:
        raise DimensionError(f"hp_lstm_step: hidden {hidden.shape} vs high-frequency {fh_adapted.shape}")
    hx = concat([hidden, x_k], axis=1)
    i = sigmoid(conv(hx, params, prefix, weight_key="w_i", bias_key="b_i"))
    f = sigmoid(conv(hx, params, prefix, weight_key="w_f", bias_key="b_f"))
    g = tanh(conv(hx, params, prefix, weight_key="w_g", bias_key="b_g"))
    o = sigmoid(conv(hx, params, prefix, weight_key="w_o", bias_key="b_o"))
    c = add(mul(f, fh_adapted), mul(i, g))
    return mul(o, tanh(c))


def conv_gru_step(hidden: Tensor, x_k: Tensor, params: ParameterStore, prefix: str = "gru.s4") -> Tensor:
    hx = concat([hidden, x_k], axis=1)
    z = sigmoid(conv(hx, params, prefix, weight_key="w_z", bias_key="b_z"))
    r = sigmoid(conv(hx, params, prefix, weight_key="w_r", bias_key="b_r"))
    q = tanh(conv(concat([mul(r, hidden), x_k], axis=1), params, prefix, weight_key="w_q", bias_key="b_q"))
    return add(mul(1.0 - z, hidden), mul(z, q))


# ==============================================================================
# Motion input, Δd head, full iteration
# ==============================================================================

def build_motion_input(C: CorrelationVolume, d: Tensor, params: ParameterStore, radius: int = 4) -> Tensor:
    """[Encoder_g(L(C, d)), Encoder_d(d), d] on channels."""
    corr = lookup(C, d, radius)
    g = relu(conv(relu(conv(corr, params, f"{PREFIX_MOTION}.enc_g.conv1")), params, f"{PREFIX_MOTION}.enc_g.conv2"))
    dfeat = relu(conv(relu(conv(d, params, f"{PREFIX_MOTION}.enc_d.conv1")), params, f"{PREFIX_MOTION}.enc_d.conv2"))
    return concat([g, dfeat, d], axis=1)


def decode_delta(hidden4: Tensor, params: ParameterStore) -> Tensor:
    return conv(relu(conv(hidden4, params, f"{PREFIX_HEAD}.conv1")), params, f"{PREFIX_HEAD}.conv2")


def _cell(s: int, hidden: Tensor, x: Tensor, state: HpuState, params: ParameterStore, cfg: dict) -> Tensor:
    m = cfg["model"]
    if f"{PREFIX_HPU}.s{s}.lstm.w_i" in params:
        fh, fl = ifa(state.fh0.by_scale()[s], hidden, m["n_j"], params, f"{PREFIX_HPU}.s{s}", m["hsa_pooling"])
        return hp_lstm_step(fl, fh, x, params, f"{PREFIX_HPU}.s{s}.lstm")
    if state.fh0 is not None:
        x = concat([x, state.fh0.by_scale()[s]], axis=1)
    return conv_gru_step(hidden, x, params, f"{PREFIX_GRU}.s{s}")


def hpu_update(state: HpuState, C: CorrelationVolume, params: ParameterStore,
               cfg: dict) -> Tuple[HpuState, Tensor]:
    """
    One refinement iteration. Returns the next state and the decoded Δd.

    d_k = d_{k−1} + Δd; the lookup sees a detached d_{k−1} unless
    model.detach_lookup_disparity is false.
    """
    m = cfg["model"]
    d_in = state.d.detach() if m["detach_lookup_disparity"] else state.d
    h4, h8, h16 = state.hidden.f4, state.hidden.f8, state.hidden.f16

    new16 = _cell(16, h16, resize_bilinear(h8, scale=0.5), state, params, cfg)
    new8 = _cell(8, h8, concat([resize_bilinear(h4, scale=0.5), resize_bilinear(new16, scale=2.0)], axis=1),
                 state, params, cfg)
    motion = build_motion_input(C, d_in, params, m["lookup_radius"])
    new4 = _cell(4, h4, concat([motion, resize_bilinear(new8, scale=2.0)], axis=1), state, params, cfg)

    delta = decode_delta(new4, params)
    d_new = add(d_in, delta)
    hidden = MultiScaleFeatures(f4=new4, f8=new8, f16=new16)
    return replace(state, hidden=hidden, d=d_new, k=state.k + 1), delta
