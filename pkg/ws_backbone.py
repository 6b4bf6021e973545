"""
ws_backbone.py — Feature extractors.

  E_f  matching encoder, shared by both images, output at 1/4 (Cf channels)
  E_l  low-frequency context encoder on the level-1 LL band → 1/4, 1/8, 1/16,
       tanh outputs that initialize the update hidden states
  E_h  U-shaped high-frequency encoder; level-i detail bands enter at the
       stage whose resolution is H/2^i, additive skips on the way up

Every extractor is an `init_*` (creates parameters under its prefix, in a
fixed order) plus an `extract_*` that is a pure function of (input, params).
Downsampling convs are 4×4, stride 2, pad 1, so even sizes halve exactly.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ws_tensor import (
    ConfigError, DimensionError, ParameterStore, Tensor, add, conv, init_conv, relu,
    resize_bilinear, tanh,
)
from ws_wavelet import WaveletPyramid, concat_high

PREFIX_MATCHING = "fnet"
PREFIX_LOW = "cnet"
PREFIX_HIGH = "hnet"
PREFIX_HIGH_SIMPLE = "hnet_s"

_STEM_CHANNELS = 32
_DETAIL_CHANNELS = 9   # HL, LH, HH × RGB


@dataclass(frozen=True)
class MultiScaleFeatures:
    f4: Tensor
    f8: Tensor
    f16: Tensor

    def __post_init__(self):
        for fine, coarse, label in ((self.f4, self.f8, "1/8"), (self.f8, self.f16, "1/16")):
            if coarse.shape[0] != fine.shape[0]:
                raise DimensionError("feature scales disagree on batch size")
            if (coarse.shape[2] * 2, coarse.shape[3] * 2) != fine.shape[2:]:
                raise DimensionError(f"{label} features {coarse.shape} are not half of {fine.shape}")

    @property
    def channels(self) -> Tuple[int, int, int]:
        return self.f4.shape[1], self.f8.shape[1], self.f16.shape[1]

    def by_scale(self) -> Dict[int, Tensor]:
        return {4: self.f4, 8: self.f8, 16: self.f16}


def _down(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    return conv(x, params, name, stride=2, pad=1)


def _up2(x: Tensor) -> Tensor:
    return resize_bilinear(x, scale=2.0)


def _check_divisible(x: Tensor, factor: int, what: str) -> None:
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise DimensionError(f"{what}: input {h}x{w} must be divisible by {factor}")


# ==============================================================================
# E_f: matching encoder
# ==============================================================================

def init_matching(store: ParameterStore, cfg: dict, rng: np.random.Generator) -> None:
    cf = cfg["model"]["matching_channels"]
    p = PREFIX_MATCHING
    init_conv(store, f"{p}.conv1", _STEM_CHANNELS, 3, 3, rng)
    init_conv(store, f"{p}.down1", _STEM_CHANNELS, _STEM_CHANNELS, 4, rng)
    init_conv(store, f"{p}.down2", 48, _STEM_CHANNELS, 4, rng)
    init_conv(store, f"{p}.out", cf, 48, 3, rng)


def extract_matching(img: Tensor, params: ParameterStore) -> Tensor:
    _check_divisible(img, 4, "extract_matching")
    p = PREFIX_MATCHING
    x = relu(conv(img, params, f"{p}.conv1"))
    x = relu(_down(x, params, f"{p}.down1"))
    x = relu(_down(x, params, f"{p}.down2"))
    return conv(x, params, f"{p}.out")


# ==============================================================================
# E_l: low-frequency context encoder
# ==============================================================================

def init_low(store: ParameterStore, cfg: dict, rng: np.random.Generator) -> None:
    c = cfg["model"]["feature_channels"]
    p = PREFIX_LOW
    if cfg["model"]["variant"] == "baseline":
        # the baseline reads the full-resolution image, one more halving
        init_conv(store, f"{p}.stem0", _STEM_CHANNELS, 3, 4, rng)
        init_conv(store, f"{p}.stem", _STEM_CHANNELS, _STEM_CHANNELS, 4, rng)
    else:
        init_conv(store, f"{p}.stem", _STEM_CHANNELS, 3, 4, rng)
    init_conv(store, f"{p}.res1.a", _STEM_CHANNELS, _STEM_CHANNELS, 3, rng)
    init_conv(store, f"{p}.res1.b", _STEM_CHANNELS, _STEM_CHANNELS, 3, rng)
    init_conv(store, f"{p}.out4", c, _STEM_CHANNELS, 3, rng)
    init_conv(store, f"{p}.down8", _STEM_CHANNELS, _STEM_CHANNELS, 4, rng)
    init_conv(store, f"{p}.out8", c, _STEM_CHANNELS, 3, rng)
    init_conv(store, f"{p}.down16", _STEM_CHANNELS, _STEM_CHANNELS, 4, rng)
    init_conv(store, f"{p}.out16", c, _STEM_CHANNELS, 3, rng)


def extract_low(x: Tensor, params: ParameterStore,
                image_hw: Optional[Tuple[int, int]] = None) -> MultiScaleFeatures:
    """
    Context features at 1/4, 1/8, 1/16 of the original image.

    `x` is the level-1 LL band (half resolution), or the full image when the
    store holds the baseline stem. `image_hw` is checked against that.
    """
    p = PREFIX_LOW
    full_res = f"{p}.stem0.w" in params
    if image_hw is not None:
        factor = 1 if full_res else 2
        expected = (image_hw[0] // factor, image_hw[1] // factor)
        if x.shape[2:] != expected:
            raise DimensionError(
                f"extract_low: input is {x.shape[2]}x{x.shape[3]}, expected {expected[0]}x{expected[1]} "
                f"({'full image' if full_res else 'level-1 LL band'})"
            )
    _check_divisible(x, 16 if full_res else 8, "extract_low")
    if full_res:
        x = relu(_down(x, params, f"{p}.stem0"))
    x = relu(_down(x, params, f"{p}.stem"))
    x = relu(add(x, conv(relu(conv(x, params, f"{p}.res1.a")), params, f"{p}.res1.b")))
    f4 = tanh(conv(x, params, f"{p}.out4"))
    x = relu(_down(x, params, f"{p}.down8"))
    f8 = tanh(conv(x, params, f"{p}.out8"))
    x = relu(_down(x, params, f"{p}.down16"))
    f16 = tanh(conv(x, params, f"{p}.out16"))
    return MultiScaleFeatures(f4=f4, f8=f8, f16=f16)


# ==============================================================================
# E_h: U-shaped high-frequency encoder
# ==============================================================================

def init_high(store: ParameterStore, cfg: dict, rng: np.random.Generator) -> None:
    c = cfg["model"]["feature_channels"]
    levels = cfg["model"]["high_levels"]
    s = _STEM_CHANNELS
    p = PREFIX_HIGH
    init_conv(store, f"{p}.in1", s, _DETAIL_CHANNELS, 3, rng)
    init_conv(store, f"{p}.enc1", s, s, 4, rng)
    if levels >= 2:
        init_conv(store, f"{p}.in2", s, _DETAIL_CHANNELS, 3, rng)
    init_conv(store, f"{p}.enc2", s, s, 4, rng)
    if levels >= 3:
        init_conv(store, f"{p}.in3", s, _DETAIL_CHANNELS, 3, rng)
    init_conv(store, f"{p}.bottom", s, s, 4, rng)
    init_conv(store, f"{p}.dec2", s, s, 3, rng)
    init_conv(store, f"{p}.dec1", s, s, 3, rng)
    init_conv(store, f"{p}.out4", c, s, 3, rng)
    init_conv(store, f"{p}.out8", c, s, 3, rng)
    init_conv(store, f"{p}.out16", c, s, 3, rng)


def extract_high(pyr: WaveletPyramid, params: ParameterStore) -> MultiScaleFeatures:
    if pyr.n_i != 3:
        raise ConfigError(f"extract_high wires exactly 3 wavelet levels, pyramid has {pyr.n_i}")
    p = PREFIX_HIGH
    e0 = relu(conv(concat_high(pyr, 1), params, f"{p}.in1"))              # 1/2
    e1 = _down(e0, params, f"{p}.enc1")                                   # 1/4
    if f"{p}.in2.w" in params:
        e1 = add(e1, conv(concat_high(pyr, 2), params, f"{p}.in2"))
    e1 = relu(e1)
    e2 = _down(e1, params, f"{p}.enc2")                                   # 1/8
    if f"{p}.in3.w" in params:
        e2 = add(e2, conv(concat_high(pyr, 3), params, f"{p}.in3"))
    e2 = relu(e2)
    b = relu(_down(e2, params, f"{p}.bottom"))                            # 1/16
    d2 = relu(add(conv(_up2(b), params, f"{p}.dec2"), e2))
    d1 = relu(add(conv(_up2(d2), params, f"{p}.dec1"), e1))
    return MultiScaleFeatures(
        f4=conv(d1, params, f"{p}.out4"),
        f8=conv(d2, params, f"{p}.out8"),
        f16=conv(b, params, f"{p}.out16"),
    )


# ── no_fh ablation: a plain two-layer extractor in place of the U-net ─────────

def init_high_simple(store: ParameterStore, cfg: dict, rng: np.random.Generator) -> None:
    c = cfg["model"]["feature_channels"]
    p = PREFIX_HIGH_SIMPLE
    init_conv(store, f"{p}.conv1", _STEM_CHANNELS, _DETAIL_CHANNELS, 3, rng)
    init_conv(store, f"{p}.down", c, _STEM_CHANNELS, 4, rng)


def extract_high_simple(pyr: WaveletPyramid, params: ParameterStore) -> MultiScaleFeatures:
    p = PREFIX_HIGH_SIMPLE
    x = relu(conv(concat_high(pyr, 1), params, f"{p}.conv1"))
    f4 = _down(x, params, f"{p}.down")
    f8 = resize_bilinear(f4, scale=0.5)
    return MultiScaleFeatures(f4=f4, f8=f8, f16=resize_bilinear(f8, scale=0.5))
