"""
tests/unit/test_backbone.py

Tests for ws_backbone: shape contracts of E_f / E_l / E_h, weight sharing and
zero-propagation.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from tests.conftest import make_image, make_toy_config, make_toy_params
from ws_backbone import (
    MultiScaleFeatures, extract_high, extract_high_simple, extract_low, extract_matching,
    init_high, init_low, init_matching,
)
from ws_config import make_config
from ws_pipeline import normalize_image
from ws_tensor import ConfigError, DimensionError, ParameterStore, Tensor, make_rng
from ws_wavelet import build_pyramid


# ── Helpers ───────────────────────────────────────────────────────────────────

def _store(cfg, *inits):
    store = ParameterStore()
    rng = make_rng(cfg["seed"])
    for init in inits:
        init(store, cfg, rng)
    return store


def _zero_weights(store, bias_seed=None):
    """Copy of `store` with every weight zeroed; biases zero or random."""
    rng = make_rng(bias_seed) if bias_seed is not None else None
    out = ParameterStore()
    for name, t in store.items():
        if name.endswith(".b") and rng is not None:
            out.add(name, rng.uniform(-1, 1, size=t.shape))
        else:
            out.add(name, np.zeros(t.shape))
    return out


def _image(h, w, seed=0):
    return normalize_image(make_image(1, 3, h, w, seed=seed))


# ── Tests ─────────────────────────────────────────────────────────────────────

class TestMatchingEncoder:

    def test_quarter_resolution_with_default_channels(self):
        cfg = make_config()
        out = extract_matching(_image(64, 128), _store(cfg, init_matching))
        assert out.shape == (1, 64, 16, 32)

    def test_shared_weights_give_identical_features(self):
        cfg = make_toy_config()
        params = make_toy_params(cfg)
        img = _image(16, 32, seed=3)
        a = extract_matching(img, params)
        b = extract_matching(Tensor(img.data), params)
        assert a.data.tobytes() == b.data.tobytes()

    def test_zero_network_gives_zero_features(self):
        cfg = make_toy_config()
        params = _zero_weights(_store(cfg, init_matching))
        out = extract_matching(_image(16, 32), params)
        assert not out.data.any()

    def test_indivisible_input_rejected(self):
        cfg = make_toy_config()
        with pytest.raises(DimensionError, match="divisible by 4"):
            extract_matching(_image(18, 32), _store(cfg, init_matching))


class TestLowEncoder:

    def test_scales_from_the_ll_band(self):
        cfg = make_config()
        pyr = build_pyramid(_image(64, 128), 3)
        feats = extract_low(pyr.level(1).ll, _store(cfg, init_low), image_hw=(64, 128))
        assert feats.f4.shape == (1, 32, 16, 32)
        assert feats.f8.shape == (1, 32, 8, 16)
        assert feats.f16.shape == (1, 32, 4, 8)

    def test_outputs_are_tanh_bounded(self):
        cfg = make_toy_config()
        pyr = build_pyramid(_image(32, 64, seed=1), 3)
        feats = extract_low(pyr.level(1).ll, make_toy_params(cfg), image_hw=(32, 64))
        for f in feats.by_scale().values():
            assert np.all(np.abs(f.data) <= 1.0)

    def test_bias_only_network_gives_constant_maps(self):
        cfg = make_toy_config()
        params = _zero_weights(_store(cfg, init_low), bias_seed=4)
        x = Tensor(np.full((1, 3, 16, 32), 0.3))
        feats = extract_low(x, params)
        for f in feats.by_scale().values():
            spread = f.data.max(axis=(2, 3)) - f.data.min(axis=(2, 3))
            assert np.all(spread == 0)

    def test_wrong_input_scale_rejected(self):
        cfg = make_toy_config()
        x = _image(32, 64)
        with pytest.raises(DimensionError, match="level-1 LL"):
            extract_low(x, _store(cfg, init_low), image_hw=(32, 64))

    def test_baseline_stem_reads_the_full_image(self):
        cfg = make_toy_config(model={"variant": "baseline"})
        feats = extract_low(_image(32, 64), _store(cfg, init_low), image_hw=(32, 64))
        assert feats.f4.shape[2:] == (8, 16)


class TestHighEncoder:

    def test_scales(self):
        cfg = make_config()
        pyr = build_pyramid(_image(64, 128, seed=2), 3)
        feats = extract_high(pyr, _store(cfg, init_high))
        assert [f.shape[2:] for f in (feats.f4, feats.f8, feats.f16)] == [(16, 32), (8, 16), (4, 8)]
        assert feats.channels == (32, 32, 32)

    def test_constant_image_gives_zero_features(self):
        cfg = make_toy_config()
        pyr = build_pyramid(Tensor(np.full((1, 3, 32, 64), 0.25)), 3)
        feats = extract_high(pyr, make_toy_params(cfg))
        for f in feats.by_scale().values():
            assert not f.data.any()

    def test_requires_three_levels(self):
        cfg = make_toy_config()
        with pytest.raises(ConfigError):
            extract_high(build_pyramid(_image(16, 32), 2), make_toy_params(cfg))

    def test_fewer_injected_levels(self):
        cfg = make_toy_config(model={"high_levels": 1})
        store = _store(cfg, init_high)
        assert "hnet.in2.w" not in store and "hnet.in3.w" not in store
        feats = extract_high(build_pyramid(_image(32, 64), 3), store)
        assert feats.f16.shape[2:] == (2, 4)

    def test_simple_extractor_scales(self):
        cfg = make_toy_config(model={"variant": "no_fh"})
        feats = extract_high_simple(build_pyramid(_image(32, 64), 3), make_toy_params(cfg))
        assert [f.shape[2:] for f in (feats.f4, feats.f8, feats.f16)] == [(8, 16), (4, 8), (2, 4)]


class TestMultiScaleFeatures:

    def test_scale_chain_checked(self):
        with pytest.raises(DimensionError):
            MultiScaleFeatures(f4=Tensor(np.zeros((1, 2, 8, 8))), f8=Tensor(np.zeros((1, 2, 4, 4))),
                               f16=Tensor(np.zeros((1, 2, 3, 2))))
