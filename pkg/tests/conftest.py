"""
tests/conftest.py — Shared builders for the wavelet stereo test suite.

Builders are plain functions (make_*) so tests can call them with their own
arguments; fixtures only handle isolation. Every test that writes to disk
uses tmp_path.
"""
import copy
import os
import sys

import numpy as np
import pytest


# ── Make sure the repo root is on sys.path so the ws_ modules import ──────────
_REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _REPO_ROOT not in sys.path:
    sys.path.insert(0, _REPO_ROOT)

# Patch matplotlib to Agg backend BEFORE anything touches pyplot
import matplotlib
matplotlib.use("Agg")

import ws_pipeline  # noqa: E402
from ws_config import make_config  # noqa: E402
from ws_stereo_io import SynthSpec, synth_pair, to_nchw  # noqa: E402
from ws_tensor import ParameterStore, Tensor, init_conv, make_rng, set_num_threads  # noqa: E402


# ── Autouse fixture: single-threaded, fresh stage timings ─────────────────────

@pytest.fixture(autouse=True)
def _reset_runtime_state():
    set_num_threads(1)
    ws_pipeline.reset_stage_timings()
    yield
    set_num_threads(1)


# ── Arrays and tensors ────────────────────────────────────────────────────────

def make_image(n=1, c=3, h=16, w=32, seed=0, low=0.0, high=255.0):
    """Uniform random N×C×H×W float64 array in [low, high]."""
    return make_rng(seed).uniform(low, high, size=(n, c, h, w))


def make_tensor(shape, seed=0, low=-1.0, high=1.0, requires_grad=False):
    return Tensor(make_rng(seed).uniform(low, high, size=shape), requires_grad=requires_grad)


def make_step_image(h=8, w=8, split=4, low=0, high=255):
    """Grey H×W image: columns < split are `low`, the rest `high`."""
    img = np.full((h, w), float(low))
    img[:, split:] = float(high)
    return img


# ── Configuration and parameters ──────────────────────────────────────────────

_TOY_MODEL = {
    "matching_channels": 8,
    "feature_channels": 8,
    "encoder_g_channels": [8, 8],
    "encoder_d_channels": [4, 4],
    "head_channels": 8,
    "pyramid_levels": 2,
    "lookup_radius": 2,
    "n_j": 2,
}


def make_toy_config(model=None, train=None, evaluation=None, seed=17):
    """
    Small-channel config for 16×32 inputs. `model`/`train`/`evaluation` are dicts
    merged over the toy defaults.
    """
    overrides = {
        "seed": seed,
        "model": {**_TOY_MODEL, **(model or {})},
        "train": {"steps": 3, "n_k": 2, "log_every": 1, **(train or {})},
        "eval": {"n_k": 3, **(evaluation or {})},
    }
    return make_config(copy.deepcopy(overrides))


def make_toy_params(cfg=None, seed=None):
    return ws_pipeline.init_params(cfg or make_toy_config(), seed)


def make_zero_store(layers):
    """
    ParameterStore of zero-initialized conv layers.

    `layers` is a list of (name, cout, cin, k) or (name, cout, cin, k, weight_key, bias_key).
    """
    store = ParameterStore()
    rng = make_rng(0)
    for spec in layers:
        name, cout, cin, k = spec[:4]
        keys = {"weight_key": spec[4], "bias_key": spec[5]} if len(spec) == 6 else {}
        init_conv(store, name, cout, cin, k, rng, zero=True, **keys)
    return store


# ── Synthetic stereo pairs ────────────────────────────────────────────────────

def make_pair(width=32, height=16, disparity=2.0, disparity_end=None, field="constant",
              texture="dots", seed=17):
    """(left 1×3×H×W, right 1×3×H×W, DisparityMap) from the synthetic generator."""
    spec = SynthSpec(width=width, height=height, disparity_field=field, disparity=disparity,
                     disparity_end=disparity if disparity_end is None else disparity_end,
                     texture=texture, seed=seed)
    left, right, gt = synth_pair(spec)
    return to_nchw(left), to_nchw(right), gt


def make_spec_dict(**overrides):
    spec = {"width": 32, "height": 16, "disparity_field": "constant", "disparity": 2.0,
            "disparity_end": 2.0, "texture": "dots", "seed": 17, "count": 1}
    spec.update(overrides)
    return spec
