"""
ws_pipeline.py — End-to-end disparity estimation, training loss and toy trainer.

forward():
    matching     E_f on both images (shared weights)
    wavelet      Haar pyramid of the left image
    context      E_l on the level-1 LL band → initial hidden states
    high         E_h on the detail bands → preserved fh0
    correlation  all-pairs volume at 1/4
    update[k]    n_k refinement iterations from d_0 = 0
    upsample     bilinear ×4 with ×4 value scaling

Variants (model.variant): full, no_fh (plain high-frequency extractor),
no_hpu (high-frequency features fed to a ConvGRU), baseline (E_l on the full
image, no wavelets, ConvGRU).

Stage wall-clock times accumulate in _STAGE_TIMINGS (seconds), read by the
CLI manifest and the benchmark report.
"""

import contextlib
import copy
import logging
import os
import time as _time
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ws_backbone import (
    extract_high, extract_high_simple, extract_low, extract_matching, init_high, init_high_simple,
    init_low, init_matching,
)
from ws_config import make_config
from ws_correlation import build_volume
from ws_hpu import HpuState, hpu_update, init_update
from ws_stereo_io import DisparityMap
from ws_tensor import (
    ConfigError, DimensionError, NumericalError, ParameterStore, Tensor, WaveletStereoError, abs_,
    add, backward, interp_matrix, make_rng, mul, resize_bilinear, scale, sub, sum_, tensor_op,
)
from ws_wavelet import build_pyramid

logger = logging.getLogger("ws.pipeline")
train_logger = logging.getLogger("ws.train")

_STAGE_TIMINGS: Dict[str, float] = {}


class TrainingError(WaveletStereoError):
    exit_code = 5

    def __init__(self, step: int, msg: str):
        super().__init__(f"training diverged at step {step}: {msg}")
        self.step = step


@contextlib.contextmanager
def _stage(name: str) -> Iterator[None]:
    t0 = _time.perf_counter()
    try:
        yield
    except NumericalError as exc:
        raise NumericalError(f"stage {name}: {exc}") from exc
    finally:
        key = "update" if name.startswith("update[") else name
        _STAGE_TIMINGS[key] = _STAGE_TIMINGS.get(key, 0.0) + (_time.perf_counter() - t0)


def reset_stage_timings() -> None:
    _STAGE_TIMINGS.clear()


def stage_timings() -> Dict[str, float]:
    return dict(_STAGE_TIMINGS)


@dataclass
class InferenceResult:
    disparities: List[Tensor]
    quarter: List[Tensor]
    deltas: List[Tensor]
    per_iter_runtime: List[float] = field(default_factory=list)

    @property
    def n_k(self) -> int:
        return len(self.disparities)

    @property
    def update_runtime(self) -> float:
        return float(sum(self.per_iter_runtime))


# ==============================================================================
# 1) Parameters and inputs
# ==============================================================================

def init_params(cfg: Optional[dict] = None, seed: Optional[int] = None) -> ParameterStore:
    """All model parameters for cfg's variant, drawn in a fixed order from PCG64(seed)."""
    cfg = cfg or make_config()
    rng = make_rng(cfg["seed"] if seed is None else seed)
    store = ParameterStore()
    variant = cfg["model"]["variant"]
    init_matching(store, cfg, rng)
    init_low(store, cfg, rng)
    if variant in ("full", "no_hpu"):
        init_high(store, cfg, rng)
    elif variant == "no_fh":
        init_high_simple(store, cfg, rng)
    init_update(store, cfg, rng)
    logger.info("Initialized %s model: %d tensors, %d parameters", variant, len(store), store.num_parameters())
    return store


def normalize_image(img: Union[np.ndarray, Tensor]) -> Tensor:
    """[0, 255] pixels → [−1, 1]."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    return Tensor(2.0 * arr / 255.0 - 1.0)


def _check_inputs(I_L: Tensor, I_R: Tensor) -> None:
    if I_L.shape != I_R.shape:
        raise DimensionError(f"left {I_L.shape} and right {I_R.shape} images differ in shape")
    if I_L.ndim != 4 or I_L.shape[1] != 3:
        raise DimensionError(f"images must be N×3×H×W, got {I_L.shape}")
    h, w = I_L.shape[2:]
    if h % 16 or w % 16:
        raise DimensionError(f"image {h}x{w} must be divisible by 16 (pad, e.g. --pad reflect)")


# ==============================================================================
# 2) Forward
# ==============================================================================

def forward(I_L: Tensor, I_R: Tensor, params: ParameterStore, n_k: Optional[int] = None,
            cfg: Optional[dict] = None) -> InferenceResult:
    cfg = cfg or make_config()
    m = cfg["model"]
    n_k = cfg["eval"]["n_k"] if n_k is None else n_k
    if n_k < 1:
        raise ConfigError(f"n_k must be >= 1, got {n_k}")
    if m["upsample"] != "bilinear":
        raise ConfigError(f"upsample={m['upsample']!r} is reserved and not implemented")
    _check_inputs(I_L, I_R)
    variant = m["variant"]
    h, w = I_L.shape[2:]

    with _stage("matching"):
        fL = extract_matching(I_L, params)
        fR = extract_matching(I_R, params)
    if variant == "baseline":
        with _stage("context"):
            context = extract_low(I_L, params, image_hw=(h, w))
        fh0 = None
    else:
        with _stage("wavelet"):
            pyr = build_pyramid(I_L, m["n_i"])
        with _stage("context"):
            context = extract_low(pyr.level(1).ll, params, image_hw=(h, w))
        with _stage("high"):
            fh0 = extract_high_simple(pyr, params) if variant == "no_fh" else extract_high(pyr, params)
    with _stage("correlation"):
        C = build_volume(fL, fR, m["pyramid_levels"])

    n = I_L.shape[0]
    state = HpuState(hidden=context, fh0=fh0, d=Tensor(np.zeros((n, 1, h // 4, w // 4))))
    result = InferenceResult(disparities=[], quarter=[], deltas=[])
    for k in range(1, n_k + 1):
        t0 = _time.perf_counter()
        with _stage(f"update[{k}]"):
            state, delta = hpu_update(state, C, params, cfg)
        result.per_iter_runtime.append(_time.perf_counter() - t0)
        with _stage("upsample"):
            full = scale(resize_bilinear(state.d, scale=4.0), 4.0)
        result.quarter.append(state.d)
        result.deltas.append(delta)
        result.disparities.append(full)
    return result


def forward_gru_baseline(I_L: Tensor, I_R: Tensor, params: ParameterStore, n_k: Optional[int] = None,
                         cfg: Optional[dict] = None) -> InferenceResult:
    """The conventional iterative pipeline: no wavelets, no E_h, ConvGRU updates."""
    cfg = copy.deepcopy(cfg or make_config())
    cfg["model"]["variant"] = "baseline"
    if "gru.s4.w_z" not in params or "cnet.stem0.w" not in params:
        raise ConfigError("forward_gru_baseline needs parameters initialized for variant 'baseline'")
    return forward(I_L, I_R, params, n_k, cfg)


def downsample_disparity(full: Tensor) -> Tensor:
    """
    Least-squares inverse of the ×4 upsampling, values ÷ 4.

    Exact (up to rounding) on fields produced by forward(); any other
    full-resolution field maps to its closest upsampled-quarter fit.
    """
    h, w = full.shape[2:]
    if h % 4 or w % 4:
        raise DimensionError(f"downsample_disparity needs dims divisible by 4, got {h}x{w}")
    ph = np.linalg.pinv(interp_matrix(h // 4, h, np.float64)).astype(full.dtype)
    pw = np.linalg.pinv(interp_matrix(w // 4, w, np.float64)).astype(full.dtype)
    out = (ph @ full.data @ pw.T) * full.dtype.type(0.25)
    return tensor_op(out, (full,), lambda g: (ph.T @ (0.25 * g) @ pw,), "downsample_disparity")


def predict(params: ParameterStore, cfg: dict, left: np.ndarray, right: np.ndarray,
            n_k: Optional[int] = None) -> InferenceResult:
    """forward() on raw [0, 255] N×3×H×W arrays."""
    return forward(normalize_image(left), normalize_image(right), params, n_k, cfg)


# ==============================================================================
# 3) Loss
# ==============================================================================

def loss_weights(n_k: int, gamma: float = 0.9) -> List[float]:
    """γ^(n_k − k) for k = 1..n_k: later iterations weigh more."""
    return [gamma ** (n_k - k) for k in range(1, n_k + 1)]


def _as_nchw(x, like: Tensor) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = arr.reshape(like.shape)
    return Tensor(arr)


def loss(result: InferenceResult, d_gt, gamma: float = 0.9, valid_mask=None) -> Tensor:
    """
    Σ_k γ^(n_k − k) · mean over valid pixels of |d_k − d_gt|.

    The weight exponent's index is the iteration index k, so the final
    prediction carries weight 1.
    """
    if not result.disparities:
        raise ValueError("loss of an empty InferenceResult")
    ref = result.disparities[0]
    gt = _as_nchw(d_gt, ref)
    mask = _as_nchw(np.ones(ref.shape) if valid_mask is None else valid_mask, ref)
    count = float(mask.data.sum())
    if count == 0:
        raise ValueError("loss: valid mask selects no pixels")
    total = None
    for w, d_k in zip(loss_weights(result.n_k, gamma), result.disparities):
        term = scale(sum_(mul(abs_(sub(d_k, gt)), mask)), w / count)
        total = term if total is None else add(total, term)
    return total


# ==============================================================================
# 4) Toy trainer
# ==============================================================================

Pair = Tuple[np.ndarray, np.ndarray, DisparityMap]


def _crop(pair: Pair, crop: Optional[Sequence[int]], rng: np.random.Generator) -> Pair:
    if not crop:
        return pair
    left, right, gt = pair
    h, w = left.shape[2:]
    ch, cw = crop
    if ch > h or cw > w:
        raise ConfigError(f"crop {ch}x{cw} larger than image {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    ys, xs = slice(y0, y0 + ch), slice(x0, x0 + cw)
    return (left[..., ys, xs], right[..., ys, xs],
            DisparityMap(values=gt.values[ys, xs], valid=gt.valid[ys, xs]))


class _Optimizer:
    """Element-wise clip to [−clip, clip], then SGD, Adam or AdamW (decoupled weight decay)."""

    def __init__(self, cfg: dict):
        t = cfg["train"]
        self.kind = t["optimizer"]
        self.lr = float(t["lr"])
        self.clip = float(t["clip"])
        self.b1, self.b2 = (float(b) for b in t["adam_betas"])
        self.eps = float(t["adam_eps"])
        self.weight_decay = float(t["weight_decay"]) if self.kind == "adamw" else 0.0
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ParameterStore) -> None:
        self.t += 1
        for name in params.names():
            g = np.clip(params.grad(name), -self.clip, self.clip)
            data = params[name].data
            if self.kind == "sgd":
                update = self.lr * g
            else:
                m = self.m.get(name, np.zeros_like(g))
                v = self.v.get(name, np.zeros_like(g))
                m = self.b1 * m + (1.0 - self.b1) * g
                v = self.b2 * v + (1.0 - self.b2) * g * g
                self.m[name], self.v[name] = m, v
                m_hat = m / (1.0 - self.b1 ** self.t)
                v_hat = v / (1.0 - self.b2 ** self.t)
                update = self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * data)
            params.set(name, data - update.astype(data.dtype))


def train_toy(pairs: Sequence[Pair], cfg: Optional[dict] = None,
              params: Optional[ParameterStore] = None) -> Tuple[ParameterStore, pd.DataFrame]:
    """
    Deterministic toy training. Pairs are (left, right) 1×3×H×W arrays in
    [0, 255] plus a DisparityMap; they are visited cyclically, one per step.
    Returns the trained store and the per-step loss curve.
    """
    if not pairs:
        raise ValueError("train_toy needs at least one pair")
    cfg = cfg or make_config()
    t = cfg["train"]
    params = params if params is not None else init_params(cfg)
    crop_rng = make_rng(cfg["seed"] + 1)
    opt = _Optimizer(cfg)
    rows = []
    t0 = _time.perf_counter()
    train_logger.info("Training %s for %d steps (%s, lr=%g, n_k=%d) on %d pair(s)",
                      cfg["model"]["variant"], t["steps"], t["optimizer"], t["lr"], t["n_k"], len(pairs))
    for step in range(t["steps"]):
        left, right, gt = _crop(pairs[step % len(pairs)], t["crop"], crop_rng)
        try:
            result = predict(params, cfg, left, right, t["n_k"])
            value = loss(result, gt.values, t["gamma"], gt.valid.astype(np.float64))
        except NumericalError as exc:
            raise TrainingError(step, str(exc)) from exc
        loss_value = value.item()
        if not np.isfinite(loss_value):
            raise TrainingError(step, f"loss is {loss_value}")
        params.zero_grad()
        backward(value)
        opt.step(params)
        rows.append({"step": step, "loss": loss_value})
        if step % t["log_every"] == 0 or step == t["steps"] - 1:
            train_logger.info("  step %4d  loss %.6f", step, loss_value)
    train_logger.info("Training finished in %.1fs (final loss %.6f)", _time.perf_counter() - t0, rows[-1]["loss"])
    return params, pd.DataFrame(rows, columns=["step", "loss"])


def write_loss_curve(curve: pd.DataFrame, path: str) -> None:
    tmp = path + ".tmp"
    curve.to_csv(tmp, index=False, float_format="%.8f")
    os.replace(tmp, path)
