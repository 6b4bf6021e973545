"""
ws_freqeval.py — Frequency-split evaluation.

  canny()              edge mask marking high-frequency pixels (thresholds 100/200)
  epe_split()          EPE over all / edge / smooth pixels, D1, bad-1/2/3
  convergence_trace()  one row per iteration: k, epe_total, epe_high, epe_low
  mean_trace()         dataset mean of many per-frame traces

Canny follows OpenCV's defaults: 8-bit luma input, 3×3 Sobel with replicated
borders, L1 magnitude, 4-direction non-maximum suppression with the
tan(22.5°) test in 15-bit fixed point, hysteresis linking over 8-neighbours.
No pre-blur.

Region EPEs divide by the region's pixel count. A region with no valid pixel
is reported as None (absent), never as 0.
"""

import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from ws_stereo_io import DisparityMap
from ws_tensor import Tensor

logger = logging.getLogger("ws.eval")

TRACE_COLUMNS = ["k", "epe_total", "epe_high", "epe_low"]
CANNY_LOW = 100
CANNY_HIGH = 200

_LUMA = np.array([0.299, 0.587, 0.114])
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_TG22 = int(0.4142135623730950488016887242097 * (1 << 15) + 0.5)

ArrayLike = Union[np.ndarray, Tensor]


def _array(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _plane(x: ArrayLike) -> np.ndarray:
    """Squeeze leading singleton axes down to H×W."""
    arr = _array(x)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"expected a single H×W plane, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FrequencyMask:
    mask: np.ndarray
    low_thresh: float = CANNY_LOW
    high_thresh: float = CANNY_HIGH

    @property
    def n_edge(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class FrequencyMetrics:
    epe_total: float
    epe_high: Optional[float]
    epe_low: Optional[float]
    d1: float
    bad_1: float
    bad_2: float
    bad_3: float
    n_high: int
    n_low: int

    def to_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


# ==============================================================================
# Canny
# ==============================================================================

def to_luma(img: ArrayLike) -> np.ndarray:
    """1×H×W / 3×H×W / H×W in [0, 255] → rounded 8-bit luma as float."""
    arr = _array(img)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.min(initial=0.0) < 0 or arr.max(initial=0.0) > 255:
        raise ValueError(f"pixel values must lie in [0, 255], got [{arr.min():.3f}, {arr.max():.3f}]")
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = np.tensordot(_LUMA, arr, axes=([0], [0]))
    elif arr.ndim != 2:
        raise ValueError(f"canny expects 1 or 3 channels, got shape {arr.shape}")
    return np.round(arr)


def canny(img: ArrayLike, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> FrequencyMask:
    gray = to_luma(img)
    h, w = gray.shape
    dx = ndimage.correlate(gray, _SOBEL_X, mode="nearest").astype(np.int64)
    dy = ndimage.correlate(gray, _SOBEL_X.T, mode="nearest").astype(np.int64)
    mag = np.abs(dx) + np.abs(dy)
    lo, hi = int(np.floor(low)), int(np.floor(high))

    pad = np.zeros((h + 2, w + 2), dtype=np.int64)
    pad[1:-1, 1:-1] = mag
    centre = pad[1:-1, 1:-1]
    left, right = pad[1:-1, :-2], pad[1:-1, 2:]
    up, down = pad[:-2, 1:-1], pad[2:, 1:-1]
    up_left, up_right = pad[:-2, :-2], pad[:-2, 2:]
    down_left, down_right = pad[2:, :-2], pad[2:, 2:]

    xs, ys = np.abs(dx), np.abs(dy)
    tg22x = xs * _TG22
    tg67x = tg22x + (xs << 16)
    ys15 = ys << 15
    horizontal = ys15 < tg22x
    vertical = ~horizontal & (ys15 > tg67x)
    diagonal = ~horizontal & ~vertical
    same_sign = (dx ^ dy) >= 0
    # s = +1: up-left vs down-right; s = -1: up-right vs down-left
    diag_a = np.where(same_sign, up_left, up_right)
    diag_b = np.where(same_sign, down_right, down_left)

    keep = (
        (horizontal & (centre > left) & (centre >= right))
        | (vertical & (centre > up) & (centre >= down))
        | (diagonal & (centre > diag_a) & (centre > diag_b))
    )
    candidates = keep & (mag > lo)
    strong = candidates & (mag > hi)

    labels, count = ndimage.label(candidates, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return FrequencyMask(mask=np.zeros((h, w), dtype=bool), low_thresh=low, high_thresh=high)
    seeded = np.zeros(count + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return FrequencyMask(mask=seeded[labels], low_thresh=low, high_thresh=high)


# ==============================================================================
# Metrics
# ==============================================================================

def epe_split(pred: ArrayLike, gt: Union[ArrayLike, DisparityMap], mask: FrequencyMask,
              valid: Optional[ArrayLike] = None) -> FrequencyMetrics:
    """End-point error over all valid pixels and split by the edge mask."""
    if isinstance(gt, DisparityMap):
        gt_values = gt.values.astype(np.float64)
        gt_valid = gt.valid
    else:
        gt_values = _plane(gt)
        gt_valid = np.ones(gt_values.shape, dtype=bool)
    p = _plane(pred)
    m = np.asarray(mask.mask, dtype=bool)
    if p.shape != gt_values.shape or m.shape != p.shape:
        raise ValueError(f"shape mismatch: pred {p.shape}, gt {gt_values.shape}, mask {m.shape}")
    ok = gt_valid.copy()
    if valid is not None:
        ok &= _plane(valid).astype(bool)
    n = int(ok.sum())
    if n == 0:
        raise ValueError("epe_split: no valid pixels")

    err = np.abs(p - gt_values)
    high = ok & m
    low = ok & ~m
    n_high, n_low = int(high.sum()), int(low.sum())
    e, g = err[ok], gt_values[ok]
    return FrequencyMetrics(
        epe_total=float(e.mean()),
        epe_high=float(err[high].mean()) if n_high else None,
        epe_low=float(err[low].mean()) if n_low else None,
        d1=100.0 * float(np.mean((e > 3.0) & (e > 0.05 * g))),
        bad_1=100.0 * float(np.mean(e > 1.0)),
        bad_2=100.0 * float(np.mean(e > 2.0)),
        bad_3=100.0 * float(np.mean(e > 3.0)),
        n_high=n_high,
        n_low=n_low,
    )


def convergence_trace(result, gt: Union[ArrayLike, DisparityMap], mask: FrequencyMask,
                      valid: Optional[ArrayLike] = None) -> pd.DataFrame:
    """
    Per-iteration EPE rows. `result` is an InferenceResult or any sequence of
    full-resolution predictions ordered by iteration.
    """
    preds: Sequence = getattr(result, "disparities", result)
    if len(preds) == 0:
        raise ValueError("convergence_trace: no iterations to trace")
    rows = []
    for k, pred in enumerate(preds, start=1):
        m = epe_split(pred, gt, mask, valid)
        rows.append({
            "k": k,
            "epe_total": m.epe_total,
            "epe_high": np.nan if m.epe_high is None else m.epe_high,
            "epe_low": np.nan if m.epe_low is None else m.epe_low,
        })
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def mean_trace(traces: List[pd.DataFrame]) -> pd.DataFrame:
    """Mean over frames per iteration; absent regions are skipped, not zeroed."""
    if not traces:
        raise ValueError("mean_trace: no traces")
    merged = pd.concat(traces, ignore_index=True)
    out = merged.groupby("k", sort=True)[TRACE_COLUMNS[1:]].mean().reset_index()
    return out[TRACE_COLUMNS]


def write_trace_csv(trace: pd.DataFrame, path: str) -> None:
    tmp = path + ".tmp"
    trace.to_csv(tmp, index=False, float_format="%.6f", columns=TRACE_COLUMNS)
    os.replace(tmp, path)


def read_trace_csv(path: str) -> pd.DataFrame:
    return pd.read_csv(path)[TRACE_COLUMNS]
