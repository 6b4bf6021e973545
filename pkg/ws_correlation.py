"""
ws_correlation.py — All-pairs row correlation, its pooled pyramid and the lookup operator.

Level 0 holds, for every row h and every pair of columns (w, w'):

    C[n, h, w, w'] = <fL[n, :, h, w], fR[n, :, h, w']> / sqrt(Cf)

accumulated channel by channel in a fixed order so that the result is
bit-identical to a scalar triple loop and independent of the thread count.
Level p+1 average-pools level p along the last axis (kernel 2, stride 2).

Disparity convention: left pixel w matches right pixel w − d (d ≥ 0).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List

import numpy as np

from ws_tensor import DimensionError, Tensor, get_num_threads, tensor_op

logger = logging.getLogger("ws.correlation")


@dataclass(frozen=True)
class CorrelationVolume:
    levels: List[Tensor]
    scale: float

    @property
    def pyramid_levels(self) -> int:
        return len(self.levels)


def corr_scale(channels: int, dtype) -> np.floating:
    """1/√Cf in the working precision."""
    return np.dtype(dtype).type(1.0 / np.sqrt(channels))


def _volume_rows(fl: np.ndarray, fr: np.ndarray, scale) -> np.ndarray:
    n, c, h, w = fl.shape
    acc = np.zeros((n, h, w, w), dtype=fl.dtype)
    for ch in range(c):
        acc += fl[:, ch, :, :, None] * fr[:, ch, :, None, :]
    return acc * scale


def _pool_last(x: Tensor) -> Tensor:
    width = x.shape[-1] // 2
    a = x.data[..., 0:2 * width:2]
    b = x.data[..., 1:2 * width:2]
    full = x.shape[-1]

    def _bw(g):
        gx = np.zeros(x.shape[:-1] + (full,), dtype=g.dtype)
        gx[..., 0:2 * width:2] = 0.5 * g
        gx[..., 1:2 * width:2] = 0.5 * g
        return (gx,)

    return tensor_op((a + b) * 0.5, (x,), _bw, "corr_pool")


def build_volume(fL: Tensor, fR: Tensor, pyramid_levels: int = 4) -> CorrelationVolume:
    if fL.shape != fR.shape or fL.ndim != 4:
        raise DimensionError(f"correlation needs equal N×C×H×W features, got {fL.shape} and {fR.shape}")
    if pyramid_levels < 1:
        raise DimensionError(f"pyramid_levels must be >= 1, got {pyramid_levels}")
    n, c, h, w = fL.shape
    if w >> (pyramid_levels - 1) < 1:
        raise DimensionError(f"feature width {w} too small for {pyramid_levels} pyramid levels")
    dtype = np.result_type(fL.dtype, fR.dtype)
    scale = corr_scale(c, dtype)
    fl = fL.data.astype(dtype, copy=False)
    fr = fR.data.astype(dtype, copy=False)

    workers = min(get_num_threads(), h)
    if workers > 1:
        bounds = np.linspace(0, h, workers + 1).astype(int)
        chunks = [(bounds[i], bounds[i + 1]) for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda r: _volume_rows(fl[:, :, r[0]:r[1]], fr[:, :, r[0]:r[1]], scale), chunks))
        vol = np.concatenate(parts, axis=1)
    else:
        vol = _volume_rows(fl, fr, scale)

    s = float(scale)

    def _bw(g):
        gl = gr = None
        if fL.requires_grad:
            # (N,H,W,W') @ (N,H,W',C) → (N,H,W,C)
            gl = (g @ fr.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2) * s
        if fR.requires_grad:
            gr = (g.transpose(0, 1, 3, 2) @ fl.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2) * s
        return gl, gr

    level0 = tensor_op(vol, (fL, fR), _bw, "correlation")
    levels = [level0]
    for _ in range(pyramid_levels - 1):
        levels.append(_pool_last(levels[-1]))
    return CorrelationVolume(levels=levels, scale=s)


def lookup(C: CorrelationVolume, d: Tensor, r: int = 4) -> Tensor:
    """
    Sample every pyramid level around the current disparity.

    Output channel p·(2r+1) + (o + r) holds level p at position
    (w − d)/2^p + o, linearly interpolated and clamped to the row.
    """
    if r < 0:
        raise ValueError(f"lookup radius must be >= 0, got {r}")
    if not np.isfinite(d.data).all():
        raise ValueError("lookup: disparity contains NaN or Inf")
    n, h, w, _ = C.levels[0].shape
    if d.shape != (n, 1, h, w):
        raise DimensionError(f"lookup: disparity shape {d.shape} != {(n, 1, h, w)}")
    k = 2 * r + 1
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    centre = np.arange(w, dtype=np.float64)[None, None, :] - d.data[:, 0].astype(np.float64)

    samples, records = [], []
    for p, level in enumerate(C.levels):
        vol = level.data
        wp = vol.shape[-1]
        raw = centre[..., None] / (2 ** p) + offsets
        pos = np.clip(raw, 0.0, wp - 1)
        i0 = np.minimum(np.floor(pos).astype(np.int64), max(wp - 2, 0))
        i1 = np.minimum(i0 + 1, wp - 1)
        lam = (pos - i0).astype(vol.dtype)
        v0 = np.take_along_axis(vol, i0, axis=3)
        v1 = np.take_along_axis(vol, i1, axis=3)
        samples.append((1 - lam) * v0 + lam * v1)
        inside = (raw >= 0) & (raw <= wp - 1)
        records.append((i0, i1, lam, (v1 - v0) * inside, wp))
    out = np.concatenate(samples, axis=-1).transpose(0, 3, 1, 2)

    def _bw(g):
        gh = g.transpose(0, 2, 3, 1)
        grads = []
        gd = np.zeros((n, h, w), dtype=g.dtype)
        rows = np.arange(n * h * w)[:, None]
        for p, (i0, i1, lam, slope, wp) in enumerate(records):
            gp = gh[..., p * k:(p + 1) * k]
            if C.levels[p].requires_grad:
                gv = np.zeros((n * h * w, wp), dtype=g.dtype)
                np.add.at(gv, (rows, i0.reshape(-1, k)), ((1 - lam) * gp).reshape(-1, k))
                np.add.at(gv, (rows, i1.reshape(-1, k)), (lam * gp).reshape(-1, k))
                grads.append(gv.reshape(n, h, w, wp))
            else:
                grads.append(None)
            gd -= (gp * slope).sum(axis=-1) / (2 ** p)
        grads.append(gd[:, None] if d.requires_grad else None)
        return tuple(grads)

    return tensor_op(out, tuple(C.levels) + (d,), _bw, "lookup")

