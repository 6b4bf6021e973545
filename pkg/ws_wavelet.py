"""
ws_wavelet.py — Orthonormal 2-D Haar transform and the multi-level pyramid.

Per 2×2 block [[a, b], [c, d]]:

    LL = ( a + b + c + d) / 2
    HL = (-a + b - c + d) / 2     horizontal detail
    LH = (-a - b + c + d) / 2     vertical detail
    HH = ( a - b - c + d) / 2

The 4×4 matrix is orthonormal and symmetric-up-to-sign, so the inverse is its
transpose and the gradient of either direction is the other direction.
Only the left image is decomposed; the right image feeds E_f directly.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ws_tensor import ConfigError, DimensionError, RangeError, Tensor, concat, tensor_op

# Coefficients on (a, b, c, d) for each band.
_BANDS = {
    "ll": (1.0, 1.0, 1.0, 1.0),
    "hl": (-1.0, 1.0, -1.0, 1.0),
    "lh": (-1.0, -1.0, 1.0, 1.0),
    "hh": (1.0, -1.0, -1.0, 1.0),
}
_QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))   # a, b, c, d


def _band(x: Tensor, band: str) -> Tensor:
    coef = _BANDS[band]
    data = x.data
    out = 0.5 * sum(c * data[..., r::2, s::2] for c, (r, s) in zip(coef, _QUADRANTS))

    def _bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for c, (r, s) in zip(coef, _QUADRANTS):
            gx[..., r::2, s::2] = 0.5 * c * g
        return (gx,)

    return tensor_op(out, (x,), _bw, f"dwt2.{band}")


def dwt2(x: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Single-level Haar DWT → (ll, lh, hl, hh), each at half resolution."""
    if x.ndim != 4:
        raise DimensionError(f"dwt2 expects N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise DimensionError(f"dwt2 needs even dims, got {h}x{w}")
    return _band(x, "ll"), _band(x, "lh"), _band(x, "hl"), _band(x, "hh")


def idwt2(ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor) -> Tensor:
    """Exact inverse of dwt2."""
    if not (ll.shape == lh.shape == hl.shape == hh.shape) or ll.ndim != 4:
        raise DimensionError(
            f"idwt2 sub-bands must share a 4-D shape, got {ll.shape} {lh.shape} {hl.shape} {hh.shape}"
        )
    bands = {"ll": ll, "lh": lh, "hl": hl, "hh": hh}
    n, c, h, w = ll.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=np.result_type(*(t.dtype for t in bands.values())))
    for q, (r, s) in enumerate(_QUADRANTS):
        out[..., r::2, s::2] = 0.5 * sum(_BANDS[k][q] * t.data for k, t in bands.items())

    def _bw(g):
        return tuple(
            0.5 * sum(_BANDS[k][q] * g[..., r::2, s::2] for q, (r, s) in enumerate(_QUADRANTS))
            for k in bands
        )

    return tensor_op(out, tuple(bands.values()), _bw, "idwt2")


# ==============================================================================
# Pyramid
# ==============================================================================

@dataclass(frozen=True)
class WaveletLevel:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor


@dataclass(frozen=True)
class WaveletPyramid:
    levels: List[WaveletLevel]

    @property
    def n_i(self) -> int:
        return len(self.levels)

    def level(self, i: int) -> WaveletLevel:
        """1-based access; level 1 is the finest."""
        if not 1 <= i <= self.n_i:
            raise RangeError(f"wavelet level {i} out of range 1..{self.n_i}")
        return self.levels[i - 1]


def required_padding(h: int, w: int, n_i: int) -> Tuple[int, int]:
    m = 2 ** n_i
    return (-h) % m, (-w) % m


def build_pyramid(image: Tensor, n_i: int = 3) -> WaveletPyramid:
    """Iterate dwt2 on the LL band n_i times."""
    if n_i < 1:
        raise ConfigError(f"n_i must be >= 1, got {n_i}")
    if image.ndim != 4:
        raise DimensionError(f"build_pyramid expects N×C×H×W, got {image.shape}")
    h, w = image.shape[2:]
    ph, pw = required_padding(h, w, n_i)
    if ph or pw:
        raise DimensionError(
            f"image {h}x{w} is not divisible by 2^{n_i}={2 ** n_i}; "
            f"pad by {ph} rows and {pw} cols to {h + ph}x{w + pw} (e.g. --pad reflect)"
        )
    levels = []
    ll = image
    for _ in range(n_i):
        ll, lh, hl, hh = dwt2(ll)
        levels.append(WaveletLevel(ll=ll, lh=lh, hl=hl, hh=hh))
    return WaveletPyramid(levels=levels)


def concat_high(pyr: WaveletPyramid, level: int) -> Tensor:
    """Detail bands of one level stacked on channels as HL, LH, HH."""
    lv = pyr.level(level)
    return concat([lv.hl, lv.lh, lv.hh], axis=1)


def reconstruct(pyr: WaveletPyramid) -> Tensor:
    """Cascade idwt2 from the coarsest LL back to the input image."""
    ll = pyr.levels[-1].ll
    for lv in reversed(pyr.levels):
        ll = idwt2(ll, lv.lh, lv.hl, lv.hh)
    return ll


def pad_reflect(img: np.ndarray, n_i: int) -> np.ndarray:
    """Reflect-pad the trailing two axes up to the next multiple of 2^n_i."""
    h, w = img.shape[-2:]
    ph, pw = required_padding(h, w, n_i)
    if not (ph or pw):
        return img
    widths = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if h > ph and w > pw else "symmetric"
    return np.pad(img, widths, mode=mode)
