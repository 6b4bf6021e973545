"""
ws_stereo_io.py — Stereo file formats and the synthetic random-dot generator.

Formats:
  PFM      Pf (grey) / PF (colour) float32, scale sign = endianness, rows bottom-up.
           NaN/Inf on read → invalid pixel; invalid pixels are written as NaN.
  PNG16    KITTI convention, stored = round(256·d), 0 = invalid (via pypng).
  PGM/PPM  binary P5/P6, 8-bit or 16-bit big-endian.

Every writer goes through a temp file and os.replace, so readers never see a
half-written file.

Synthetic pairs: the right image is produced from the left image and a
left-referenced disparity field (left pixel x matches right pixel x − d).
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import png
from scipy import ndimage

from ws_tensor import ConfigError, FormatError, NumericalError

logger = logging.getLogger("ws.io")

__all__ = [
    "FormatError", "DisparityMap", "SynthSpec",
    "read_pfm", "write_pfm", "read_pfm_array", "write_pfm_array",
    "read_png16", "write_png16", "read_pnm", "write_pnm",
    "synth_pair", "write_synth_dataset", "load_synth_dataset", "block_match_sad",
]

# ── File-name constants ───────────────────────────────────────────────────────
SPEC_SIDECAR = "spec.json"
PAIR_LEFT = "pair{:03d}.left.ppm"
PAIR_RIGHT = "pair{:03d}.right.ppm"
PAIR_DISP = "pair{:03d}.disp.pfm"


# ==============================================================================
# 1) Shared helpers
# ==============================================================================

def atomic_write_bytes(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_json(path: str, obj: Any) -> None:
    try:
        text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False)
    except ValueError as exc:
        raise NumericalError(f"{path}: non-finite value in JSON output ({exc})") from exc
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))


def to_nchw(img: np.ndarray) -> np.ndarray:
    """H×W grey or H×W×3 colour → 1×3×H×W float (grey is replicated)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    elif arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)
    else:
        raise FormatError(f"expected H×W or H×W×3 image, got shape {arr.shape}")
    return arr[None]


@dataclass
class DisparityMap:
    """Left-referenced disparity in pixels with a validity mask."""
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError(
                f"disparity values {self.values.shape} and mask {self.valid.shape} must be equal 2-D shapes"
            )
        if np.any(self.values[self.valid] < 0):
            raise ValueError("disparity must be >= 0 on valid pixels")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def dense(cls, values: np.ndarray) -> "DisparityMap":
        values = np.asarray(values, dtype=np.float32)
        return cls(values=values, valid=np.ones(values.shape, dtype=bool))


# ==============================================================================
# 2) PFM
# ==============================================================================

def _read_header_line(f) -> str:
    line = f.readline()
    if not line or not line.endswith(b"\n"):
        raise FormatError("truncated PFM header")
    try:
        return line.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise FormatError("non-ASCII bytes in PFM header") from exc


def read_pfm_array(path: str) -> np.ndarray:
    """H×W (Pf) or H×W×3 (PF) float32, top row first."""
    with open(path, "rb") as f:
        tag = _read_header_line(f)
        if tag not in ("Pf", "PF"):
            raise FormatError(f"{path}: not a PFM file (tag {tag!r})")
        dims = _read_header_line(f).split()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(_read_header_line(f))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: malformed PFM header") from exc
        if width <= 0 or height <= 0 or scale == 0:
            raise FormatError(f"{path}: invalid PFM dims {width}x{height} or scale {scale}")
        channels = 3 if tag == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError(f"{path}: expected {4 * count} payload bytes, got {len(payload)}")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after PFM payload")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(arr.reshape(shape)).copy()


def write_pfm_array(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        tag = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag = "PF"
    else:
        raise FormatError(f"PFM holds H×W or H×W×3 data, got shape {arr.shape}")
    height, width = arr.shape[:2]
    header = f"{tag}\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(np.flipud(arr), dtype="<f4").tobytes()
    atomic_write_bytes(path, header + body)


def read_pfm(path: str) -> DisparityMap:
    arr = read_pfm_array(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: colour PFM (PF) cannot hold a disparity map")
    valid = np.isfinite(arr)
    return DisparityMap(values=np.where(valid, arr, 0.0), valid=valid)


def write_pfm(path: str, disp: DisparityMap) -> None:
    write_pfm_array(path, np.where(disp.valid, disp.values, np.float32(np.nan)))


# ==============================================================================
# 3) 16-bit PNG (KITTI)
# ==============================================================================

PNG16_SCALE = 256.0


def read_png16(path: str) -> DisparityMap:
    try:
        width, height, rows, info = png.Reader(filename=path).read()
        data = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows])
    except png.Error as exc:
        raise FormatError(f"{path}: unreadable PNG ({exc})") from exc
    if info.get("bitdepth") != 16 or info.get("planes") != 1:
        raise FormatError(
            f"{path}: disparity PNG must be 16-bit single-channel, got "
            f"bitdepth={info.get('bitdepth')} planes={info.get('planes')}"
        )
    data = data.reshape(height, width)
    valid = data > 0
    return DisparityMap(values=data.astype(np.float32) / PNG16_SCALE, valid=valid)


def write_png16(path: str, disp: DisparityMap) -> None:
    stored = np.where(disp.valid, np.round(disp.values.astype(np.float64) * PNG16_SCALE), 0.0)
    if stored.max(initial=0.0) > 65535:
        raise FormatError(f"disparity {disp.values[disp.valid].max():.3f} exceeds the 16-bit PNG range")
    height, width = disp.shape
    writer = png.Writer(width, height, greyscale=True, bitdepth=16)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        writer.write(f, stored.astype(np.uint16).tolist())
    os.replace(tmp, path)


# ==============================================================================
# 4) PGM / PPM (P5 / P6)
# ==============================================================================

def _pnm_tokens(blob: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(blob):
            raise FormatError("truncated PNM header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path: str) -> np.ndarray:
    """P5 → H×W, P6 → H×W×3; uint8 or uint16 depending on maxval."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, start = _pnm_tokens(blob, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r} (binary P5/P6 only)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PNM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PNM dims {width}x{height} or maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raster = blob[start:start + count * dtype.itemsize]
    if len(raster) != count * dtype.itemsize:
        raise FormatError(f"{path}: raster holds {len(raster)} bytes, expected {count * dtype.itemsize}")
    arr = np.frombuffer(raster, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def write_pnm(path: str, img: np.ndarray, maxval: int = 255) -> None:
    arr = np.asarray(img)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"PNM holds H×W or H×W×3 data, got shape {arr.shape}")
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval must be in 1..65535, got {maxval}")
    rounded = np.round(arr.astype(np.float64))
    if rounded.min(initial=0) < 0 or rounded.max(initial=0) > maxval:
        raise FormatError(f"pixel values outside 0..{maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    height, width = arr.shape[:2]
    header = magic + f"\n{width} {height}\n{maxval}\n".encode("ascii")
    atomic_write_bytes(path, header + rounded.astype(dtype).tobytes())


# ==============================================================================
# 5) Synthetic stereo pairs
# ==============================================================================

FIELDS = ("constant", "linear-ramp", "two-plane")
TEXTURES = ("dots", "bandlimited-noise")
# A jump larger than this between neighbouring left pixels breaks the surface.
_SURFACE_BREAK = 1.0
# A left pixel is occluded when something at least this much closer covers its target.
_OCCLUSION_MARGIN = 0.5


@dataclass
class SynthSpec:
    """
    Parameters of a synthetic pair set.

    `disparity` is the constant value, the ramp start (left edge) or the
    left-half plane; `disparity_end` is the ramp end (right edge) or the
    right-half plane. Pair i of a set uses seed + i.
    """
    width: int = 128
    height: int = 64
    disparity_field: str = "constant"
    disparity: float = 4.0
    disparity_end: float = 4.0
    dot_density: float = 0.5
    texture: str = "dots"
    noise_sigma: float = 1.5
    seed: int = 17
    count: int = 1

    def __post_init__(self):
        if self.width < 2 or self.height < 1:
            raise ConfigError(f"synthetic image must be at least 2x1, got {self.width}x{self.height}")
        if self.disparity_field not in FIELDS:
            raise ConfigError(f"disparity_field must be one of {FIELDS}, got {self.disparity_field!r}")
        if self.texture not in TEXTURES:
            raise ConfigError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if not 0.0 < self.dot_density <= 1.0:
            raise ConfigError(f"dot_density must be in (0, 1], got {self.dot_density}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        lo = min(self.disparity, self.disparity_end)
        hi = max(self.disparity, self.disparity_end)
        if lo < 0:
            raise ConfigError(f"disparities must be >= 0, got {lo}")
        if hi >= self.width / 4:
            raise ConfigError(f"max disparity {hi} must stay below width/4 = {self.width / 4}")

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {unknown}")
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str) -> "SynthSpec":
        with open(path) as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def field_values(self) -> np.ndarray:
        """H×W disparity field."""
        w = self.width
        cols = np.arange(w, dtype=np.float64)
        if self.disparity_field == "constant":
            row = np.full(w, self.disparity)
        elif self.disparity_field == "linear-ramp":
            row = self.disparity + (self.disparity_end - self.disparity) * cols / max(w - 1, 1)
        else:
            row = np.where(cols < w // 2, self.disparity, self.disparity_end)
        return np.tile(row, (self.height, 1))


def _texture(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.height, spec.width)
    if spec.texture == "dots":
        return np.where(rng.random(shape) < spec.dot_density, 255.0, 0.0)
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=spec.noise_sigma, mode="reflect")
    spread = noise.std() or 1.0
    return np.clip(127.5 + 127.5 * noise / (3.0 * spread), 0.0, 255.0)


def _warp_row(src: np.ndarray, disp: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Forward-warp one row. Returns (right values, right z-buffer, left validity).

    Each pair of neighbouring left pixels spans a linear segment on the right
    row; integer right pixels inside it take the interpolated value. The
    larger disparity (closer surface) wins overlaps.
    """
    w = src.shape[0]
    target = np.arange(w, dtype=np.float64) - disp
    out = np.zeros(w)
    zbuf = np.full(w, -np.inf)

    def _splat(xr: int, value: float, depth: float) -> None:
        if depth > zbuf[xr]:
            zbuf[xr] = depth
            out[xr] = value

    for x in range(w - 1):
        if abs(disp[x + 1] - disp[x]) > _SURFACE_BREAK:
            continue
        t0, t1 = target[x], target[x + 1]
        lo, hi = max(int(np.ceil(min(t0, t1))), 0), min(int(np.floor(max(t0, t1))), w - 1)
        for xr in range(lo, hi + 1):
            lam = 0.0 if t1 == t0 else (xr - t0) / (t1 - t0)
            _splat(xr, (1.0 - lam) * src[x] + lam * src[x + 1], (1.0 - lam) * disp[x] + lam * disp[x + 1])
    # isolated pixels whose neighbours both break the surface
    for x in range(w):
        t = target[x]
        if t == np.floor(t) and 0 <= t < w and zbuf[int(t)] == -np.inf:
            _splat(int(t), src[x], disp[x])

    valid = np.zeros(w, dtype=bool)
    for x in range(w):
        t = target[x]
        if t < 0 or t > w - 1:
            continue
        valid[x] = zbuf[int(np.round(t))] <= disp[x] + _OCCLUSION_MARGIN
    return out, zbuf, valid


def synth_pair(spec: SynthSpec, index: int = 0) -> Tuple[np.ndarray, np.ndarray, DisparityMap]:
    """
    Render pair `index` of the set: (left H×W, right H×W, left-referenced gt).

    Images are grey, values in [0, 255]. Right pixels no surface reaches are
    filled with fresh texture from the same seeded generator.
    """
    rng = np.random.default_rng(spec.seed + index)
    left = _texture(spec, rng)
    disp = spec.field_values()
    right = np.zeros_like(left)
    valid = np.zeros(left.shape, dtype=bool)
    holes = np.zeros(left.shape, dtype=bool)
    for y in range(spec.height):
        right[y], zbuf, valid[y] = _warp_row(left[y], disp[y])
        holes[y] = zbuf == -np.inf
    if holes.any():
        right[holes] = _texture(spec, rng)[holes]
    gt = DisparityMap(values=disp.astype(np.float32), valid=valid)
    return left, right, gt


def write_synth_dataset(spec: SynthSpec, out_dir: str) -> List[str]:
    """Render `spec.count` pairs plus the spec sidecar. Returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i in range(spec.count):
        left, right, gt = synth_pair(spec, i)
        for name, payload in ((PAIR_LEFT, left), (PAIR_RIGHT, right)):
            path = os.path.join(out_dir, name.format(i))
            write_pnm(path, np.repeat(np.round(payload)[..., None], 3, axis=2))
            written.append(path)
        path = os.path.join(out_dir, PAIR_DISP.format(i))
        write_pfm(path, gt)
        written.append(path)
    sidecar = os.path.join(out_dir, SPEC_SIDECAR)
    write_json(sidecar, spec.to_dict())
    written.append(sidecar)
    logger.info("Synthesized %d pair(s) %dx%d (%s, %s) → %s",
                spec.count, spec.width, spec.height, spec.disparity_field, spec.texture, out_dir)
    return written


def load_image(path: str) -> np.ndarray:
    """1×3×H×W float in [0, 255] from a PGM/PPM file."""
    arr = read_pnm(path).astype(np.float64)
    return to_nchw(arr)


def load_synth_dataset(data_dir: str) -> List[Tuple[np.ndarray, np.ndarray, DisparityMap]]:
    """Pairs written by write_synth_dataset, in index order."""
    sidecar = os.path.join(data_dir, SPEC_SIDECAR)
    if os.path.exists(sidecar):
        spec = SynthSpec.from_json(sidecar)
        count: Optional[int] = spec.count
    else:
        logger.warning("load_synth_dataset: %s has no %s; scanning for pairs", data_dir, SPEC_SIDECAR)
        count = None
    pairs = []
    i = 0
    while count is None or i < count:
        left_path = os.path.join(data_dir, PAIR_LEFT.format(i))
        if not os.path.exists(left_path):
            if count is not None:
                raise FormatError(f"{data_dir}: missing {PAIR_LEFT.format(i)}")
            break
        pairs.append((
            load_image(left_path),
            load_image(os.path.join(data_dir, PAIR_RIGHT.format(i))),
            read_pfm(os.path.join(data_dir, PAIR_DISP.format(i))),
        ))
        i += 1
    if not pairs:
        raise FormatError(f"{data_dir}: no stereo pairs found")
    return pairs


# ==============================================================================
# 6) Block-matching oracle
# ==============================================================================

def block_match_sad(left: np.ndarray, right: np.ndarray, max_disp: int, window: int = 5) -> np.ndarray:
    """
    Exhaustive integer SAD matcher over window×window blocks.

    Returns H×W int disparities; -1 where no candidate fits in the frame.
    Ties resolve to the smallest disparity.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape or left.ndim != 2:
        raise ValueError(f"block_match_sad needs equal 2-D images, got {left.shape} and {right.shape}")
    h, w = left.shape
    kernel = np.ones((window, window))
    costs = np.full((max_disp + 1, h, w), np.inf)
    for d in range(max_disp + 1):
        diff = np.zeros((h, w))
        diff[:, d:] = np.abs(left[:, d:] - right[:, :w - d])
        cost = ndimage.correlate(diff, kernel, mode="constant", cval=0.0)
        # candidates whose window reaches past the right image's left edge are invalid
        reach = np.arange(w) - d - window // 2
        cost[:, reach < 0] = np.inf
        costs[d] = cost
    best = np.argmin(costs, axis=0)
    best[np.all(np.isinf(costs), axis=0)] = -1
    return best
