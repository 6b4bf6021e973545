"""
ws_tensor.py — Dense NCHW tensor engine with reverse-mode gradients.

Every differentiable computation in the package is expressed through the ops
in this module (or through `tensor_op`, which other modules use to register
their own differentiable kernels: wavelet bands, correlation, lookup).

Conventions:
  - Layout is N×C×H×W, row-major (C order), so serialized weights are
    unambiguous.
  - Default element type is float32; `precision("float64")` switches the
    default for gradient checking.
  - Tensors are immutable: `data` arrays are flagged read-only, and no op
    mutates its inputs.
  - Every op output is checked for NaN/Inf; a non-finite value raises
    NumericalError naming the op.
  - Random initialization uses numpy's PCG64 generator
    (`np.random.default_rng(seed)`), drawn in a fixed parameter order.

Also holds the shared exception hierarchy and ParameterStore with its
"WSTW" binary format.
"""

import contextlib
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

logger = logging.getLogger("ws.tensor")


# ==============================================================================
# 0) Error types shared by every ws_ module
# ==============================================================================

class WaveletStereoError(Exception):
    """Base class; `exit_code` is what the CLI returns for this failure."""
    exit_code = 1


class DimensionError(WaveletStereoError, ValueError):
    exit_code = 3


class RangeError(WaveletStereoError, IndexError):
    exit_code = 3


class ConfigError(WaveletStereoError, ValueError):
    exit_code = 3


class FormatError(WaveletStereoError, ValueError):
    exit_code = 2


class GraphError(WaveletStereoError, RuntimeError):
    exit_code = 4


class NumericalError(WaveletStereoError, ArithmeticError):
    exit_code = 4


# ==============================================================================
# 1) Precision and threading
# ==============================================================================

_DTYPE = np.float32
_NUM_THREADS = 1


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the element type of newly created tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


def set_num_threads(n: int) -> None:
    """Worker count for ops that split work over rows. Results never depend on it."""
    global _NUM_THREADS
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    _NUM_THREADS = int(n)


def get_num_threads() -> int:
    return _NUM_THREADS


# ==============================================================================
# 2) Tensor
# ==============================================================================

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable dense array with optional gradient tracking."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_DTYPE)
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    # ── construction helpers ──────────────────────────────────────────────────
    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out.name = None
        out._parents = ()
        out._backward = None
        out._op = op
        return out

    # ── shape ─────────────────────────────────────────────────────────────────
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, "detach")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{flag})"

    # ── operators ─────────────────────────────────────────────────────────────
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor._wrap(np.full((1,) * self.ndim, other, dtype=self.dtype), "const")

    def __add__(self, other):
        return add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor_op(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """
    Wrap the result of a kernel as a graph node.

    `backward(g)` receives dLoss/dOut and returns one gradient (or None) per
    parent, in parent order.
    """
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    arr = np.asarray(data)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    out = Tensor._wrap(arr, op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ==============================================================================
# 3) Elementwise ops
# ==============================================================================

_UNARY = ("sigmoid", "tanh", "relu")
_BINARY = ("add", "mul", "sub")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != b.ndim:
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Pointwise sigmoid/tanh/relu, or add/mul/sub with 1-sized axis broadcast."""
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        x = a.data
        if op == "sigmoid":
            y = expit(x)
            local = y * (1.0 - y)
        elif op == "tanh":
            y = np.tanh(x)
            local = 1.0 - y * y
        else:
            y = np.maximum(x, 0.0)
            local = (x > 0).astype(x.dtype)
        return tensor_op(y, (a,), lambda g: (g * local,), op)

    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if b is None:
        raise ValueError(f"{op} is binary")
    _check_broadcast(a, b, op)
    x, y = a.data, b.data
    if op == "add":
        out = x + y

        def _bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    elif op == "sub":
        out = x - y

        def _bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    else:
        out = x * y

        def _bw(g):
            return _unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)
    return tensor_op(out, (a, b), _bw, op)


def sigmoid(x: Tensor) -> Tensor:
    return elementwise("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return elementwise("tanh", x)


def relu(x: Tensor) -> Tensor:
    return elementwise("relu", x)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return tensor_op(x.data * x.dtype.type(s), (x,), lambda g: (g * s,), "scale")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return tensor_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return tensor_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / x.size)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(f"concat: {t.shape} does not match {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return tensor_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ==============================================================================
# 4) Convolution, pooling, resampling
# ==============================================================================

def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with w[Cout,Cin,kh,kw], zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} pad={pad}")
    span_h, span_w = h + 2 * pad - kh, wd + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(
            f"conv2d: non-integral output size for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    def _bw(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return tensor_op(out, parents, _bw, "conv2d")


def global_pool(kind: str, axis: str, x: Tensor) -> Tensor:
    """max/avg over space (→ N×C×1×1) or over channels (→ N×1×H×W)."""
    if x.ndim != 4:
        raise DimensionError(f"global_pool expects N×C×H×W, got {x.shape}")
    if axis == "spatial":
        axes: Tuple[int, ...] = (2, 3)
    elif axis == "channel":
        axes = (1,)
    else:
        raise ValueError(f"unknown pooling axis {axis!r}")
    if kind == "avg":
        count = int(np.prod([x.shape[a] for a in axes]))
        out = x.data.mean(axis=axes, keepdims=True)

        def _bw(g):
            return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)
    elif kind == "max":
        out = x.data.max(axis=axes, keepdims=True)
        mask = (x.data == out).astype(x.dtype)
        mask /= mask.sum(axis=axes, keepdims=True)

        def _bw(g):
            return (mask * g,)
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return tensor_op(out, (x,), _bw, f"global_{kind}_{axis}")


def interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Rows are align-corners=false linear interpolation weights."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m.astype(dtype)


def resize_bilinear(x: Tensor, scale: Optional[float] = None,
                    size: Optional[Tuple[int, int]] = None) -> Tensor:
    """Bilinear resampling (align_corners=False) by a scale factor or to a size."""
    if x.ndim != 4:
        raise DimensionError(f"resize_bilinear expects N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    if size is None:
        if scale is None or scale <= 0:
            raise DimensionError(f"resize_bilinear: scale must be > 0, got {scale}")
        size = (int(round(h * scale)), int(round(w * scale)))
    ho, wo = size
    if ho < 1 or wo < 1:
        raise DimensionError(f"resize_bilinear: output size {ho}x{wo} has a zero dimension")
    if (ho, wo) == (h, w):
        return tensor_op(np.array(x.data), (x,), lambda g: (g,), "resize_identity")
    rh = interp_matrix(h, ho, x.dtype)
    rw = interp_matrix(w, wo, x.dtype)
    out = rh @ x.data @ rw.T
    return tensor_op(out, (x,), lambda g: (rh.T @ g @ rw,), "resize_bilinear")


# ==============================================================================
# 5) Reverse-mode differentiation
# ==============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tracked leaf reachable from a scalar loss."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tracked tensor")
    order = _topological_order(loss)
    leaves = [t for t in order if t._backward is None]
    stale = [t.name or repr(t) for t in leaves if t.grad is not None]
    if stale:
        raise GraphError(
            f"gradients already populated for {len(stale)} leaves (e.g. {stale[0]}); "
            "call zero_grad() before a second backward"
        )

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# ==============================================================================
# 6) Parameters
# ==============================================================================

WSTW_MAGIC = b"WSTW"
WSTW_VERSION = 1


class ParameterStore:
    """Ordered name → leaf Tensor map. Names are dotted paths ("hpu.s4.lstm.w_i")."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def set(self, name: str, data) -> Tensor:
        """Replace a parameter with a fresh leaf (values only; no in-place writes)."""
        if name not in self._params:
            raise KeyError(name)
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self[name]
        return t.grad if t.grad is not None else np.zeros_like(t.data)

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(t.size for n, t in self._params.items() if n.startswith(prefix)))

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        with precision(dtype):
            for name, t in self._params.items():
                out.add(name, t.data)
        return out

    def copy(self) -> "ParameterStore":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        first = next(iter(self._params.values()), None)
        return first.dtype if first is not None else np.dtype(_DTYPE)

    # ── WSTW serialization ────────────────────────────────────────────────────
    def to_bytes(self) -> bytes:
        chunks = [WSTW_MAGIC, struct.pack("<II", WSTW_VERSION, len(self._params))]
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", t.ndim))
            chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
            chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        if blob[:4] != WSTW_MAGIC:
            raise FormatError("not a WSTW weight file (bad magic)")
        try:
            version, count = struct.unpack_from("<II", blob, 4)
            if version != WSTW_VERSION:
                raise FormatError(f"unsupported WSTW version {version}")
            pos = 12
            store = cls()
            with precision(np.float32):
                for _ in range(count):
                    (name_len,) = struct.unpack_from("<I", blob, pos)
                    pos += 4
                    name = blob[pos:pos + name_len].decode("utf-8")
                    pos += name_len
                    (ndim,) = struct.unpack_from("<I", blob, pos)
                    pos += 4
                    dims = struct.unpack_from(f"<{ndim}I", blob, pos)
                    pos += 4 * ndim
                    n = int(np.prod(dims)) if ndim else 1
                    payload = np.frombuffer(blob, dtype="<f4", count=n, offset=pos)
                    pos += 4 * n
                    store.add(name, payload.reshape(dims))
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"truncated or corrupt WSTW payload: {exc}") from exc
        if pos != len(blob):
            raise FormatError(f"{len(blob) - pos} trailing bytes after WSTW payload")
        return store

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(self.to_bytes())
        os.replace(tmp, path)
        logger.info("Saved %d parameters (%d values) → %s", len(self), self.num_parameters(), path)

    @classmethod
    def load(cls, path: str) -> "ParameterStore":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def init_conv(store: ParameterStore, name: str, cout: int, cin: int, k: int,
              rng: np.random.Generator, zero: bool = False,
              weight_key: str = "w", bias_key: str = "b") -> None:
    """Fan-in-scaled uniform weights U(±1/√(cin·k·k)), zero bias."""
    shape = (cout, cin, k, k)
    if zero:
        weight = np.zeros(shape)
    else:
        bound = 1.0 / np.sqrt(cin * k * k)
        weight = rng.uniform(-bound, bound, size=shape)
    store.add(f"{name}.{weight_key}", weight)
    store.add(f"{name}.{bias_key}", np.zeros(cout))


def conv(x: Tensor, params: ParameterStore, name: str, stride: int = 1, pad: Optional[int] = None,
         weight_key: str = "w", bias_key: str = "b") -> Tensor:
    """Apply the conv layer `name` from a store; odd kernels default to same padding."""
    w = params[f"{name}.{weight_key}"]
    if pad is None:
        pad = w.shape[2] // 2
    return conv2d(x, w, params[f"{name}.{bias_key}"], stride=stride, pad=pad)


# ==============================================================================
# 7) Finite-difference oracle
# ==============================================================================

# Keeps the relative error defined when both gradients are exactly zero.
GRADCHECK_FLOOR = 1e-12
# Slope scale below which one-sided differences are not compared for kinks.
KINK_FLOOR = 1e-3
# Rounding in a float64 loss evaluation, in units of eps·max(|loss|, 1).
FD_NOISE_ULPS = 64.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRADCHECK_FLOOR) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_grad(fn: Callable[[List[np.ndarray]], float], inputs: List[np.ndarray],
                   index: int, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar fn w.r.t. inputs[index] (all entries)."""
    base = [np.array(a, dtype=np.float64) for a in inputs]
    grad = np.zeros_like(base[index])
    flat = base[index].reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(base)
        flat[i] = orig - eps
        f_minus = fn(base)
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


@dataclass
class GradcheckReport:
    """Per-parameter outcome of `gradcheck`."""
    relative: Dict[str, float] = field(default_factory=dict)
    absolute: Dict[str, float] = field(default_factory=dict)
    probes: Dict[str, int] = field(default_factory=dict)
    kinks: Dict[str, int] = field(default_factory=dict)
    noise_floor: float = 0.0

    @property
    def worst(self) -> float:
        # NaN ranks above everything
        return max((v if v == v else np.inf for v in self.relative.values()), default=0.0)

    def _measurable(self, name: str) -> bool:
        """True when the disagreement exceeds what central differences can resolve."""
        return not self.absolute[name] <= self.noise_floor * np.sqrt(self.probes[name])

    def failed(self, tolerance: float) -> List[str]:
        return sorted(n for n, r in self.relative.items() if not r < tolerance and self._measurable(n))

    def below_noise(self, tolerance: float) -> List[str]:
        """Parameters over tolerance only because their gradient is within difference noise."""
        return sorted(n for n, r in self.relative.items() if not r < tolerance and not self._measurable(n))

    def to_dict(self, tolerance: float) -> dict:
        def finite(v: float) -> Optional[float]:
            return float(v) if np.isfinite(v) else None
        return {
            "tolerance": tolerance,
            "worst": finite(self.worst),
            "noise_floor": self.noise_floor,
            "failed": self.failed(tolerance),
            "below_noise": self.below_noise(tolerance),
            "relative_errors": {n: finite(v) for n, v in self.relative.items()},
            "absolute_errors": {n: finite(v) for n, v in self.absolute.items()},
            "kink_probes": {n: k for n, k in self.kinks.items() if k},
        }


def gradcheck(loss_fn: Callable[[ParameterStore], Tensor], store: ParameterStore,
              eps: float = 1e-6, max_entries: int = 8, seed: int = 0,
              names: Optional[Sequence[str]] = None, kink_tol: float = 2e-5) -> GradcheckReport:
    """
    Compare reverse-mode gradients with central differences, in float64.

    For each parameter up to `max_entries` randomly chosen entries are
    perturbed (all of them when the tensor is smaller). A probe whose
    one-sided slopes disagree by more than 2·kink_tol (relative) straddles a
    ReLU/clamp kink; it is set aside and another entry is drawn, within a
    budget of 4·max_entries probes. Set-aside probes are counted per name in
    the report and fill the sample only when the budget runs out.

    Relative errors use a floor of GRADCHECK_FLOOR. A parameter whose absolute
    disagreement stays within `noise_floor`·√probes cannot be resolved by
    central differences; `failed` excludes it and `below_noise` lists it.
    """
    rng = make_rng(seed)
    report = GradcheckReport()
    with precision(np.float64):
        params = store.astype(np.float64)
        params.zero_grad()
        value = loss_fn(params)
        backward(value)
        f0 = value.item()
        report.noise_floor = FD_NOISE_ULPS * float(np.finfo(np.float64).eps) * max(abs(f0), 1.0) / eps
        analytic = {n: np.array(params.grad(n)) for n in params}
        for name in (names or params.names()):
            base = np.array(params[name].data)
            count = min(max_entries, base.size)
            picks: List[int] = []
            numeric: List[float] = []
            set_aside: List[Tuple[int, float]] = []
            for flat_idx in rng.permutation(base.size)[:4 * count]:
                if len(picks) == count:
                    break
                vals = []
                for sign in (1.0, -1.0):
                    probe = base.copy()
                    probe.reshape(-1)[flat_idx] += sign * eps
                    params.set(name, probe)
                    vals.append(loss_fn(params).item())
                d_plus, d_minus = (vals[0] - f0) / eps, (f0 - vals[1]) / eps
                estimate = (vals[0] - vals[1]) / (2.0 * eps)
                if abs(d_plus - d_minus) > 2.0 * kink_tol * max(abs(d_plus), abs(d_minus), KINK_FLOOR):
                    set_aside.append((int(flat_idx), estimate))
                    continue
                picks.append(int(flat_idx))
                numeric.append(estimate)
            report.kinks[name] = len(set_aside)
            for flat_idx, estimate in set_aside[:count - len(picks)]:
                picks.append(flat_idx)
                numeric.append(estimate)
            params.set(name, base)
            a = analytic[name].reshape(-1)[picks]
            n = np.array(numeric)
            report.relative[name] = relative_error(a, n)
            report.absolute[name] = float(np.linalg.norm(a - n))
            report.probes[name] = len(picks)
    logger.info("gradcheck: %d parameters, worst relative error %.3e, noise floor %.1e "
                "(%d kink probes redrawn)", len(report.relative), report.worst, report.noise_floor,
                sum(report.kinks.values()))
    return report
