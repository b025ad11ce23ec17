"""Weight fake-quantization with learnable clipping bounds.

A :class:`FakeQuantizer` clips its input to ``[alpha, beta]``, rounds onto the
signed integer grid ``[-2**(b-1), 2**(b-1) - 1]`` with step
``s = (beta - alpha) / (2**b - 1)`` and a zero point fixed at 0, then maps the
code back to ``s * code``. Rounding is half-to-even and the code is clamped to
the integer range afterwards, which keeps the operator total when the grid does
not reach one of the bounds.

Gradients follow the straight-through estimator: the input gradient passes
where ``alpha <= x <= beta``; ``alpha`` collects the upstream gradient of
elements below it and ``beta`` of elements above it.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigurationError, Tensor, ValidationError, _emit

__all__ = [
    "QuantSpec",
    "FakeQuantizer",
    "PackedWeights",
    "CorruptionError",
    "clip",
    "fake_quant_forward",
    "fake_quant_backward",
    "fake_quant",
    "calibrate_ptq",
    "pack",
    "unpack",
    "PACKED_MAGIC",
]

PACKED_MAGIC = b"QRXW"
PACKED_VERSION = 1
DEGENERATE_EPS = 1e-8
MIN_RANGE = 1e-6


class CorruptionError(ValueError):
    """Packed data inconsistent with its header or quantizer."""


@dataclass(frozen=True)
class QuantSpec:
    bitwidth: int
    per_channel: bool = False

    def __post_init__(self):
        if not 2 <= int(self.bitwidth) <= 16:
            raise ConfigurationError(f"bit-width must lie in [2, 16], got {self.bitwidth}")

    @property
    def q_min(self) -> int:
        return -(2 ** (self.bitwidth - 1))

    @property
    def q_max(self) -> int:
        return 2 ** (self.bitwidth - 1) - 1

    @property
    def levels(self) -> int:
        return self.q_max - self.q_min

    @property
    def granularity(self) -> str:
        return "per-channel" if self.per_channel else "per-tensor"


def clip(x, alpha, beta):
    """max(alpha, min(x, beta)); requires beta > alpha."""
    if np.any(np.asarray(beta) <= np.asarray(alpha)):
        raise ValidationError(f"clipping bounds need beta > alpha, got alpha={alpha}, beta={beta}")
    return np.maximum(alpha, np.minimum(x, beta))


def _expand(param: np.ndarray, ndim: int) -> np.ndarray:
    # per-channel parameters live on axis 0 (conv output channels)
    return param.reshape((-1,) + (1,) * (ndim - 1)) if param.ndim == 1 else param


def _scale(alpha: np.ndarray, beta: np.ndarray, spec: QuantSpec) -> np.ndarray:
    return (beta - alpha) / beta.dtype.type(spec.levels)


def _codes(x: np.ndarray, alpha: np.ndarray, beta: np.ndarray, spec: QuantSpec):
    a = _expand(alpha, x.ndim)
    b = _expand(beta, x.ndim)
    s = _scale(a, b, spec)
    xc = np.maximum(a, np.minimum(x, b))
    # adding 0 turns -0.0 codes into +0.0 so packing round-trips bit-exactly
    code = np.clip(np.rint(xc / s), spec.q_min, spec.q_max) + 0.0
    return code, s


def fake_quant_forward(x: np.ndarray, alpha, beta, spec: QuantSpec) -> np.ndarray:
    """Clip, round half-to-even onto the integer grid, dequantize."""
    x = np.asarray(x)
    alpha = np.asarray(alpha, dtype=x.dtype)
    beta = np.asarray(beta, dtype=x.dtype)
    if np.any(beta <= alpha):
        raise ValidationError("quantizer invariant violated: beta must exceed alpha")
    if alpha.ndim == 1 and (x.ndim == 0 or x.shape[0] != alpha.shape[0]):
        raise ConfigurationError(
            f"per-channel parameters of length {alpha.shape[0]} do not match channel axis of shape {x.shape}"
        )
    code, s = _codes(x, alpha, beta, spec)
    return (s * code).astype(x.dtype, copy=False)


def fake_quant_backward(upstream: np.ndarray, x: np.ndarray, alpha, beta):
    """Straight-through gradients ``(grad_x, grad_alpha, grad_beta)``.

    Elements sitting exactly on a bound count as pass-through and contribute
    nothing to the bound gradients.
    """
    x = np.asarray(x)
    alpha = np.asarray(alpha, dtype=x.dtype)
    beta = np.asarray(beta, dtype=x.dtype)
    a = _expand(alpha, x.ndim)
    b = _expand(beta, x.ndim)
    below = x < a
    above = x > b
    grad_x = np.where(below | above, 0, upstream).astype(x.dtype, copy=False)
    if alpha.ndim == 1:
        axes = tuple(range(1, x.ndim))
        grad_alpha = np.where(below, upstream, 0).sum(axis=axes).astype(x.dtype)
        grad_beta = np.where(above, upstream, 0).sum(axis=axes).astype(x.dtype)
    else:
        grad_alpha = np.asarray(np.where(below, upstream, 0).sum(), dtype=x.dtype)
        grad_beta = np.asarray(np.where(above, upstream, 0).sum(), dtype=x.dtype)
    return grad_x, grad_alpha, grad_beta


def fake_quant(x: Tensor, alpha: Tensor, beta: Tensor, spec: QuantSpec) -> Tensor:
    """Tape-recorded fake quantization of ``x``."""
    out = fake_quant_forward(x.data, alpha.data, beta.data, spec)

    def backward(g):
        return fake_quant_backward(g, x.data, alpha.data, beta.data)

    return _emit("fake_quant", [x, alpha, beta], out, backward)


@dataclass
class FakeQuantizer:
    """Learnable ``(alpha, beta)`` pair, scalar or one entry per output channel."""

    spec: QuantSpec
    alpha: Tensor
    beta: Tensor
    learnable: bool = True
    projections: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.alpha.shape != self.beta.shape:
            raise ConfigurationError("alpha and beta must have the same arity")
        if self.alpha.data.ndim > 1:
            raise ConfigurationError("alpha/beta must be scalars or 1-D per-channel vectors")
        if np.any(self.beta.data <= self.alpha.data):
            raise ValidationError("quantizer invariant violated: beta must exceed alpha")
        self.alpha.requires_grad = self.beta.requires_grad = self.learnable
        if self.learnable:
            self.alpha.zero_grad()
            self.beta.zero_grad()

    @property
    def scale(self) -> np.ndarray:
        return _scale(self.alpha.data, self.beta.data, self.spec)

    @property
    def per_channel(self) -> bool:
        return self.alpha.data.ndim == 1

    def __call__(self, x: Tensor) -> Tensor:
        return fake_quant(x, self.alpha, self.beta, self.spec)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return fake_quant_forward(x, self.alpha.data, self.beta.data, self.spec)

    def codes(self, x: np.ndarray) -> np.ndarray:
        code, _ = _codes(np.asarray(x, dtype=self.alpha.dtype), self.alpha.data, self.beta.data, self.spec)
        return code.astype(np.int32)

    def project(self, min_range: float = MIN_RANGE) -> int:
        """Enforce ``beta >= alpha + min_range``; returns how many entries moved."""
        gap = self.beta.data - self.alpha.data
        bad = gap < min_range
        n = int(np.count_nonzero(bad))
        if n:
            mid = 0.5 * (self.alpha.data + self.beta.data)
            half = self.alpha.dtype.type(0.5 * min_range)
            self.alpha.data = np.where(bad, mid - half, self.alpha.data).astype(self.alpha.dtype)
            self.beta.data = np.where(bad, mid + half, self.beta.data).astype(self.beta.dtype)
            self.projections += n
        return n

    def parameters(self) -> list[Tensor]:
        return [self.alpha, self.beta] if self.learnable else []


def calibrate_ptq(W, spec: QuantSpec, symmetric: bool = False, learnable: bool = False) -> FakeQuantizer:
    """Initialise clipping bounds from the tensor's value range.

    By default ``alpha = min(W)`` and ``beta = max(W)`` (per output channel when
    ``spec.per_channel``). With ``symmetric=True`` the bounds are
    ``-max|W|`` and ``+max|W|``, which keeps every weight on the integer grid
    for a zero point of 0. A degenerate range is widened by ``1e-8`` each way.
    """
    data = W.data if isinstance(W, Tensor) else np.asarray(W)
    if data.size == 0:
        raise ValidationError("cannot calibrate a quantizer on an empty tensor")
    dtype = data.dtype if data.dtype in (np.float32, np.float64) else np.dtype(np.float32)
    wide = data.astype(np.float64)
    if spec.per_channel:
        flat = wide.reshape(wide.shape[0], -1)
        lo, hi = flat.min(axis=1), flat.max(axis=1)
    else:
        lo, hi = np.asarray(wide.min()), np.asarray(wide.max())
    if symmetric:
        mag = np.maximum(np.abs(lo), np.abs(hi))
        lo, hi = -mag, mag
    degenerate = hi <= lo
    lo = np.where(degenerate, lo - DEGENERATE_EPS, lo)
    hi = np.where(degenerate, hi + DEGENERATE_EPS, hi)
    alpha = lo.astype(dtype)
    beta = hi.astype(dtype)
    # float32 rounding must not pull the bounds inside the data range
    alpha = np.where(alpha > lo, np.nextafter(alpha, dtype.type(-np.inf)), alpha).astype(dtype)
    beta = np.where(beta < hi, np.nextafter(beta, dtype.type(np.inf)), beta).astype(dtype)
    return FakeQuantizer(spec, Tensor(alpha, dtype=dtype), Tensor(beta, dtype=dtype), learnable=learnable)


# ---------------------------------------------------------------------------
# packed storage


@dataclass
class PackedWeights:
    bitwidth: int
    shape: tuple[int, ...]
    per_channel: bool
    alpha: np.ndarray
    beta: np.ndarray
    payload: bytes

    @property
    def count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def payload_bits(self) -> int:
        return self.count * self.bitwidth

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(PACKED_MAGIC)
        buf.write(struct.pack("<BBBB", PACKED_VERSION, self.bitwidth, int(self.per_channel), len(self.shape)))
        buf.write(struct.pack(f"<{len(self.shape)}I", *self.shape))
        n_params = self.alpha.size
        buf.write(struct.pack("<I", n_params))
        buf.write(np.asarray(self.alpha, dtype="<f4").tobytes())
        buf.write(np.asarray(self.beta, dtype="<f4").tobytes())
        buf.write(struct.pack("<I", len(self.payload)))
        buf.write(self.payload)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["PackedWeights", int]:
        """Parse one container starting at ``offset``; returns it and the end offset."""
        view = memoryview(data)
        if bytes(view[offset:offset + 4]) != PACKED_MAGIC:
            raise CorruptionError("bad magic for packed weights")
        pos = offset + 4
        version, bits, per_channel, ndim = struct.unpack_from("<BBBB", view, pos)
        pos += 4
        if version != PACKED_VERSION:
            raise CorruptionError(f"unsupported packed-weights version {version}")
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        (n_params,) = struct.unpack_from("<I", view, pos)
        pos += 4
        alpha = np.frombuffer(view, dtype="<f4", count=n_params, offset=pos).astype(np.float32)
        pos += 4 * n_params
        beta = np.frombuffer(view, dtype="<f4", count=n_params, offset=pos).astype(np.float32)
        pos += 4 * n_params
        (n_payload,) = struct.unpack_from("<I", view, pos)
        pos += 4
        payload = bytes(view[pos:pos + n_payload])
        if len(payload) != n_payload:
            raise CorruptionError("truncated packed payload")
        pos += n_payload
        if not per_channel:
            alpha, beta = alpha.reshape(()), beta.reshape(())
        return cls(bits, tuple(shape), bool(per_channel), alpha, beta, payload), pos


def pack(Wq, q: FakeQuantizer) -> PackedWeights:
    """Store fake-quantized 32-bit weights as ``b``-bit codes, LSB first."""
    data = np.asarray(Wq.data if isinstance(Wq, Tensor) else Wq)
    if data.dtype != np.float32:
        raise ConfigurationError("packed storage holds 32-bit tensors only")
    spec = q.spec
    alpha = q.alpha.data.astype(np.float32)
    beta = q.beta.data.astype(np.float32)
    s = _scale(_expand(alpha, data.ndim), _expand(beta, data.ndim), spec)
    code = np.rint(data / s)
    if np.any(code < spec.q_min) or np.any(code > spec.q_max):
        raise CorruptionError("integer code outside [q_min, q_max]; tensor is not in the quantizer's image")
    if not np.array_equal((s * code).astype(np.float32), data):
        raise CorruptionError("tensor values are not on the quantization grid")
    unsigned = (code.reshape(-1) - spec.q_min).astype(np.uint32)
    bits = ((unsigned[:, None] >> np.arange(spec.bitwidth, dtype=np.uint32)) & 1).astype(np.uint8)
    payload = np.packbits(bits.reshape(-1), bitorder="little").tobytes()
    return PackedWeights(spec.bitwidth, tuple(data.shape), q.per_channel, alpha.copy(), beta.copy(), payload)


def unpack(packed: PackedWeights) -> np.ndarray:
    spec = QuantSpec(packed.bitwidth, packed.per_channel)
    count = packed.count
    bits = np.unpackbits(np.frombuffer(packed.payload, dtype=np.uint8), bitorder="little")
    needed = count * packed.bitwidth
    if bits.size < needed:
        raise CorruptionError("packed payload shorter than the declared shape")
    bits = bits[:needed].reshape(count, packed.bitwidth).astype(np.int64)
    unsigned = (bits << np.arange(packed.bitwidth)).sum(axis=1)
    code = (unsigned + spec.q_min).astype(np.float32)
    if np.any(code > spec.q_max):
        raise CorruptionError("decoded integer code outside [q_min, q_max]")
    code = code.reshape(packed.shape)
    ndim = len(packed.shape)
    alpha = np.asarray(packed.alpha, dtype=np.float32)
    beta = np.asarray(packed.beta, dtype=np.float32)
    s = _scale(_expand(alpha, ndim), _expand(beta, ndim), spec)
    return (s * code).astype(np.float32)


def quantizer_from_packed(packed: PackedWeights, learnable: bool = False) -> FakeQuantizer:
    spec = QuantSpec(packed.bitwidth, packed.per_channel)
    return FakeQuantizer(
        spec,
        Tensor(np.asarray(packed.alpha, dtype=np.float32)),
        Tensor(np.asarray(packed.beta, dtype=np.float32)),
        learnable=learnable,
    )
