"""Convolutional ResNet receiver mapping post-FFT grids to per-bit LLRs.

Layout: an input 3x3 convolution, ``num_blocks`` residual blocks
(conv -> relu -> conv, plus skip, then relu) and an output convolution with one
channel per bit of the constellation label. There are no normalization layers,
so weight-only fake quantization applies to the convolutions as they are.

Output LLRs follow the classical demapper's convention: positive means bit 0.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .phy.receivers import ls_estimate
from .quantization import (
    FakeQuantizer,
    PackedWeights,
    QuantSpec,
    calibrate_ptq,
    pack,
    quantizer_from_packed,
    unpack,
)

__all__ = [
    "NrxConfig",
    "ConvLayer",
    "NeuralReceiver",
    "featurize",
    "defeaturize",
    "attach_quantizers",
    "serialize",
    "deserialize",
    "FormatError",
    "MODEL_MAGIC",
]

MODEL_MAGIC = b"QRXM"
MODEL_VERSION = 1
QUANT_MODES = ("fp32", "ptq", "qat")


class FormatError(ValueError):
    """Model file with the wrong magic, version or layout."""


@dataclass(frozen=True)
class NrxConfig:
    num_blocks: int = 4
    width: int = 32
    kernel: int = 3
    n_rx: int = 2
    bits_per_symbol: int = 2
    include_noise_plane: bool = True
    include_pilot_estimates: bool = True
    quant_mode: str = "fp32"
    bitwidth: int | None = None
    per_channel: bool = False

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        if self.width < 2:
            raise ConfigurationError("width must be >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be odd and positive")
        if self.quant_mode not in QUANT_MODES:
            raise ConfigurationError(f"quant_mode must be one of {QUANT_MODES}")
        if self.quant_mode != "fp32" and self.bitwidth is None:
            raise ConfigurationError("quantized modes need a bitwidth")

    @property
    def in_planes(self) -> int:
        planes = 2 * self.n_rx + int(self.include_noise_plane)
        if self.include_pilot_estimates:
            planes += 2 * self.n_rx
        return planes

    @classmethod
    def from_dict(cls, d: dict) -> "NrxConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown receiver parameters: {sorted(unknown)}")
        return cls(**d)


def featurize(
    y: np.ndarray,
    noise_var,
    *,
    include_noise_plane: bool = True,
    pilot_symbols: np.ndarray | None = None,
    pilot_mask: np.ndarray | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Stack ``(batch, n_rx, n_sym, n_sc)`` received grids into real planes.

    Planes are ``Re y_0, Im y_0, Re y_1, Im y_1, ...``, then a constant
    ``log(noise_var)`` plane, then (when pilots are given) the interpolated
    least-squares channel estimate per antenna as real/imaginary planes.
    """
    y = np.asarray(y)
    if y.ndim != 4:
        raise ConfigurationError(f"expected received grid (batch, n_rx, n_sym, n_sc), got shape {y.shape}")
    b, r, t, k = y.shape
    planes = [np.stack([y.real, y.imag], axis=2).reshape(b, 2 * r, t, k)]
    if include_noise_plane:
        nv = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (b,))
        planes.append(np.broadcast_to(np.log(nv)[:, None, None, None], (b, 1, t, k)))
    if pilot_symbols is not None:
        if pilot_mask is None or pilot_mask.shape != (t, k):
            raise ConfigurationError("pilot mask must match the grid shape")
        h_ls = ls_estimate(y, pilot_symbols, pilot_mask)
        planes.append(np.stack([h_ls.real, h_ls.imag], axis=2).reshape(b, 2 * r, t, k))
    return np.concatenate(planes, axis=1).astype(dtype)


def defeaturize(features: np.ndarray, n_rx: int) -> np.ndarray:
    """Recover the complex received grid from the leading I/Q planes."""
    f = np.asarray(features)[:, : 2 * n_rx]
    b, _, t, k = f.shape
    iq = f.reshape(b, n_rx, 2, t, k)
    return iq[:, :, 0] + 1j * iq[:, :, 1]


@dataclass
class ConvLayer:
    name: str
    weight: Tensor
    bias: Tensor
    wq: FakeQuantizer | None = None
    bq: FakeQuantizer | None = None

    def effective(self) -> tuple[Tensor, Tensor]:
        w = self.wq(self.weight) if self.wq is not None else self.weight
        b = self.bq(self.bias) if self.bq is not None else self.bias
        return w, b

    def __call__(self, x: Tensor) -> Tensor:
        w, b = self.effective()
        return ad.conv2d(x, w, b, padding="same")


class NeuralReceiver:
    """The network plus its (optional) weight quantizers."""

    def __init__(self, cfg: NrxConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        k, w = cfg.kernel, cfg.width

        def conv(name, c_in, c_out, gain):
            fan_in = c_in * k * k
            weight = rng.standard_normal((c_out, c_in, k, k)) * gain * np.sqrt(2.0 / fan_in)
            return ConvLayer(
                name,
                Tensor(weight, requires_grad=True, dtype=self.dtype, name=f"{name}.weight"),
                Tensor(np.zeros(c_out), requires_grad=True, dtype=self.dtype, name=f"{name}.bias"),
            )

        self.layers: list[ConvLayer] = [conv("input", cfg.in_planes, w, 1.0)]
        for i in range(cfg.num_blocks):
            self.layers.append(conv(f"block{i}.conv1", w, w, 1.0))
            self.layers.append(conv(f"block{i}.conv2", w, w, 0.5))
        self.layers.append(conv("output", w, cfg.bits_per_symbol, 0.5))

    # -- structure -----------------------------------------------------------

    @property
    def quant_mode(self) -> str:
        return self.cfg.quant_mode

    def weights(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def quantizers(self) -> list[FakeQuantizer]:
        out = []
        for layer in self.layers:
            out += [q for q in (layer.wq, layer.bq) if q is not None]
        return out

    def parameters(self) -> list[Tensor]:
        """Trainable tensors: master weights, plus clipping bounds in QAT mode."""
        params = self.weights()
        for q in self.quantizers():
            params += q.parameters()
        return params

    def effective_weights(self) -> dict[str, np.ndarray]:
        """Weights as the forward pass sees them (fake-quantized when attached)."""
        out = {}
        for layer in self.layers:
            w, b = layer.effective()
            out[layer.weight.name] = w.data
            out[layer.bias.name] = b.data
        return out

    def copy(self) -> "NeuralReceiver":
        return copy.deepcopy(self)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.weights()))

    # -- computation ---------------------------------------------------------

    def __call__(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features, dtype=self.dtype)
        if x.shape[1] != self.cfg.in_planes:
            raise ConfigurationError(f"expected {self.cfg.in_planes} input planes, got {x.shape[1]}")
        h = ad.relu(self.layers[0](x))
        i = 1
        for _ in range(self.cfg.num_blocks):
            z = ad.relu(self.layers[i](h))
            z = self.layers[i + 1](z)
            h = ad.relu(ad.residual_add(h, z))
            i += 2
        return self.layers[i](h)

    def predict(self, features, batch_size: int = 64) -> np.ndarray:
        """LLR grid ``(batch, M, n_sym, n_sc)`` without recording a tape."""
        features = np.asarray(features, dtype=self.dtype)
        outs = [self(features[i:i + batch_size]).data for i in range(0, len(features), batch_size)]
        return np.concatenate(outs, axis=0)


def attach_quantizers(model: NeuralReceiver, spec: QuantSpec, mode: str = "ptq") -> NeuralReceiver:
    """Return a copy of an fp32 model with one quantizer per weight and bias.

    Bounds start at ``[-max|W|, max|W|]`` (per output channel for conv weights
    when ``spec.per_channel``; biases always per tensor). ``ptq`` freezes them,
    ``qat`` makes them learnable.
    """
    if model.quant_mode != "fp32" or model.quantizers():
        raise ConfigurationError("quantizers are already attached to this model")
    if mode not in ("ptq", "qat"):
        raise ConfigurationError(f"mode must be 'ptq' or 'qat', got {mode!r}")
    out = model.copy()
    out.cfg = NrxConfig(**{**asdict(model.cfg), "quant_mode": mode, "bitwidth": spec.bitwidth, "per_channel": spec.per_channel})
    learnable = mode == "qat"
    bias_spec = QuantSpec(spec.bitwidth, per_channel=False)
    for layer in out.layers:
        layer.wq = calibrate_ptq(layer.weight, spec, symmetric=True, learnable=learnable)
        layer.bq = calibrate_ptq(layer.bias, bias_spec, symmetric=True, learnable=learnable)
        for q, t in ((layer.wq, layer.weight), (layer.bq, layer.bias)):
            q.alpha.name = f"{t.name}.alpha"
            q.beta.name = f"{t.name}.beta"
    return out


# ---------------------------------------------------------------------------
# file format: magic, version byte, u32 header length, JSON header, blobs


def serialize(model: NeuralReceiver, path: str | Path | None = None, *, master: bool = False) -> bytes:
    """Write a model file and return its bytes.

    fp32 models store raw little-endian float32 tensors. Quantized models store
    each weight and bias as packed integer codes with their clipping bounds,
    unless ``master=True``, which keeps the full-precision master weights plus
    raw bounds (a resumable checkpoint).
    """
    if model.dtype != np.float32:
        raise ConfigurationError("only 32-bit models can be serialized")
    blobs: list[tuple[dict, bytes]] = []
    for layer in model.layers:
        for t, q in ((layer.weight, layer.wq), (layer.bias, layer.bq)):
            if q is None or master:
                blobs.append(({"name": t.name, "kind": "raw", "shape": list(t.shape)}, t.data.astype("<f4").tobytes()))
                if q is not None:
                    for bound in (q.alpha, q.beta):
                        blobs.append(
                            ({"name": bound.name, "kind": "raw", "shape": list(bound.shape)}, bound.data.astype("<f4").tobytes())
                        )
            else:
                packed = pack(q.forward(t.data), q)
                blobs.append(({"name": t.name, "kind": "packed"}, packed.to_bytes()))
    header = {
        "config": asdict(model.cfg),
        "master": bool(master),
        "blobs": [dict(meta, nbytes=len(data)) for meta, data in blobs],
    }
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<BI", MODEL_VERSION, len(head)))
    buf.write(head)
    for _, data in blobs:
        buf.write(data)
    raw = buf.getvalue()
    if path is not None:
        Path(path).write_bytes(raw)
    return raw


def deserialize(source: str | Path | bytes) -> NeuralReceiver:
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise FormatError("not a receiver model file (bad magic)")
    version, head_len = struct.unpack_from("<BI", data, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model file version {version}")
    pos = 9
    try:
        header = json.loads(data[pos:pos + head_len])
    except ValueError as exc:
        raise FormatError("corrupt model header") from exc
    pos += head_len
    cfg = NrxConfig.from_dict(header["config"])
    model = NeuralReceiver(NrxConfig(**{**header["config"], "quant_mode": "fp32", "bitwidth": None, "per_channel": False}))
    model.cfg = cfg
    tensors: dict[str, np.ndarray] = {}
    packed: dict[str, PackedWeights] = {}
    for meta in header["blobs"]:
        chunk = data[pos:pos + meta["nbytes"]]
        if len(chunk) != meta["nbytes"]:
            raise FormatError(f"truncated blob {meta['name']!r}")
        pos += meta["nbytes"]
        if meta["kind"] == "raw":
            tensors[meta["name"]] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(meta["shape"])
        elif meta["kind"] == "packed":
            packed[meta["name"]], _ = PackedWeights.from_bytes(chunk)
        else:
            raise FormatError(f"unknown blob kind {meta['kind']!r}")
    learnable = cfg.quant_mode == "qat"
    for layer in model.layers:
        for attr, qattr in (("weight", "wq"), ("bias", "bq")):
            t: Tensor = getattr(layer, attr)
            expected = t.shape
            if t.name in packed:
                p = packed[t.name]
                t.data = unpack(p)
                q = quantizer_from_packed(p, learnable=learnable)
            elif t.name in tensors:
                t.data = tensors[t.name].copy()
                q = None
                if cfg.quant_mode != "fp32":
                    spec = QuantSpec(cfg.bitwidth, cfg.per_channel and attr == "weight")
                    q = FakeQuantizer(
                        spec,
                        Tensor(tensors[f"{t.name}.alpha"]),
                        Tensor(tensors[f"{t.name}.beta"]),
                        learnable=learnable,
                    )
            else:
                raise FormatError(f"model file lacks tensor {t.name!r}")
            if t.shape != expected:
                raise FormatError(f"tensor {t.name!r} has the wrong shape")
            t.zero_grad()
            if q is not None:
                q.alpha.name, q.beta.name = f"{t.name}.alpha", f"{t.name}.beta"
            setattr(layer, qattr, q)
    return model
