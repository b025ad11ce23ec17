"""Minimal reverse-mode automatic differentiation over dense real tensors.

Only the handful of operations the neural receiver needs are provided. Every
operation executed while a :class:`Tape` is active (and with at least one input
that requires a gradient) is appended to that tape; ``Tape.backward`` then walks
the records in reverse order. The tape is rebuilt on every forward pass.

Tensors carry either 32-bit (experiments) or 64-bit (gradient checking) data.
Graphs mixing the two are rejected, and no broadcasting exists beyond the bias
add inside :func:`conv2d`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ConfigurationError",
    "ValidationError",
    "GradientCheckError",
    "Tensor",
    "Tape",
    "conv2d",
    "relu",
    "residual_add",
    "mul",
    "sum",
    "gather",
    "bce_with_logits",
    "Adam",
    "adam_step",
    "grad_check",
    "set_deterministic",
    "is_deterministic",
]

_SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ConfigurationError(ValueError):
    """Shapes, dtypes or arguments that do not fit together."""


class ValidationError(ValueError):
    """Input values outside an operation's domain."""


class GradientCheckError(ArithmeticError):
    """Finite-difference evaluation produced non-finite values."""


_deterministic = False


def set_deterministic(flag: bool = True) -> None:
    """Force single-threaded, order-fixed execution in training and sweeps."""
    global _deterministic
    _deterministic = bool(flag)


def is_deterministic() -> bool:
    return _deterministic


class Tensor:
    """Dense real array with an optional gradient slot.

    ``grad`` is allocated (zeros) for leaf tensors created with
    ``requires_grad=True``; tensors produced by operations receive theirs when a
    backward pass reaches them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in _SUPPORTED_DTYPES else np.float32
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise ConfigurationError(f"unsupported tensor dtype {arr.dtype}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; tapes are confined to the thread that entered
    them, so independent batch shards can each run their own.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward, op))

    def _propagate(self, loss: Tensor, grad: np.ndarray | None) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
        if grad is None:
            if loss.size != 1:
                raise ConfigurationError("backward without an explicit seed needs a scalar loss")
            grad = np.ones_like(loss.data)
        pending: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            node.output.grad = g_out
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                pending[key] = pending[key] + g if key in pending else g
                if key not in produced:
                    leaves[key] = t
        return {k: pending[k] for k in leaves if k in pending}, leaves

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf on the tape."""
        grads, leaves = self._propagate(loss, grad)
        for key, g in grads.items():
            t = leaves[key]
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` for ``wrt`` without touching their ``grad`` slots."""
        grads, _ = self._propagate(loss, None)
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _check_dtypes(*tensors: Tensor) -> np.dtype:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise ConfigurationError(f"mixed precision graph: {sorted(str(d) for d in dtypes)}")
    return dtypes.pop()


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    result = Tensor._wrap(out, needs and tape is not None)
    if needs and tape is not None:
        tape.record(op, inputs, result, backward)
    return result


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _columns(xp: np.ndarray, r: int, s: int, ho: int, wo: int) -> np.ndarray:
    # padded NHWC input -> (N*H'*W', R*S*C) patch matrix, rows in (r, s, c) order
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n, ho, wo, r * s, c), dtype=xp.dtype)
    for i in range(r):
        for j in range(s):
            cols[:, :, :, i * s + j] = xp[:, i:i + ho, j:j + wo]
    return cols.reshape(n * ho * wo, r * s * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: str = "same") -> Tensor:
    """Stride-1 2-D cross-correlation over NCHW input with a KCRS kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError("conv2d expects a 4-D input (N,C,H,W) and a 4-D kernel (K,C,R,S)")
    n, c, h, w = x.shape
    k, ck, r, s = kernel.shape
    if c != ck:
        raise ConfigurationError(f"conv2d channel mismatch: input C={c}, kernel C={ck}")
    if min(x.shape) <= 0 or min(kernel.shape) <= 0:
        raise ConfigurationError("conv2d extents must be positive")
    inputs = [x, kernel]
    if bias is not None:
        if bias.shape != (k,):
            raise ConfigurationError(f"conv2d bias must have shape ({k},), got {bias.shape}")
        inputs.append(bias)
    dtype = _check_dtypes(*inputs)

    if padding == "same":
        if r % 2 == 0 or s % 2 == 0:
            raise ConfigurationError(f"'same' padding needs odd kernel extents, got R={r}, S={s}")
        pr, ps = r // 2, s // 2
    elif padding == "valid":
        pr = ps = 0
        if r > h or s > w:
            raise ConfigurationError(f"kernel {r}x{s} larger than input {h}x{w} with 'valid' padding")
    else:
        raise ConfigurationError(f"unknown padding mode {padding!r}")

    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (pr, pr), (ps, ps), (0, 0)))
    ho, wo = xp.shape[1] - r + 1, xp.shape[2] - s + 1
    cols = _columns(xp, r, s, ho, wo)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(r * s * c, k)
    # per-sample GEMMs keep each output row independent of the batch size
    out = np.matmul(cols.reshape(n, ho * wo, r * s * c), wmat)
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2), dtype=dtype)

    def backward(g: np.ndarray):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
        g_kernel = None
        if kernel.requires_grad:
            g_kernel = np.ascontiguousarray((cols.T @ gmat).reshape(r, s, c, k).transpose(3, 2, 0, 1))
        g_bias = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        g_x = None
        if x.requires_grad:
            gcols = (gmat @ wmat.T).reshape(n, ho, wo, r * s, c)
            gxp = np.zeros(xp.shape, dtype=dtype)
            for i in range(r):
                for j in range(s):
                    gxp[:, i:i + ho, j:j + wo] += gcols[:, :, :, i * s + j]
            g_x = np.ascontiguousarray(gxp[:, pr:pr + h, ps:ps + w].transpose(0, 3, 1, 2))
        grads = [g_x, g_kernel]
        if bias is not None:
            grads.append(g_bias)
        return grads

    return _emit("conv2d", inputs, out, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0). The backward pass uses subgradient 0 at x == 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _emit("relu", [x], out, lambda g: [g * mask])


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ConfigurationError(f"residual_add shape mismatch: {x.shape} vs {y.shape}")
    _check_dtypes(x, y)
    return _emit("residual_add", [x, y], x.data + y.data, lambda g: [g, g])


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ConfigurationError(f"mul shape mismatch: {x.shape} vs {y.shape}")
    _check_dtypes(x, y)
    return _emit("mul", [x, y], x.data * y.data, lambda g: [g * y.data, g * x.data])


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return _emit("sum", [x], out, lambda g: [np.broadcast_to(g, x.shape).astype(x.dtype)])


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x.ravel()[index]``; ``index`` must not repeat."""
    index = np.asarray(index, dtype=np.intp)
    out = x.data.reshape(-1)[index]

    def backward(g):
        full = np.zeros(x.size, dtype=x.dtype)
        full[index] = g
        return [full.reshape(x.shape)]

    return _emit("gather", [x], out, backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy where ``sigmoid(logit)`` is P(target == 1).

    Evaluated as max(L, 0) - L*B + log(1 + exp(-|L|)) to stay finite for large
    logits.
    """
    b = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if b.shape != logits.shape:
        raise ConfigurationError(f"bce_with_logits shape mismatch: {logits.shape} vs {b.shape}")
    if not np.all((b == 0) | (b == 1)):
        raise ValidationError("bce_with_logits targets must be 0 or 1")
    if logits.size == 0:
        raise ConfigurationError("bce_with_logits on an empty tensor")
    b = b.astype(logits.dtype)
    z = logits.data
    per = np.maximum(z, 0) - z * b + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    out = np.asarray(per.mean(), dtype=logits.dtype)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return [(g * (sig - b) / count).astype(logits.dtype)]

    return _emit("bce_with_logits", [logits], out, backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    if len(grads) != len(params):
        raise ConfigurationError("one gradient per parameter is required")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ConfigurationError(f"missing gradient for parameter {p.name or i!r}")
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match parameter {p.name or i!r} {p.shape}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Stateful wrapper around :func:`adam_step` reading ``param.grad``."""

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# validation harness


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6, floor: float = 1e-6) -> float:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Returns the largest per-coordinate relative error
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    probe = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        out = f(probe)
    if out.size != 1:
        raise ConfigurationError("grad_check needs a scalar-valued function")
    tape.backward(out)
    analytic = probe.grad.reshape(-1).astype(np.float64)

    base = x.data.copy()
    numeric = np.empty(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base, dtype=x.dtype)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(base, dtype=x.dtype)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientCheckError(f"non-finite function value at coordinate {i}: f(+h)={fp}, f(-h)={fm}")
        numeric[i] = (fp - fm) / (2 * h)
    if not np.all(np.isfinite(analytic)):
        raise GradientCheckError("non-finite analytic gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
