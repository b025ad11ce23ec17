"""Independent reference computations shared by unit and acceptance tests."""

from __future__ import annotations

import contextlib

import numpy as np

from qatnrx import autodiff as ad
from qatnrx import quantization
from qatnrx.autodiff import Tape, Tensor


@contextlib.contextmanager
def clip_surrogate():
    """Swap the rounding forward for plain clipping.

    The straight-through backward is, by construction, the exact derivative of
    ``clip(x, alpha, beta)``. Finite differences of the swapped forward are
    therefore an independent oracle for the backward masks.
    """
    original = quantization.fake_quant_forward

    def clip_only(x, alpha, beta, spec):
        x = np.asarray(x)
        a = quantization._expand(np.asarray(alpha, dtype=x.dtype), x.ndim)
        b = quantization._expand(np.asarray(beta, dtype=x.dtype), x.ndim)
        return np.maximum(a, np.minimum(x, b))

    quantization.fake_quant_forward = clip_only
    try:
        yield
    finally:
        quantization.fake_quant_forward = original


def model_gradient_error(model, features, targets, h=1e-6, floor=1e-6) -> float:
    """Largest relative error between tape and central-difference gradients
    of the BCE loss, over every trainable parameter of ``model``."""
    params = model.parameters()
    x = Tensor(features, dtype=np.float64)

    def loss() -> Tensor:
        return ad.bce_with_logits(model(x), targets)

    with Tape() as tape:
        out = loss()
    analytic = tape.gradients(out, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        shape = np.shape(p.data)
        flat = np.array(p.data, dtype=np.float64).reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            p.data = flat.reshape(shape).copy()
            fp = float(loss().data)
            flat[i] = orig - h
            p.data = flat.reshape(shape).copy()
            fm = float(loss().data)
            flat[i] = orig
            p.data = flat.reshape(shape).copy()
            num = (fp - fm) / (2 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


def wilson_reference(k: int, n: int, z: float) -> tuple[float, float]:
    """Textbook Wilson score interval, written out independently."""
    p = k / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z / (1 + z * z / n) * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return centre - half, centre + half
