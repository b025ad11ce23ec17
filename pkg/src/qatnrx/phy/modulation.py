"""Gray-labelled square QAM and max-log soft demapping.

The first ``M/2`` bits of a symbol select the in-phase level and the remaining
``M/2`` the quadrature level, each through a reflected binary Gray code.
LLRs are positive when bit 0 is the more likely value.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..autodiff import ConfigurationError

__all__ = ["constellation", "bit_labels", "qam_map", "hard_demap", "soft_demap"]

SUPPORTED_ORDERS = (2, 4, 6)


def _check_order(m: int) -> int:
    if m not in SUPPORTED_ORDERS:
        raise ConfigurationError(f"bits per symbol must be one of {SUPPORTED_ORDERS}, got {m}")
    return m


def _gray_axis(half: int) -> tuple[np.ndarray, np.ndarray]:
    """PAM levels and their Gray labels (as integers) for one axis."""
    n = 2**half
    levels = np.arange(n) * 2 - (n - 1)  # -(n-1), ..., n-1
    index = np.arange(n)
    gray = index ^ (index >> 1)
    # bit 0 maps to the positive half so that the first bit "0" gives +
    return levels[::-1].astype(np.float64), gray


@lru_cache(maxsize=None)
def _tables(m: int) -> tuple[np.ndarray, np.ndarray]:
    _check_order(m)
    half = m // 2
    levels, gray = _gray_axis(half)
    n_axis = len(levels)
    points = np.empty(2**m, dtype=np.complex128)
    labels = np.empty((2**m, m), dtype=np.int8)
    for i in range(n_axis):
        for q in range(n_axis):
            word = (gray[i] << half) | gray[q]
            points[word] = levels[i] + 1j * levels[q]
    points /= np.sqrt(np.mean(np.abs(points) ** 2))
    for word in range(2**m):
        labels[word] = [(word >> (m - 1 - b)) & 1 for b in range(m)]
    points.setflags(write=False)
    labels.setflags(write=False)
    return points, labels


def constellation(m: int) -> np.ndarray:
    """Unit-average-power constellation, indexed by the integer bit label."""
    return _tables(m)[0]


def bit_labels(m: int) -> np.ndarray:
    """``(2**m, m)`` array of bits for each constellation index (MSB first)."""
    return _tables(m)[1]


def qam_map(bits, m: int) -> np.ndarray:
    bits = np.asarray(bits)
    _check_order(m)
    if bits.shape[-1] % m:
        raise ConfigurationError(f"bit count {bits.shape[-1]} is not a multiple of {m}")
    groups = bits.reshape(bits.shape[:-1] + (-1, m)).astype(np.int64)
    index = (groups << np.arange(m - 1, -1, -1)).sum(axis=-1)
    return constellation(m)[index]


def hard_demap(symbols, m: int) -> np.ndarray:
    symbols = np.asarray(symbols)
    pts = constellation(m)
    nearest = np.argmin(np.abs(symbols[..., None] - pts) ** 2, axis=-1)
    return bit_labels(m)[nearest].reshape(symbols.shape[:-1] + (-1,)).astype(np.int8)


def soft_demap(x_hat, rho, m: int) -> np.ndarray:
    """Max-log LLRs ``(d_1 - d_0) / rho`` per bit, shape ``x_hat.shape + (m,)``.

    ``rho`` may be an array broadcastable to ``x_hat``; infinite entries denote
    erasures and produce zero LLRs.
    """
    x_hat = np.asarray(x_hat)
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), x_hat.shape)
    pts = constellation(m)
    labels = bit_labels(m)
    dist = np.abs(x_hat[..., None] - pts) ** 2
    llr = np.empty(x_hat.shape + (m,), dtype=np.float64)
    for b in range(m):
        d1 = dist[..., labels[:, b] == 1].min(axis=-1)
        d0 = dist[..., labels[:, b] == 0].min(axis=-1)
        llr[..., b] = d1 - d0
    with np.errstate(divide="ignore", invalid="ignore"):
        llr = llr / rho[..., None]
    llr[~np.isfinite(rho)] = 0.0
    return llr
