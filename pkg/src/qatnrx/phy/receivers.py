"""Classical receivers: LS channel estimation, LMMSE combining, soft demapping."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..autodiff import ConfigurationError, ValidationError
from .modulation import soft_demap

__all__ = [
    "interp_matrix",
    "ls_estimate",
    "Equalized",
    "lmmse_equalize",
    "demap_equalized",
    "perfect_csi_receive",
    "ls_lmmse_receive",
    "to_llr_grid",
]

NOISE_FLOOR = 1e-10


def interp_matrix(known: np.ndarray, n: int, extrapolate: bool) -> np.ndarray:
    """``(n, len(known))`` weights for linear interpolation at 0..n-1.

    Outside the known range the nearest value is held, or the end segment is
    continued linearly when ``extrapolate`` is set.
    """
    known = np.asarray(known, dtype=np.int64)
    W = np.zeros((n, len(known)))
    if len(known) == 1:
        W[:, 0] = 1.0
        return W
    for t in range(n):
        j = np.searchsorted(known, t, side="right") - 1
        if not extrapolate:
            if t <= known[0]:
                W[t, 0] = 1.0
                continue
            if t >= known[-1]:
                W[t, -1] = 1.0
                continue
        j = int(np.clip(j, 0, len(known) - 2))
        a, b = known[j], known[j + 1]
        w = (t - a) / (b - a)
        W[t, j] = 1.0 - w
        W[t, j + 1] = w
    return W


def ls_estimate(y: np.ndarray, pilot_symbols: np.ndarray, pilot_mask: np.ndarray) -> np.ndarray:
    """Least-squares estimate at pilots, interpolated over the full grid.

    ``y`` is ``(..., n_rx, n_sym, n_sc)``. Each pilot-bearing symbol is
    interpolated linearly across frequency (edge values held), then every
    symbol is obtained by linear interpolation/extrapolation in time between
    the pilot-bearing symbols.
    """
    pilot_mask = np.asarray(pilot_mask, dtype=bool)
    n_sym, n_sc = pilot_mask.shape
    pilot_syms = np.flatnonzero(pilot_mask.any(axis=1))
    if pilot_syms.size == 0:
        raise ConfigurationError("LS estimation needs at least one pilot symbol")
    if np.any(pilot_symbols[pilot_mask] == 0):
        raise ValidationError("pilot symbols must be non-zero")
    rows = []
    for s in pilot_syms:
        cols = np.flatnonzero(pilot_mask[s])
        raw = y[..., s, cols] / pilot_symbols[s, cols]
        rows.append(raw @ interp_matrix(cols, n_sc, extrapolate=False).T)
    h_p = np.stack(rows, axis=-2)  # (..., n_rx, n_pilot_sym, n_sc)
    Wt = interp_matrix(pilot_syms, n_sym, extrapolate=True)
    return np.einsum("tp,...pk->...tk", Wt, h_p)


class Equalized(NamedTuple):
    """LMMSE output ``x_hat = h^H y / (h^H h + sigma^2)``.

    ``x_hat = gain * x + w``; ``noise_var = sigma^2 / h^H h`` is the noise
    variance of the unbiased estimate ``x_hat / gain`` that the demapper uses.
    Zero channel estimates are erasures (``noise_var = inf``).
    """

    x_hat: np.ndarray
    noise_var: np.ndarray
    gain: np.ndarray


def lmmse_equalize(y: np.ndarray, h_hat: np.ndarray, noise_var) -> Equalized:
    """Combine ``(..., n_rx, n_sym, n_sc)`` observations across antennas."""
    if y.shape != h_hat.shape:
        raise ConfigurationError(f"y {y.shape} and channel estimate {h_hat.shape} differ")
    nv = np.asarray(noise_var, dtype=np.float64)
    nv = nv.reshape(nv.shape + (1,) * (y.ndim - 1 - nv.ndim))
    energy = np.sum(np.abs(h_hat) ** 2, axis=-3)
    num = np.sum(np.conj(h_hat) * y, axis=-3)
    denom = energy + nv
    with np.errstate(divide="ignore", invalid="ignore"):
        x_hat = np.where(denom > 0, num / denom, 0.0)
        gain = np.where(denom > 0, energy / denom, 0.0)
        rho = np.where(energy > 0, np.maximum(nv, NOISE_FLOOR) / energy, np.inf)
    return Equalized(x_hat, rho, gain)


def demap_equalized(eq: Equalized, bits_per_symbol: int) -> np.ndarray:
    """Max-log LLRs ``(..., n_sym, n_sc, M)`` from an equalizer output."""
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(eq.gain > 0, eq.x_hat / eq.gain, 0.0)
    return soft_demap(x, eq.noise_var, bits_per_symbol)


def to_llr_grid(llrs: np.ndarray) -> np.ndarray:
    """``(..., n_sym, n_sc, M)`` -> ``(..., M, n_sym, n_sc)``."""
    return np.moveaxis(llrs, -1, -3)


def perfect_csi_receive(y: np.ndarray, h: np.ndarray, noise_var, bits_per_symbol: int) -> np.ndarray:
    """LLR grid ``(..., M, n_sym, n_sc)`` using the true channel."""
    return to_llr_grid(demap_equalized(lmmse_equalize(y, h, noise_var), bits_per_symbol))


def ls_lmmse_receive(y, pilot_symbols, pilot_mask, noise_var, bits_per_symbol: int) -> np.ndarray:
    """LLR grid ``(..., M, n_sym, n_sc)`` from LS estimation and LMMSE combining."""
    h_hat = ls_estimate(y, pilot_symbols, pilot_mask)
    return to_llr_grid(demap_equalized(lmmse_equalize(y, h_hat, noise_var), bits_per_symbol))
