"""Link parameters, resource-grid layout and the transmit chain."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from ..autodiff import ConfigurationError
from .ldpc import LdpcCode, load_code
from .modulation import qam_map

__all__ = ["LinkConfig", "ResourceGrid", "Link", "TxBatch"]

CP_FRACTION = 144 / 2048


@dataclass(frozen=True)
class LinkConfig:
    n_sym: int = 14
    n_sc: int = 27
    n_rx: int = 2
    bits_per_symbol: int = 2
    code: str = "ldpc_648_r12"
    dmrs_symbols: tuple[int, ...] = (3, 12)  # 1-based
    pilot_comb: int = 2
    pilot_seed: int = 0
    carrier_hz: float = 3.5e9
    subcarrier_spacing: float = 30e3

    def __post_init__(self):
        object.__setattr__(self, "dmrs_symbols", tuple(int(s) for s in self.dmrs_symbols))
        if self.n_sym < 1 or self.n_sc < 1:
            raise ConfigurationError("resource grid extents must be positive")
        if self.n_rx < 1:
            raise ConfigurationError("at least one receive antenna is required")
        if self.bits_per_symbol not in (2, 4, 6):
            raise ConfigurationError(f"bits per symbol must be 2, 4 or 6, got {self.bits_per_symbol}")
        if not self.dmrs_symbols:
            raise ConfigurationError("at least one DMRS symbol is required")
        if any(not 1 <= s <= self.n_sym for s in self.dmrs_symbols):
            raise ConfigurationError(f"DMRS symbols {self.dmrs_symbols} outside 1..{self.n_sym}")
        if len(set(self.dmrs_symbols)) != len(self.dmrs_symbols):
            raise ConfigurationError("duplicate DMRS symbol")
        if self.pilot_comb < 1:
            raise ConfigurationError("pilot comb spacing must be >= 1")

    @property
    def symbol_duration(self) -> float:
        return (1.0 + CP_FRACTION) / self.subcarrier_spacing

    @property
    def dmrs_index(self) -> tuple[int, ...]:
        return tuple(sorted(s - 1 for s in self.dmrs_symbols))

    @property
    def code_rate(self) -> float:
        return _code(self.code).rate

    @classmethod
    def from_dict(cls, d: dict) -> "LinkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown link parameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


_CODES: dict[str, LdpcCode] = {}


def _code(name: str) -> LdpcCode:
    if name not in _CODES:
        _CODES[name] = load_code(name)
    return _CODES[name]


@dataclass
class ResourceGrid:
    """Transmitted symbols ``(..., n_sym, n_sc)`` and the grid layout."""

    symbols: np.ndarray
    pilot_mask: np.ndarray
    data_mask: np.ndarray


@dataclass
class TxBatch:
    info: np.ndarray  # (batch, n_cw, k)
    codewords: np.ndarray  # (batch, n_cw, n)
    slot_bits: np.ndarray  # (batch, n_data_bits) incl. filler
    grid: ResourceGrid


@dataclass
class Link:
    """Grid layout, pilots and code bound to one :class:`LinkConfig`."""

    cfg: LinkConfig
    code: LdpcCode = field(init=False)

    def __post_init__(self):
        self.code = _code(self.cfg.code)
        if self.codewords_per_slot < 1:
            raise ConfigurationError(
                f"grid carries {self.data_bits} coded bits, fewer than one codeword of {self.code.n}"
            )

    @cached_property
    def pilot_mask(self) -> np.ndarray:
        mask = np.zeros((self.cfg.n_sym, self.cfg.n_sc), dtype=bool)
        for s in self.cfg.dmrs_index:
            mask[s, :: self.cfg.pilot_comb] = True
        return mask

    @cached_property
    def data_mask(self) -> np.ndarray:
        mask = np.ones((self.cfg.n_sym, self.cfg.n_sc), dtype=bool)
        mask[list(self.cfg.dmrs_index), :] = False
        return mask

    @cached_property
    def pilot_symbols(self) -> np.ndarray:
        """Unit-modulus QPSK pilots on the pilot REs, zero elsewhere."""
        rng = np.random.default_rng([self.cfg.pilot_seed, 0x5049])
        n = int(self.pilot_mask.sum())
        bits = rng.integers(0, 2, size=2 * n)
        grid = np.zeros(self.pilot_mask.shape, dtype=np.complex128)
        grid[self.pilot_mask] = qam_map(bits, 2)
        return grid

    @property
    def n_data_re(self) -> int:
        return int(self.data_mask.sum())

    @property
    def data_bits(self) -> int:
        return self.n_data_re * self.cfg.bits_per_symbol

    @property
    def codewords_per_slot(self) -> int:
        return self.data_bits // self.code.n

    @property
    def coded_bits(self) -> int:
        return self.codewords_per_slot * self.code.n

    @cached_property
    def bit_positions(self) -> np.ndarray:
        """Flat index into an ``(M, n_sym, n_sc)`` LLR grid for each slot bit.

        Slot bit ``i`` is bit ``i % M`` of the ``i // M``-th data RE in
        symbol-major order.
        """
        m = self.cfg.bits_per_symbol
        re_flat = np.flatnonzero(self.data_mask.reshape(-1))
        plane = self.cfg.n_sym * self.cfg.n_sc
        i = np.arange(self.data_bits)
        return (i % m) * plane + re_flat[i // m]

    def grid_positions(self, batch: int) -> np.ndarray:
        """Indices of the coded bits into a flattened ``(batch, M, n_sym, n_sc)`` grid."""
        plane = self.cfg.bits_per_symbol * self.cfg.n_sym * self.cfg.n_sc
        pos = self.bit_positions[: self.coded_bits]
        return (np.arange(batch)[:, None] * plane + pos[None, :]).reshape(-1)

    def transmit(self, rng: np.random.Generator, batch: int = 1) -> TxBatch:
        code = self.code
        n_cw = self.codewords_per_slot
        info = rng.integers(0, 2, size=(batch, n_cw, code.k), dtype=np.int8)
        cw = code.encode(info.reshape(-1, code.k)).reshape(batch, n_cw, code.n)
        filler = rng.integers(0, 2, size=(batch, self.data_bits - self.coded_bits), dtype=np.int8)
        slot_bits = np.concatenate([cw.reshape(batch, -1), filler], axis=1)
        syms = np.zeros((batch, self.cfg.n_sym, self.cfg.n_sc), dtype=np.complex128)
        syms[:, self.data_mask] = qam_map(slot_bits, self.cfg.bits_per_symbol)
        syms += self.pilot_symbols
        return TxBatch(info, cw, slot_bits, ResourceGrid(syms, self.pilot_mask, self.data_mask))

    def bit_grid(self, slot_bits: np.ndarray) -> np.ndarray:
        """Scatter slot bits into ``(batch, M, n_sym, n_sc)`` target planes (zeros off-data)."""
        batch = slot_bits.shape[0]
        m = self.cfg.bits_per_symbol
        out = np.zeros((batch, m * self.cfg.n_sym * self.cfg.n_sc), dtype=np.int8)
        out[:, self.bit_positions] = slot_bits
        return out.reshape(batch, m, self.cfg.n_sym, self.cfg.n_sc)

    def codeword_llrs(self, llr_grid: np.ndarray) -> np.ndarray:
        """Pick coded-bit LLRs from ``(batch, M, n_sym, n_sc)``; returns ``(batch, n_cw, n)``."""
        batch = llr_grid.shape[0]
        flat = llr_grid.reshape(batch, -1)[:, self.bit_positions[: self.coded_bits]]
        return flat.reshape(batch, self.codewords_per_slot, self.code.n)
