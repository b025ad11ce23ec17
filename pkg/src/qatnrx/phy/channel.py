"""Tapped-delay-line fading with Doppler, generated per resource element.

Each tap is a sum of sinusoids whose Doppler shifts ``f_D cos(theta)`` use
uniformly drawn arrival angles and complex Gaussian gains, so every sample is
exactly Rayleigh and the ensemble time autocorrelation is ``J0(2 pi f_D tau)``.
An optional line-of-sight tap adds a deterministic phasor carrying
``K / (K + 1)`` of that tap's power. The frequency response on subcarrier ``k``
is the sum of taps rotated by ``exp(-2j pi k df tau_l)``; the cyclic prefix and
FFT are not simulated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ..autodiff import ConfigurationError
from .link import LinkConfig

__all__ = [
    "SPEED_OF_LIGHT",
    "Tap",
    "ChannelProfile",
    "ChannelRealization",
    "generate_channel",
    "apply_channel",
    "snr_to_noise_var",
    "load_profile",
    "available_profiles",
]

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_SINUSOIDS = 32


@dataclass(frozen=True)
class Tap:
    delay_ns: float
    power_db: float
    k_factor_db: float | None = None


@dataclass(frozen=True)
class ChannelProfile:
    """Tap list plus mobility; powers are normalised to a 0 dB total."""

    name: str
    taps: tuple[Tap, ...]
    velocity: float = 0.0
    los: bool = False

    def __post_init__(self):
        if not self.taps:
            raise ConfigurationError(f"profile {self.name!r} has no taps")
        if any(t.delay_ns < 0 for t in self.taps):
            raise ConfigurationError(f"profile {self.name!r} has a negative tap delay")
        if sum(t.k_factor_db is not None for t in self.taps) > 1:
            raise ConfigurationError(f"profile {self.name!r} has more than one LoS tap")
        if self.velocity < 0:
            raise ConfigurationError("UE velocity must be non-negative")
        object.__setattr__(self, "taps", tuple(self.taps))

    @property
    def delays(self) -> np.ndarray:
        return np.array([t.delay_ns for t in self.taps]) * 1e-9

    @property
    def powers(self) -> np.ndarray:
        p = 10.0 ** (np.array([t.power_db for t in self.taps]) / 10.0)
        return p / p.sum()

    @property
    def rms_delay_spread_ns(self) -> float:
        p, d = self.powers, self.delays * 1e9
        mean = (p * d).sum()
        return float(np.sqrt((p * (d - mean) ** 2).sum()))

    def scaled(self, delay_spread_ns: float) -> "ChannelProfile":
        """Rescale delays so the RMS delay spread equals ``delay_spread_ns``."""
        current = self.rms_delay_spread_ns
        if current == 0:
            return self
        f = delay_spread_ns / current
        taps = tuple(replace(t, delay_ns=t.delay_ns * f) for t in self.taps)
        return replace(self, taps=taps)

    def with_velocity(self, velocity: float) -> "ChannelProfile":
        return replace(self, velocity=float(velocity))

    def doppler(self, carrier_hz: float) -> float:
        return self.velocity * carrier_hz / SPEED_OF_LIGHT

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelProfile":
        taps = tuple(Tap(float(t["delay_ns"]), float(t["power_db"]), t.get("k_factor_db")) for t in d["taps"])
        return cls(
            name=d["name"],
            taps=taps,
            velocity=float(d.get("velocity", 0.0)),
            los=any(t.k_factor_db is not None for t in taps),
        )


@dataclass
class ChannelRealization:
    h: np.ndarray  # (..., n_rx, n_sym, n_sc)
    noise_var: float | np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.h)):
            raise ConfigurationError("channel realization contains non-finite entries")
        if np.any(np.asarray(self.noise_var) < 0):
            raise ConfigurationError("noise variance must be non-negative")


def _tap_processes(profile: ChannelProfile, cfg: LinkConfig, rng: np.random.Generator, n_sinusoids: int) -> np.ndarray:
    """Complex tap gains of shape (n_rx, n_taps, n_sym)."""
    n_taps = len(profile.taps)
    t = np.arange(cfg.n_sym) * cfg.symbol_duration
    f_d = profile.doppler(cfg.carrier_hz)
    theta = rng.uniform(0, 2 * np.pi, size=(cfg.n_rx, n_taps, n_sinusoids))
    gains = (rng.standard_normal((cfg.n_rx, n_taps, n_sinusoids, 2)) @ np.array([1.0, 1j])) / np.sqrt(2 * n_sinusoids)
    phase = 2 * np.pi * f_d * np.cos(theta)[..., None] * t
    g = np.einsum("rls,rlst->rlt", gains, np.exp(1j * phase))
    powers = profile.powers
    for l, tap in enumerate(profile.taps):
        if tap.k_factor_db is None:
            continue
        k = 10.0 ** (tap.k_factor_db / 10.0)
        aoa = rng.uniform(0, 2 * np.pi)
        phi0 = rng.uniform(0, 2 * np.pi, size=cfg.n_rx)
        los = np.exp(1j * (2 * np.pi * f_d * np.cos(aoa) * t[None, :] + phi0[:, None]))
        g[:, l, :] = np.sqrt(k / (k + 1)) * los + np.sqrt(1 / (k + 1)) * g[:, l, :]
    return g * np.sqrt(powers)[None, :, None]


def generate_channel(
    profile: ChannelProfile,
    cfg: LinkConfig,
    rng: np.random.Generator,
    noise_var: float = 1.0,
    n_sinusoids: int = DEFAULT_SINUSOIDS,
) -> ChannelRealization:
    """Draw one slot of the per-RE response, independent per receive antenna."""
    if n_sinusoids < 16:
        raise ConfigurationError("at least 16 sinusoids per tap are required")
    g = _tap_processes(profile, cfg, rng, n_sinusoids)
    k = np.arange(cfg.n_sc)
    steer = np.exp(-2j * np.pi * np.outer(profile.delays, k * cfg.subcarrier_spacing))  # (L, n_sc)
    h = np.einsum("rlt,lk->rtk", g, steer)
    return ChannelRealization(h, noise_var)


def apply_channel(x, chan: ChannelRealization, rng: np.random.Generator) -> np.ndarray:
    """``y = h x + n`` with circularly-symmetric complex Gaussian noise.

    ``x`` has shape ``(..., n_sym, n_sc)`` and ``chan.h`` ``(..., n_rx, n_sym, n_sc)``.
    ``chan.noise_var`` may be a scalar or broadcast over the leading batch axis.
    """
    x = np.asarray(x)
    h = chan.h
    if h.shape[-2:] != x.shape[-2:]:
        raise ConfigurationError(f"grid shape {x.shape[-2:]} does not match channel {h.shape[-2:]}")
    y = h * x[..., None, :, :]
    nv = np.asarray(chan.noise_var, dtype=np.float64)
    if np.any(nv > 0):
        nv = nv.reshape(nv.shape + (1,) * (y.ndim - nv.ndim))
        noise = rng.standard_normal(y.shape + (2,)) @ np.array([1.0, 1j])
        y = y + np.sqrt(nv / 2) * noise
    return y


def snr_to_noise_var(ebn0_db, bits_per_symbol: int | LinkConfig, rate: float | None = None):
    """Noise variance per complex dimension pair for unit-energy symbols.

    ``sigma^2 = 1 / (10**(EbN0/10) * M * rate)``; pilots are not charged any
    energy. ``+inf`` dB gives zero noise.
    """
    if isinstance(bits_per_symbol, LinkConfig):
        cfg = bits_per_symbol
        m, rate = cfg.bits_per_symbol, cfg.code_rate if rate is None else rate
    else:
        m = bits_per_symbol
        rate = 1.0 if rate is None else rate
    ebn0 = np.power(10.0, np.asarray(ebn0_db, dtype=np.float64) / 10.0)
    out = 1.0 / (ebn0 * m * rate)
    return float(out) if np.ndim(out) == 0 else out


def available_profiles() -> list[str]:
    root = resources.files("qatnrx.data.profiles")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_profile(name: str) -> ChannelProfile:
    """Load a bundled profile by name, or a YAML file by path."""
    p = Path(name)
    if p.suffix in (".yaml", ".yml") and p.exists():
        text = p.read_text()
    else:
        ref = resources.files("qatnrx.data.profiles") / f"{name}.yaml"
        if not ref.is_file():
            raise FileNotFoundError(f"unknown channel profile {name!r}; available: {available_profiles()}")
        text = ref.read_text()
    return ChannelProfile.from_dict(yaml.safe_load(text))
