"""Versioned YAML run configuration shared by the CLI and the test suite.

Schema (version 1)::

    version: 1
    seed: 0
    threads: 1
    out: runs/desk
    link: {...}        # LinkConfig fields
    receiver: {...}    # NrxConfig fields (fp32 architecture)
    train: {...}       # TrainConfig fields
    quant: {bitwidths: [4, 8], per_channel: false}
    sweep: {...}       # ExperimentConfig fields except link, seed, threads, models

``seed`` and ``threads`` at top level override the per-section values.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import yaml

from .autodiff import ConfigurationError
from .phy.link import LinkConfig
from .quantization import QuantSpec
from .receiver import NrxConfig
from .sweep import ExperimentConfig
from .training import TrainConfig

__all__ = ["RunConfig", "load_config", "apply_overrides", "bundled_configs", "CONFIG_VERSION"]

CONFIG_VERSION = 1
_SECTIONS = {"version", "seed", "threads", "out", "link", "receiver", "train", "quant", "sweep"}


def bundled_configs() -> list[str]:
    root = resources.files("qatnrx.data.configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


@dataclass(frozen=True)
class RunConfig:
    link: LinkConfig = field(default_factory=LinkConfig)
    receiver: NrxConfig = field(default_factory=NrxConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bitwidths: tuple[int, ...] = (4, 8)
    per_channel: bool = False
    sweep: ExperimentConfig = field(default_factory=ExperimentConfig)
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"

    def quant_spec(self, bitwidth: int) -> QuantSpec:
        return QuantSpec(bitwidth, per_channel=self.per_channel)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            seed=seed,
            train=replace(self.train, seed=seed),
            sweep=replace(self.sweep, seed=seed),
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("configuration must be a mapping")
        unknown = set(raw) - _SECTIONS
        if unknown:
            raise ConfigurationError(f"unknown configuration sections: {sorted(unknown)}")
        version = raw.get("version")
        if version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported configuration version {version!r} (expected {CONFIG_VERSION})")
        seed = int(raw.get("seed", 0))
        threads = int(raw.get("threads", 1))
        link = LinkConfig.from_dict(raw.get("link") or {})
        rx = dict(raw.get("receiver") or {})
        rx.setdefault("n_rx", link.n_rx)
        rx.setdefault("bits_per_symbol", link.bits_per_symbol)
        receiver = NrxConfig.from_dict(rx)
        if receiver.quant_mode != "fp32":
            raise ConfigurationError("the receiver section describes the fp32 architecture; use quant for bitwidths")
        train = TrainConfig.from_dict({**(raw.get("train") or {}), "seed": seed, "threads": threads})
        quant = dict(raw.get("quant") or {})
        bad = set(quant) - {"bitwidths", "per_channel"}
        if bad:
            raise ConfigurationError(f"unknown quant parameters: {sorted(bad)}")
        bitwidths = tuple(int(b) for b in quant.get("bitwidths", (4, 8)))
        for b in bitwidths:
            QuantSpec(b)
        sweep_raw = dict(raw.get("sweep") or {})
        bad = {"link", "seed", "threads", "models"} & set(sweep_raw)
        if bad:
            raise ConfigurationError(f"sweep section may not set {sorted(bad)}")
        sweep = ExperimentConfig.from_dict({**sweep_raw, "link": link, "seed": seed, "threads": threads})
        return cls(
            link=link,
            receiver=receiver,
            train=train,
            bitwidths=bitwidths,
            per_channel=bool(quant.get("per_channel", False)),
            sweep=sweep,
            seed=seed,
            threads=threads,
            out=str(raw.get("out", "runs/default")),
        )


def _parse_scalar(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse override value {text!r}") from exc


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as YAML)."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {item!r} descends into a non-mapping")
        node[parts[-1]] = _parse_scalar(value)
    return raw


def read_raw(source: str | Path) -> dict:
    """Read a config file, or a bundled config by name (e.g. ``desk``)."""
    p = Path(source)
    if p.is_file():
        text = p.read_text()
    elif str(source) in bundled_configs():
        text = resources.files("qatnrx.data.configs").joinpath(f"{source}.yaml").read_text()
    else:
        raise FileNotFoundError(f"configuration {source!s} not found (bundled: {bundled_configs()})")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"malformed configuration {source!s}: {exc}") from exc
    return raw or {}


def load_config(source: str | Path = "desk", overrides: list[str] | None = None) -> RunConfig:
    return RunConfig.from_dict(apply_overrides(read_raw(source), overrides or []))
