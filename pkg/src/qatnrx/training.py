"""FP32 pre-training, PTQ and QAT fine-tuning on freshly simulated slots.

Data is generated, not read: every step draws a new batch with per-slot
uniform channel profile, delay spread, UE velocity and Eb/N0. An "epoch" is
therefore just a number of steps.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tape, Tensor
from .phy.channel import ChannelRealization, apply_channel, generate_channel, load_profile, snr_to_noise_var
from .phy.link import Link, LinkConfig
from .quantization import QuantSpec
from .receiver import NeuralReceiver, NrxConfig, attach_quantizers, featurize

__all__ = [
    "TrainConfig",
    "Batch",
    "TrainResult",
    "NumericalError",
    "sample_batch",
    "make_validation_set",
    "batch_loss",
    "evaluate_bce",
    "train_fp32",
    "run_ptq",
    "run_qat",
    "write_log",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "lr", "clip_events", "wall_ms")


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss."""


def _range(v) -> tuple[float, float]:
    lo, hi = (float(v[0]), float(v[1])) if np.ndim(v) else (float(v), float(v))
    return lo, hi


@dataclass(frozen=True)
class TrainConfig:
    train_profiles: tuple[str, ...] = ("cdl_a", "cdl_c", "cdl_e")
    val_profiles: tuple[str, ...] = ("cdl_b", "cdl_d")
    ebn0_range: tuple[float, float] = (-2.0, 15.0)
    velocity_range: tuple[float, float] = (0.0, 50.0)
    delay_spread_range: tuple[float, float] = (10.0, 100.0)
    val_ebn0_range: tuple[float, float] = (0.0, 12.0)
    val_velocity_range: tuple[float, float] = (0.0, 40.0)
    batch_size: int = 16
    steps: int = 1000
    lr: float = 1e-3
    qat_lr: float = 1e-6
    qat_steps: int = 200
    qat_clip_norm: float = 1.0
    eval_every: int = 25
    patience: int = 20
    val_slots: int = 64
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("ebn0_range", "velocity_range", "delay_spread_range", "val_ebn0_range", "val_velocity_range"):
            lo, hi = _range(getattr(self, name))
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ConfigurationError(f"{name} must be a finite, non-empty interval, got {(lo, hi)}")
            object.__setattr__(self, name, (lo, hi))
        for name in ("train_profiles", "val_profiles"):
            v = getattr(self, name)
            v = (v,) if isinstance(v, str) else tuple(v)
            if not v:
                raise ConfigurationError(f"{name} must name at least one profile")
            object.__setattr__(self, name, v)
        if self.velocity_range[0] < 0 or self.delay_spread_range[0] < 0:
            raise ConfigurationError("velocity and delay spread must be non-negative")
        if self.batch_size < 1 or self.steps < 0 or self.qat_steps < 0:
            raise ConfigurationError("batch size must be positive and step budgets non-negative")
        if not 0 < self.qat_lr < self.lr:
            raise ConfigurationError(f"QAT learning rate {self.qat_lr} must be positive and below the fp32 rate {self.lr}")
        if self.eval_every < 1 or self.patience < 1 or self.val_slots < 1 or self.threads < 1:
            raise ConfigurationError("eval_every, patience, val_slots and threads must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training parameters: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        # YAML reads exponents without a sign ("1e-3") as strings
        for k in ("lr", "qat_lr", "qat_clip_norm"):
            if isinstance(d.get(k), str):
                try:
                    d[k] = float(d[k])
                except ValueError:
                    raise ConfigurationError(f"{k} must be a number, got {d[k]!r}") from None
        return cls(**d)


@lru_cache(maxsize=None)
def _profile(name: str):
    return load_profile(name)


@dataclass
class Batch:
    features: np.ndarray  # (B, planes, n_sym, n_sc) float32
    positions: np.ndarray  # flat indices of data bits in the (B, M, n_sym, n_sc) LLR grid
    targets: np.ndarray  # bits at those positions
    noise_var: np.ndarray  # (B,)
    y: np.ndarray
    h: np.ndarray
    tx: object

    def __len__(self) -> int:
        return self.features.shape[0]


def draw_slots(
    link: Link,
    rng: np.random.Generator,
    n: int,
    profiles,
    ebn0_range,
    velocity_range,
    delay_spread_range,
):
    """Simulate ``n`` slots with uniform per-slot channel parameters."""
    cfg = link.cfg
    tx = link.transmit(rng, n)
    h = np.empty((n, cfg.n_rx, cfg.n_sym, cfg.n_sc), dtype=np.complex128)
    nv = np.empty(n)
    for i in range(n):
        prof = _profile(profiles[rng.integers(len(profiles))])
        ds = rng.uniform(*delay_spread_range)
        v = rng.uniform(*velocity_range)
        ebn0 = rng.uniform(*ebn0_range)
        nv[i] = snr_to_noise_var(ebn0, cfg)
        h[i] = generate_channel(prof.scaled(ds).with_velocity(v), cfg, rng).h
    y = apply_channel(tx.grid.symbols, ChannelRealization(h, nv), rng)
    return tx, h, nv, y


def build_batch(link: Link, nrx_cfg: NrxConfig, tx, h, nv, y) -> Batch:
    n = y.shape[0]
    feats = featurize(
        y,
        nv,
        include_noise_plane=nrx_cfg.include_noise_plane,
        pilot_symbols=link.pilot_symbols if nrx_cfg.include_pilot_estimates else None,
        pilot_mask=link.pilot_mask,
    )
    plane = nrx_cfg.bits_per_symbol * link.cfg.n_sym * link.cfg.n_sc
    positions = (np.arange(n)[:, None] * plane + link.bit_positions[None, :]).reshape(-1)
    return Batch(feats, positions, tx.slot_bits.reshape(-1).astype(np.int8), nv, y, h, tx)


def sample_batch(cfg: TrainConfig, link: Link, nrx_cfg: NrxConfig, rng: np.random.Generator, n: int | None = None) -> Batch:
    """One training batch: uniform draws of profile, delay spread, velocity and Eb/N0."""
    n = cfg.batch_size if n is None else n
    tx, h, nv, y = draw_slots(
        link, rng, n, cfg.train_profiles, cfg.ebn0_range, cfg.velocity_range, cfg.delay_spread_range
    )
    return build_batch(link, nrx_cfg, tx, h, nv, y)


def make_validation_set(cfg: TrainConfig, link: Link, nrx_cfg: NrxConfig, seed: int | None = None) -> list[Batch]:
    """Fixed validation slots on the held-out profiles."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x7A1])
    out = []
    left = cfg.val_slots
    while left > 0:
        n = min(left, 32)
        tx, h, nv, y = draw_slots(
            link, rng, n, cfg.val_profiles, cfg.val_ebn0_range, cfg.val_velocity_range, cfg.delay_spread_range
        )
        out.append(build_batch(link, nrx_cfg, tx, h, nv, y))
        left -= n
    return out


def batch_loss(model: NeuralReceiver, features: np.ndarray, positions: np.ndarray, targets: np.ndarray) -> Tensor:
    """BCE between predicted LLRs and coded bits.

    The network emits LLRs (positive means bit 0), so the logit of bit 1 is the
    negated LLR; ``bce(L, 1 - B)`` equals ``bce(-L, B)``.
    """
    llr = model(features)
    return ad.bce_with_logits(ad.gather(llr, positions), 1 - targets)


def evaluate_bce(model: NeuralReceiver, valset: list[Batch]) -> float:
    total = 0.0
    count = 0
    for b in valset:
        loss = batch_loss(model, b.features, b.positions, b.targets)
        total += float(loss.data) * b.targets.size
        count += b.targets.size
    return total / count


@dataclass
class TrainResult:
    model: NeuralReceiver
    log: list[dict] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_step: int = 0
    stopped_early: bool = False
    projections: int = 0

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]


def _shard_grads(model: NeuralReceiver, params, batch: Batch, threads: int):
    n = len(batch)
    bits_per_slot = batch.targets.size // n
    plane = batch.positions.size // n
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)

    def run(lo, hi):
        pos = batch.positions[lo * plane:hi * plane] - lo * (model.cfg.bits_per_symbol * batch.features.shape[2] * batch.features.shape[3])
        tgt = batch.targets[lo * bits_per_slot:hi * bits_per_slot]
        with Tape() as tape:
            loss = batch_loss(model, batch.features[lo:hi], pos, tgt)
        return float(loss.data), tape.gradients(loss, params), (hi - lo) / n

    if len(bounds) == 2:
        results = [run(0, n)]
    else:
        with ThreadPoolExecutor(max_workers=len(bounds) - 1) as pool:
            results = list(pool.map(lambda ab: run(*ab), zip(bounds[:-1], bounds[1:])))
    loss = sum(w * l for l, _, w in results)
    grads = [sum(w * g[i] for _, g, w in results) for i in range(len(params))]
    return loss, grads


def _fit(
    model: NeuralReceiver,
    cfg: TrainConfig,
    link: Link,
    steps: int,
    lr: float,
    phase: int,
    clip_norm: float | None,
) -> TrainResult:
    result = TrainResult(model)
    if steps == 0:
        return result
    threads = 1 if ad.is_deterministic() else cfg.threads
    rng = np.random.default_rng([cfg.seed, phase])
    valset = make_validation_set(cfg, link, model.cfg)
    params = model.parameters()
    opt = ad.Adam(params, lr=lr)
    quantizers = model.quantizers()
    best = (evaluate_bce(model, valset), model.copy(), 0)
    result.val_history.append((0, best[0]))
    stale = 0
    clip_events = 0
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        batch = sample_batch(cfg, link, model.cfg, rng)
        loss, grads = _shard_grads(model, params, batch, threads)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite loss {loss} at step {step} (seed {cfg.seed}, "
                f"noise variance range [{batch.noise_var.min():.4g}, {batch.noise_var.max():.4g}])"
            )
        if clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
            if norm > clip_norm:
                grads = [g * (clip_norm / norm) for g in grads]
                clip_events += 1
                log.debug("step %d: gradient norm %.3g clipped to %.3g", step, norm, clip_norm)
        opt.step(grads)
        for q in quantizers:
            if q.learnable:
                result.projections += q.project()
        wall = 0 if ad.is_deterministic() else int(round(1000 * (time.perf_counter() - t0)))
        result.log.append({"step": step, "loss": loss, "lr": lr, "clip_events": clip_events, "wall_ms": wall})
        if step % cfg.eval_every == 0 or step == steps:
            v = evaluate_bce(model, valset)
            result.val_history.append((step, v))
            if v < best[0]:
                best = (v, model.copy(), step)
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    result.stopped_early = True
                    log.info("early stop at step %d (best %d)", step, best[2])
                    break
    _restore(model, best[1])
    result.best_step = best[2]
    return result


def _restore(model: NeuralReceiver, snapshot: NeuralReceiver) -> None:
    for dst, src in zip(model.parameters(), snapshot.parameters()):
        dst.data = src.data.copy()


def train_fp32(cfg: TrainConfig, link_cfg: LinkConfig, nrx_cfg: NrxConfig, model: NeuralReceiver | None = None) -> TrainResult:
    """Adam on the BCE loss; keeps the weights with the best validation BCE."""
    link = Link(link_cfg)
    _check_compat(link_cfg, nrx_cfg)
    if model is None:
        model = NeuralReceiver(nrx_cfg, seed=cfg.seed)
    if model.quant_mode != "fp32":
        raise ConfigurationError("train_fp32 expects an fp32 model")
    return _fit(model, cfg, link, cfg.steps, cfg.lr, phase=1, clip_norm=None)


def run_ptq(model: NeuralReceiver, spec: QuantSpec) -> NeuralReceiver:
    """Calibrate frozen quantizers on a trained model; weights are not updated."""
    return attach_quantizers(model, spec, mode="ptq")


def run_qat(model: NeuralReceiver, spec: QuantSpec, cfg: TrainConfig, link_cfg: LinkConfig, steps: int | None = None) -> TrainResult:
    """Fine-tune a copy of ``model`` with learnable quantizers.

    Forward passes see fake-quantized weights; the straight-through gradients
    update the full-precision master weights and the clipping bounds.
    """
    _check_compat(link_cfg, model.cfg)
    qmodel = attach_quantizers(model, spec, mode="qat")
    steps = cfg.qat_steps if steps is None else steps
    return _fit(qmodel, cfg, Link(link_cfg), steps, cfg.qat_lr, phase=2, clip_norm=cfg.qat_clip_norm)


def _check_compat(link_cfg: LinkConfig, nrx_cfg: NrxConfig) -> None:
    if link_cfg.n_rx != nrx_cfg.n_rx or link_cfg.bits_per_symbol != nrx_cfg.bits_per_symbol:
        raise ConfigurationError("receiver n_rx / bits_per_symbol do not match the link configuration")


def write_log(rows: list[dict], path: str | Path | None = None) -> str:
    """Render the training log as CSV (and write it when ``path`` is given)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"])), r["clip_events"], r["wall_ms"]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
