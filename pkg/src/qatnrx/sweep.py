"""Monte-Carlo BLER sweeps over Eb/N0 with paired channel realizations."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from statistics import NormalDist
from typing import Callable, Mapping, NamedTuple
from xml.sax.saxutils import escape

import numpy as np

from .autodiff import ConfigurationError, is_deterministic
from .phy.channel import load_profile
from .phy.link import Link, LinkConfig
from .phy.receivers import ls_lmmse_receive, perfect_csi_receive
from .receiver import NeuralReceiver, deserialize, featurize
from .training import draw_slots

__all__ = [
    "RECEIVERS",
    "DEFAULT_BANDS",
    "ExperimentConfig",
    "SweepPoint",
    "SweepResult",
    "Crossing",
    "wilson_interval",
    "run_sweep",
    "find_crossing",
    "snr_at_target",
    "emit_csv",
    "parse_csv",
    "emit_plot",
    "report_compression",
    "CSV_COLUMNS",
]

log = logging.getLogger(__name__)

RECEIVERS = ("fp32", "qat-4", "qat-8", "ptq-4", "ptq-8", "ls-lmmse", "perfect-csi")
NEURAL = frozenset(RECEIVERS[:5])
DEFAULT_BANDS = (("low", 0.0, 5.1), ("medium", 10.0, 20.0), ("high", 25.0, 40.0))
CSV_COLUMNS = ("receiver", "profile", "velocity_band", "ebn0_db", "blocks", "errors", "bler", "ci_lo", "ci_hi")
MIN_BLOCK_BUDGET = 100
Z95 = NormalDist().inv_cdf(0.975)


def _grid(start: float, stop: float, step: float) -> tuple[float, ...]:
    n = int(round((stop - start) / step)) + 1
    return tuple(float(round(start + i * step, 10)) for i in range(n))


@dataclass(frozen=True)
class ExperimentConfig:
    link: LinkConfig = field(default_factory=LinkConfig)
    profiles: tuple[str, ...] = ("cdl_b", "cdl_d")
    bands: tuple[tuple[str, float, float], ...] = DEFAULT_BANDS
    ebn0_grid: tuple[float, ...] = _grid(0.0, 12.0, 0.5)
    receivers: tuple[str, ...] = ("ls-lmmse", "perfect-csi")
    models: tuple[tuple[str, str], ...] = ()  # receiver name -> model file
    delay_spread_range: tuple[float, float] = (10.0, 100.0)
    max_blocks: int = 1000
    min_blocks: int = MIN_BLOCK_BUDGET
    min_errors: int = 100
    chunk_slots: int = 25
    seed: int = 0
    threads: int = 1
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("profiles", "receivers", "ebn0_grid"):
            v = getattr(self, name)
            object.__setattr__(self, name, (v,) if isinstance(v, (str, int, float)) else tuple(v))
        object.__setattr__(self, "ebn0_grid", tuple(float(x) for x in self.ebn0_grid))
        object.__setattr__(self, "bands", tuple((str(b[0]), float(b[1]), float(b[2])) for b in self.bands))
        models = self.models.items() if isinstance(self.models, Mapping) else self.models
        object.__setattr__(self, "models", tuple((str(k), str(v)) for k, v in models))
        object.__setattr__(self, "delay_spread_range", tuple(float(x) for x in self.delay_spread_range))
        g = np.asarray(self.ebn0_grid)
        if g.size == 0 or np.any(np.diff(g) <= 0) or not np.all(np.isfinite(g)):
            raise ConfigurationError("Eb/N0 grid must be non-empty, finite and strictly increasing")
        if not self.receivers:
            raise ConfigurationError("at least one receiver is required")
        bad = [r for r in self.receivers if r not in RECEIVERS]
        if bad:
            raise ConfigurationError(f"unknown receivers {bad}; choose from {RECEIVERS}")
        if len(set(self.receivers)) != len(self.receivers):
            raise ConfigurationError("duplicate receiver")
        if not self.profiles or not self.bands:
            raise ConfigurationError("at least one profile and one velocity band are required")
        for name, lo, hi in self.bands:
            if lo < 0 or hi < lo:
                raise ConfigurationError(f"velocity band {name!r} must satisfy 0 <= lo <= hi")
        if len({b[0] for b in self.bands}) != len(self.bands):
            raise ConfigurationError("duplicate velocity band name")
        lo, hi = self.delay_spread_range
        if lo < 0 or hi < lo:
            raise ConfigurationError("delay spread range must satisfy 0 <= lo <= hi")
        if self.max_blocks < MIN_BLOCK_BUDGET:
            raise ConfigurationError(f"block budget must be at least {MIN_BLOCK_BUDGET} per point")
        if not 1 <= self.min_blocks <= self.max_blocks:
            raise ConfigurationError("min_blocks must lie in 1..max_blocks")
        if self.min_errors < 1 or self.chunk_slots < 1 or self.threads < 1:
            raise ConfigurationError("min_errors, chunk_slots and threads must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown sweep parameters: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("link"), Mapping):
            d["link"] = LinkConfig.from_dict(d["link"])
        if isinstance(d.get("ebn0_grid"), Mapping):
            g = d["ebn0_grid"]
            d["ebn0_grid"] = _grid(float(g["start"]), float(g["stop"]), float(g["step"]))
        if isinstance(d.get("bands"), Mapping):
            d["bands"] = tuple((k, *v) for k, v in d["bands"].items())
        return cls(**d)


def wilson_interval(errors: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return 0.0, 1.0
    p = errors / n
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = (p + z2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / denom
    # the bounds are exact at the extremes; keep them there despite rounding
    lo = 0.0 if errors == 0 else min(p, max(0.0, centre - half))
    hi = 1.0 if errors == n else max(p, min(1.0, centre + half))
    return lo, hi


@dataclass(frozen=True)
class SweepPoint:
    receiver: str
    profile: str
    velocity_band: str
    ebn0_db: float
    blocks: int
    errors: int

    def __post_init__(self):
        if not 0 <= self.errors <= self.blocks:
            raise ConfigurationError("errors must lie in 0..blocks")

    @property
    def bler(self) -> float:
        return self.errors / self.blocks if self.blocks else 0.0

    @property
    def ci(self) -> tuple[float, float]:
        return wilson_interval(self.errors, self.blocks)


@dataclass
class SweepResult:
    points: list[SweepPoint]
    # per-chunk (blocks, errors) traces keyed like points; not part of equality
    chunks: dict = field(default_factory=dict, compare=False, repr=False)

    def select(self, receiver: str | None = None, profile: str | None = None, band: str | None = None) -> list[SweepPoint]:
        out = [
            p
            for p in self.points
            if (receiver is None or p.receiver == receiver)
            and (profile is None or p.profile == profile)
            and (band is None or p.velocity_band == band)
        ]
        return sorted(out, key=lambda p: p.ebn0_db)

    def series(self) -> list[tuple[str, str, str]]:
        seen = {}
        for p in self.points:
            seen.setdefault((p.profile, p.velocity_band, p.receiver), None)
        return list(seen)


ReceiverFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _neural_fn(model: NeuralReceiver, link: Link) -> ReceiverFn:
    def run(y, h, nv):
        feats = featurize(
            y,
            nv,
            include_noise_plane=model.cfg.include_noise_plane,
            pilot_symbols=link.pilot_symbols if model.cfg.include_pilot_estimates else None,
            pilot_mask=link.pilot_mask,
        )
        return model.predict(feats)

    return run


def _receiver_fns(cfg: ExperimentConfig, link: Link, models: Mapping[str, NeuralReceiver] | None) -> dict[str, ReceiverFn]:
    models = dict(models or {})
    paths = dict(cfg.models)
    m = cfg.link.bits_per_symbol
    fns: dict[str, ReceiverFn] = {}
    for name in cfg.receivers:
        if name == "ls-lmmse":
            fns[name] = lambda y, h, nv: ls_lmmse_receive(y, link.pilot_symbols, link.pilot_mask, nv, m)
        elif name == "perfect-csi":
            fns[name] = lambda y, h, nv: perfect_csi_receive(y, h, nv, m)
        else:
            model = models.get(name)
            if model is None:
                if name not in paths:
                    raise FileNotFoundError(f"no model given for receiver {name!r}")
                path = Path(paths[name])
                if not path.is_file():
                    raise FileNotFoundError(f"model file for {name!r} not found: {path}")
                model = deserialize(path)
            if model.cfg.n_rx != cfg.link.n_rx or model.cfg.bits_per_symbol != m:
                raise ConfigurationError(f"model for {name!r} does not match the link configuration")
            fns[name] = _neural_fn(model, link)
    return fns


def _block_errors(link: Link, llr_grid: np.ndarray, info: np.ndarray) -> np.ndarray:
    """Per-slot count of failed codewords."""
    code = link.code
    llrs = link.codeword_llrs(llr_grid)
    decoded, _ = code.decode(llrs.reshape(-1, code.n).astype(np.float64))
    wrong = np.any(decoded.reshape(info.shape) != info, axis=-1)
    return wrong.sum(axis=-1)


def _run_point(cfg, link, fns, profile_idx, band_idx, point_idx):
    profile = cfg.profiles[profile_idx]
    _, v_lo, v_hi = cfg.bands[band_idx]
    ebn0 = cfg.ebn0_grid[point_idx]
    names = list(fns)
    blocks = 0
    errors = dict.fromkeys(names, 0)
    trace = {n: [] for n in names}
    chunk = 0
    while True:
        rng = np.random.default_rng([cfg.seed, profile_idx, band_idx, point_idx, chunk])
        n = cfg.chunk_slots
        tx, h, nv, y = draw_slots(link, rng, n, (profile,), (ebn0, ebn0), (v_lo, v_hi), cfg.delay_spread_range)
        n_blocks = n * link.codewords_per_slot
        blocks += n_blocks
        for name in names:
            e = int(_block_errors(link, fns[name](y, h, nv), tx.info).sum())
            errors[name] += e
            trace[name].append((n_blocks, e))
        chunk += 1
        if blocks >= cfg.max_blocks:
            break
        if blocks >= cfg.min_blocks and min(errors.values()) >= cfg.min_errors:
            break
    return blocks, errors, trace


def run_sweep(cfg: ExperimentConfig, models: Mapping[str, NeuralReceiver] | None = None) -> SweepResult:
    """Simulate every (profile, band, Eb/N0) point; all receivers see the same slots.

    Each point draws chunks of slots from a counter-based stream keyed by
    ``[seed, profile, band, point, chunk]`` and stops at a chunk boundary once
    every receiver has ``min_errors`` block errors (after ``min_blocks``) or
    the block budget is spent. Points are independent, so the result does not
    depend on the number of worker threads.
    """
    for p in cfg.profiles:
        load_profile(p)
    link = Link(cfg.link)
    fns = _receiver_fns(cfg, link, models)
    jobs = [
        (pi, bi, gi)
        for pi in range(len(cfg.profiles))
        for bi in range(len(cfg.bands))
        for gi in range(len(cfg.ebn0_grid))
    ]
    threads = 1 if is_deterministic() else cfg.threads
    if threads == 1:
        outs = [_run_point(cfg, link, fns, *j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(lambda j: _run_point(cfg, link, fns, *j), jobs))
    points = []
    chunks = {}
    for (pi, bi, gi), (blocks, errors, trace) in zip(jobs, outs):
        for name in fns:
            key = (name, cfg.profiles[pi], cfg.bands[bi][0], cfg.ebn0_grid[gi])
            points.append(SweepPoint(*key, blocks, errors[name]))
            chunks[key] = trace[name]
    return SweepResult(points, chunks)


class Crossing(NamedTuple):
    ebn0_db: float | None  # None: target not reached on the grid
    ambiguous: bool = False  # BLER rises back above target after the crossing
    below_grid: bool = False  # already at or below target at the first grid point


def find_crossing(ebn0: np.ndarray, bler: np.ndarray, blocks: np.ndarray, target: float) -> Crossing:
    """Log-linear interpolation of the first downward crossing of ``target``.

    Zero BLER is floored at ``0.5 / blocks`` so the logarithm stays finite.
    """
    x = np.asarray(ebn0, dtype=np.float64)
    b = np.maximum(np.asarray(bler, dtype=np.float64), 0.5 / np.maximum(np.asarray(blocks), 1))
    raw = np.asarray(bler, dtype=np.float64)
    hits = np.flatnonzero(raw <= target)
    if hits.size == 0:
        return Crossing(None)
    i = int(hits[0])
    ambiguous = bool(np.any(raw[i:] > target))
    if raw[i] == target or i == 0:
        return Crossing(float(x[i]), ambiguous, i == 0 and raw[i] < target)
    lo, hi = math.log(b[i - 1]), math.log(b[i])
    t = math.log(target)
    if lo == hi:
        return Crossing(float(x[i]), ambiguous)
    return Crossing(float(x[i - 1] + (lo - t) / (lo - hi) * (x[i] - x[i - 1])), ambiguous)


def snr_at_target(
    result: SweepResult,
    receiver: str,
    target: float = 0.10,
    profile: str | None = None,
    band: str | None = None,
) -> float | None:
    """Eb/N0 (dB) at which ``receiver`` first reaches ``target`` BLER, or None."""
    pts = result.select(receiver, profile, band)
    if not pts:
        raise KeyError(f"no sweep points for receiver {receiver!r} (profile={profile}, band={band})")
    if len({(p.profile, p.velocity_band) for p in pts}) > 1:
        raise ConfigurationError("select a single profile and velocity band")
    c = find_crossing(
        np.array([p.ebn0_db for p in pts]),
        np.array([p.bler for p in pts]),
        np.array([p.blocks for p in pts]),
        target,
    )
    if c.ambiguous:
        log.warning("%s: BLER is not monotone after the %.3g crossing; using the first crossing", receiver, target)
    if c.below_grid:
        log.warning("%s: BLER already below %.3g at the first grid point", receiver, target)
    return c.ebn0_db


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_csv(result: SweepResult, path: str | Path | None = None) -> str:
    if not result.points:
        raise ConfigurationError("empty sweep result")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for p in result.points:
        lo, hi = p.ci
        w.writerow([p.receiver, p.profile, p.velocity_band, _fmt(p.ebn0_db), p.blocks, p.errors, _fmt(p.bler), _fmt(lo), _fmt(hi)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_csv(source: str | Path) -> SweepResult:
    """Inverse of :func:`emit_csv`; accepts a path or the CSV text itself."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0]) != CSV_COLUMNS:
        raise ConfigurationError(f"unexpected CSV columns {tuple(rows[0])}")
    pts = [
        SweepPoint(r["receiver"], r["profile"], r["velocity_band"], float(r["ebn0_db"]), int(r["blocks"]), int(r["errors"]))
        for r in rows
    ]
    return SweepResult(pts)


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def emit_plot(result: SweepResult, path: str | Path | None = None, floor: float = 1e-4) -> str:
    """Log-scale BLER vs Eb/N0 as SVG: one panel per (profile, band), one polyline per receiver."""
    if not result.points:
        raise ConfigurationError("empty sweep result")
    panels = list(dict.fromkeys((p.profile, p.velocity_band) for p in result.points))
    receivers = list(dict.fromkeys(p.receiver for p in result.points))
    xs = [p.ebn0_db for p in result.points]
    x0, x1 = min(xs), max(xs)
    x1 = x1 if x1 > x0 else x0 + 1.0
    decades = math.ceil(-math.log10(floor))
    pw, ph, margin = 360, 260, 50
    width = margin + len(panels) * (pw + margin)
    height = ph + 2 * margin + 20 * len(receivers)

    def sx(i, x):
        return margin + i * (pw + margin) + (x - x0) / (x1 - x0) * pw

    def sy(b):
        return margin + (-math.log10(max(b, floor))) / decades * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">'
    ]
    for i, (profile, band) in enumerate(panels):
        left = margin + i * (pw + margin)
        out.append(f'<g class="panel" id="{escape(profile)}-{escape(band)}">')
        out.append(f'<rect x="{left}" y="{margin}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>')
        out.append(f'<text x="{left + pw / 2}" y="{margin - 10}" text-anchor="middle">{escape(profile)} / {escape(band)}</text>')
        for d in range(decades + 1):
            y = margin + d / decades * ph
            out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
            out.append(f'<text x="{left - 4}" y="{y + 4:.2f}" text-anchor="end">1e-{d}</text>')
        out.append(f'<text x="{left + pw / 2}" y="{margin + ph + 30}" text-anchor="middle">Eb/N0 [dB]</text>')
        for j, rx in enumerate(receivers):
            pts = [p for p in result.select(rx, profile, band)]
            if not pts:
                continue
            coords = " ".join(f"{sx(i, p.ebn0_db):.2f},{sy(p.bler):.2f}" for p in pts)
            color = _COLORS[j % len(_COLORS)]
            out.append(f'<polyline class="series" data-receiver="{escape(rx)}" fill="none" stroke="{color}" points="{coords}"/>')
        out.append("</g>")
    for j, rx in enumerate(receivers):
        y = margin + ph + 50 + 20 * j
        color = _COLORS[j % len(_COLORS)]
        out.append(f'<line x1="{margin}" y1="{y}" x2="{margin + 20}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{margin + 26}" y="{y + 4}">{escape(rx)}</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


@dataclass(frozen=True)
class CompressionRow:
    name: str
    bytes: int
    fraction: float  # size relative to the fp32 file
    ratio: float  # fp32 size / this size


def report_compression(models: Mapping[str, str | Path], reference: str = "fp32") -> list[CompressionRow]:
    """File sizes on disk relative to the ``reference`` (fp32) model."""
    if reference not in models:
        raise KeyError(f"reference model {reference!r} missing")
    sizes = {}
    for name, path in models.items():
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"model file for {name!r} not found: {p}")
        sizes[name] = p.stat().st_size
    ref = sizes[reference]
    return [CompressionRow(n, s, s / ref, ref / s) for n, s in sizes.items()]


def format_compression(rows: list[CompressionRow]) -> str:
    lines = [f"{'model':<12} {'bytes':>10} {'fraction':>9} {'ratio':>7}"]
    lines += [f"{r.name:<12} {r.bytes:>10d} {r.fraction:>9.4f} {r.ratio:>6.2f}x" for r in rows]
    return "\n".join(lines)
