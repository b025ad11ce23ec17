"""Command-line entry point: ``qatnrx {train,ptq,qat,sweep,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import autodiff as ad
from .autodiff import ConfigurationError, GradientCheckError, ValidationError
from .config import RunConfig, apply_overrides, read_raw
from .quantization import CorruptionError
from .receiver import FormatError, deserialize, serialize
from .sweep import (
    emit_csv,
    emit_plot,
    format_compression,
    parse_csv,
    report_compression,
    run_sweep,
    snr_at_target,
)
from .training import NumericalError, run_ptq, run_qat, train_fp32, write_log

log = logging.getLogger("qatnrx")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default="desk", help="config file or bundled config name (default: desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.steps=500")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="worker threads (1 = deterministic)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qatnrx", description="Quantized neural receiver experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="fp32 pre-training")
    for verb, helptext in (("ptq", "post-training quantization"), ("qat", "quantization-aware fine-tuning")):
        sp = sub.add_parser(verb, parents=[common], help=helptext)
        sp.add_argument("--bits", type=int, action="append", help="bitwidth(s); default from config")
        sp.add_argument("--model", help="fp32 model file (default: OUT/fp32.qrx)")
    sp = sub.add_parser("sweep", parents=[common], help="BLER sweep over Eb/N0")
    sp.add_argument("--receivers", help="comma-separated receiver list")
    sub.add_parser("report", parents=[common], help="compression table and SNR at 10%%/1%% BLER")
    return p


def _config(args) -> RunConfig:
    try:
        raw = read_raw(args.config)
    except FileNotFoundError as exc:
        raise ConfigurationError(str(exc)) from exc
    raw = apply_overrides(raw, args.overrides)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    if args.out is not None:
        raw["out"] = args.out
    if getattr(args, "receivers", None):
        raw = apply_overrides(raw, [f"sweep.receivers=[{args.receivers}]"])
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid configuration value: {exc}") from exc


def _fp32_model(cfg: RunConfig, path: str | None):
    p = Path(path) if path else Path(cfg.out) / "fp32.qrx"
    if not p.is_file():
        raise FileNotFoundError(f"fp32 model not found: {p} (run `qatnrx train` first)")
    model = deserialize(p)
    if model.quant_mode != "fp32":
        raise ConfigurationError(f"{p} is not an fp32 model")
    return model


def cmd_train(cfg: RunConfig, args) -> None:
    out = Path(cfg.out)
    res = train_fp32(cfg.train, cfg.link, cfg.receiver)
    serialize(res.model, out / "fp32.qrx")
    write_log(res.log, out / "train_fp32.csv")
    best = min((h[1] for h in res.val_history), default=float("nan"))
    print(f"fp32: {len(res.log)} steps, best step {res.best_step}, validation BCE {best:.5f}")


def cmd_ptq(cfg: RunConfig, args) -> None:
    model = _fp32_model(cfg, args.model)
    for b in args.bits or cfg.bitwidths:
        q = run_ptq(model, cfg.quant_spec(b))
        serialize(q, Path(cfg.out) / f"ptq-{b}.qrx")
        print(f"ptq-{b}: written")


def cmd_qat(cfg: RunConfig, args) -> None:
    model = _fp32_model(cfg, args.model)
    for b in args.bits or cfg.bitwidths:
        res = run_qat(model, cfg.quant_spec(b), cfg.train, cfg.link)
        serialize(res.model, Path(cfg.out) / f"qat-{b}.qrx")
        write_log(res.log, Path(cfg.out) / f"train_qat-{b}.csv")
        best = min((h[1] for h in res.val_history), default=float("nan"))
        print(f"qat-{b}: {len(res.log)} steps, validation BCE {best:.5f}, scale projections {res.projections}")


def _snr_table(result, receivers) -> str:
    lines = [f"{'receiver':<12} {'profile':<8} {'band':<8} {'@10%':>8} {'@1%':>8}"]
    for profile, band in dict.fromkeys((p.profile, p.velocity_band) for p in result.points):
        for rx in receivers:
            if not result.select(rx, profile, band):
                continue
            vals = [snr_at_target(result, rx, t, profile, band) for t in (0.1, 0.01)]
            cells = ["not reached" if v is None else f"{v:.2f}" for v in vals]
            lines.append(f"{rx:<12} {profile:<8} {band:<8} {cells[0]:>8} {cells[1]:>8}")
    return "\n".join(lines)


def cmd_sweep(cfg: RunConfig, args) -> None:
    out = Path(cfg.out)
    models = {r: str(out / f"{r}.qrx") for r in cfg.sweep.receivers if r not in ("ls-lmmse", "perfect-csi")}
    result = run_sweep(replace(cfg.sweep, models=tuple(models.items())))
    emit_csv(result, out / "sweep.csv")
    emit_plot(result, out / "sweep.svg")
    print(_snr_table(result, cfg.sweep.receivers))


def cmd_report(cfg: RunConfig, args) -> None:
    out = Path(cfg.out)
    files = {p.stem: p for p in sorted(out.glob("*.qrx"))}
    if "fp32" not in files:
        raise FileNotFoundError(f"no fp32.qrx in {out}")
    print(format_compression(report_compression(files)))
    sweep = out / "sweep.csv"
    if sweep.is_file():
        result = parse_csv(sweep)
        print()
        print(_snr_table(result, list(dict.fromkeys(p.receiver for p in result.points))))


COMMANDS = {"train": cmd_train, "ptq": cmd_ptq, "qat": cmd_qat, "sweep": cmd_sweep, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if cfg.threads == 1:
            ad.set_deterministic(True)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.verb](cfg, args)
    except (ConfigurationError, ValidationError, yaml.YAMLError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, FormatError, CorruptionError) as exc:
        print(f"missing or unreadable input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, GradientCheckError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
