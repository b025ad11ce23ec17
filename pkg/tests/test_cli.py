import csv
import io

import pytest
import yaml

from qatnrx.autodiff import ConfigurationError
from qatnrx.cli import main
from qatnrx.config import RunConfig, apply_overrides, bundled_configs, load_config, read_raw

TINY = {
    "version": 1,
    "receiver": {"num_blocks": 1, "width": 4},
    "train": {"steps": 4, "eval_every": 2, "val_slots": 4, "batch_size": 2, "qat_steps": 2},
    "sweep": {
        "profiles": ["cdl_b"],
        "bands": {"medium": [10, 20]},
        "ebn0_grid": [4],
        "max_blocks": 100,
        "min_errors": 1,
        "receivers": ["fp32", "ptq-4", "qat-4", "ls-lmmse"],
    },
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


# -- config ------------------------------------------------------------------------


def test_bundled_configs_load():
    assert {"desk", "full"} <= set(bundled_configs())
    desk = load_config("desk")
    assert desk.link.bits_per_symbol == 2 and desk.link.n_rx == 2
    assert desk.train.qat_lr < desk.train.lr
    full = load_config("full")
    assert full.link.bits_per_symbol == 6 and full.train.batch_size == 128 and full.train.qat_lr == 1e-6
    assert full.receiver.bits_per_symbol == 6


def test_seed_and_threads_propagate(tiny):
    cfg = load_config(tiny, ["seed=7", "threads=2"])
    assert cfg.train.seed == cfg.sweep.seed == 7
    assert cfg.train.threads == cfg.sweep.threads == 2
    assert cfg.with_seed(3).train.seed == 3 and cfg.with_seed(3).sweep.seed == 3


def test_overrides_parse_yaml_values():
    raw = apply_overrides({"train": {"steps": 1}}, ["train.steps=10", "train.ebn0_range=[0, 3]", "quant.per_channel=true"])
    assert raw["train"]["steps"] == 10 and raw["train"]["ebn0_range"] == [0, 3]
    assert raw["quant"]["per_channel"] is True
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["nokey"])
    with pytest.raises(ConfigurationError):
        apply_overrides({"train": 3}, ["train.steps=1"])


@pytest.mark.parametrize(
    "patch",
    [
        {"version": 2},
        {"bogus": {}},
        {"quant": {"bits": [4]}},
        {"quant": {"bitwidths": [1]}},
        {"sweep": {"seed": 3}},
        {"receiver": {"quant_mode": "qat", "bitwidth": 4}},
        {"train": {"lr": 1e-3, "qat_lr": 1e-2}},
    ],
)
def test_config_errors(patch):
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({**TINY, **patch})


def test_read_raw_missing():
    with pytest.raises(FileNotFoundError):
        read_raw("no-such-config")


def test_unsigned_exponent_accepted(tiny):
    cfg = load_config(tiny, ["train.lr=1e-2", "train.qat_lr=1e-5"])
    assert cfg.train.lr == 1e-2 and cfg.train.qat_lr == 1e-5


# -- CLI ---------------------------------------------------------------------------


def test_full_pipeline(tiny, tmp_path, capsys):
    out = tmp_path / "run"
    common = ["-c", str(tiny), "--out", str(out), "--seed", "1"]
    assert main(["train", *common]) == 0
    assert (out / "fp32.qrx").is_file()
    rows = list(csv.reader(io.StringIO((out / "train_fp32.csv").read_text())))
    assert rows[0] == ["step", "loss", "lr", "clip_events", "wall_ms"] and len(rows) == 5
    assert main(["ptq", *common, "--bits", "4"]) == 0
    assert main(["qat", *common, "--bits", "4"]) == 0
    assert (out / "ptq-4.qrx").is_file() and (out / "qat-4.qrx").is_file()
    assert (out / "train_qat-4.csv").is_file()
    assert main(["sweep", *common]) == 0
    header = (out / "sweep.csv").read_text().splitlines()[0]
    assert header == "receiver,profile,velocity_band,ebn0_db,blocks,errors,bler,ci_lo,ci_hi"
    assert (out / "sweep.svg").read_text().startswith("<svg")
    capsys.readouterr()
    assert main(["report", *common]) == 0
    text = capsys.readouterr().out
    assert "ptq-4" in text and "qat-4" in text and "@10%" in text


def test_receivers_flag(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["sweep", "-c", str(tiny), "--out", str(out), "--receivers", "ls-lmmse,perfect-csi"]) == 0
    names = {line.split(",")[0] for line in (out / "sweep.csv").read_text().splitlines()[1:]}
    assert names == {"ls-lmmse", "perfect-csi"}


def test_exit_code_config_error(tiny, tmp_path, capsys):
    assert main(["train", "-c", str(tmp_path / "missing.yaml")]) == 2
    assert main(["train", "-c", str(tiny), "--set", "train.steps=-3"]) == 2
    assert main(["train", "-c", str(tiny), "--set", "train.qat_lr=abc"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: [1\n")
    assert main(["train", "-c", str(bad)]) == 2
    assert main(["sweep", "-c", str(tiny), "--receivers", "fp64"]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_exit_code_missing_inputs(tiny, tmp_path):
    out = tmp_path / "empty"
    assert main(["ptq", "-c", str(tiny), "--out", str(out)]) == 3
    assert main(["sweep", "-c", str(tiny), "--out", str(out)]) == 3
    assert main(["report", "-c", str(tiny), "--out", str(out)]) == 3
    assert main(["train", "-c", str(tiny), "--out", str(out), "--set", "train.train_profiles=[cdl_q]"]) == 3
    corrupt = tmp_path / "corrupt.qrx"
    corrupt.write_bytes(b"not a model")
    assert main(["qat", "-c", str(tiny), "--out", str(out), "--model", str(corrupt)]) == 3


def test_exit_code_numerical_failure(tiny, tmp_path):
    with pytest.warns(RuntimeWarning):
        code = main(["train", "-c", str(tiny), "--out", str(tmp_path), "--set", "train.lr=1.0e+30", "--set", "train.qat_lr=1"])
    assert code == 4
