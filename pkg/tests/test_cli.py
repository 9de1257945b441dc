import csv
import json
from pathlib import Path

import numpy as np
import pytest

from msfp import checkpoint as ckpt_io
from msfp.cli import git_hash, main
from msfp.config import RunConfig, substream
from msfp.lora import quantized_forward
from msfp.nn import DenoiserModel, forward

TINY = dict(n_data=512, hidden=16, n_hidden=3, time_embed_dim=8, T=20, train_epochs=3, n_probe=8, calib_size=128,
            calib_strata=4, n_maxvals=20, epochs=1, n_cache=8, n_samples=32, n_eval=32, batch_size=32)


def write_config(path: Path, **over) -> Path:
    cfg = dict(TINY, **over)
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """train-fp, calibrate, finetune on the tiny config, once per module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "config.json")
    out = root / "run"
    for cmd in ("train-fp", "calibrate", "finetune"):
        assert run(cmd, "--config", cfg, "--out", out, "--seed", 3) == 0
    return cfg, out


def test_pipeline_outputs(pipeline):
    _, out = pipeline
    for name in ("fp.ckpt", "quant.ckpt", "finetuned.ckpt", "train_loss.csv", "calibration.csv",
                 "finetune_loss.csv", "allocation.csv", "config.json"):
        assert (out / name).is_file(), name
    assert read_csv(out / "calibration.csv")[0] == ["site_id", "kind", "mode", "e", "m", "maxval", "zero_point", "mse"]
    assert read_csv(out / "allocation.csv")[0] == ["t", "layer", "chosen_k"]
    assert len(read_csv(out / "allocation.csv")) == 1 + 20 * 2


def test_manifest_hashes_inputs_and_outputs(pipeline):
    _, out = pipeline
    man = json.loads((out / "finetune.manifest.json").read_text())
    assert man["inputs"]["quant.ckpt"] == git_hash((out / "quant.ckpt").read_bytes())
    assert man["outputs"]["finetuned.ckpt"] == git_hash((out / "finetuned.ckpt").read_bytes())
    assert man["config"]["seed"] == 3


def test_git_hash_matches_git():
    # values from `git hash-object --stdin`
    assert git_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert git_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_checkpoints_round_trip(pipeline):
    _, out = pipeline
    for name in ("fp.ckpt", "quant.ckpt", "finetuned.ckpt"):
        raw = (out / name).read_bytes()
        assert ckpt_io.encode(ckpt_io.decode(raw)) == raw


def test_rerun_is_byte_identical(pipeline, tmp_path):
    cfg, out = pipeline
    other = tmp_path / "again"
    for cmd in ("train-fp", "calibrate", "finetune"):
        assert run(cmd, "--config", cfg, "--out", other, "--seed", 3) == 0
    for name in ("fp.ckpt", "quant.ckpt", "finetuned.ckpt", "train_loss.csv", "calibration.csv",
                 "finetune_loss.csv", "allocation.csv"):
        assert (other / name).read_bytes() == (out / name).read_bytes(), name


def test_zero_epoch_training_is_init(tmp_path):
    cfg = write_config(tmp_path / "c.json", train_epochs=0)
    assert run("train-fp", "--config", cfg, "--out", tmp_path, "--seed", 5) == 0
    model = ckpt_io.unpack_model(ckpt_io.load(tmp_path / "fp.ckpt"))[0]
    init = DenoiserModel.init(2, 16, 3, 8, substream(5, "train/init"))
    for (_, a), (_, b) in zip(model.named_parameters(), init.named_parameters()):
        assert a.tobytes() == b.tobytes()


def test_32_bit_calibration_is_identity(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("calibrate", "--config", cfg, "--out", tmp_path, "--fp", out / "fp.ckpt", "--bits", "32/32",
               "--io_bits=32") == 0
    fp = ckpt_io.unpack_model(ckpt_io.load(out / "fp.ckpt"))[0]
    q = ckpt_io.unpack_model(ckpt_io.load(tmp_path / "quant.ckpt"))[1]
    x = np.random.default_rng(0).normal(size=(16, 2))
    t = np.arange(16)
    np.testing.assert_array_equal(quantized_forward(q, None, None, x, t), forward(fp, x, t))
    assert {row[2] for row in read_csv(tmp_path / "calibration.csv")[1:]} == {"passthrough"}


def test_sample_fixed_noise_without_eta_is_deterministic(pipeline, tmp_path):
    cfg, out = pipeline
    x_T = tmp_path / "x_T.csv"
    np.savetxt(x_T, np.random.default_rng(1).normal(size=(10, 2)), delimiter=",", header="x0,x1", comments="")
    results = []
    for seed in (1, 2):
        d = tmp_path / f"s{seed}"
        assert run("sample", "--config", cfg, "--out", d, "--ckpt", out / "finetuned.ckpt", "--x-T", x_T,
                   "--eta=0", "--seed", seed) == 0
        results.append((d / "samples.csv").read_bytes())
    assert results[0] == results[1]
    rows = read_csv(tmp_path / "s1" / "samples.csv")
    assert rows[0] == ["i", "x0", "x1"] and len(rows) == 11


def test_sample_reports_gap_metrics(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("sample", "--config", cfg, "--out", tmp_path, "--ckpt", out / "quant.ckpt") == 0
    metrics = dict(read_csv(tmp_path / "sample_metrics.csv")[1:])
    assert set(metrics) == {"trajectory_gap", "final_gap", "moment_error"}
    assert float(metrics["trajectory_gap"]) > 0


def test_sample_fp_checkpoint_has_no_gap(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("sample", "--config", cfg, "--out", tmp_path, "--ckpt", out / "fp.ckpt") == 0
    assert not (tmp_path / "sample_metrics.csv").exists()


def test_diagnose_columns(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("diagnose", "--config", cfg, "--out", tmp_path, "--ckpt", out / "quant.ckpt") == 0
    rows = read_csv(tmp_path / "diagnose.csv")
    assert rows[0] == ["t", "loss_plain", "loss_dfa", "gap"]
    assert [int(r[0]) for r in rows[1:]] == list(range(20))


def test_ablate_six_rows(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("ablate", "--config", cfg, "--out", tmp_path, "--fp", out / "fp.ckpt") == 0
    rows = read_csv(tmp_path / "ablate.csv")
    assert rows[0] == ["msfp", "talora", "dfa", "gap"]
    assert [r[:3] for r in rows[1:]] == [["0", "0", "0"], ["1", "0", "0"], ["0", "1", "0"], ["1", "0", "1"],
                                         ["1", "1", "0"], ["1", "1", "1"]]


def test_flags_reach_config(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("finetune", "--config", cfg, "--out", tmp_path, "--quant", out / "quant.ckpt", "--bits", "4/4",
               "--hub-size", 3, "--loss", "plain", "--strategy", "random", "--rank=2") == 0
    saved = json.loads((tmp_path / "config.json").read_text())
    assert (saved["hub_size"], saved["loss"], saved["strategy"], saved["rank"]) == (3, "plain", "random", 2)
    assert ckpt_io.load(tmp_path / "finetuned.ckpt").meta["hub"]["hub_size"] == 3


def test_saved_config_reloads(pipeline):
    _, out = pipeline
    saved = json.loads((out / "config.json").read_text())
    assert RunConfig(**saved).seed == 3


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["fly"],
        ["calibrate", "--bits", "4"],
        ["calibrate", "--bits", "5/4"],
        ["calibrate", "--no_such_key=1"],
        ["calibrate", "stray"],
        ["finetune", "--strategy", "best"],
        ["sample", "--config", "does-not-exist.json"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    code = run(*argv, "--out", tmp_path) if argv else run()
    assert code == 2
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("cmd,flag", [("calibrate", "--fp"), ("finetune", "--quant"), ("sample", "--ckpt"),
                                      ("diagnose", "--ckpt"), ("ablate", "--fp")])
def test_missing_input_exit_2(cmd, flag, tmp_path, capsys):
    assert run(cmd, "--out", tmp_path, flag, tmp_path / "nothing.ckpt") == 2
    assert "missing input" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_2(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"\x05\x00")
    assert run("sample", "--out", tmp_path, "--ckpt", tmp_path / "bad.ckpt") == 2


def test_finetune_needs_calibrated_input(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("finetune", "--config", cfg, "--out", tmp_path, "--quant", out / "fp.ckpt") == 2


def test_architecture_mismatch_exit_2(pipeline, tmp_path):
    cfg, out = pipeline
    assert run("calibrate", "--config", cfg, "--out", tmp_path, "--fp", out / "fp.ckpt", "--hidden=32") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", train_lr=1e300, train_epochs=5)
    assert run("train-fp", "--config", cfg, "--out", tmp_path) == 1
    assert "numerical failure" in capsys.readouterr().err


def test_bad_x_T_exit_2(pipeline, tmp_path):
    cfg, out = pipeline
    x_T = tmp_path / "x.csv"
    x_T.write_text("a,b,c\n1,2,3\n")
    assert run("sample", "--config", cfg, "--out", tmp_path, "--ckpt", out / "fp.ckpt", "--x-T", x_T) == 2


def test_eight_bit_gap_below_four_bit(toy, tmp_path):
    ckpt_io.save(tmp_path / "fp.ckpt", ckpt_io.pack_model(toy.fp))
    gaps = {}
    for bits in ("4/4", "8/8"):
        d = tmp_path / bits.replace("/", "_")
        assert run("calibrate", "--out", d, "--fp", tmp_path / "fp.ckpt", "--bits", bits) == 0
        assert run("sample", "--out", d, "--ckpt", d / "quant.ckpt") == 0
        gaps[bits] = float(dict(read_csv(d / "sample_metrics.csv")[1:])["trajectory_gap"])
    assert gaps["8/8"] < gaps["4/4"]
