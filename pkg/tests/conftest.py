from dataclasses import dataclass

import numpy as np
import pytest

from msfp.calib import build_calibration_set, calibrate_model, probe_maxval0, quantized_model
from msfp.config import RunConfig, substream
from msfp.diffusion import NoiseSchedule, gaussian_mixture, make_schedule
from msfp.lora import QuantizedDenoiser
from msfp.nn import DenoiserModel
from msfp.train import train_denoiser


@dataclass
class Toy:
    cfg: RunConfig
    schedule: NoiseSchedule
    data: np.ndarray
    fp: DenoiserModel
    maxval0: dict
    calib: object
    records: list
    qmodel: QuantizedDenoiser


def build_toy(cfg: RunConfig) -> Toy:
    """FP training and 4-bit calibration with the same streams the CLI uses."""
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.eta)
    data = gaussian_mixture(cfg.n_data, substream(cfg.seed, "data"), std=cfg.mode_std)
    fp = DenoiserModel.init(2, cfg.hidden, cfg.n_hidden, cfg.time_embed_dim, substream(cfg.seed, "train/init"))
    train_denoiser(fp, data, schedule, substream(cfg.seed, "train/loop"), cfg.train_epochs,
                   cfg.train_batch_size, cfg.train_lr)
    maxval0 = probe_maxval0(fp, schedule, cfg.n_probe, substream(cfg.seed, "calib/probe"))
    calib = build_calibration_set(fp, schedule, cfg.calib_size, substream(cfg.seed, "calib/set"), cfg.calib_strata)
    records = calibrate_model(fp, calib, maxval0, cfg.layer_bits, cfg.msfp, cfg.calib_max_samples,
                              substream(cfg.seed, "calib/subsample"), cfg.n_maxvals)
    return Toy(cfg, schedule, data, fp, maxval0, calib, records, quantized_model(fp, records))


@pytest.fixture(scope="session")
def toy() -> Toy:
    """Default-config toy model, trained once per session."""
    return build_toy(RunConfig())


# --- acceptance report ----------------------------------------------------------

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, name, ok, detail)`` records one acceptance result for the summary."""
    def record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        request.config.stash[_RESULTS][n] = (name, bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
