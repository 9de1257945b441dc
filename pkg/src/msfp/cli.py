"""Command-line driver: train-fp, calibrate, finetune, sample, diagnose, ablate.

Exit codes: 0 success, 1 numerical failure, 2 usage error or missing input.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .calib import CSV_HEADER, build_calibration_set, calibrate_model, probe_maxval0, quantized_model
from .config import ConfigError, RunConfig, load_config, substream
from .diffusion import blob_images, gaussian_mixture, make_schedule, sample
from .finetune import (
    FinetuneConfig,
    FinetuneResult,
    NumericalError,
    ablation_run,
    build_cache,
    diagnose,
    finetune,
    gap_from_trajectories,
    init_adapters,
    moment_error,
)
from .lora import quantized_forward
from .nn import DenoiserModel, forward
from .train import DivergenceError, train_denoiser

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- small helpers --------------------------------------------------------------


def git_hash(data: bytes) -> str:
    """Content hash in the style of ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    data = buf.getvalue().encode("utf-8")
    path.write_bytes(data)
    return data


def _schedule(cfg: RunConfig):
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.eta)


def _load(path) -> tuple:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"missing input: {path}")
    try:
        raw = path.read_bytes()
        ck = ckpt_io.decode(raw)
        return ck, ckpt_io.unpack_model(ck), raw
    except ckpt_io.CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _input(args, attr: str, out: Path, default: str) -> Path:
    value = getattr(args, attr, None)
    return Path(value) if value else out / default


def _check_arch(cfg: RunConfig, model: DenoiserModel, path) -> None:
    if (model.layers[0].out_features, model.n_hidden, model.time_embed_dim) != (cfg.hidden, cfg.n_hidden, cfg.time_embed_dim):
        raise UsageError(f"{path}: architecture does not match the config")


class Run:
    """Output directory bookkeeping: echoes the config, hashes inputs and outputs."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.metrics: dict[str, float] = {}

    def input(self, path: Path, raw: bytes) -> None:
        self.inputs[path.name] = git_hash(raw)

    def csv(self, name: str, header, rows) -> None:
        self.outputs[name] = git_hash(write_csv(self.out / name, header, rows))

    def checkpoint(self, name: str, ck) -> None:
        self.outputs[name] = git_hash(ckpt_io.save(self.out / name, ck))

    def finish(self) -> None:
        # the output directory is left out so that reruns elsewhere are byte-identical
        config = {k: v for k, v in self.cfg.to_dict().items() if k != "out"}
        (self.out / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
        manifest = {
            "command": self.command,
            "config": config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "metrics": self.metrics,
        }
        (self.out / f"{self.command}.manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# --- commands -----------------------------------------------------------------


def cmd_train_fp(cfg: RunConfig, args) -> Run:
    run = Run("train-fp", cfg)
    data_rng = substream(cfg.seed, "data")
    if cfg.dataset == "mixture":
        data = gaussian_mixture(cfg.n_data, data_rng, std=cfg.mode_std)
    else:
        data = blob_images(cfg.n_data, data_rng)
    model = DenoiserModel.init(data.shape[1], cfg.hidden, cfg.n_hidden, cfg.time_embed_dim,
                               substream(cfg.seed, "train/init"))
    history = train_denoiser(model, data, _schedule(cfg), substream(cfg.seed, "train/loop"),
                             cfg.train_epochs, cfg.train_batch_size, cfg.train_lr)
    run.checkpoint("fp.ckpt", ckpt_io.pack_model(model, extra={"stage": "fp"}))
    run.csv("train_loss.csv", ["epoch", "loss"], enumerate(history))
    if history:
        run.metrics["final_loss"] = history[-1]
    return run


def _calibrate(cfg: RunConfig, model, schedule, mixup: bool):
    maxval0 = probe_maxval0(model, schedule, cfg.n_probe, substream(cfg.seed, "calib/probe"))
    cset = build_calibration_set(model, schedule, cfg.calib_size, substream(cfg.seed, "calib/set"), cfg.calib_strata)
    records = calibrate_model(model, cset, maxval0, cfg.layer_bits, mixup, cfg.calib_max_samples,
                              substream(cfg.seed, "calib/subsample"), cfg.n_maxvals)
    return records, quantized_model(model, records)


def cmd_calibrate(cfg: RunConfig, args) -> Run:
    run = Run("calibrate", cfg)
    path = _input(args, "fp", run.out, "fp.ckpt")
    _, (model, _, _, _), raw = _load(path)
    _check_arch(cfg, model, path)
    run.input(path, raw)
    records, qmodel = _calibrate(cfg, model, _schedule(cfg), cfg.msfp)
    for r in records:
        if r.mode == "passthrough" and r.maxval0 == r.maxval0:  # skip deliberate 32-bit sites (nan)
            print(f"warning: site {r.site_id} is degenerate (max |x| = {r.maxval0}); left unquantized", file=sys.stderr)
    run.checkpoint("quant.ckpt", ckpt_io.pack_model(model, qmodel, extra={"stage": "quant"}))
    run.csv("calibration.csv", CSV_HEADER, (r.csv_row() for r in records))
    return run


def _allocation_rows(alloc, T: int, layers, rng):
    sel = alloc(np.arange(T), rng)
    for t in range(T):
        for j, layer in enumerate(layers):
            yield t, layer, int(np.argmax(sel[t, j]))


def cmd_finetune(cfg: RunConfig, args) -> Run:
    run = Run("finetune", cfg)
    path = _input(args, "quant", run.out, "quant.ckpt")
    _, (model, qmodel, _, _), raw = _load(path)
    if qmodel is None:
        raise UsageError(f"{path}: not a calibrated checkpoint")
    _check_arch(cfg, model, path)
    run.input(path, raw)
    schedule = _schedule(cfg)
    fcfg = FinetuneConfig(cfg.epochs, cfg.batch_size, cfg.lr_lora, cfg.lr_router, cfg.loss, cfg.strategy,
                          cfg.hub_size, cfg.rank, cfg.seed)
    cache = build_cache(model, schedule, cfg.n_cache, substream(cfg.seed, "finetune/cache"))
    hub, router = init_adapters(qmodel, fcfg, substream(cfg.seed, "finetune/init"))
    res = finetune(qmodel, hub, router, model, schedule, fcfg, cache, substream(cfg.seed, "finetune/loop"))
    extra = {"stage": "finetuned", "strategy": cfg.strategy}
    run.checkpoint("finetuned.ckpt", ckpt_io.pack_model(model, qmodel, res.hub, res.router, extra=extra))
    run.csv("finetune_loss.csv", ["epoch", "loss", "loss_plain"],
            ((h["epoch"], h["loss"], h["loss_plain"]) for h in res.history))
    alloc = res.allocation(schedule.T, cfg.strategy)
    run.csv("allocation.csv", ["t", "layer", "chosen_k"],
            _allocation_rows(alloc, schedule.T, res.hub.layers, substream(cfg.seed, "finetune/allocation")))
    return run


def _predictor(ck, parts, T: int, rng):
    model, qmodel, hub, router = parts
    if qmodel is None:
        return lambda x, t: forward(model, x, t)
    alloc = None
    if hub is not None:
        strategy = ck.meta.get("extra", {}).get("strategy", "single")
        alloc = FinetuneResult(hub, router).allocation(T, strategy)
    return lambda x, t: quantized_forward(qmodel, hub, None, x, t, selection=None if alloc is None else alloc(t, rng))


def _read_x_T(path: Path, dim: int) -> np.ndarray:
    if not path.is_file():
        raise UsageError(f"missing input: {path}")
    try:
        x = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if x.shape[1] != dim:
        raise UsageError(f"{path}: expected {dim} columns, got {x.shape[1]}")
    return x


def cmd_sample(cfg: RunConfig, args) -> Run:
    run = Run("sample", cfg)
    path = _input(args, "ckpt", run.out, "finetuned.ckpt")
    ck, parts, raw = _load(path)
    run.input(path, raw)
    model = parts[0]
    schedule = _schedule(cfg)
    x_T = None
    if args.x_T:
        xp = Path(args.x_T)
        x_T = _read_x_T(xp, model.input_dim)
        run.input(xp, xp.read_bytes())
    noise_seed = int(substream(cfg.seed, "sample/noise").integers(2**63))
    predict = _predictor(ck, parts, schedule.T, substream(cfg.seed, "sample/allocation"))
    n = cfg.n_samples if x_T is None else None
    traj = sample(predict, schedule, n, noise_seed, model.input_dim, x_T, keep_trajectory=True).trajectory
    out = traj[0]
    if not np.all(np.isfinite(out)):
        raise NumericalError("sampling produced non-finite values")
    cols = [f"x{i}" for i in range(model.input_dim)]
    run.csv("samples.csv", ["i", *cols], ((i, *row) for i, row in enumerate(out)))
    if parts[1] is not None:
        ref = sample(lambda x, t: forward(model, x, t), schedule, n, noise_seed, model.input_dim, x_T,
                     keep_trajectory=True).trajectory
        run.metrics["trajectory_gap"] = gap_from_trajectories(ref, traj)
        run.metrics["final_gap"] = float(np.mean((ref[0] - out) ** 2))
        run.metrics["moment_error"] = moment_error(ref[0], out)
        run.csv("sample_metrics.csv", ["metric", "value"], run.metrics.items())
        print(f"trajectory gap to the full-precision model: {run.metrics['trajectory_gap']:.6g}")
    return run


def cmd_diagnose(cfg: RunConfig, args) -> Run:
    run = Run("diagnose", cfg)
    path = _input(args, "ckpt", run.out, "quant.ckpt")
    ck, parts, raw = _load(path)
    model, qmodel, hub, router = parts
    if qmodel is None:
        raise UsageError(f"{path}: not a calibrated checkpoint")
    run.input(path, raw)
    schedule = _schedule(cfg)
    cache = build_cache(model, schedule, cfg.n_cache, substream(cfg.seed, "diagnose/cache"))
    alloc = None
    if hub is not None:
        alloc = FinetuneResult(hub, router).allocation(schedule.T, ck.meta.get("extra", {}).get("strategy", "single"))
    diag = diagnose(qmodel, hub, alloc, cache, schedule, substream(cfg.seed, "diagnose/allocation"))
    run.csv("diagnose.csv", ["t", "loss_plain", "loss_dfa", "gap"], diag.rows())
    r_plain, r_dfa = diag.correlations()
    run.metrics.update({"r_plain": r_plain, "r_dfa": r_dfa})
    print(f"pearson r: plain {r_plain:.4f}, dfa {r_dfa:.4f}")
    return run


def cmd_ablate(cfg: RunConfig, args) -> Run:
    run = Run("ablate", cfg)
    path = _input(args, "fp", run.out, "fp.ckpt")
    _, (model, _, _, _), raw = _load(path)
    _check_arch(cfg, model, path)
    run.input(path, raw)
    schedule = _schedule(cfg)
    qmodels = {mix: _calibrate(cfg, model, schedule, mix)[1] for mix in (True, False)}
    base = FinetuneConfig(cfg.epochs, cfg.batch_size, cfg.lr_lora, cfg.lr_router, rank=cfg.rank, seed=cfg.seed)
    cache = build_cache(model, schedule, cfg.n_cache, substream(cfg.seed, "finetune/cache"))
    eval_seed = int(substream(cfg.seed, "ablate/eval").integers(2**63))
    rows = ablation_run(qmodels, model, schedule, base, cache, cfg.n_eval, eval_seed, max(cfg.hub_size, 2))
    run.csv("ablate.csv", ["msfp", "talora", "dfa", "gap"], ((r["msfp"], r["talora"], r["dfa"], r["gap"]) for r in rows))
    return run


COMMANDS = {
    "train-fp": cmd_train_fp,
    "calibrate": cmd_calibrate,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
}


# --- argument handling --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--bits", help="weight/activation bit-widths, e.g. 4/4")
    common.add_argument("--hub-size", type=int)
    common.add_argument("--loss", choices=("plain", "dfa"))
    common.add_argument("--strategy", choices=("single", "split_half", "random", "router"))
    parser = _Parser(prog="msfp", description=__doc__.splitlines()[0], allow_abbrev=False,
                     epilog="Any config field can also be set with --key=value.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-fp", parents=[common], allow_abbrev=False, help="train the full-precision denoiser")
    p = sub.add_parser("calibrate", parents=[common], allow_abbrev=False, help="search quantizer parameters")
    p.add_argument("--fp", help="full-precision checkpoint (default OUT/fp.ckpt)")
    p = sub.add_parser("finetune", parents=[common], allow_abbrev=False, help="train LoRA adapters and the router")
    p.add_argument("--quant", help="calibrated checkpoint (default OUT/quant.ckpt)")
    p = sub.add_parser("sample", parents=[common], allow_abbrev=False, help="draw samples from a checkpoint")
    p.add_argument("--ckpt", help="checkpoint to sample from (default OUT/finetuned.ckpt)")
    p.add_argument("--x-T", dest="x_T", help="CSV of starting noise (header row, one column per dim)")
    p = sub.add_parser("diagnose", parents=[common], allow_abbrev=False, help="per-timestep loss and gap table")
    p.add_argument("--ckpt", help="calibrated or fine-tuned checkpoint (default OUT/quant.ckpt)")
    p = sub.add_parser("ablate", parents=[common], allow_abbrev=False, help="six-row module ablation")
    p.add_argument("--fp", help="full-precision checkpoint (default OUT/fp.ckpt)")
    return parser


_KV = re.compile(r"^--([A-Za-z_][A-Za-z0-9_-]*)=(.*)$")


def resolve_config(args, extra: list[str]) -> RunConfig:
    overrides = {}
    for item in extra:
        m = _KV.match(item)
        if not m:
            raise UsageError(f"unrecognized argument {item!r} (overrides take the form --key=value)")
        overrides[m.group(1).replace("-", "_")] = m.group(2)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.bits is not None:
        m = re.fullmatch(r"(\d+)/(\d+)", args.bits)
        if not m:
            raise UsageError(f"--bits expects W/A, got {args.bits!r}")
        overrides["weight_bits"], overrides["act_bits"] = int(m.group(1)), int(m.group(2))
    if args.hub_size is not None:
        overrides["hub_size"] = args.hub_size
    if args.loss is not None:
        overrides["loss"] = args.loss
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"missing input: {args.config}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        cfg = resolve_config(args, extra)
        run = COMMANDS[args.command](cfg, args)
        run.finish()
    except (UsageError, ConfigError) as exc:
        print(f"msfp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        print(f"msfp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
