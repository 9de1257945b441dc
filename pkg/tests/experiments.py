"""Desk-scale experiments shared by the acceptance tests."""
from __future__ import annotations

import numpy as np

from conftest import build_toy
from msfp.calib import calibrate_model, quantized_model
from msfp.config import RunConfig, substream
from msfp.finetune import (
    FinetuneConfig,
    build_cache,
    finetune,
    init_adapters,
    reference_trajectory,
    trajectory_gap,
)

# (name, msfp calibration, strategy, hub size, loss)
RUNS = (
    ("single", True, "single", 1, "plain"),
    ("split_half", True, "split_half", 2, "plain"),
    ("random", True, "random", 2, "plain"),
    ("all_on", True, "router", 2, "dfa"),
    ("all_off", False, "single", 1, "plain"),
)


def strategy_gaps(seed: int, runs=RUNS, cfg: RunConfig | None = None) -> dict[str, float]:
    """Trajectory gap of every run in ``runs`` for one seed, plus the
    pre-finetune gaps ``pre_msfp`` and ``pre_signed``.

    All runs share the FP model, the trajectory cache, the evaluation noise
    and the epoch budget; "single" doubles as the msfp-only ablation row.
    """
    cfg = cfg or RunConfig(seed=seed)
    toy = build_toy(cfg)
    signed_records = calibrate_model(toy.fp, toy.calib, toy.maxval0, cfg.layer_bits, False, cfg.calib_max_samples,
                                     substream(seed, "calib/subsample"), cfg.n_maxvals)
    qmodels = {True: toy.qmodel, False: quantized_model(toy.fp, signed_records)}
    cache = build_cache(toy.fp, toy.schedule, cfg.n_cache, substream(seed, "finetune/cache"))
    eval_seed = int(substream(seed, "ablate/eval").integers(2**63))
    ref = reference_trajectory(toy.fp, toy.schedule, cfg.n_eval, eval_seed)
    out = {
        "pre_msfp": trajectory_gap(qmodels[True], None, None, toy.fp, toy.schedule, cfg.n_eval, eval_seed, ref),
        "pre_signed": trajectory_gap(qmodels[False], None, None, toy.fp, toy.schedule, cfg.n_eval, eval_seed, ref),
    }
    for name, msfp_on, strategy, h, loss in runs:
        fcfg = FinetuneConfig(cfg.epochs, cfg.batch_size, cfg.lr_lora, cfg.lr_router, loss, strategy, h, cfg.rank, seed)
        q = qmodels[msfp_on]
        hub, router = init_adapters(q, fcfg, substream(seed, "finetune/init"))
        res = finetune(q, hub, router, toy.fp, toy.schedule, fcfg, cache, substream(seed, "finetune/loop"))
        alloc = res.allocation(toy.schedule.T, strategy)
        out[name] = trajectory_gap(q, res.hub, alloc, toy.fp, toy.schedule, cfg.n_eval, eval_seed, ref)
        out[name + "_loss_plain"] = res.history[-1]["loss_plain"] if res.history else float("nan")
    return out


def medians(results: list[dict]) -> dict[str, float]:
    return {k: float(np.median([r[k] for r in results])) for k in results[0]}
