"""Fine-tuning of quantized denoisers and the step-wise diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, denoise_step, sample
from .fpq import mse
from .lora import LoraHub, QuantizedDenoiser, Router, adapter_layers, quantized_forward, route
from .nn import DenoiserModel, GradientTape, Node, forward
from .optim import Adam

__all__ = [
    "FinetuneConfig",
    "FinetuneResult",
    "NumericalError",
    "TrajectoryCache",
    "StepDiagnostics",
    "plain_loss",
    "dfa_loss",
    "build_cache",
    "make_allocation",
    "finetune",
    "diagnose",
    "trajectory_gap",
    "gap_from_trajectories",
    "moment_error",
    "reference_trajectory",
    "ablation_run",
    "ABLATION_FLAGS",
    "STRATEGIES",
]

STRATEGIES = ("single", "split_half", "random", "router")


class NumericalError(RuntimeError):
    pass


def plain_loss(eps_fp, eps_q) -> float:
    """Mean squared difference of two noise predictions."""
    return mse(eps_fp, eps_q)


def dfa_loss(eps_fp, eps_q, t, schedule: NoiseSchedule) -> float:
    """Plain loss weighted by the denoising factor of timestep ``t``."""
    schedule.check_t(t)
    return float(schedule.gamma[t]) * plain_loss(eps_fp, eps_q)


@dataclass
class FinetuneConfig:
    epochs: int = 200
    batch_size: int = 64
    lr_lora: float = 1e-4
    lr_router: float = 1e-4
    loss_mode: str = "plain"
    lora_strategy: str = "single"
    hub_size: int = 1
    rank: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lr_lora < 0 or self.lr_router < 0:
            raise ValueError("learning rates must be non-negative")
        if self.loss_mode not in ("plain", "dfa"):
            raise ValueError(f"loss_mode must be 'plain' or 'dfa', got {self.loss_mode!r}")
        if self.lora_strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.lora_strategy!r}; pick one of {STRATEGIES}")
        if self.lora_strategy != "single" and self.hub_size < 2:
            raise ValueError(f"strategy {self.lora_strategy!r} needs hub_size >= 2")
        if self.epochs < 0 or self.batch_size < 1 or self.rank < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and rank >= 1 required")


@dataclass
class TrajectoryCache:
    """Full-precision reverse trajectories: ``states[t]`` is the input to step ``t``."""

    states: np.ndarray  # (T, n, dim)
    eps_fp: np.ndarray  # (T, n, dim)
    deltas: np.ndarray  # (T, n, dim), the noise drawn at step t

    @property
    def n_traj(self) -> int:
        return self.states.shape[1]


def build_cache(fp_model: DenoiserModel, schedule: NoiseSchedule, n_traj: int, rng) -> TrajectoryCache:
    T = schedule.T
    x = rng.standard_normal((n_traj, fp_model.input_dim))
    states = np.empty((T,) + x.shape)
    eps = np.empty_like(states)
    deltas = np.empty_like(states)
    for t in range(T - 1, -1, -1):
        delta = rng.standard_normal(x.shape)
        e = forward(fp_model, x, t)
        states[t], eps[t], deltas[t] = x, e, delta
        x = denoise_step(x, e, t, schedule, delta)
    return TrajectoryCache(states, eps, deltas)


class _Fixed:
    def __init__(self, n_layers, hub_size, pick):
        self.n_layers, self.hub_size, self.pick = n_layers, hub_size, pick

    def __call__(self, t, rng=None):
        t = np.atleast_1d(np.asarray(t))
        idx = self.pick(t, rng)
        out = np.zeros((len(t), self.n_layers, self.hub_size))
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out


def make_allocation(strategy: str, n_layers: int, hub_size: int, T: int, router: Router | None = None):
    """Selection function ``f(t, rng) -> (len(t), n_layers, hub_size)`` one-hots.

    ``random`` draws a fresh timestep -> adapter table on every call, so each
    batch (or each sampling step) gets its own allocation.
    """
    if strategy == "single":
        return _Fixed(n_layers, hub_size, lambda t, rng: np.zeros((len(t), n_layers), dtype=np.intp))
    if strategy == "split_half":
        def pick(t, rng):
            k = np.where(t >= T / 2, 0, 1)
            return np.repeat(k[:, None], n_layers, axis=1)
        return _Fixed(n_layers, hub_size, pick)
    if strategy == "random":
        def pick(t, rng):
            table = rng.integers(0, hub_size, size=(T, n_layers))
            return table[t]
        return _Fixed(n_layers, hub_size, pick)
    if strategy == "router":
        if router is None:
            raise ValueError("router strategy needs a router")
        return lambda t, rng=None: route(router, t)[0]
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class FinetuneResult:
    hub: LoraHub
    router: Router | None
    history: list[dict] = field(default_factory=list)

    def allocation(self, T: int, strategy: str):
        return make_allocation(strategy, len(self.hub.layers), self.hub.hub_size, T, self.router)


def init_adapters(qmodel: QuantizedDenoiser, config: FinetuneConfig, rng):
    model = qmodel.model
    hub = LoraHub.init(model, config.hub_size, config.rank, rng)
    router = None
    if config.lora_strategy == "router":
        router = Router.init(len(adapter_layers(model)), config.hub_size, model.time_embed_dim, rng)
    return hub, router


def finetune(
    qmodel: QuantizedDenoiser,
    hub: LoraHub,
    router: Router | None,
    fp_model: DenoiserModel,
    schedule: NoiseSchedule,
    config: FinetuneConfig,
    cache: TrajectoryCache,
    rng: np.random.Generator,
) -> FinetuneResult:
    """Train adapters (and the router) in place against the FP teacher.

    Every step draws (trajectory, timestep) pairs from ``cache``; the teacher
    prediction on the FP state is the target. Base weights and quantizers
    are never touched.
    """
    T = schedule.T
    use_router = config.lora_strategy == "router"
    if use_router and router is None:
        raise ValueError("router strategy needs a router")
    params = dict(hub.named_parameters())
    router_names = []
    if use_router:
        router_names = [name for name, _ in router.named_parameters()]
        params.update(router.named_parameters())
    opt = Adam(params, lr=config.lr_lora, lrs={n: config.lr_router for n in router_names})
    alloc = None if use_router else make_allocation(config.lora_strategy, len(hub.layers), hub.hub_size, T)
    n_pairs = cache.n_traj * T
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n_pairs)
        total = total_plain = 0.0
        steps = math.ceil(n_pairs / config.batch_size)
        for b in range(steps):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            t = idx % T
            i = idx // T
            x = cache.states[t, i]
            target = cache.eps_fp[t, i]
            tape = GradientTape(params)
            selection = None if use_router else alloc(t, rng)
            eps_q = quantized_forward(qmodel, hub, router if use_router else None, x, t, tape, selection)
            weights = schedule.gamma[t] if config.loss_mode == "dfa" else None
            loss = tape.mse(eps_q, target, weights=weights)
            value = float(tape.value(loss))
            if not np.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}, timesteps {sorted(set(t.tolist()))}")
            if isinstance(loss, Node):
                opt.step(tape.backward(loss))
            total += value
            total_plain += plain_loss(tape.value(eps_q), target)
        history.append({"epoch": epoch, "loss": total / steps, "loss_plain": total_plain / steps})
    return FinetuneResult(hub, router, history)


@dataclass
class StepDiagnostics:
    t: np.ndarray
    loss_plain: np.ndarray
    loss_dfa: np.ndarray
    gap: np.ndarray

    def rows(self):
        for k in range(len(self.t)):
            yield int(self.t[k]), float(self.loss_plain[k]), float(self.loss_dfa[k]), float(self.gap[k])

    def correlations(self) -> tuple[float, float]:
        """Pearson r of (plain, gap) and (dfa, gap) across timesteps."""
        r_plain = float(np.corrcoef(self.loss_plain, self.gap)[0, 1])
        r_dfa = float(np.corrcoef(self.loss_dfa, self.gap)[0, 1])
        return r_plain, r_dfa


def _predictor(qmodel, hub, allocation, rng):
    def predict(x, t):
        sel = None if hub is None or allocation is None else allocation(t, rng)
        return quantized_forward(qmodel, hub, None, x, t, selection=sel)
    return predict


def diagnose(qmodel, hub, allocation, cache: TrajectoryCache, schedule: NoiseSchedule, rng=None) -> StepDiagnostics:
    """One-step comparison on the FP states of ``cache``, noise shared."""
    rng = np.random.default_rng(0) if rng is None else rng
    predict = _predictor(qmodel, hub, allocation, rng)
    T = schedule.T
    plain = np.empty(T)
    gap = np.empty(T)
    for t in range(T):
        x = cache.states[t]
        e_fp = cache.eps_fp[t]
        e_q = predict(x, t)
        plain[t] = plain_loss(e_fp, e_q)
        nxt_fp = denoise_step(x, e_fp, t, schedule, cache.deltas[t])
        nxt_q = denoise_step(x, e_q, t, schedule, cache.deltas[t])
        gap[t] = mse(nxt_fp, nxt_q)
    return StepDiagnostics(np.arange(T), plain, schedule.gamma * plain, gap)


def gap_from_trajectories(reference: np.ndarray, other: np.ndarray) -> float:
    """Mean squared gap over the reverse steps of two (T+1, n, dim) trajectories.

    Index ``T`` holds the shared starting noise and is left out.
    """
    if reference.shape != other.shape:
        raise ValueError(f"trajectory shapes differ: {reference.shape} vs {other.shape}")
    return mse(reference[:-1], other[:-1])


def moment_error(reference: np.ndarray, samples: np.ndarray) -> float:
    """Squared distance between the sample means plus the squared Frobenius
    distance between the sample covariances."""
    dm = reference.mean(0) - samples.mean(0)
    dc = np.cov(reference, rowvar=False) - np.cov(samples, rowvar=False)
    return float(dm @ dm + np.sum(dc * dc))


def reference_trajectory(fp_model: DenoiserModel, schedule: NoiseSchedule, n_samples: int, seed: int) -> np.ndarray:
    return sample(lambda x, t: forward(fp_model, x, t), schedule, n_samples, seed, fp_model.input_dim,
                  keep_trajectory=True).trajectory


def trajectory_gap(qmodel, hub, allocation, fp_model: DenoiserModel, schedule: NoiseSchedule,
                   n_samples: int = 512, seed: int = 0, reference=None, alloc_seed: int = 1) -> float:
    """Mean squared gap between FP and quantized reverse trajectories.

    Both runs share ``x_T`` and every step's noise; the gap is averaged over
    all steps, samples and dimensions. ``reference`` is a precomputed FP
    trajectory from :func:`reference_trajectory` with the same ``seed``.
    """
    if reference is None:
        reference = reference_trajectory(fp_model, schedule, n_samples, seed)
    predict = _predictor(qmodel, hub, allocation, np.random.default_rng(alloc_seed))
    q = sample(predict, schedule, n_samples, seed, fp_model.input_dim, keep_trajectory=True).trajectory
    return gap_from_trajectories(reference, q)


# (msfp, talora, dfa) rows in table order
ABLATION_FLAGS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (True, False, True),
    (True, True, False),
    (True, True, True),
)


def ablation_run(qmodels: dict[bool, QuantizedDenoiser], fp_model: DenoiserModel, schedule: NoiseSchedule,
                 base: FinetuneConfig, cache: TrajectoryCache, n_eval: int = 512, eval_seed: int = 12345,
                 hub_size: int = 2, flags=ABLATION_FLAGS) -> list[dict]:
    """Fine-tune and score every flag combination.

    ``qmodels[True]`` is the mixup-sign calibration, ``qmodels[False]`` the
    signed-only one. The metric is the trajectory gap to the FP model.
    """
    reference = reference_trajectory(fp_model, schedule, n_eval, eval_seed)
    rows = []
    for msfp_on, talora_on, dfa_on in flags:
        cfg = FinetuneConfig(
            epochs=base.epochs, batch_size=base.batch_size, lr_lora=base.lr_lora, lr_router=base.lr_router,
            loss_mode="dfa" if dfa_on else "plain",
            lora_strategy="router" if talora_on else "single",
            hub_size=hub_size if talora_on else 1, rank=base.rank, seed=base.seed,
        )
        qm = qmodels[msfp_on]
        rng = np.random.default_rng(base.seed)
        hub, router = init_adapters(qm, cfg, rng)
        res = finetune(qm, hub, router, fp_model, schedule, cfg, cache, rng)
        alloc = res.allocation(schedule.T, cfg.lora_strategy)
        gap = trajectory_gap(qm, res.hub, alloc, fp_model, schedule, n_eval, eval_seed, reference)
        rows.append({"msfp": msfp_on, "talora": talora_on, "dfa": dfa_on, "gap": gap})
    return rows
