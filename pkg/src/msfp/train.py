"""Full-precision training of the toy denoiser (epsilon-prediction objective)."""
from __future__ import annotations

import numpy as np

from .diffusion import NoiseSchedule, forward_noise
from .nn import DenoiserModel, GradientTape, forward
from .optim import Adam


class DivergenceError(RuntimeError):
    pass


def train_denoiser(
    model: DenoiserModel,
    data: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    epochs: int = 200,
    batch_size: int = 256,
    lr: float = 2e-3,
) -> list[float]:
    """Train in place; returns the mean loss of every epoch.

    One epoch is one shuffled pass over ``data``.
    """
    params = dict(model.named_parameters())
    opt = Adam(params, lr=lr)
    n = len(data)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, batch_size):
            x0 = data[order[start : start + batch_size]]
            t = rng.integers(0, schedule.T, size=len(x0))
            eps = rng.standard_normal(x0.shape)
            x_t = forward_noise(x0, t, eps, schedule)
            tape = GradientTape(params)
            loss = tape.mse(forward(model, x_t, t, tape=tape), eps)
            if not np.isfinite(loss.value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            opt.step(tape.backward(loss))
            total += float(loss.value)
            batches += 1
        history.append(total / max(batches, 1))
    return history
