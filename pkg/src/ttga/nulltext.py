"""One-step null-text optimization.

Given an inverted latent x_tau, a single deterministic jump back to step 0

    xbar_0 = xbar_tau + (gamma_0 - gamma_tau) * eps_dot,
    eps_dot = cfg_single(eps(x_tau, tau, null), eps(x_tau, tau, c), omega)

reconstructs an image. Optimizing only the null embedding to minimize the
mean squared reconstruction error against the original image yields a
per-image identity code: guided denoising that substitutes this embedding
for the raw null reproduces the source content without touching any model
weights or the semantic condition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .denoiser import ConditionEmbedding, Denoiser, ROLE_OPTIMIZED_NULL
from .errors import DegenerateGuidanceError
from .guidance import cfg_single
from .optim import AdamState, adam_step
from .sampler import InversionTrajectory
from .schedule import NoiseSchedule, to_xbar

__all__ = [
    "AdamState",
    "adam_step",
    "NullOptConfig",
    "OptimizedNull",
    "jump_from_tau",
    "one_step_reconstruct",
    "optimize_null_text",
]


@dataclass
class NullOptConfig:
    lr: float = 0.1
    max_steps: int = 500
    early_stop: float = 5e-4
    trace_path: str | None = None


@dataclass(frozen=True)
class OptimizedNull:
    embedding: ConditionEmbedding
    tau: int
    final_loss: float
    iterations_used: int

    def __post_init__(self):
        if self.final_loss < 0.0:
            raise ValueError("final_loss must be >= 0")


def jump_from_tau(
    xbar_tau: np.ndarray,
    tau: int,
    t_out: int,
    eps_dot: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """xbar_{t_out} = xbar_tau + (gamma_{t_out} - gamma_tau) * eps_dot."""
    return xbar_tau + (schedule.gammas[t_out] - schedule.gammas[tau]) * eps_dot


def one_step_reconstruct(
    model: Denoiser,
    x_tau: np.ndarray,
    tau: int,
    c: ConditionEmbedding,
    null_e: ConditionEmbedding,
    omega: float,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Single guided jump tau -> 0; the result is already un-barred since
    alpha_bar[0] = 1."""
    eps_dot = cfg_single(
        model.predict(x_tau, tau, null_e),
        model.predict(x_tau, tau, c),
        omega,
    )
    return jump_from_tau(to_xbar(x_tau, tau, schedule), tau, 0, eps_dot, schedule)


def reconstruction_loss(recon: np.ndarray, x0: np.ndarray) -> float:
    """Mean (not summed) squared error over grid elements, so thresholds are
    resolution-independent."""
    return float(np.mean((x0 - recon) ** 2))


def optimize_null_text(
    model: Denoiser,
    traj: InversionTrajectory,
    c: ConditionEmbedding,
    omega: float,
    schedule: NoiseSchedule,
    opt_config: NullOptConfig | None = None,
) -> OptimizedNull:
    """Adam on the null embedding against the one-step reconstruction MSE.

    Starts from the canonical null (zero vector), stops early once the loss
    reaches ``early_stop``, and reports the best embedding seen. With
    omega = 1 the guided noise is independent of the null embedding, so the
    problem is degenerate and rejected up front.
    """
    if omega == 1.0:
        raise DegenerateGuidanceError(
            "omega=1 makes the one-step reconstruction independent of the null embedding"
        )
    opt_config = opt_config or NullOptConfig()
    tau = traj.tau
    x_tau = traj.x_tau
    x0 = traj.x0
    n = x0.size
    gamma_tau = schedule.gammas[tau]
    eps_c = model.predict(x_tau, tau, c)
    xbar_tau = to_xbar(x_tau, tau, schedule)

    def evaluate(values: np.ndarray):
        e = ConditionEmbedding(values, role=ROLE_OPTIMIZED_NULL)
        eps_e = model.predict(x_tau, tau, e)
        recon = jump_from_tau(xbar_tau, tau, 0, cfg_single(eps_e, eps_c, omega), schedule)
        return e, recon, reconstruction_loss(recon, x0)

    values = np.zeros(model.embedding_dim)
    current_e, recon, loss = evaluate(values)
    best_e, best_loss = current_e, loss
    trace = [(0, loss)]
    state = AdamState(dim=values.size, lr=opt_config.lr)
    iterations = 0
    while loss > opt_config.early_stop and iterations < opt_config.max_steps:
        # dL/de via the chain recon -> eps_dot -> eps(x_tau, tau, e)
        upstream = (2.0 / n) * (recon - x0) * (-gamma_tau) * (1.0 - omega)
        grad = model.grad_wrt_embedding(upstream, x_tau, tau, current_e)
        values = adam_step(state, values, grad)
        iterations += 1
        current_e, recon, loss = evaluate(values)
        trace.append((iterations, loss))
        if loss < best_loss:
            best_e, best_loss = current_e, loss

    if opt_config.trace_path:
        with open(opt_config.trace_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss"])
            for it, lo in trace:
                writer.writerow([it, f"{lo:.12e}"])

    return OptimizedNull(
        embedding=best_e, tau=tau, final_loss=best_loss, iterations_used=iterations
    )
