"""Dual-path masked denoising loop, augmentation-set generation, and the
test-time ensemble with entropy uncertainty.

One augmentation runs the loop t = tau .. 1 over rescaled latents. Each
iteration produces two candidates for xbar_{t-1}:

* identity path (spade): a jump from the fixed inverted latent x_tau using a
  guided noise prediction computed once at (x_tau, tau) -- the right-hand
  side depends on t only through gamma_{t-1}, so the prediction is cached;
* augmentation path (club): a one-step move from the current blended latent
  using the three-component guidance (unconditional / semantic / optimized
  null), with the identity scale lambda_r drawn once per augmentation.

A binary mask pair then selects, per pixel, which path's value survives:

    xbar_{t-1} = spade_mask * spade_value + club_mask * club_value.

The ensemble averages member probability grids and reads per-pixel
uncertainty from the Shannon entropy of the averaged distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import ConditionEmbedding, Denoiser
from .errors import ConfigError, ContractError, NumericalAbort
from .guidance import GuidanceConfig, cfg_multi, cfg_single
from .masks import MaskPair, MaskPolicy, make_mask, saliency_relevance
from .nulltext import NullOptConfig, OptimizedNull, jump_from_tau, optimize_null_text
from .rng import SeededRng
from .sampler import InversionTrajectory, ddim_invert
from .schedule import NoiseSchedule, from_xbar, to_xbar

INVERT_WITH_SEMANTIC = "semantic"
INVERT_WITH_NULL = "null"

RelevanceFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class TtgaConfig:
    tau: int = 300
    inversion_interval: int = 10
    n_augment: int = 10
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    lambda_r_low: float = 0.5
    lambda_r_high: float = 1.5
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    seed: int = 0
    null_opt: NullOptConfig = field(default_factory=NullOptConfig)
    club_stride: int = 1
    club_on_own_chain: bool = False
    invert_with: str = INVERT_WITH_SEMANTIC

    def __post_init__(self):
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        if self.n_augment < 1:
            raise ConfigError(f"n_augment must be >= 1, got {self.n_augment}")
        if self.lambda_r_low > self.lambda_r_high:
            raise ConfigError(
                f"lambda_r_low {self.lambda_r_low} > lambda_r_high {self.lambda_r_high}"
            )
        if self.club_stride < 1:
            raise ConfigError(f"club_stride must be >= 1, got {self.club_stride}")
        if self.invert_with not in (INVERT_WITH_SEMANTIC, INVERT_WITH_NULL):
            raise ConfigError(f"invert_with must be semantic|null, got {self.invert_with!r}")


@dataclass(frozen=True)
class AugmentationItem:
    lambda_r: float
    mask_stream: int
    reconstruction_loss: float


@dataclass(frozen=True)
class AugmentationSet:
    original: np.ndarray
    augmented: tuple
    per_item: tuple

    def __post_init__(self):
        if len(self.augmented) != len(self.per_item):
            raise ContractError("augmented/per_item length mismatch")
        for g in self.augmented:
            if g.shape != self.original.shape:
                raise ContractError("augmented grids must share the original's shape")


@dataclass(frozen=True)
class EnsembleResult:
    mean_probability: np.ndarray   # (H, W, K)
    entropy_map: np.ndarray        # (H, W), bits
    member_probabilities: tuple


def compute_identity_noise(
    model: Denoiser,
    x_tau: np.ndarray,
    tau: int,
    null_opt: OptimizedNull,
    c: ConditionEmbedding,
    omega: float,
) -> np.ndarray:
    """Guided noise at (x_tau, tau) with the optimized null as unconditional."""
    return cfg_single(
        model.predict(x_tau, tau, null_opt.embedding),
        model.predict(x_tau, tau, c),
        omega,
    )


def identity_path_step(
    model: Denoiser,
    x_tau: np.ndarray,
    tau: int,
    t: int,
    null_opt: OptimizedNull,
    c: ConditionEmbedding,
    omega: float,
    schedule: NoiseSchedule,
    eps_dot: np.ndarray | None = None,
) -> np.ndarray:
    """Rescaled identity-path value at step t-1 (pass eps_dot to reuse the
    cached prediction; the result is identical either way)."""
    if not 1 <= t <= tau:
        raise ContractError(f"identity path needs 1 <= t <= tau, got t={t}, tau={tau}")
    if eps_dot is None:
        eps_dot = compute_identity_noise(model, x_tau, tau, null_opt, c, omega)
    return jump_from_tau(to_xbar(x_tau, tau, schedule), tau, t - 1, eps_dot, schedule)


def augmentation_path_step(
    model: Denoiser,
    x_t: np.ndarray,
    t: int,
    null_opt: OptimizedNull,
    c: ConditionEmbedding,
    g: GuidanceConfig,
    schedule: NoiseSchedule,
    t_out: int | None = None,
) -> np.ndarray:
    """Rescaled augmentation-path value at step t_out (default t-1); three
    denoiser evaluations feed the multi-condition guidance."""
    if t < 1:
        raise ContractError(f"augmentation path needs t >= 1, got {t}")
    t_out = t - 1 if t_out is None else t_out
    eps_null = model.predict(x_t, t, model.null_embedding())
    eps_sem = model.predict(x_t, t, c)
    eps_id = model.predict(x_t, t, null_opt.embedding)
    mixed = cfg_multi(eps_null, eps_sem, eps_id, g)
    xbar = to_xbar(x_t, t, schedule)
    return xbar + (schedule.gammas[t_out] - schedule.gammas[t]) * mixed


def blend(spade_value: np.ndarray, club_value: np.ndarray, mask: MaskPair) -> np.ndarray:
    """Per-pixel selection; exact where the masks are 1."""
    sel = mask.spade.astype(bool)
    if spade_value.ndim == 3 and sel.ndim == 2:
        sel = sel[:, :, None]
    return np.where(sel, spade_value, club_value)


def generate_one(
    model: Denoiser,
    x0: np.ndarray,
    null_opt: OptimizedNull,
    c: ConditionEmbedding,
    cfg: TtgaConfig,
    rng: SeededRng,
    trajectory: InversionTrajectory | None = None,
    relevance_fn: RelevanceFn | None = None,
    record_steps: list | None = None,
) -> np.ndarray:
    """One masked dual-path generation pass; returns the augmented image.

    Draws lambda_r once, then (unless resampling per step) one mask pair held
    across the loop. The club path consumes the blended latent of the
    previous iteration; ``club_on_own_chain=True`` switches it to an
    independent unblended chain for sensitivity studies.
    """
    schedule = model.schedule
    if trajectory is None:
        e_inv = c if cfg.invert_with == INVERT_WITH_SEMANTIC else model.null_embedding()
        trajectory = ddim_invert(model, x0, cfg.tau, cfg.inversion_interval, e_inv, schedule)
    if trajectory.tau != cfg.tau:
        raise ContractError(f"trajectory tau {trajectory.tau} != config tau {cfg.tau}")
    tau = cfg.tau
    x_tau = trajectory.x_tau

    lambda_r = float(rng.uniform(cfg.lambda_r_low, cfg.lambda_r_high))
    g = cfg.guidance.with_lambda_r(lambda_r)
    omega = cfg.guidance.omega

    if relevance_fn is None:
        relevance_fn = lambda x, t: saliency_relevance(model, x, t, c)

    policy = cfg.mask_policy
    mask_shape = x0.shape[:2]
    mask: MaskPair | None = None
    if not policy.resample_per_step:
        relevance = relevance_fn(x_tau, tau) if policy.needs_relevance else None
        mask = make_mask(policy, mask_shape, rng, relevance)

    eps_dot = compute_identity_noise(model, x_tau, tau, null_opt, c, omega)
    xbar_tau = to_xbar(x_tau, tau, schedule)
    xbar = xbar_tau
    xbar_club_chain = xbar_tau

    t = tau
    while t > 0:
        t_out = max(t - cfg.club_stride, 0)
        spade_bar = jump_from_tau(xbar_tau, tau, t_out, eps_dot, schedule)
        club_src = xbar_club_chain if cfg.club_on_own_chain else xbar
        x_t = from_xbar(club_src, t, schedule)
        club_bar = augmentation_path_step(
            model, x_t, t, null_opt, c, g, schedule, t_out=t_out
        )
        if policy.resample_per_step:
            relevance = relevance_fn(x_t, t) if policy.needs_relevance else None
            mask = make_mask(policy, mask_shape, rng, relevance)
        xbar = blend(spade_bar, club_bar, mask)
        if not np.all(np.isfinite(xbar)):
            raise NumericalAbort(f"non-finite blended latent at step {t_out}")
        if cfg.club_on_own_chain:
            xbar_club_chain = club_bar
        if record_steps is not None:
            record_steps.append(
                {"t": t, "t_out": t_out, "spade": spade_bar, "club": club_bar,
                 "mask": mask, "blended": xbar}
            )
        t = t_out

    return from_xbar(xbar, 0, schedule)


def generate_set(
    model: Denoiser,
    x0: np.ndarray,
    c: ConditionEmbedding,
    cfg: TtgaConfig,
    rng: SeededRng,
    relevance_fn: RelevanceFn | None = None,
) -> AugmentationSet:
    """One inversion plus one null-text optimization shared across N
    independent generation passes on derived random streams."""
    schedule = model.schedule
    e_inv = c if cfg.invert_with == INVERT_WITH_SEMANTIC else model.null_embedding()
    trajectory = ddim_invert(model, x0, cfg.tau, cfg.inversion_interval, e_inv, schedule)
    null_opt = optimize_null_text(
        model, trajectory, c, cfg.guidance.omega, schedule, cfg.null_opt
    )
    augmented, per_item = [], []
    for i in range(cfg.n_augment):
        stream = rng.derive(i)
        item_rng = SeededRng(stream.seed, stream.stream_id)
        out = generate_one(
            model, x0, null_opt, c, cfg, item_rng,
            trajectory=trajectory, relevance_fn=relevance_fn,
        )
        augmented.append(out)
        # the lambda_r recorded here replays the first draw of the stream
        lam = float(stream.uniform(cfg.lambda_r_low, cfg.lambda_r_high))
        per_item.append(AugmentationItem(
            lambda_r=lam, mask_stream=stream.stream_id,
            reconstruction_loss=null_opt.final_loss,
        ))
    return AugmentationSet(
        original=np.asarray(x0, dtype=np.float64),
        augmented=tuple(augmented),
        per_item=tuple(per_item),
    )


def entropy_bits(prob: np.ndarray) -> np.ndarray:
    """Shannon entropy over the last axis, in bits; 0 log 0 := 0."""
    p = np.asarray(prob, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log2(p), 0.0)
    return -terms.sum(axis=-1)


def ensemble(predictions: Sequence[np.ndarray]) -> EnsembleResult:
    """Average member probability grids and compute the per-pixel entropy of
    the averaged distribution."""
    if len(predictions) < 1:
        raise ContractError("ensemble needs at least one member")
    members = [np.asarray(p, dtype=np.float64) for p in predictions]
    shape = members[0].shape
    for p in members:
        if p.shape != shape:
            raise ContractError(f"member shape {p.shape} != {shape}")
        if p.ndim != 3:
            raise ContractError("members must be (H, W, K) probability grids")
        if p.min() < -1e-12 or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ContractError("member rows must be probability vectors")
    mean = np.mean(members, axis=0)
    return EnsembleResult(
        mean_probability=mean,
        entropy_map=entropy_bits(mean),
        member_probabilities=tuple(members),
    )


def error_estimate_map(result: EnsembleResult) -> np.ndarray:
    """Entropy normalized by log2(K) into [0, 1]; the pixel-wise error score."""
    k = result.mean_probability.shape[-1]
    if k < 2:
        raise ContractError("error estimation needs at least two classes")
    return result.entropy_map / np.log2(k)
