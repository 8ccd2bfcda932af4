"""Classifier-free guidance combinators.

Single-condition form:

    cfg_single = eps_null + omega * (eps_cond - eps_null)

Multi-condition form used by the augmentation path, mixing unconditional,
semantic, and identity (optimized-null) noise predictions:

    cfg_multi = eps_null
              + lambda_c * (eps_sem - eps_null)
              + lambda_r * (1 - omega) * (eps_idnull - eps_sem)

The identity term arises from substituting the joint semantic+identity
prediction by cfg_single evaluated with the optimized null embedding:
plugging eps_joint = eps_idnull + omega*(eps_sem - eps_idnull) into the
generic three-term mix collapses its last term to
lambda_r*(1-omega)*(eps_idnull - eps_sem). With lambda_c = 1 the raw
unconditional term has exactly zero coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

DEFAULT_OMEGA = 2.0


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales for one run; omega is shared with null-text optimization."""

    omega: float = DEFAULT_OMEGA
    lambda_c: float = 1.0
    lambda_r: float = 1.0

    def __post_init__(self):
        for name in ("omega", "lambda_c", "lambda_r"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0.0:
                raise ContractError(f"{name} must be finite and >= 0, got {v}")

    def with_lambda_r(self, lambda_r: float) -> "GuidanceConfig":
        return GuidanceConfig(self.omega, self.lambda_c, lambda_r)


def _check_shapes(*grids: np.ndarray) -> None:
    shapes = {g.shape for g in grids}
    if len(shapes) != 1:
        raise ContractError(f"guidance inputs must share a shape, got {sorted(shapes)}")


def cfg_single(eps_null: np.ndarray, eps_cond: np.ndarray, omega: float) -> np.ndarray:
    """eps_null + omega * (eps_cond - eps_null).

    The interpolation endpoints omega = 0 and omega = 1 return the
    corresponding input exactly (bit-level), not through the arithmetic.
    """
    _check_shapes(eps_null, eps_cond)
    if omega == 0.0:
        return eps_null.copy()
    if omega == 1.0:
        return eps_cond.copy()
    return eps_null + omega * (eps_cond - eps_null)


def cfg_three_term(
    eps_null: np.ndarray,
    eps_sem: np.ndarray,
    eps_joint: np.ndarray,
    lambda_c: float,
    lambda_r: float,
) -> np.ndarray:
    """Generic mix of unconditional, semantic, and joint predictions."""
    _check_shapes(eps_null, eps_sem, eps_joint)
    return (
        eps_null
        + lambda_c * (eps_sem - eps_null)
        + lambda_r * (eps_joint - eps_sem)
    )


def cfg_multi(
    eps_null: np.ndarray,
    eps_sem: np.ndarray,
    eps_idnull: np.ndarray,
    g: GuidanceConfig,
) -> np.ndarray:
    """Three-component guidance with the identity condition carried by the
    optimized null embedding's prediction ``eps_idnull``.

    Terms with an exactly zero coefficient are skipped, so degenerate scale
    settings reduce to the remaining inputs bit-for-bit.
    """
    _check_shapes(eps_null, eps_sem, eps_idnull)
    out = eps_null.copy()
    if g.lambda_c != 0.0:
        out += g.lambda_c * (eps_sem - eps_null)
    identity_coeff = g.lambda_r * (1.0 - g.omega)
    if identity_coeff != 0.0:
        out += identity_coeff * (eps_idnull - eps_sem)
    return out
