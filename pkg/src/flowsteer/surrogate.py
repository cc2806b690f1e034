"""Local reconstruction objectives behind the trajectory correction.

The surrogate freezes the empty-prompt velocity ``u`` at the current state,
so its minimizer, gradient and the effect of a blend are all closed form.
The true one-step objective keeps the dependence of the velocity on ``z``;
its gradient differs from the surrogate's by the Jacobian term
``delta * J^T grad_surrogate``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, grad, spectral_norm
from .sampler import LatentState, TimeGrid, blend, correction_target
from .velocity import Prompt, VelocityField


@dataclass
class SurrogateEval:
    value: float
    gradient: np.ndarray
    remaining: float
    u: np.ndarray


@dataclass
class TrueObjectiveEval:
    value: float
    gradient: np.ndarray
    u: np.ndarray
    remaining: float


def surrogate_loss(z, x_in, grid: TimeGrid, i: int, u) -> SurrogateEval:
    z, x_in, u = (np.asarray(a, dtype=np.float64) for a in (z, x_in, u))
    delta = grid.remaining(i)
    resid = z + delta * u - x_in
    return SurrogateEval(float(resid @ resid), 2.0 * resid, delta, u)


def true_loss(field: VelocityField, z, x_in, grid: TimeGrid, i: int) -> TrueObjectiveEval:
    x_in = np.asarray(x_in, dtype=np.float64)
    delta = grid.remaining(i)
    v = field.velocity_fn(float(grid.times[i]), Prompt.EMPTY, x_in)

    def objective(zt: Tensor) -> Tensor:
        return (zt + v(zt) * delta - x_in).square().sum()

    g = grad(objective, z)
    u = v(Tensor(np.asarray(z, dtype=np.float64))).data
    r = np.asarray(z) + delta * u - x_in
    return TrueObjectiveEval(float(r @ r), g, u, delta)


def jacobian_norm(field: VelocityField, z, x_in, grid: TimeGrid, i: int, iters: int = 20, seed: int = 0) -> float:
    """Spectral norm of d v(z, t_i, empty, x_in) / dz by power iteration."""
    v = field.velocity_fn(float(grid.times[i]), Prompt.EMPTY, x_in)
    return spectral_norm(v, z, iters=iters, rng=np.random.default_rng(seed))


def prompt_delta(field: VelocityField, z, grid: TimeGrid, i: int, c: int, x_in) -> np.ndarray:
    t = float(grid.times[i])
    v_c, v_empty = field.evaluate_pair(z, t, c, x_in)
    return v_c - v_empty


def decomposition_residual(field: VelocityField, z, grid: TimeGrid, i: int, c: int, x_in) -> float:
    """max |Z*^(c) - (Z* - delta_i * prompt_delta)| with both sides from one call."""
    t = float(grid.times[i])
    v_c, u = field.evaluate_pair(z, t, c, x_in)
    direct = correction_target(x_in, grid, i, v_c)
    decomposed = correction_target(x_in, grid, i, u) - grid.remaining(i) * (v_c - u)
    return float(np.max(np.abs(direct - decomposed)))


@dataclass
class PropositionReport:
    minimizer_ok: bool
    minimizer_residual: float
    perturbation_min_gap: float
    gradient_step_ok: bool
    gradient_step_residual: float
    contraction_ok: bool
    contraction_residual: float
    loss_before: float
    loss_after: float

    @property
    def ok(self) -> bool:
        return self.minimizer_ok and self.gradient_step_ok and self.contraction_ok

    def as_dict(self) -> dict:
        d = asdict(self)
        d["ok"] = self.ok
        return d


MINIMIZER_TOL = 1e-18
GRADIENT_STEP_TOL = 1e-10
CONTRACTION_TOL = 1e-9


def verify_propositions(field: VelocityField, z, x_in, grid: TimeGrid, i: int, alpha: float,
                        rng: np.random.Generator | None = None, n_perturb: int = 8) -> PropositionReport:
    """Check the three closed-form facts about one correction step.

    (a) the target zeroes the surrogate and random perturbations raise it,
    (b) the blend equals a gradient step of size alpha/2 on the surrogate,
    (c) the surrogate shrinks by exactly (1 - alpha)^2.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    rng = rng or np.random.default_rng(0)
    z = np.asarray(z, dtype=np.float64)
    x_in = np.asarray(x_in, dtype=np.float64)
    u = field.evaluate(z, float(grid.times[i]), Prompt.EMPTY, x_in)
    z_star = correction_target(x_in, grid, i, u)

    at_star = surrogate_loss(z_star, x_in, grid, i, u).value
    gap = np.inf
    for _ in range(n_perturb):
        eps = rng.standard_normal(z.shape) * 10.0 ** rng.uniform(-3, 0)
        gap = min(gap, surrogate_loss(z_star + eps, x_in, grid, i, u).value - at_star)

    before = surrogate_loss(z, x_in, grid, i, u)
    blended = blend(LatentState(z, i), z_star, alpha).z
    step = z - 0.5 * alpha * before.gradient
    step_resid = float(np.max(np.abs(blended - step)))

    after = surrogate_loss(blended, x_in, grid, i, u).value
    if before.value > 0.0:
        contraction = abs(after / before.value - (1.0 - alpha) ** 2)
    else:
        contraction = abs(after)
    return PropositionReport(
        minimizer_ok=bool(at_star < MINIMIZER_TOL and gap > 0.0),
        minimizer_residual=at_star,
        perturbation_min_gap=float(gap),
        gradient_step_ok=step_resid < GRADIENT_STEP_TOL,
        gradient_step_residual=step_resid,
        contraction_ok=contraction < CONTRACTION_TOL,
        contraction_residual=float(contraction),
        loss_before=before.value,
        loss_after=after,
    )
