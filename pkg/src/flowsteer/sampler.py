"""Euler sampling with early-step trajectory correction.

At each of the first ``M`` steps the state is pulled toward a target whose
one-step endpoint prediction under the empty prompt reproduces the input
image, then advanced with the prompt velocity computed before the pull.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .velocity import VelocityField

KINDS = ("none", "empty-prompt", "edit-prompt", "straight-path", "flowchef")


class EndOfGridError(IndexError):
    pass


class TrajectoryError(FloatingPointError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ConfigError("time grid must increase strictly from exactly 0 to exactly 1")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, n: int) -> "TimeGrid":
        if n < 1:
            raise ConfigError(f"need at least one step, got {n}")
        return cls(np.arange(n + 1, dtype=np.float64) / n)

    @property
    def n(self) -> int:
        return self.times.size - 1

    def remaining(self, i: int) -> float:
        """Time left to the end of the grid from step ``i``."""
        return float(self.times[-1] - self.times[i])

    def dt(self, i: int) -> float:
        return float(self.times[i + 1] - self.times[i])


@dataclass
class LatentState:
    z: np.ndarray
    t_index: int


@dataclass(frozen=True)
class CorrectorConfig:
    kind: str = "empty-prompt"
    m: int = 3
    alpha: float = 0.01
    s: float = 0.005
    noise_inversion_i: int = 0
    reevaluate_v: bool = False

    def validate(self, grid: TimeGrid) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corrector kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0 <= self.m < grid.n:
            raise ConfigError(f"M must satisfy 0 <= M < N={grid.n}, got {self.m}")
        if not 0 <= self.noise_inversion_i < grid.n:
            raise ConfigError(f"noise inversion index must be in [0, N), got {self.noise_inversion_i}")

    @property
    def label(self) -> str:
        if self.noise_inversion_i and self.kind == "none":
            return f"noise-inversion-{self.noise_inversion_i}"
        return self.kind


def euler_step(state: LatentState, grid: TimeGrid, v) -> LatentState:
    i = state.t_index
    if i >= grid.n:
        raise EndOfGridError(f"state is already at the end of the grid (index {i})")
    return LatentState(state.z + grid.dt(i) * np.asarray(v, dtype=np.float64), i + 1)


def endpoint_prediction(state: LatentState, grid: TimeGrid, u) -> np.ndarray:
    return state.z + grid.remaining(state.t_index) * np.asarray(u, dtype=np.float64)


def correction_target(x_in, grid: TimeGrid, i: int, u) -> np.ndarray:
    if i >= grid.n:
        raise EndOfGridError(f"no correction target at the final index {i}")
    return np.asarray(x_in, dtype=np.float64) - grid.remaining(i) * np.asarray(u, dtype=np.float64)


def straight_path_target(z0, x_in, grid: TimeGrid, i: int) -> np.ndarray:
    t = grid.times[i]
    return (1.0 - t) * np.asarray(z0, dtype=np.float64) + t * np.asarray(x_in, dtype=np.float64)


def blend(state: LatentState, z_star, alpha: float) -> LatentState:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    return LatentState((1.0 - alpha) * state.z + alpha * np.asarray(z_star, dtype=np.float64), state.t_index)


def flowchef_steer_step(state: LatentState, grid: TimeGrid, v_c, grad_endpoint_loss, s: float) -> LatentState:
    """Euler step minus ``s`` times the endpoint-loss gradient."""
    stepped = euler_step(state, grid, v_c)
    return LatentState(stepped.z - s * np.asarray(grad_endpoint_loss, dtype=np.float64), stepped.t_index)


def surrogate_value(z, x_in, remaining: float, u) -> float:
    r = np.asarray(x_in) - (np.asarray(z) + remaining * np.asarray(u))
    return float(r @ r)


@dataclass
class StepRecord:
    i: int
    t: float
    z_before: np.ndarray
    v: np.ndarray
    u: np.ndarray | None = None
    z_star: np.ndarray | None = None
    z_after: np.ndarray | None = None
    loss_before: float | None = None
    loss_after: float | None = None


@dataclass
class TrajectoryRecord:
    grid: TimeGrid
    config: CorrectorConfig
    start_index: int
    steps: list[StepRecord] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    blends: int = 0

    def to_json(self, record_states: bool = False) -> str:
        def _arr(xs):
            return [None if x is None else float(x) for x in xs]

        doc: dict[str, Any] = {
            "config": {
                "kind": self.config.kind,
                "m": self.config.m,
                "alpha": self.config.alpha,
                "s": self.config.s,
                "noise_inversion_i": self.config.noise_inversion_i,
                "reevaluate_v": self.config.reevaluate_v,
            },
            "n": self.grid.n,
            "start_index": self.start_index,
            "t": _arr(s.t for s in self.steps),
            "corrected": [s.z_star is not None for s in self.steps],
            "loss_before": _arr(s.loss_before for s in self.steps),
            "loss_after": _arr(s.loss_after for s in self.steps),
            "norm_z": [float(np.linalg.norm(s.z_before)) for s in self.steps],
            "norm_v": [float(np.linalg.norm(s.v)) for s in self.steps],
            "norm_correction": [
                None if s.z_after is None else float(np.linalg.norm(s.z_after - s.z_before)) for s in self.steps
            ],
        }
        if record_states:
            doc["states"] = [z.tolist() for z in self.states]
        return json.dumps(doc, sort_keys=True)


def _finite(x: np.ndarray, step: int, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise TrajectoryError(step, what)
    return x


def sample(field: VelocityField, x_in, c: int, grid: TimeGrid, corr: CorrectorConfig, z0):
    """Run the corrected Euler sampler; returns (final state, record).

    For each step i < M with a correcting kind, the prompt velocity ``v`` and
    the empty-prompt velocity ``u`` are taken from one batched call at the
    uncorrected state; the state is then blended toward the target and
    advanced with that same ``v`` (unless ``reevaluate_v`` is set).
    """
    corr.validate(grid)
    x_in = np.asarray(x_in, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != x_in.shape:
        raise ConfigError(f"noise shape {z0.shape} != image shape {x_in.shape}")
    start = corr.noise_inversion_i
    z = straight_path_target(z0, x_in, grid, start) if start > 0 else z0.copy()
    state = LatentState(z, start)
    rec = TrajectoryRecord(grid, corr, start, states=[state.z.copy()])
    if corr.kind == "flowchef":
        correcting = corr.s != 0.0
    else:
        correcting = corr.kind != "none" and corr.alpha > 0.0

    for i in range(start, grid.n):
        t = float(grid.times[i])
        _finite(state.z, i, "state")
        corrected = correcting and i < corr.m
        if not corrected:
            v = _finite(field.evaluate(state.z, t, c, x_in), i, "velocity")
            rec.steps.append(StepRecord(i, t, state.z.copy(), v))
            state = euler_step(state, grid, v)
            rec.states.append(state.z.copy())
            continue

        v, u = field.evaluate_pair(state.z, t, c, x_in)
        _finite(v, i, "velocity")
        _finite(u, i, "empty-prompt velocity")
        step = StepRecord(i, t, state.z.copy(), v, u=u)
        delta = grid.remaining(i)
        if corr.kind == "flowchef":
            # endpoint loss |x_in - (z + delta v)|^2, gradient w.r.t. the endpoint
            z_hat = endpoint_prediction(state, grid, v)
            g = 2.0 * (z_hat - x_in)
            step.loss_before = surrogate_value(state.z, x_in, delta, v)
            state = flowchef_steer_step(state, grid, v, g, corr.s)
            step.z_after = state.z.copy()
            rec.steps.append(step)
            rec.states.append(state.z.copy())
            continue

        if corr.kind == "empty-prompt":
            z_star = correction_target(x_in, grid, i, u)
        elif corr.kind == "edit-prompt":
            z_star = correction_target(x_in, grid, i, v)
        else:
            z_star = straight_path_target(z0, x_in, grid, i)
        step.z_star = z_star
        step.loss_before = surrogate_value(state.z, x_in, delta, u)
        state = blend(state, z_star, corr.alpha)
        rec.blends += 1
        step.z_after = state.z.copy()
        step.loss_after = surrogate_value(state.z, x_in, delta, u)
        if corr.reevaluate_v:
            v = _finite(field.evaluate(state.z, t, c, x_in), i, "velocity")
        rec.steps.append(step)
        state = euler_step(state, grid, v)
        rec.states.append(state.z.copy())

    _finite(state.z, grid.n, "state")
    return state.z, rec


def blend_flops(dim: int, m: int) -> int:
    # (1 - a) z + a z*: two multiplies and one add per element
    return 3 * dim * m


def overhead_counts(field: VelocityField, x_in, c: int, grid: TimeGrid, corr: CorrectorConfig, z0) -> dict:
    """Instrumented comparison of baseline and corrected sampling work."""
    base_cfg = CorrectorConfig(kind="none", m=0, alpha=corr.alpha, noise_inversion_i=corr.noise_inversion_i)
    out = {}
    for name, cfg in (("baseline", base_cfg), ("corrected", corr)):
        field.counter.reset()
        _, rec = sample(field, x_in, c, grid, cfg, z0)
        counts = field.counter.as_dict()
        counts["prompt_evals"] = counts["single_calls"] + counts["pair_calls"]
        counts["empty_prompt_evals"] = counts["pair_calls"]
        counts["blends"] = rec.blends
        counts["blend_flops"] = 3 * field.dim * rec.blends
        out[name] = counts
    field.counter.reset()
    out["extra_forward_slots"] = out["corrected"]["forward_slots"] - out["baseline"]["forward_slots"]
    out["extra_pair_calls"] = out["corrected"]["pair_calls"] - out["baseline"]["pair_calls"]
    out["extra_blends"] = out["corrected"]["blends"] - out["baseline"]["blends"]
    return out


__all__ = [
    "KINDS",
    "ConfigError",
    "CorrectorConfig",
    "EndOfGridError",
    "LatentState",
    "StepRecord",
    "TimeGrid",
    "TrajectoryError",
    "TrajectoryRecord",
    "blend",
    "blend_flops",
    "correction_target",
    "endpoint_prediction",
    "euler_step",
    "flowchef_steer_step",
    "overhead_counts",
    "sample",
    "straight_path_target",
    "surrogate_value",
]
