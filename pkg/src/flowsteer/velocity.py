"""Conditional velocity fields v(z, t, c, x_in).

Three kinds share one interface:

* ``ConstantField``  -- v = u, ignores everything.
* ``AffineField``    -- v = A z + b (+ an optional per-prompt offset).
* ``MLPField``       -- trained network on [z | x_in | prompt | t-embedding].

Every field exposes ``forward`` on autodiff tensors of shape (B, d) so the
surrogate analysis can differentiate through it, and ``evaluate`` /
``evaluate_pair`` on plain arrays for the sampler.
"""
from __future__ import annotations

import enum
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import seeding
from .autodiff import Tensor, concat, lift, matmul, take_rows

log = logging.getLogger(__name__)

CKPT_MAGIC = b"FLOWSTEER-CKPT-1"


class Prompt(enum.IntEnum):
    EMPTY = 0
    EDIT_TEXT_REMOVAL = 1
    EDIT_SCREENTONE = 2


class DomainError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg: str, step: int, losses: Sequence[float]):
        super().__init__(f"{msg} (step {step}, last losses {list(losses)[-5:]})")
        self.step = step
        self.losses = list(losses)


def _check_time(t: float) -> None:
    if not (0.0 <= t <= 1.0) or math.isnan(t):
        raise DomainError(f"t must lie in [0, 1], got {t}")


class EvalCounter:
    """Counts network work; a pair call is one batched forward of two rows."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.single_calls = 0
        self.pair_calls = 0

    @property
    def forward_slots(self) -> int:
        return self.single_calls + 2 * self.pair_calls

    def as_dict(self) -> dict[str, int]:
        return {
            "single_calls": self.single_calls,
            "pair_calls": self.pair_calls,
            "forward_slots": self.forward_slots,
        }


class VelocityField:
    kind = "abstract"

    def __init__(self, dim: int):
        self.dim = dim
        self.counter = EvalCounter()

    def forward(self, z: Tensor, t: np.ndarray, c: np.ndarray, x_in: Tensor) -> Tensor:
        raise NotImplementedError

    def _run(self, zs: np.ndarray, t: float, cs: Sequence[int], x_in: np.ndarray) -> np.ndarray:
        # BLAS rounding depends on the batch shape, so inference always runs a
        # two-row batch; a row's value is then independent of its neighbour.
        if zs.shape[0] == 1:
            zs = np.concatenate([zs, zs])
            cs = [cs[0], cs[0]]
        b = zs.shape[0]
        out = self.forward(
            Tensor(zs),
            np.full(b, t),
            np.asarray(cs, dtype=np.int64),
            Tensor(np.broadcast_to(x_in, (b, self.dim))),
        )
        return out.data

    def _check(self, z: np.ndarray, t: float, x_in: np.ndarray) -> None:
        _check_time(t)
        if z.shape != (self.dim,) or x_in.shape != (self.dim,):
            raise DomainError(f"expected vectors of dim {self.dim}, got z{z.shape} x_in{x_in.shape}")

    def evaluate(self, z, t: float, c: int, x_in) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        x_in = np.asarray(x_in, dtype=np.float64)
        self._check(z, t, x_in)
        self.counter.single_calls += 1
        return self._run(z[None, :], t, [int(c)], x_in)[0].copy()

    def evaluate_pair(self, z, t: float, c: int, x_in) -> tuple[np.ndarray, np.ndarray]:
        """Prompt and empty-prompt velocities from one two-row batch."""
        z = np.asarray(z, dtype=np.float64)
        x_in = np.asarray(x_in, dtype=np.float64)
        self._check(z, t, x_in)
        self.counter.pair_calls += 1
        out = self._run(np.stack([z, z]), t, [int(c), int(Prompt.EMPTY)], x_in)
        return out[0].copy(), out[1].copy()

    def velocity_fn(self, t: float, c: int, x_in):
        """Closure z -> v(z) on autodiff tensors of shape (d,), for grad/jvp."""
        _check_time(t)
        xt = Tensor(np.asarray(x_in, dtype=np.float64)[None, :])

        def g(z: Tensor) -> Tensor:
            out = self.forward(z.reshape(1, self.dim), np.array([t]), np.array([int(c)]), xt)
            return out.reshape(self.dim)

        return g


class ConstantField(VelocityField):
    kind = "analytic-constant"

    def __init__(self, u):
        u = np.asarray(u, dtype=np.float64)
        super().__init__(u.shape[0])
        self.u = u

    def forward(self, z, t, c, x_in):
        # z * 0 keeps the tape connected so gradients come back as zeros
        return lift(z) * 0.0 + self.u


class AffineField(VelocityField):
    """v = z A^T + b, plus ``prompt_offsets[c]`` when given."""

    kind = "analytic-affine"

    def __init__(self, A, b, prompt_offsets: dict[int, np.ndarray] | None = None):
        A = np.asarray(A, dtype=np.float64)
        super().__init__(A.shape[0])
        self.A = A
        self.b = np.asarray(b, dtype=np.float64)
        self.prompt_offsets = {int(k): np.asarray(v, dtype=np.float64) for k, v in (prompt_offsets or {}).items()}

    def forward(self, z, t, c, x_in):
        out = matmul(lift(z), Tensor(self.A.T)) + self.b
        if self.prompt_offsets:
            off = np.stack([self.prompt_offsets.get(int(ci), np.zeros(self.dim)) for ci in c])
            out = out + off
        return out


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.geomspace(1.0, 100.0, half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    prompt_dim: int = 8
    time_dim: int = 16
    log_every: int = 50

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.steps < 0 or self.batch_size <= 0 or self.lr < 0 or not self.hidden or min(self.hidden) <= 0:
            raise ValueError(f"invalid training config: {self}")


GATE_WIDTH = 32


class MLPField(VelocityField):
    """MLP on [z | x_in | prompt | t] plus a prompt/time-gated linear skip of z.

    The skip carries the pixel-wise -z part of the velocity, which a narrow
    hidden layer cannot pass through for d in the thousands. The condition
    image only reaches the output through the hidden layers.
    """

    kind = "trained-mlp"

    def __init__(self, dim: int, hidden: Sequence[int] = (256, 256), prompt_dim: int = 8, time_dim: int = 16,
                 rng: np.random.Generator | None = None):
        super().__init__(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.prompt_dim = prompt_dim
        self.time_dim = time_dim
        rng = rng or np.random.default_rng(0)
        widths = [2 * dim + prompt_dim + time_dim, *self.hidden, dim]
        self.params: dict[str, Tensor] = {
            "prompt_table": Tensor(rng.standard_normal((len(Prompt), prompt_dim)), requires_grad=True)
        }
        for k, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            scale = 1.0 / math.sqrt(n_in)
            if k == len(widths) - 2:
                scale *= 0.1
            self.params[f"w{k}"] = Tensor(rng.standard_normal((n_in, n_out)) * scale, requires_grad=True)
            self.params[f"b{k}"] = Tensor(np.zeros(n_out), requires_grad=True)
        self.n_layers = len(widths) - 1
        # gate head: (prompt, t) -> scalar weight on the z skip
        n_cond = prompt_dim + time_dim
        self.params["g0"] = Tensor(rng.standard_normal((n_cond, GATE_WIDTH)) / math.sqrt(n_cond), requires_grad=True)
        self.params["gb0"] = Tensor(np.zeros(GATE_WIDTH), requires_grad=True)
        self.params["g1"] = Tensor(np.zeros((GATE_WIDTH, 1)), requires_grad=True)
        self.params["gb1"] = Tensor(np.zeros(1), requires_grad=True)

    def forward(self, z, t, c, x_in):
        emb = take_rows(self.params["prompt_table"], np.asarray(c))
        temb = Tensor(time_embedding(t, self.time_dim))
        z, x_in = lift(z), lift(x_in)
        h = concat([z, x_in, emb, temb], axis=1)
        for k in range(self.n_layers):
            h = matmul(h, self.params[f"w{k}"]) + self.params[f"b{k}"]
            if k < self.n_layers - 1:
                h = h.silu()
        g = (matmul(concat([emb, temb], axis=1), self.params["g0"]) + self.params["gb0"]).silu()
        g = matmul(g, self.params["g1"]) + self.params["gb1"]
        return h + g * z

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    # -- checkpoint ---------------------------------------------------------
    #
    # layout: 16-byte magic | u32 LE header length | UTF-8 JSON header |
    #         float64 LE parameters, concatenated in header order

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        header = {
            "dim": self.dim,
            "hidden": list(self.hidden),
            "prompt_dim": self.prompt_dim,
            "time_dim": self.time_dim,
            "params": [[name, list(p.shape)] for name, p in self.params.items()],
        }
        hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<I", len(hbytes)))
        buf.write(hbytes)
        for p in self.params.values():
            buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> "MLPField":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MLPField":
        if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError("not a flowsteer checkpoint (bad magic)")
        off = len(CKPT_MAGIC)
        (hlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
        off += hlen
        model = cls(header["dim"], header["hidden"], header["prompt_dim"], header["time_dim"])
        for name, shape in header["params"]:
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            model.params[name] = Tensor(arr, requires_grad=True)
        if off != len(raw):
            raise ValueError(f"checkpoint has {len(raw) - off} trailing bytes")
        return model


@dataclass
class TrainingPair:
    x_in: np.ndarray
    x_target: np.ndarray
    prompt: int


@dataclass
class TrainResult:
    model: MLPField
    losses: list[float] = field(default_factory=list)


class _Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad**2
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def flow_matching_loss(model: VelocityField, z0, x_target, x_in, prompts, t) -> Tensor:
    """Mean squared error between v((1-t) z0 + t x, t, c, x_in) and x - z0."""
    zt = (1.0 - t)[:, None] * z0 + t[:, None] * x_target
    pred = model.forward(Tensor(zt), t, prompts, Tensor(x_in))
    return (pred - (x_target - z0)).square().mean()


def train_flow_matching(pairs: Sequence[TrainingPair], cfg: TrainConfig,
                        on_step=None) -> TrainResult:
    if not pairs:
        raise ValueError("training set is empty")
    dim = pairs[0].x_in.shape[0]
    if any(p.x_in.shape != (dim,) or p.x_target.shape != (dim,) for p in pairs):
        raise ValueError("inconsistent dimensionality in training pairs")
    x_in = np.stack([p.x_in for p in pairs])
    x_tg = np.stack([p.x_target for p in pairs])
    prompts = np.array([int(p.prompt) for p in pairs], dtype=np.int64)

    init_rng = seeding.rng(cfg.seed, seeding.INIT)
    data_rng = seeding.rng(cfg.seed, seeding.BATCHES)
    model = MLPField(dim, cfg.hidden, cfg.prompt_dim, cfg.time_dim, rng=init_rng)
    opt = _Adam(model.params, cfg.lr)
    losses: list[float] = []
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(pairs), size=cfg.batch_size)
        z0 = data_rng.standard_normal((cfg.batch_size, dim))
        t = data_rng.random(cfg.batch_size)
        for p in model.params.values():
            p.grad = None
        loss = flow_matching_loss(model, z0, x_tg[idx], x_in[idx], prompts[idx], t)
        val = float(loss.data)
        if not math.isfinite(val):
            raise TrainingError("loss diverged", step, losses)
        loss.backward()
        opt.step()
        losses.append(val)
        if on_step is not None:
            on_step(step, val)
        if cfg.log_every and step % cfg.log_every == 0:
            log.debug("step %d loss %.5f", step, val)
    return TrainResult(model, losses)


def pairs_from_samples(samples: Iterable, include_empty: bool = True) -> list[TrainingPair]:
    """Edit pairs plus, optionally, identity pairs that teach the empty prompt."""
    out = []
    for s in samples:
        out.append(TrainingPair(s.x_in, s.x_gt, int(s.prompt)))
        if include_empty:
            out.append(TrainingPair(s.x_in, s.x_in, int(Prompt.EMPTY)))
    return out
