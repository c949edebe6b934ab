"""Vanilla flow matching: Gaussian-path interpolation, the squared-error
velocity loss, Euler ODE sampling, and a small training loop.

The probability path is z_t = t*z1 + (1-t)*z0 with z0 ~ N(0, I), so the
per-pair regression target is simply u* = z1 - z0.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import datasets, nnet, tape
from .datasets import MixtureSpec
from .errors import (
    DimensionMismatchError,
    DivergenceError,
    IntegrationError,
    NonFiniteError,
    ValidationError,
)

log = logging.getLogger(__name__)

# Training times are kept off the path endpoints; at t -> 1 the conditional
# variance (1-t)^2 collapses and targets blow up in the conditional view.
T_EPSILON = 1e-3


@dataclass
class Trajectory:
    """Euler path: times[i] = i/T from 0 to 1, states[i] the state at times[i]."""

    times: np.ndarray
    states: np.ndarray
    expert_id: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.times.ndim != 1 or self.states.ndim != 2:
            raise ValidationError("trajectory needs 1-D times and 2-D states")
        if len(self.times) != len(self.states) or len(self.times) < 2:
            raise ValidationError("times/states lengths disagree or too short")
        t_count = len(self.times) - 1
        if abs(self.times[0]) > 1e-12 or abs(self.times[-1] - 1.0) > 1e-12:
            raise ValidationError("trajectory must run from t=0 to t=1")
        if not np.allclose(np.diff(self.times), 1.0 / t_count, atol=1e-12):
            raise ValidationError("trajectory times must be uniformly spaced")
        if not np.isfinite(self.states).all():
            raise ValidationError("trajectory contains non-finite states")

    @property
    def step_count(self) -> int:
        return len(self.times) - 1

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class TrainBatch:
    """Matched arrays (z0, z1, t, z_t, u_star) for one optimization step."""

    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    z_t: np.ndarray
    u_star: np.ndarray

    def __post_init__(self):
        n = self.z0.shape[0]
        for name in ("z1", "t", "z_t", "u_star"):
            if getattr(self, name).shape[0] != n:
                raise ValidationError(f"batch field {name} has mismatched length")
        if not np.allclose(self.z_t, self.t[:, None] * self.z1 + (1 - self.t[:, None]) * self.z0):
            raise ValidationError("z_t is not the path interpolation of (z0, z1, t)")
        if not np.allclose(self.u_star, self.z1 - self.z0):
            raise ValidationError("u_star is not z1 - z0")

    def __len__(self):
        return self.z0.shape[0]


def interpolate(z0, z1, t):
    """Path point z_t = t*z1 + (1-t)*z0."""
    z0a, z1a = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    if z0a.shape != z1a.shape:
        raise DimensionMismatchError("z0 and z1 must have equal shapes")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValidationError("t must lie in [0, 1]")
    if t_arr.ndim == 1 and z0a.ndim == 2:
        t_arr = t_arr[:, None]
    return t_arr * z1a + (1.0 - t_arr) * z0a


def target_velocity(z0, z1):
    """Conditional regression target u* = z1 - z0."""
    z0a, z1a = np.asarray(z0, dtype=np.float64), np.asarray(z1, dtype=np.float64)
    if z0a.shape != z1a.shape:
        raise DimensionMismatchError("z0 and z1 must have equal shapes")
    return z1a - z0a


def make_batch(
    spec: MixtureSpec,
    n: int,
    rng: np.random.Generator,
    t_epsilon: float = T_EPSILON,
    antithetic: bool = False,
) -> TrainBatch:
    """Draw (z0, z1, t) and assemble interpolants and targets.

    With antithetic=True each drawn pair is mirrored through the origin
    (same t), which halves the variance of the loss's odd-in-z component.
    (-z0, -z1, t) has the same joint law as (z0, z1, t) exactly when the
    target density is sign-symmetric, so other specs are rejected.
    """
    if antithetic:
        if n % 2 != 0:
            raise ValidationError("antithetic batches need an even batch size")
        if not datasets.is_sign_symmetric(spec):
            raise ValidationError(
                "antithetic batches require a sign-symmetric target density"
            )
        half = make_batch(spec, n // 2, rng, t_epsilon)
        z0 = np.concatenate([half.z0, -half.z0])
        z1 = np.concatenate([half.z1, -half.z1])
        t = np.concatenate([half.t, half.t])
    else:
        z1 = datasets.sample_with_rng(spec, n, rng)
        z0 = rng.standard_normal(z1.shape)
        t = rng.uniform(t_epsilon, 1.0 - t_epsilon, size=n)
    return TrainBatch(z0, z1, t, interpolate(z0, z1, t), target_velocity(z0, z1))


def _vfm_objective(net, batch: TrainBatch):
    """Mean squared velocity error; works on raw or lifted nets."""
    pred = nnet.forward(net, batch.z_t, batch.t)
    return tape.mean(tape.sum((pred - batch.u_star) ** 2, axis=1))


def vfm_loss(net, batch: TrainBatch) -> float:
    """Batch mean of the squared error between predicted and target velocity."""
    return float(_vfm_objective(net, batch))


def vfm_loss_gradients(net, batch: TrainBatch):
    """(loss value, flat gradient list aligned with nnet.parameters)."""
    value, (grads,) = nnet.loss_gradients(lambda ln: _vfm_objective(ln, batch), net)
    return value, grads


def euler_states(field_fn, z0: np.ndarray, t_steps: int) -> np.ndarray:
    """Integrate dz/dt = field_fn(z, t) with T uniform Euler steps.

    z0 is a batch (n, m); returns all intermediate states (T+1, n, m).
    field_fn is called with (states, scalar t).
    """
    if t_steps < 1:
        raise ValidationError("step count must be >= 1")
    z = np.asarray(z0, dtype=np.float64).copy()
    out = np.empty((t_steps + 1,) + z.shape)
    out[0] = z
    dt = 1.0 / t_steps
    for i in range(t_steps):
        try:
            vel = field_fn(z, i * dt)
        except NonFiniteError as exc:
            raise IntegrationError(
                f"field evaluation failed at Euler step {i}: {exc}", step=i
            ) from exc
        z = z + dt * vel
        if not np.isfinite(z).all():
            bad = np.where(~np.isfinite(z).all(axis=1))[0]
            raise IntegrationError(
                f"non-finite state at Euler step {i + 1}", step=i + 1,
                sample_indices=bad.tolist(),
            )
        out[i + 1] = z
    return out

def euler_sample(net, z0, t_steps: int) -> Trajectory:
    """Single-trajectory Euler sampling of one field."""
    z0a = np.asarray(z0, dtype=np.float64)
    if z0a.ndim != 1:
        raise ValidationError("z0 must be a single point (m,)")
    states = euler_states(lambda z, t: nnet.forward(net, z, t), z0a[None, :], t_steps)
    times = np.arange(t_steps + 1) / t_steps
    return Trajectory(times, states[:, 0, :])


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    learning_rate: float = 1e-3
    lr_final: float | None = None
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    hidden_width: int = 128
    hidden_layers: int = 3
    activation: str = "tanh"
    t_epsilon: float = T_EPSILON
    optimizer: str = "adamw"
    antithetic: bool = False
    zero_output_init: bool = False
    log_every: int = 500

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch_size must be >= 1")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.t_epsilon < 0.5:
            raise ValidationError("t_epsilon must lie in (0, 0.5)")
        if self.lr_final is not None and self.lr_final <= 0:
            raise ValidationError("lr_final must be positive when set")
        if self.antithetic and self.batch_size % 2 != 0:
            raise ValidationError("antithetic training needs an even batch size")

    def hyper(self) -> nnet.AdamWHyper:
        return nnet.AdamWHyper(
            self.learning_rate, self.beta1, self.beta2, self.weight_decay, self.epsilon
        )

    def hyper_at(self, step: int) -> nnet.AdamWHyper:
        """Hyperparameters for one step; lr anneals linearly to lr_final."""
        if self.lr_final is None or self.steps <= 1:
            return self.hyper()
        frac = step / (self.steps - 1)
        lr = (1.0 - frac) * self.learning_rate + frac * self.lr_final
        return nnet.AdamWHyper(lr, self.beta1, self.beta2, self.weight_decay, self.epsilon)


@dataclass
class TrainResult:
    field: nnet.MlpNet
    losses: np.ndarray
    config: TrainConfig = field(repr=False, default=None)


def train_vfm(spec: MixtureSpec, config: TrainConfig | None = None) -> TrainResult:
    """Fit one velocity field to the spec by stochastic gradient steps.

    Raises DivergenceError (carrying the last finite parameters) if the
    loss goes non-finite.
    """
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    net = nnet.field_net(
        spec.dim, spec.dim, cfg.hidden_width, cfg.hidden_layers, cfg.activation, seed=cfg.seed
    )
    if cfg.zero_output_init:
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
    params = nnet.parameters(net)
    state = nnet.init_optimizer(params, cfg.hyper()) if cfg.optimizer == "adamw" else None
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        batch = make_batch(spec, cfg.batch_size, rng, cfg.t_epsilon, cfg.antithetic)
        try:
            # divergence is detected by the finiteness checks, so the
            # overflow warnings on the way there are expected noise
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads = vfm_loss_gradients(net, batch)
        except NonFiniteError as exc:
            raise DivergenceError(
                f"training loss non-finite at step {step}", step=step,
                last_finite=copy.deepcopy(net),
            ) from exc
        losses[step] = value
        if cfg.optimizer == "adamw":
            if cfg.lr_final is not None:
                state.hyper = cfg.hyper_at(step)
            nnet.optimizer_step(params, grads, state)
        else:
            nnet.sgd_step(params, grads, cfg.learning_rate)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("vfm step %d loss %.6f", step, value)
    return TrainResult(net, losses, cfg)


# -- CSV export --------------------------------------------------------------


def save_loss_csv(path, losses) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(np.asarray(losses)):
            fh.write(f"{i},{v:.9f}\n")


def save_trajectories_csv(path, trajectories) -> None:
    """Rows traj_id,t,x0,x1,... — one row per recorded state."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        dim = trajectories[0].states.shape[1] if trajectories else 2
        cols = ",".join(f"x{i}" for i in range(dim))
        fh.write(f"traj_id,t,{cols}\n")
        for tid, traj in enumerate(trajectories):
            for t, state in zip(traj.times, traj.states):
                coords = ",".join(f"{v:.9f}" for v in state)
                fh.write(f"{tid},{t:.9f},{coords}\n")


def load_trajectories_csv(path) -> list:
    """Inverse of save_trajectories_csv; returns a list of Trajectory."""
    import csv as _csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["traj_id", "t"]:
            raise ValidationError(f"{path}: not a trajectory CSV")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), [float(v) for v in row[1:]]))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: bad value ({exc})") from None
    def snap(times):
        # the CSV stores 9 decimals; restore the exact uniform grid when the
        # parsed times sit within the format's quantization of it
        arr = np.array(times)
        if len(arr) >= 2:
            canon = np.arange(len(arr)) / (len(arr) - 1)
            if np.abs(arr - canon).max() < 5e-9:
                return canon
        return arr

    out = []
    current_id, times, states = None, [], []
    for tid, vals in rows:
        if tid != current_id:
            if current_id is not None:
                out.append(Trajectory(snap(times), np.array(states)))
            current_id, times, states = tid, [], []
        times.append(vals[0])
        states.append(vals[1:])
    if current_id is not None:
        out.append(Trajectory(snap(times), np.array(states)))
    return out
