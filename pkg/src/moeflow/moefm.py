"""Mixture-of-experts flow matching.

K expert velocity fields share a gating network that routes states on the
probability simplex. Training minimizes the mixture negative log-likelihood

    -log sum_k pi_k(z_t, t) * exp(-|u_k(z_t, t) - u*|^2 / (2 sigma^2)),

averaged over the batch. The Gaussian normalizer (2 pi sigma^2)^(m/2) is an
additive constant for fixed sigma and is deliberately omitted, so reported
losses are offset by m/2 * log(2 pi sigma^2) relative to the full mixture
NLL. Sampling freezes one expert per trajectory: the expert is drawn (or
argmaxed) from the routing at (z0, t=0) and integrated alone.
"""

from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import datasets, flow, nnet, tape
from .datasets import MixtureSpec, SampleSet
from .errors import (
    DimensionMismatchError,
    DivergenceError,
    IntegrationError,
    NonFiniteError,
    ValidationError,
)
from .flow import TrainBatch, TrainConfig, Trajectory

log = logging.getLogger(__name__)


@dataclass
class MoeFlowModel:
    """K expert fields, one gating net, and the kernel width sigma."""

    experts: list
    gate: nnet.MlpNet
    sigma: float

    def __post_init__(self):
        if not self.experts:
            raise ValidationError("need at least one expert")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")
        dim = self.experts[0].state_dim
        for ex in self.experts:
            if ex.state_dim != dim or ex.output_dim != dim:
                raise DimensionMismatchError("experts must map (z, t) -> velocity of same dim")
        if self.gate.state_dim != dim:
            raise DimensionMismatchError("gate input dim does not match experts")
        if self.gate.output_dim != len(self.experts):
            raise DimensionMismatchError(
                f"gate outputs {self.gate.output_dim} logits for {len(self.experts)} experts"
            )

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def dim(self) -> int:
        return self.experts[0].state_dim


def init_moe_model(
    dim: int,
    k: int,
    sigma: float = 0.1,
    hidden_width: int = 128,
    hidden_layers: int = 3,
    activation: str = "tanh",
    seed: int = 0,
) -> MoeFlowModel:
    """Fresh model with per-expert RNG streams spawned from one seed.

    The gate's output layer starts at zero so routing begins uniform; this
    keeps every expert alive early without any balancing loss.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(k + 1)
    experts = [
        nnet.field_net(dim, dim, hidden_width, hidden_layers, activation, seed=streams[i])
        for i in range(k)
    ]
    gate = nnet.field_net(dim, k, hidden_width, hidden_layers, activation, seed=streams[k])
    gate.weights[-1][:] = 0.0
    gate.biases[-1][:] = 0.0
    return MoeFlowModel(experts, gate, float(sigma))


def _log_softmax(logits):
    return logits - tape.logsumexp(logits, axis=1, keepdims=True)


def gating(model: MoeFlowModel, z, t) -> np.ndarray:
    """Routing probabilities pi(z, t) on the simplex; (K,) or (n, K)."""
    single = np.asarray(z).ndim == 1
    logits = nnet.forward(model.gate, np.atleast_2d(np.asarray(z, dtype=np.float64)), t)
    pi = np.exp(_log_softmax(logits))
    return pi[0] if single else pi


def responsibilities(model: MoeFlowModel, z, t, u_star) -> np.ndarray:
    """Posterior expert weights gamma for velocity targets u_star.

    gamma_k proportional to pi_k * exp(-|u_k - u*|^2 / (2 sigma^2)),
    normalized over k in log space. Shapes follow gating().
    """
    z_arr = np.asarray(z, dtype=np.float64)
    u_arr = np.asarray(u_star, dtype=np.float64)
    single = z_arr.ndim == 1
    z2, u2 = np.atleast_2d(z_arr), np.atleast_2d(u_arr)
    if z2.shape != u2.shape:
        raise DimensionMismatchError("z and u_star must have matching shapes")
    if not np.isfinite(u2).all():
        raise NonFiniteError("non-finite velocity target")
    logits = nnet.forward(model.gate, z2, t)
    log_pi = _log_softmax(logits)
    outs = np.stack([nnet.forward(ex, z2, t) for ex in model.experts], axis=1)  # (n, K, m)
    d2 = np.sum((outs - u2[:, None, :]) ** 2, axis=2)
    log_num = log_pi - d2 / (2.0 * model.sigma**2)
    gamma = np.exp(log_num - tape.logsumexp(log_num, axis=1, keepdims=True))
    return gamma[0] if single else gamma


def _nll_objective(experts, gate, batch: TrainBatch, sigma: float):
    """Mixture NLL; works on raw nets (float) or lifted nets (tape graph)."""
    logits = nnet.forward(gate, batch.z_t, batch.t)
    log_pi = _log_softmax(logits)
    sq = []
    for ex in experts:
        diff = nnet.forward(ex, batch.z_t, batch.t) - batch.u_star
        sq.append(tape.sum(diff**2, axis=1))
    log_terms = log_pi - tape.stack(sq, axis=1) / (2.0 * sigma**2)
    row_ll = tape.logsumexp(log_terms, axis=1)
    row_val = row_ll.value if isinstance(row_ll, tape.Var) else row_ll
    if not np.isfinite(row_val).all():
        bad = int(np.flatnonzero(~np.isfinite(row_val))[0])
        raise NonFiniteError(f"non-finite loss term at batch row {bad}", where=bad)
    return -tape.mean(row_ll)


def moefm_nll(model: MoeFlowModel, batch: TrainBatch) -> float:
    """Batch mean of the stabilized mixture NLL (normalizer omitted)."""
    return float(_nll_objective(model.experts, model.gate, batch, model.sigma))


def moefm_nll_gradients(model: MoeFlowModel, batch: TrainBatch):
    """(value, per-expert gradient lists, gate gradient list)."""

    def objective(*nets):
        return _nll_objective(list(nets[:-1]), nets[-1], batch, model.sigma)

    value, grads = nnet.loss_gradients(objective, *model.experts, model.gate)
    return value, grads[:-1], grads[-1]


@dataclass
class MoeTrainConfig(TrainConfig):
    k: int = 8
    sigma: float = 0.1

    def __post_init__(self):
        super().__post_init__()
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.sigma <= 0:
            raise ValidationError("sigma must be positive")


@dataclass
class MoeTrainResult:
    model: MoeFlowModel
    losses: np.ndarray
    utilization: np.ndarray  # mean responsibilities on held-out data


def _model_params(model: MoeFlowModel) -> list:
    params = [p for ex in model.experts for p in nnet.parameters(ex)]
    params.extend(nnet.parameters(model.gate))
    return params


def train_moefm(spec: MixtureSpec, config: MoeTrainConfig | None = None) -> MoeTrainResult:
    """Fit experts and gate jointly by minimizing the mixture NLL."""
    cfg = config or MoeTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    model = init_moe_model(
        spec.dim, cfg.k, cfg.sigma, cfg.hidden_width, cfg.hidden_layers, cfg.activation, cfg.seed
    )
    if cfg.zero_output_init:
        for ex in model.experts:
            ex.weights[-1][:] = 0.0
            ex.biases[-1][:] = 0.0
    params = _model_params(model)
    state = nnet.init_optimizer(params, cfg.hyper()) if cfg.optimizer == "adamw" else None
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        batch = flow.make_batch(spec, cfg.batch_size, rng, cfg.t_epsilon, cfg.antithetic)
        try:
            # overflow on the way to a NonFiniteError is the expected failure
            # path, not something worth a warning
            with np.errstate(over="ignore", invalid="ignore"):
                value, expert_grads, gate_grads = moefm_nll_gradients(model, batch)
        except NonFiniteError as exc:
            raise DivergenceError(
                f"training loss non-finite at step {step}", step=step,
                last_finite=copy.deepcopy(model),
            ) from exc
        losses[step] = value
        grads = [g for eg in expert_grads for g in eg] + gate_grads
        if cfg.optimizer == "adamw":
            if cfg.lr_final is not None:
                state.hyper = cfg.hyper_at(step)
            nnet.optimizer_step(params, grads, state)
        else:
            nnet.sgd_step(params, grads, cfg.learning_rate)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("moefm step %d loss %.6f", step, value)
    held_out = flow.make_batch(spec, cfg.batch_size, np.random.default_rng(cfg.seed + 986_131))
    gamma = responsibilities(model, held_out.z_t, held_out.t, held_out.u_star)
    utilization = gamma.mean(axis=0)
    log.info("expert utilization: %s", np.array2string(utilization, precision=4))
    return MoeTrainResult(model, losses, utilization)


# -- sampling ----------------------------------------------------------------


def choose_expert(pi: np.ndarray, mode: str, rng: np.random.Generator | None) -> int:
    """Draw (or argmax) an expert index from routing probabilities."""
    if mode == "greedy":
        return int(np.argmax(pi))  # ties resolve to the lowest index
    if mode == "sampled":
        if rng is None:
            raise ValidationError("sampled mode needs a random generator")
        u = rng.uniform()
        return int(min(np.searchsorted(np.cumsum(pi), u, side="right"), len(pi) - 1))
    raise ValidationError(f"unknown mode {mode!r}")


def frozen_routing_sample(
    model: MoeFlowModel,
    z0,
    t_steps: int,
    mode: str = "sampled",
    rng: np.random.Generator | None = None,
) -> Trajectory:
    """Pick one expert at (z0, t=0) and integrate only that field."""
    z0a = np.asarray(z0, dtype=np.float64)
    if z0a.ndim != 1 or z0a.shape[0] != model.dim:
        raise DimensionMismatchError("z0 must be a single point of the model dimension")
    expert = choose_expert(gating(model, z0a, 0.0), mode, rng)
    traj = flow.euler_sample(model.experts[expert], z0a, t_steps)
    traj.expert_id = expert
    return traj


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("MOEFLOW_THREADS", "1")))
    except ValueError:
        return 1


def generate(
    model: MoeFlowModel,
    n: int,
    t_steps: int = 4,
    mode: str = "sampled",
    seed: int = 0,
    return_trajectories: bool = False,
):
    """Sample n endpoints with frozen routing.

    Every sample owns an RNG stream keyed by (seed, index): the stream
    yields the noise draw, then the expert draw. Samples are grouped by
    chosen expert and integrated in batches (optionally across threads,
    capped by MOEFLOW_THREADS); results are scattered back by index, so
    output is independent of grouping and thread count.

    Returns (SampleSet, expert_ids[, trajectories]).
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    if mode not in ("sampled", "greedy"):
        raise ValidationError(f"unknown mode {mode!r}")
    streams = [np.random.default_rng([seed, i]) for i in range(n)]
    z0 = np.stack([s.standard_normal(model.dim) for s in streams])
    pi0 = gating(model, z0, 0.0)
    if mode == "greedy":
        expert_ids = np.argmax(pi0, axis=1)
    else:
        draws = np.array([s.uniform() for s in streams])
        cum = np.cumsum(pi0, axis=1)
        expert_ids = np.minimum(
            (draws[:, None] > cum).sum(axis=1), model.num_experts - 1
        )
    expert_ids = expert_ids.astype(np.int64)

    endpoints = np.empty_like(z0)
    paths = [None] * n if return_trajectories else None
    failures = []

    def integrate(k: int):
        idx = np.flatnonzero(expert_ids == k)
        if idx.size == 0:
            return
        field = model.experts[k]
        try:
            states = flow.euler_states(
                lambda z, t: nnet.forward(field, z, t), z0[idx], t_steps
            )
        except IntegrationError as exc:
            failures.append((k, idx, exc))
            return
        endpoints[idx] = states[-1]
        if paths is not None:
            times = np.arange(t_steps + 1) / t_steps
            for j, sample_idx in enumerate(idx):
                paths[sample_idx] = Trajectory(times, states[:, j, :], expert_id=k)

    workers = _thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(integrate, range(model.num_experts)))
    else:
        for k in range(model.num_experts):
            integrate(k)
    if failures:
        bad = sorted(int(i) for _, idx, exc in failures for i in np.asarray(idx)[exc.sample_indices or range(len(idx))])
        raise IntegrationError(
            f"integration failed for {len(bad)} samples", sample_indices=bad
        )
    samples = SampleSet(endpoints, f"moefm-n{n}-T{t_steps}-{mode}-seed{seed}")
    if return_trajectories:
        return samples, expert_ids, paths
    return samples, expert_ids


# -- CSV export --------------------------------------------------------------


def save_generation_csv(path, samples, expert_ids) -> None:
    """Rows sample_id,expert_id,x0,x1,... at 9 decimal places."""
    pts = samples.points if isinstance(samples, SampleSet) else np.asarray(samples)
    ids = np.asarray(expert_ids)
    if pts.ndim != 2:
        raise ValidationError("generation CSV needs points shaped (n, m)")
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        cols = ",".join(f"x{i}" for i in range(pts.shape[1]))
        fh.write(f"sample_id,expert_id,{cols}\n")
        for i, (e, row) in enumerate(zip(ids, pts)):
            coords = ",".join(f"{v:.9f}" for v in row)
            fh.write(f"{i},{int(e)},{coords}\n")


def load_generation_csv(path):
    """Returns (points, expert_ids) from a generation CSV."""
    import csv as _csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["sample_id", "expert_id"]:
            raise ValidationError(f"{path}: not a generation CSV")
        pts, ids = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ids.append(int(row[1]))
                pts.append([float(v) for v in row[2:]])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad value ({exc})") from None
    dim = len(header) - 2
    return np.asarray(pts, dtype=np.float64).reshape(-1, dim), np.asarray(ids, dtype=np.int64)
