"""Feed-forward vector-field networks and their optimizer.

A network consumes a state vector concatenated with a fixed sinusoidal
embedding of the time coordinate and produces a velocity (or a vector of
gate logits). Gradients come from the reverse-mode tape in `tape.py`;
parameter updates use decoupled-weight-decay AdamW with bias correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .errors import (
    DimensionMismatchError,
    NonFiniteError,
    ValidationError,
)
from .tape import Var

TIME_EMBED_WIDTH = 8
_TIME_FREQS = np.array([1.0, 2.0, 4.0, 8.0])

ACTIVATIONS = {
    "tanh": tape.tanh,
    "gelu": tape.gelu,
}


def time_embedding(t) -> np.ndarray:
    """Sinusoidal features of t: sin and cos at frequencies 1, 2, 4, 8.

    Accepts a scalar or a 1-D array; returns (n, TIME_EMBED_WIDTH).
    """
    tt = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if tt.ndim != 1:
        raise DimensionMismatchError("t must be a scalar or 1-D array")
    ang = 2.0 * np.pi * tt[:, None] * _TIME_FREQS[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class MlpNet:
    """Fully connected network with a fixed activation on hidden layers.

    layer_sizes includes the input width (state dim + TIME_EMBED_WIDTH)
    and the output width. weights[i] has shape (layer_sizes[i],
    layer_sizes[i+1]); biases[i] has shape (layer_sizes[i+1],).
    """

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ValidationError("layer_sizes needs at least input and output widths")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValidationError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValidationError("weights/biases count does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want_w = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if tuple(w.shape) != want_w or tuple(b.shape) != (want_w[1],):
                raise DimensionMismatchError(
                    f"layer {i}: expected W{want_w}, b({want_w[1]},), "
                    f"got W{tuple(w.shape)}, b{tuple(b.shape)}"
                )
            # Lifted copies hold tape Vars; only check raw arrays here.
            if isinstance(w, np.ndarray) and not (
                np.isfinite(w).all() and np.isfinite(b).all()
            ):
                raise NonFiniteError(f"layer {i} has non-finite parameters", where=i)

    @property
    def state_dim(self) -> int:
        return self.layer_sizes[0] - TIME_EMBED_WIDTH

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]


def init_mlp(layer_sizes, activation: str = "tanh", seed: int = 0) -> MlpNet:
    """Initialize weights and biases uniformly in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpNet(tuple(layer_sizes), weights, biases, activation)


def field_net(
    state_dim: int,
    output_dim: int,
    hidden_width: int = 128,
    hidden_layers: int = 3,
    activation: str = "tanh",
    seed: int = 0,
) -> MlpNet:
    """Convenience constructor for a velocity/gate network over states."""
    sizes = (state_dim + TIME_EMBED_WIDTH, *([hidden_width] * hidden_layers), output_dim)
    return init_mlp(sizes, activation=activation, seed=seed)


def forward(net: MlpNet, z, t):
    """Evaluate the network at states z and times t.

    z is (m,) or (n, m); t is a scalar or (n,) with entries in [0, 1].
    Plain arrays flow through numpy; a lifted net (tape Vars) builds a
    graph and returns a Var of shape (n, output_dim).
    """
    z_arr = np.asarray(z, dtype=np.float64)
    single = z_arr.ndim == 1
    z2 = np.atleast_2d(z_arr)
    if z2.ndim != 2:
        raise DimensionMismatchError("z must be (m,) or (n, m)")
    if z2.shape[1] != net.state_dim:
        raise DimensionMismatchError(
            f"state dim {z2.shape[1]} does not match network ({net.state_dim})"
        )
    t_arr = np.asarray(t, dtype=np.float64)
    if t_arr.ndim == 0:
        t_arr = np.full(z2.shape[0], float(t_arr))
    if t_arr.shape != (z2.shape[0],):
        raise DimensionMismatchError("t must be scalar or match the batch size")
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ValidationError("t must lie in [0, 1]")
    if not np.isfinite(z2).all():
        raise NonFiniteError("non-finite input state", where="input")

    act = ACTIVATIONS[net.activation]
    h = np.concatenate([z2, time_embedding(t_arr)], axis=1)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = act(h)
        h_val = h.value if isinstance(h, Var) else h
        if not np.isfinite(h_val).all():
            raise NonFiniteError(f"non-finite activations after layer {i}", where=i)
    if single and not isinstance(h, Var):
        return h[0]
    return h


def parameters(net: MlpNet) -> list:
    """Flat parameter list in layer order: W0, b0, W1, b1, ..."""
    return [p for pair in zip(net.weights, net.biases) for p in pair]


def lift(net: MlpNet):
    """Wrap a net's parameters in tape Vars for differentiation.

    Returns (lifted_net, leaves) where leaves matches parameters(net).
    """
    weights, biases, leaves = [], [], []
    for w, b in zip(net.weights, net.biases):
        wv, bv = Var(w), Var(b)
        weights.append(wv)
        biases.append(bv)
        leaves.extend([wv, bv])
    return MlpNet(net.layer_sizes, weights, biases, net.activation), leaves


def loss_gradients(loss_fn, *nets):
    """Evaluate loss_fn on lifted views of nets; return (value, grads).

    loss_fn receives one lifted net per positional argument and must
    return a scalar (a tape Var, or a plain float for losses that do not
    depend on the parameters, in which case all gradients are zero).
    grads is a list of flat per-net gradient lists aligned with
    parameters(net).
    """
    lifted = [lift(n) for n in nets]
    out = loss_fn(*[ln for ln, _ in lifted])
    if isinstance(out, Var):
        if out.value.ndim != 0:
            raise ValidationError("loss_fn must return a scalar")
        value = float(out.value)
        if not np.isfinite(value):
            raise NonFiniteError("loss is non-finite", where="loss")
        out.backward()
    else:
        value = float(out)
        if not np.isfinite(value):
            raise NonFiniteError("loss is non-finite", where="loss")
    grads = []
    for _, leaves in lifted:
        grads.append(
            [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
        )
    return value, grads


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamWHyper:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValidationError("betas must lie in [0, 1)")
        if self.learning_rate <= 0.0:
            raise ValidationError("learning_rate must be positive")
        if self.weight_decay < 0.0 or self.epsilon < 0.0:
            raise ValidationError("weight_decay and epsilon must be non-negative")


@dataclass
class OptimState:
    """Per-parameter AdamW moments plus the shared step counter."""

    first_moment: list
    second_moment: list
    step_count: int = 0
    hyper: AdamWHyper = field(default_factory=AdamWHyper)


def init_optimizer(params: list, hyper: AdamWHyper | None = None) -> OptimState:
    return OptimState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        step_count=0,
        hyper=hyper or AdamWHyper(),
    )


def optimizer_step(params: list, grads: list, state: OptimState) -> OptimState:
    """One AdamW update, in place on params and state.

    Weight decay is decoupled (applied directly to the parameter, not
    through the gradient) and the moment estimates are bias-corrected.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionMismatchError("params/grads/state lengths disagree")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionMismatchError("gradient shape does not match parameter")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient", where="optimizer_step")
    h = state.hyper
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - h.beta1 ** t
    bc2 = 1.0 - h.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if h.weight_decay:
            p *= 1.0 - h.learning_rate * h.weight_decay
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * g * g
        p -= h.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + h.epsilon)
    return state


def sgd_step(params: list, grads: list, learning_rate: float) -> None:
    """Plain gradient descent, in place. Used for optimizer="sgd" runs."""
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionMismatchError("gradient shape does not match parameter")
        p -= learning_rate * g
