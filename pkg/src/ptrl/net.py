"""Fully-connected actor-critic networks with hand-written backprop.

Everything is float64 numpy. A network is a list of ``LayerBlock`` objects;
block ``k`` maps width ``dims[k]`` to ``dims[k + 1]``. Hidden layers use ELU,
the output layer is linear. For the canonical actor the blocks are
``[input, L1, L2, output]`` so L1 is the 512x256 matrix and L2 the 256x128 one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

if TYPE_CHECKING:
    from .transfer import FreezeSpec

CANONICAL_HIDDEN = (512, 256, 128)
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MlpShape:
    input_dim: int
    hidden: tuple[int, ...] = CANONICAL_HIDDEN
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(int(d) < 1 for d in self.dims):
            raise ConfigError(f"all layer widths must be >= 1, got {self.dims}")

    @property
    def dims(self) -> list[int]:
        return [int(self.input_dim), *self.hidden, int(self.output_dim)]

    @property
    def num_blocks(self) -> int:
        return len(self.hidden) + 1

    def block_param_count(self, index: int) -> int:
        d = self.dims
        return d[index] * d[index + 1] + d[index + 1]

    def layer_param_count(self) -> int:
        return sum(self.block_param_count(k) for k in range(self.num_blocks))


@dataclass
class LayerBlock:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "LayerBlock":
        return LayerBlock(self.weight.copy(), self.bias.copy())


@dataclass
class ActorCriticParams:
    actor_layers: list[LayerBlock]
    actor_log_std: np.ndarray
    critic_layers: list[LayerBlock] = field(default_factory=list)

    @property
    def actor_shape(self) -> MlpShape:
        return _shape_of(self.actor_layers)

    @property
    def critic_shape(self) -> MlpShape:
        return _shape_of(self.critic_layers)

    @property
    def obs_dim(self) -> int:
        return self.actor_layers[0].fan_in

    @property
    def action_dim(self) -> int:
        return self.actor_layers[-1].fan_out

    def actor_param_count(self) -> int:
        return sum(b.size for b in self.actor_layers) + self.actor_log_std.size

    def critic_param_count(self) -> int:
        return sum(b.size for b in self.critic_layers)

    def copy(self) -> "ActorCriticParams":
        return ActorCriticParams(
            [b.copy() for b in self.actor_layers],
            self.actor_log_std.copy(),
            [b.copy() for b in self.critic_layers],
        )

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` in the fixed serialization order."""
        for k, b in enumerate(self.actor_layers):
            yield f"actor.{k}.weight", b.weight
            yield f"actor.{k}.bias", b.bias
        yield "actor.log_std", self.actor_log_std
        for k, b in enumerate(self.critic_layers):
            yield f"critic.{k}.weight", b.weight
            yield f"critic.{k}.bias", b.bias

    def zeros_like(self) -> "ActorCriticParams":
        return ActorCriticParams(
            [LayerBlock(np.zeros_like(b.weight), np.zeros_like(b.bias)) for b in self.actor_layers],
            np.zeros_like(self.actor_log_std),
            [LayerBlock(np.zeros_like(b.weight), np.zeros_like(b.bias)) for b in self.critic_layers],
        )

    def validate(self) -> None:
        for name, layers in (("actor", self.actor_layers), ("critic", self.critic_layers)):
            if not layers:
                raise ShapeError(f"{name} has no layers")
            for k, b in enumerate(layers):
                if b.weight.ndim != 2 or b.bias.shape != (b.fan_out,):
                    raise ShapeError(f"{name} block {k}: weight {b.weight.shape} / bias {b.bias.shape}")
                if k and layers[k - 1].fan_out != b.fan_in:
                    raise ShapeError(
                        f"{name} block {k} expects {b.fan_in} inputs, previous block gives {layers[k - 1].fan_out}"
                    )
        if self.actor_log_std.shape != (self.action_dim,):
            raise ShapeError(f"log_std shape {self.actor_log_std.shape} != ({self.action_dim},)")
        if not np.all(np.isfinite(self.actor_log_std)):
            raise ShapeError("log_std must be finite")
        if self.critic_layers[0].fan_in != self.obs_dim or self.critic_layers[-1].fan_out != 1:
            raise ShapeError("critic must map observations to a scalar")


# Gradients share the parameter container.
GradientSet = ActorCriticParams


def _shape_of(layers: Sequence[LayerBlock]) -> MlpShape:
    return MlpShape(layers[0].fan_in, tuple(b.fan_out for b in layers[:-1]), layers[-1].fan_out)


def actor_param_count(shape: MlpShape) -> int:
    return shape.layer_param_count() + shape.output_dim


def elu(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def init_layers(shape: MlpShape, rng: np.random.Generator) -> list[LayerBlock]:
    dims = shape.dims
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(LayerBlock(w, np.zeros(fan_out)))
    return layers


def init_params(shape_actor: MlpShape, shape_critic: MlpShape, seed: int) -> ActorCriticParams:
    """Glorot-uniform weights, zero biases, log_std = 0.

    The actor and critic draw from independent child streams of ``seed`` so
    that changing one shape never perturbs the other network's weights.
    """
    if shape_critic.input_dim != shape_actor.input_dim:
        raise ConfigError("actor and critic must read the same observation")
    if shape_critic.output_dim != 1:
        raise ConfigError("critic output_dim must be 1")
    actor_ss, critic_ss = np.random.SeedSequence(int(seed)).spawn(2)
    return ActorCriticParams(
        init_layers(shape_actor, np.random.default_rng(actor_ss)),
        np.zeros(shape_actor.output_dim),
        init_layers(shape_critic, np.random.default_rng(critic_ss)),
    )


def _as_batch(obs, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected observations of width {dim}, got shape {np.shape(obs)}")
    return x, single


def mlp_forward(layers: Sequence[LayerBlock], x: np.ndarray, cache: list | None = None) -> np.ndarray:
    """Batched forward pass. When ``cache`` is a list it receives
    ``(input, pre_activation)`` per block for the backward pass."""
    h = x
    last = len(layers) - 1
    for k, block in enumerate(layers):
        z = h @ block.weight + block.bias
        if cache is not None:
            cache.append((h, z))
        h = z if k == last else elu(z)
    return h


def mlp_backward(layers: Sequence[LayerBlock], cache: list, d_out: np.ndarray) -> list[LayerBlock]:
    grads: list[LayerBlock] = [None] * len(layers)  # type: ignore[list-item]
    d = d_out
    for k in range(len(layers) - 1, -1, -1):
        h_in, z = cache[k]
        if k != len(layers) - 1:
            d = d * elu_grad(z)
        grads[k] = LayerBlock(h_in.T @ d, d.sum(axis=0))
        if k:
            d = d @ layers[k].weight.T
    return grads


def actor_forward(params: ActorCriticParams, obs) -> tuple[np.ndarray, np.ndarray]:
    x, single = _as_batch(obs, params.obs_dim)
    mean = mlp_forward(params.actor_layers, x)
    return (mean[0] if single else mean), params.actor_log_std


def critic_forward(params: ActorCriticParams, obs):
    x, single = _as_batch(obs, params.critic_layers[0].fan_in)
    value = mlp_forward(params.critic_layers, x)[:, 0]
    return float(value[0]) if single else value


def log_prob_and_entropy(mean, log_std, action):
    """Diagonal Gaussian log-density of ``action`` and the policy entropy.

    Works on single vectors or on row batches; the last axis is the action axis.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if mean.shape[-1] != log_std.shape[-1] or action.shape[-1] != mean.shape[-1]:
        raise ShapeError("mean, log_std and action must share the action dimension")
    z = (action - mean) * np.exp(-log_std)
    d = mean.shape[-1]
    logp = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * d * LOG_2PI
    entropy = np.sum(log_std + 0.5 * (1.0 + LOG_2PI), axis=-1)
    return logp, entropy


class LossTerms(NamedTuple):
    """What a loss callback hands back to ``backward``.

    ``d_mean`` has the shape of the actor output batch, ``d_log_std`` the
    shape of the log-std vector, ``d_value`` one entry per row.
    """

    loss: float
    d_mean: np.ndarray
    d_log_std: np.ndarray
    d_value: np.ndarray


LossFn = Callable[[np.ndarray, np.ndarray, np.ndarray], LossTerms]


def backward(params: ActorCriticParams, obs, loss_fn: LossFn) -> tuple[float, GradientSet]:
    """Gradient of ``loss_fn(mean, log_std, value)`` w.r.t. every parameter.

    ``loss_fn`` receives the batched actor means, the log-std vector and the
    critic values, and must return their partial derivatives.
    """
    x, _ = _as_batch(obs, params.obs_dim)
    a_cache: list = []
    c_cache: list = []
    mean = mlp_forward(params.actor_layers, x, a_cache)
    value = mlp_forward(params.critic_layers, x, c_cache)[:, 0]
    terms = loss_fn(mean, params.actor_log_std, value)
    d_mean = np.asarray(terms.d_mean, dtype=np.float64).reshape(mean.shape)
    d_value = np.asarray(terms.d_value, dtype=np.float64).reshape(-1, 1)
    grads = ActorCriticParams(
        mlp_backward(params.actor_layers, a_cache, d_mean),
        np.asarray(terms.d_log_std, dtype=np.float64).reshape(params.actor_log_std.shape).copy(),
        mlp_backward(params.critic_layers, c_cache, d_value),
    )
    return float(terms.loss), grads


def apply_freeze(grads: GradientSet, spec: "FreezeSpec | None") -> GradientSet:
    """Zero the gradients of frozen actor blocks. Returns a new GradientSet."""
    out = grads.copy()
    if spec is None:
        return out
    n = len(grads.actor_layers)
    for k in spec.frozen_blocks:
        if not 0 < k < n - 1:
            raise ConfigError(f"actor block {k} cannot be frozen (valid hidden blocks: 1..{n - 2})")
        out.actor_layers[k].weight[...] = 0.0
        out.actor_layers[k].bias[...] = 0.0
    return out


def global_norm(grads: GradientSet) -> float:
    return math.sqrt(sum(float(np.vdot(a, a)) for _, a in grads.arrays()))


def sgd_step(params: ActorCriticParams, grads: GradientSet, lr: float) -> ActorCriticParams:
    """In-place ``p -= lr * g``; zero entries leave parameters bit-identical."""
    for (_, p), (_, g) in zip(params.arrays(), grads.arrays()):
        p -= lr * g
    return params
