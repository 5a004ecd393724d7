"""PPO with GAE, clipped surrogate, freeze masking and a KL-driven learning rate."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import net
from .errors import ConfigError, DivergenceError, ShapeError
from .net import ActorCriticParams, LossTerms
from .envsim import REWARD_TERMS

LR_MIN = 1e-5
LR_MAX = 1e-2


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.998
    gae_lambda: float = 0.95
    value_loss_coef: float = 1.0
    entropy_coef: float = 0.01
    learning_rate: float = 1e-3
    lr_adaptive: bool = True
    desired_kl: float = 0.01
    epochs: int = 5
    minibatches: int = 4
    max_grad_norm: float = 1.0
    num_envs: int = 256
    steps_per_iter: int = 24
    iterations: int = 300
    # Rewards are multiplied by this before GAE and value fitting; reported
    # metrics are always unscaled.
    reward_scale: float = 1.0
    optimizer: str = "sgd"
    # Episodes cut by the time limit get gamma * V(final obs) added to their
    # last reward, so the critic is not asked to predict an unobservable
    # clock. Off reproduces the plain "every done is terminal" targets.
    timeout_bootstrap: bool = False

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError("gae_lambda must lie in [0, 1]")
        if not self.clip_eps > 0.0:
            raise ConfigError("clip_eps must be positive")
        if self.epochs < 1 or self.minibatches < 1:
            raise ConfigError("epochs and minibatches must be >= 1")
        if self.num_envs < 1 or self.steps_per_iter < 1 or self.iterations < 0:
            raise ConfigError("num_envs, steps_per_iter must be >= 1 and iterations >= 0")
        if self.minibatches > self.num_envs * self.steps_per_iter:
            raise ConfigError("more minibatches than samples per iteration")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        coeffs = [self.value_loss_coef, self.entropy_coef, self.learning_rate, self.desired_kl,
                  self.max_grad_norm, self.reward_scale]
        if not all(math.isfinite(c) for c in coeffs):
            raise ConfigError("PPO coefficients must be finite")
        if self.learning_rate < 0 or self.max_grad_norm <= 0 or self.desired_kl <= 0:
            raise ConfigError("learning_rate >= 0, max_grad_norm > 0, desired_kl > 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutBatch:
    """One collection phase; every array is laid out ``(num_envs, steps)``."""

    obs: np.ndarray  # (N, T, obs_dim)
    actions: np.ndarray  # (N, T, act_dim)
    log_probs: np.ndarray  # behavior-policy log density at collection time
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    bootstrap_values: np.ndarray  # (N,)
    timeout_values: Optional[np.ndarray] = None  # V(final obs) where a time limit hit, else 0

    def __post_init__(self):
        n, t = self.rewards.shape
        for name in ("log_probs", "values", "dones"):
            if getattr(self, name).shape != (n, t):
                raise ShapeError(f"{name} must have shape {(n, t)}")
        if self.obs.shape[:2] != (n, t) or self.actions.shape[:2] != (n, t):
            raise ShapeError("obs/actions must be laid out (num_envs, steps, dim)")
        if self.bootstrap_values.shape != (n,):
            raise ShapeError("bootstrap_values must have one entry per env")
        if self.timeout_values is not None and self.timeout_values.shape != (n, t):
            raise ShapeError(f"timeout_values must have shape {(n, t)}")

    def gae_rewards(self, cfg: "PpoConfig") -> np.ndarray:
        """Scaled rewards fed to GAE, with time-limit bootstraps folded in."""
        r = self.rewards * cfg.reward_scale
        if cfg.timeout_bootstrap and self.timeout_values is not None:
            r = r + cfg.gamma * self.timeout_values
        return r

    @property
    def size(self) -> int:
        return self.rewards.size


@dataclass
class UpdateStats:
    surrogate_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    learning_rate: float


@dataclass
class IterationMetrics:
    iteration: int
    mean_episode_reward: float
    reward_terms: dict[str, float]
    surrogate_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    learning_rate: float
    wall_seconds: float


def compute_gae(rewards, values, dones, bootstrap_values, gamma: float, lam: float):
    """Advantages and returns along the last (time) axis.

    ``dones[t]`` means the transition at ``t`` ended its episode, so neither
    the TD target nor the recursion reaches past it.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    boot = np.asarray(bootstrap_values, dtype=np.float64)
    if r.shape != v.shape or r.shape != d.shape:
        raise ShapeError(f"rewards {r.shape}, values {v.shape}, dones {d.shape} must match")
    if boot.shape != r.shape[:-1]:
        raise ShapeError(f"bootstrap_values shape {boot.shape} != {r.shape[:-1]}")
    adv = np.zeros_like(r)
    next_value = boot
    next_adv = np.zeros_like(boot)
    for t in range(r.shape[-1] - 1, -1, -1):
        live = 1.0 - d[..., t]
        delta = r[..., t] + gamma * live * next_value - v[..., t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[..., t] = next_adv
        next_value = v[..., t]
    return adv, adv + v


def ppo_surrogate(ratio, advantage, clip_eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    out = np.minimum(ratio * advantage, clipped * advantage)
    return float(out) if out.ndim == 0 else out


def adapt_lr(current_lr: float, approx_kl: float, desired_kl: float) -> float:
    lr = current_lr
    if approx_kl > 2.0 * desired_kl:
        lr = current_lr / 1.5
    elif approx_kl < desired_kl / 2.0:
        lr = current_lr * 1.5
    return min(max(lr, LR_MIN), LR_MAX)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    std = adv.std()
    if std == 0.0:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


def make_loss(actions, old_log_probs, advantages, returns, cfg: PpoConfig, stats: Optional[dict] = None):
    """Build the PPO minibatch loss callback for ``net.backward``.

    loss = -mean(surrogate) + value_coef * mean((V - R)^2) - entropy_coef * entropy
    """
    B = actions.shape[0]

    def loss_fn(mean, log_std, value) -> LossTerms:
        logp, entropy = net.log_prob_and_entropy(mean, log_std, actions)
        ratio = np.exp(logp - old_log_probs)
        clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
        unclipped_obj = ratio * advantages
        surr = np.minimum(unclipped_obj, clipped * advantages)
        v_err = value - returns
        surr_loss = -surr.mean()
        value_loss = float(np.mean(v_err**2))
        ent = float(entropy[0]) if np.ndim(entropy) else float(entropy)
        loss = surr_loss + cfg.value_loss_coef * value_loss - cfg.entropy_coef * ent

        active = unclipped_obj <= clipped * advantages
        d_logp = np.where(active, -ratio * advantages / B, 0.0)
        inv_var = np.exp(-2.0 * log_std)
        diff = actions - mean
        d_mean = d_logp[:, None] * diff * inv_var
        z2 = diff * diff * inv_var
        d_log_std = (d_logp[:, None] * (z2 - 1.0)).sum(axis=0) - cfg.entropy_coef
        d_value = cfg.value_loss_coef * 2.0 * v_err / B
        if stats is not None:
            stats.update(surrogate_loss=float(surr_loss), value_loss=value_loss, entropy=ent,
                         mean_ratio=float(ratio.mean()))
        return LossTerms(loss, d_mean, d_log_std, d_value)

    return loss_fn


class Optimizer:
    """Plain SGD, or Adam with per-parameter moments.

    Frozen entries receive exactly-zero gradients; under both rules their
    update is exactly zero, so they stay bit-identical.
    """

    def __init__(self, kind: str, params: ActorCriticParams, betas=(0.9, 0.999), eps=1e-8):
        self.kind = kind
        self.betas = betas
        self.eps = eps
        self.t = 0
        if kind == "adam":
            self.m = params.zeros_like()
            self.v = params.zeros_like()

    def step(self, params: ActorCriticParams, grads: ActorCriticParams, lr: float) -> None:
        if self.kind == "sgd":
            net.sgd_step(params, grads, lr)
            return
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(params.arrays(), grads.arrays(), self.m.arrays(), self.v.arrays()):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def update(params: ActorCriticParams, batch: RolloutBatch, cfg: PpoConfig, freeze=None,
           advantages=None, returns=None, rng: Optional[np.random.Generator] = None,
           optimizer: Optional[Optimizer] = None, lr: Optional[float] = None):
    """Run ``epochs x minibatches`` masked, norm-clipped gradient steps.

    Returns a new parameter set and ``UpdateStats``; ``params`` is not touched.
    When ``advantages``/``returns`` are omitted they are computed from the
    batch with GAE.
    """
    if advantages is None or returns is None:
        advantages, returns = compute_gae(
            batch.gae_rewards(cfg), batch.values, batch.dones, batch.bootstrap_values,
            cfg.gamma, cfg.gae_lambda,
        )
    rng = np.random.default_rng(0) if rng is None else rng
    lr = cfg.learning_rate if lr is None else lr
    new = params.copy()
    optimizer = Optimizer(cfg.optimizer, new) if optimizer is None else optimizer

    n = batch.size
    obs = batch.obs.reshape(n, -1)
    actions = batch.actions.reshape(n, -1)
    old_logp = batch.log_probs.reshape(n)
    adv = normalize_advantages(np.asarray(advantages, dtype=np.float64).reshape(n))
    ret = np.asarray(returns, dtype=np.float64).reshape(n)

    sums = {"surrogate_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    steps = 0
    mb_size = n // cfg.minibatches
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for k in range(cfg.minibatches):
            idx = perm[k * mb_size:(k + 1) * mb_size] if k < cfg.minibatches - 1 else perm[k * mb_size:]
            stats: dict = {}
            loss_fn = make_loss(actions[idx], old_logp[idx], adv[idx], ret[idx], cfg, stats)
            loss, grads = net.backward(new, obs[idx], loss_fn)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch step {steps}")
            grads = net.apply_freeze(grads, freeze)
            norm = net.global_norm(grads)
            if norm > cfg.max_grad_norm:
                scale = cfg.max_grad_norm / norm
                for _, g in grads.arrays():
                    g *= scale
            optimizer.step(new, grads, lr)
            for key in sums:
                sums[key] += stats[key]
            steps += 1

    mean, log_std = net.actor_forward(new, obs)
    new_logp, _ = net.log_prob_and_entropy(mean, log_std, actions)
    approx_kl = float(np.mean(old_logp - new_logp))
    if not math.isfinite(approx_kl):
        raise DivergenceError("non-finite policy after update")
    out = UpdateStats(
        surrogate_loss=sums["surrogate_loss"] / steps,
        value_loss=sums["value_loss"] / steps,
        entropy=sums["entropy"] / steps,
        approx_kl=approx_kl,
        learning_rate=lr,
    )
    return new, out


def collect(env, params: ActorCriticParams, steps: int, obs: np.ndarray):
    """Roll the stochastic policy for ``steps`` steps in every env.

    Returns ``(batch, next_obs, term_means)`` where ``term_means`` maps reward
    term name to the mean weighted per-step contribution.
    """
    N = env.num_envs
    D = env.obs_dim
    A = env.action_dim
    obs_buf = np.empty((N, steps, D))
    act_buf = np.empty((N, steps, A))
    logp_buf = np.empty((N, steps))
    val_buf = np.empty((N, steps))
    rew_buf = np.empty((N, steps))
    done_buf = np.empty((N, steps))
    timeout_buf = np.zeros((N, steps))
    term_sums = {name: 0.0 for name in REWARD_TERMS}
    std = np.exp(params.actor_log_std)
    for t in range(steps):
        mean = net.mlp_forward(params.actor_layers, obs)
        value = net.mlp_forward(params.critic_layers, obs)[:, 0]
        action = mean + std * env.noise()
        logp, _ = net.log_prob_and_entropy(mean, params.actor_log_std, action)
        obs_buf[:, t] = obs
        act_buf[:, t] = action
        logp_buf[:, t] = logp
        val_buf[:, t] = value
        obs, reward, done, terms = env.step(action)
        rew_buf[:, t] = reward
        done_buf[:, t] = done
        cut = np.flatnonzero(getattr(env, "timeouts", np.zeros(N, dtype=bool)))
        if len(cut):
            final = env.terminal_obs[cut]
            timeout_buf[cut, t] = net.mlp_forward(params.critic_layers, final)[:, 0]
        for name in REWARD_TERMS:
            term_sums[name] += float(terms[name][1].sum())
    boot = net.mlp_forward(params.critic_layers, obs)[:, 0]
    batch = RolloutBatch(obs_buf, act_buf, logp_buf, val_buf, rew_buf, done_buf, boot, timeout_buf)
    term_means = {k: v / (N * steps) for k, v in term_sums.items()}
    return batch, obs, term_means


EnvFactory = Callable[[int, int], object]


def train_stage(env_factory: EnvFactory, params: ActorCriticParams, freeze, cfg: PpoConfig, seed: int,
                on_iteration: Optional[Callable[[IterationMetrics, ActorCriticParams], None]] = None):
    """``cfg.iterations`` rounds of collect -> GAE -> update -> adapt_lr.

    ``env_factory(num_envs, seed)`` must return a vectorized env. The whole
    stage runs on one thread and is bit-reproducible for a given seed.
    """
    params = params.copy()
    metrics: list[IterationMetrics] = []
    if cfg.iterations == 0:
        return params, metrics
    env = env_factory(cfg.num_envs, seed)
    if env.obs_dim != params.obs_dim or env.action_dim != params.action_dim:
        raise ConfigError(
            f"env dims (obs {env.obs_dim}, act {env.action_dim}) do not match policy "
            f"(obs {params.obs_dim}, act {params.action_dim})"
        )
    learner_rng = np.random.default_rng([int(seed), 0x5EED, 1])
    optimizer = Optimizer(cfg.optimizer, params)
    lr = cfg.learning_rate
    obs = env.observe()
    start = time.perf_counter()
    for it in range(cfg.iterations):
        batch, obs, term_means = collect(env, params, cfg.steps_per_iter, obs)
        adv, ret = compute_gae(batch.gae_rewards(cfg), batch.values, batch.dones,
                               batch.bootstrap_values, cfg.gamma, cfg.gae_lambda)
        try:
            params, stats = update(params, batch, cfg, freeze, adv, ret, learner_rng, optimizer, lr)
        except DivergenceError as exc:
            exc.metrics = metrics
            exc.params = params
            raise
        if cfg.lr_adaptive:
            lr = adapt_lr(lr, stats.approx_kl, cfg.desired_kl)
        row = IterationMetrics(
            iteration=it + 1,
            mean_episode_reward=float(batch.rewards.mean()),
            reward_terms=term_means,
            surrogate_loss=stats.surrogate_loss,
            value_loss=stats.value_loss,
            entropy=stats.entropy,
            approx_kl=stats.approx_kl,
            learning_rate=stats.learning_rate,
            wall_seconds=time.perf_counter() - start,
        )
        metrics.append(row)
        if on_iteration is not None:
            on_iteration(row, params)
    return params, metrics
