"""Toy legged-robot environments with PD actuation.

Joints are independent damped point masses driven by a clamped PD law towards
``q_default + action_scale * action``. The floating base is not simulated;
its velocities are low-pass couplings of the joint state, which is enough to
make velocity tracking depend on coordinated joint motion and to exercise
every reward term.

All state arrays carry a leading environment axis, so the same functions
serve a single robot (``N = 1``) and a vectorized batch.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, InputError, ShapeError

REWARD_TERMS = (
    "lin_track",
    "ang_track",
    "zvel",
    "xyang",
    "torque",
    "jacc",
    "limits",
    "action_rate",
)

DEFAULT_REWARD_WEIGHTS = {
    "lin_track": 1.0,
    "ang_track": 0.5,
    "zvel": -2.0,
    "xyang": -0.05,
    "torque": -2e-4,
    "jacc": -2.5e-7,
    "limits": -10.0,
    "action_rate": -0.01,
    "orientation": 0.0,
}

TILT_LIMIT = 1.0
COUPLING_MODES = ("posture", "velocity")


@dataclass
class RobotConfig:
    name: str = "toy"
    J: int = 2
    kp: float = 40.0
    kd: float = 0.5
    q_default: list[float] | None = None
    c1: list[float] | None = None
    c2: list[float] | None = None
    tau_max: float = 20.0
    joint_mass: float = 1.0
    joint_damping: float = 0.1
    dt: float = 0.01
    base_filter: float = 0.05
    vz_gain: float = 0.1
    tilt_gain: float = 0.1
    action_scale: float = 0.5
    episode_length: int = 1000
    # Commands are redrawn every this many steps within an episode (0: only at reset).
    resample_steps: int = 200
    # "posture": base velocities follow joint displacement from q_default.
    # "velocity": they follow joint velocities (cannot hold a nonzero mean).
    base_coupling: str = "posture"
    command_ranges: dict[str, list[float]] = field(
        default_factory=lambda: {"vx": [-1.0, 1.0], "vy": [-0.5, 0.5], "wz": [-0.5, 0.5]}
    )
    reward_weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_REWARD_WEIGHTS))
    orientation_penalty: bool = False
    tracking_sigma: float = 0.25
    domain_rand: bool = False
    mass_range: list[float] = field(default_factory=lambda: [0.8, 1.2])
    kp_range: list[float] = field(default_factory=lambda: [0.9, 1.1])

    def __post_init__(self):
        J = int(self.J)
        if J < 1:
            raise ConfigError("J must be a positive integer")
        self.J = J
        self.q_default = _vec(self.q_default, 0.0, J, "q_default")
        self.c1 = _vec(self.c1, -1.5, J, "c1")
        self.c2 = _vec(self.c2, 1.5, J, "c2")
        self.reward_weights = {**DEFAULT_REWARD_WEIGHTS, **self.reward_weights}
        unknown = set(self.reward_weights) - set(DEFAULT_REWARD_WEIGHTS)
        if unknown:
            raise ConfigError(f"unknown reward terms: {sorted(unknown)}")
        if any(a >= b for a, b in zip(self.c1, self.c2)):
            raise ConfigError("joint limits need c1 < c2 elementwise")
        if not self.dt > 0 or not self.tracking_sigma > 0:
            raise ConfigError("dt and tracking_sigma must be positive")
        if self.joint_mass <= 0 or self.tau_max <= 0 or self.episode_length < 1:
            raise ConfigError("joint_mass, tau_max and episode_length must be positive")
        if self.resample_steps < 0:
            raise ConfigError("resample_steps must be >= 0")
        if self.base_coupling not in COUPLING_MODES:
            raise ConfigError(f"base_coupling must be one of {COUPLING_MODES}")
        gains = [self.kp, self.kd, self.tau_max, self.joint_damping, self.base_filter,
                 self.vz_gain, self.tilt_gain, self.action_scale, *self.reward_weights.values()]
        if not all(math.isfinite(g) for g in gains):
            raise ConfigError("all gains and weights must be finite")
        for key in ("vx", "vy", "wz"):
            lo, hi = self.command_ranges.get(key, (0.0, 0.0))
            if lo > hi:
                raise ConfigError(f"command range {key} is empty")

    @property
    def obs_dim(self) -> int:
        return 9 + 3 * self.J

    @property
    def action_dim(self) -> int:
        return self.J

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RobotConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown RobotConfig fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def _vec(value, default: float, J: int, name: str) -> list[float]:
    if value is None:
        return [default] * J
    out = [float(v) for v in value]
    if len(out) != J:
        raise ConfigError(f"{name} must have length J={J}")
    return out


# The presets run the policy at 20 Hz with well-damped joints and a faster
# base filter. At the 100 Hz / lightly damped field defaults one action barely
# moves the base before the filter averages it away, which leaves a few
# hundred PPO iterations on one CPU with almost no learning signal.
_DESK_DYNAMICS = dict(dt=0.05, joint_damping=5.0, base_filter=0.3)
PRESETS = {
    "toy-quad": dict(name="toy-quad", J=2, **_DESK_DYNAMICS),
    "toy-biped": dict(name="toy-biped", J=3, **_DESK_DYNAMICS),
}


def load_robot(name_or_path: str) -> RobotConfig:
    """A preset name or a path to a JSON RobotConfig document."""
    if name_or_path in PRESETS:
        return RobotConfig(**PRESETS[name_or_path])
    path = Path(name_or_path)
    if not path.is_file():
        raise ConfigError(f"unknown robot {name_or_path!r} (presets: {sorted(PRESETS)})")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RobotConfig.from_dict(data)


@dataclass
class SimState:
    q: np.ndarray  # (N, J)
    qdot: np.ndarray  # (N, J)
    qdot_prev: np.ndarray  # (N, J)
    v: np.ndarray  # (N, 3) base linear velocity
    omega: np.ndarray  # (N, 3) base angular velocity
    roll: np.ndarray  # (N,)
    pitch: np.ndarray  # (N,)
    prev_action: np.ndarray  # (N, J)
    step_index: np.ndarray  # (N,) int
    command: np.ndarray  # (N, 3) = (c_x, c_y, c_w)

    @property
    def num_envs(self) -> int:
        return self.q.shape[0]

    def copy(self) -> "SimState":
        return SimState(**{f.name: getattr(self, f.name).copy() for f in dataclasses.fields(self)})

    def select(self, mask: np.ndarray) -> "SimState":
        return SimState(**{f.name: getattr(self, f.name)[mask] for f in dataclasses.fields(self)})

    def assign(self, mask: np.ndarray, other: "SimState") -> None:
        for f in dataclasses.fields(self):
            getattr(self, f.name)[mask] = getattr(other, f.name)


def rest_state(cfg: RobotConfig, num_envs: int = 1, command=None) -> SimState:
    J = cfg.J
    cmd = np.zeros((num_envs, 3)) if command is None else np.broadcast_to(
        np.asarray(command, dtype=np.float64), (num_envs, 3)).copy()
    return SimState(
        q=np.tile(np.asarray(cfg.q_default, dtype=np.float64), (num_envs, 1)),
        qdot=np.zeros((num_envs, J)),
        qdot_prev=np.zeros((num_envs, J)),
        v=np.zeros((num_envs, 3)),
        omega=np.zeros((num_envs, 3)),
        roll=np.zeros(num_envs),
        pitch=np.zeros(num_envs),
        prev_action=np.zeros((num_envs, J)),
        step_index=np.zeros(num_envs, dtype=np.int64),
        command=cmd,
    )


def pd_torque(q_target, q, qdot, cfg: RobotConfig, kp=None) -> np.ndarray:
    """Clamped PD torque with zero target velocity.

    ``kp`` overrides ``cfg.kp`` (scalar or per-env column) for domain
    randomization.
    """
    q_target = np.asarray(q_target, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    if q_target.shape != q.shape or qdot.shape != q.shape:
        raise ShapeError(f"pd_torque shapes differ: {q_target.shape}, {q.shape}, {qdot.shape}")
    kp = cfg.kp if kp is None else kp
    tau = kp * (q_target - q) + cfg.kd * (0.0 - qdot)
    return np.clip(tau, -cfg.tau_max, cfg.tau_max)


def _coupling_weights(J: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i = np.arange(1, J + 1, dtype=np.float64)
    return np.sin(i), np.cos(i), np.sin(2.0 * i)


def advance(state: SimState, action, cfg: RobotConfig, kp=None, mass=None) -> tuple[SimState, np.ndarray]:
    """One control step; returns the next state and the applied torque."""
    action = np.asarray(action, dtype=np.float64).reshape(state.q.shape)
    if not np.all(np.isfinite(action)):
        raise InputError("action contains non-finite values")
    J = cfg.J
    m = cfg.joint_mass if mass is None else mass
    dt = cfg.dt
    q_target = np.asarray(cfg.q_default) + cfg.action_scale * action
    tau = pd_torque(q_target, state.q, state.qdot, cfg, kp=kp)
    qddot = (tau - cfg.joint_damping * state.qdot) / m
    qdot = state.qdot + qddot * dt
    q = state.q + qdot * dt

    w_x, w_y, w_z = _coupling_weights(J)
    drive = q - np.asarray(cfg.q_default) if cfg.base_coupling == "posture" else qdot
    beta = cfg.base_filter
    v = state.v.copy()
    omega = state.omega.copy()
    v[:, 0] = (1.0 - beta) * state.v[:, 0] + beta * (drive @ w_x) / J
    v[:, 1] = (1.0 - beta) * state.v[:, 1] + beta * (drive @ w_y) / J
    omega[:, 2] = (1.0 - beta) * state.omega[:, 2] + beta * (drive @ w_z) / J
    v[:, 2] = cfg.vz_gain * qddot.mean(axis=1) * dt

    half = math.ceil(J / 2)
    front, rest = qdot[:, :half], qdot[:, half:]
    omega[:, 0] = cfg.tilt_gain * (front.mean(axis=1) - (rest.mean(axis=1) if J > half else 0.0))
    even, odd = qdot[:, 0::2], qdot[:, 1::2]
    omega[:, 1] = cfg.tilt_gain * (even.mean(axis=1) - (odd.mean(axis=1) if J > 1 else 0.0))

    nxt = SimState(
        q=q,
        qdot=qdot,
        qdot_prev=state.qdot.copy(),
        v=v,
        omega=omega,
        roll=state.roll + omega[:, 0] * dt,
        pitch=state.pitch + omega[:, 1] * dt,
        prev_action=action.copy(),
        step_index=state.step_index + 1,
        command=state.command.copy(),
    )
    return nxt, tau


def step_dynamics(state: SimState, action, cfg: RobotConfig) -> SimState:
    return advance(state, action, cfg)[0]


def projected_gravity(roll, pitch) -> np.ndarray:
    """World gravity direction (0, 0, -1) expressed in the body frame."""
    roll = np.asarray(roll, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack(
        [np.sin(pitch), -np.sin(roll) * np.cos(pitch), -np.cos(roll) * np.cos(pitch)], axis=-1
    )


def assemble_observation(state: SimState, cfg: RobotConfig) -> np.ndarray:
    """Rows of ``[omega(3), gravity(3), q - q_default(J), qdot(J), command(3), prev_action(J)]``."""
    return np.concatenate(
        [
            state.omega,
            projected_gravity(state.roll, state.pitch),
            state.q - np.asarray(cfg.q_default),
            state.qdot,
            state.command,
            state.prev_action,
        ],
        axis=1,
    )


def reward_raw_terms(state_t: SimState, state_prev: SimState, action_t, action_prev, tau, cfg: RobotConfig):
    sigma = cfg.tracking_sigma
    c = state_t.command
    lin_err = (c[:, 0] - state_t.v[:, 0]) ** 2 + (c[:, 1] - state_t.v[:, 1]) ** 2
    ang_err = (c[:, 2] - state_t.omega[:, 2]) ** 2
    jacc = (state_t.qdot - state_prev.qdot) / cfg.dt
    c1 = np.asarray(cfg.c1)
    c2 = np.asarray(cfg.c2)
    out_of_range = np.maximum(0.0, c1 - state_t.q) + np.maximum(0.0, state_t.q - c2)
    action_t = np.asarray(action_t, dtype=np.float64).reshape(state_t.q.shape)
    action_prev = np.asarray(action_prev, dtype=np.float64).reshape(state_t.q.shape)
    raw = {
        "lin_track": np.exp(-lin_err / sigma),
        "ang_track": np.exp(-ang_err / sigma),
        "zvel": state_t.v[:, 2] ** 2,
        "xyang": state_t.omega[:, 0] ** 2 + state_t.omega[:, 1] ** 2,
        "torque": np.sum(np.asarray(tau) ** 2, axis=1),
        "jacc": np.sum(jacc**2, axis=1),
        "limits": np.sum(out_of_range, axis=1),
        "action_rate": np.sum((action_t - action_prev) ** 2, axis=1),
    }
    if cfg.orientation_penalty:
        g = projected_gravity(state_t.roll, state_t.pitch)
        raw["orientation"] = g[:, 0] ** 2 + g[:, 1] ** 2
    return raw


def compute_reward(state_t: SimState, state_prev: SimState, action_t, action_prev, tau, cfg: RobotConfig):
    """Weighted reward per env.

    Returns ``(total, terms)`` where ``terms[name] = (raw, weighted)`` arrays.
    """
    raw = reward_raw_terms(state_t, state_prev, action_t, action_prev, tau, cfg)
    terms = {}
    total = np.zeros(state_t.num_envs)
    for name, value in raw.items():
        weighted = cfg.reward_weights[name] * value
        terms[name] = (value, weighted)
        total = total + weighted
    return total, terms


def sample_command(rng: np.random.Generator, cfg: RobotConfig) -> np.ndarray:
    r = cfg.command_ranges
    return np.array([rng.uniform(*r["vx"]), rng.uniform(*r["vy"]), rng.uniform(*r["wz"])])


def reset(seed_or_rng, cfg: RobotConfig) -> tuple[SimState, np.ndarray]:
    """Single-env reset: rest pose at ``q_default`` and a freshly sampled command."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    state = rest_state(cfg, 1, sample_command(rng, cfg))
    return state, assemble_observation(state, cfg)[0]


def is_done(state: SimState, cfg: RobotConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-env ``(done, reason)``; reason is ``"timeout"``, ``"tilt"`` or ``""``."""
    timeout = state.step_index >= cfg.episode_length
    tilt = (np.abs(state.roll) > TILT_LIMIT) | (np.abs(state.pitch) > TILT_LIMIT)
    reason = np.where(tilt, "tilt", np.where(timeout, "timeout", ""))
    return timeout | tilt, reason


def domain_randomize(cfg: RobotConfig, rng: np.random.Generator) -> RobotConfig:
    if not cfg.domain_rand:
        return cfg
    return dataclasses.replace(
        cfg,
        joint_mass=cfg.joint_mass * rng.uniform(*cfg.mass_range),
        kp=cfg.kp * rng.uniform(*cfg.kp_range),
    )


def env_rng(seed: int, env_index: int) -> np.random.Generator:
    """Private stream for environment ``env_index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(env_index)]))


class VecEnv:
    """``num_envs`` independent robots stepped together.

    Each environment owns its own RNG stream (commands, domain randomization
    and the policy's exploration noise), so collected data does not depend on
    how environments are scheduled.

    With ``stagger`` the first episode of each env starts at a random step
    index so that timeouts (and command changes) do not happen in lockstep.
    ``fixed_command`` pins every env's command, which disables resampling.
    """

    def __init__(self, cfg: RobotConfig, num_envs: int, seed: int, stagger: bool = True, fixed_command=None):
        self.cfg = cfg
        self.num_envs = num_envs
        self.rngs = [env_rng(seed, i) for i in range(num_envs)]
        self.fixed_command = None if fixed_command is None else np.asarray(fixed_command, dtype=np.float64)
        self.kp = np.full((num_envs, 1), cfg.kp)
        self.mass = np.full((num_envs, 1), cfg.joint_mass)
        self.state = rest_state(cfg, num_envs)
        self.timeouts = np.zeros(num_envs, dtype=bool)
        self.terminal_obs = None
        for i in range(num_envs):
            self._reset_env(i)
            if stagger:
                self.state.step_index[i] = self.rngs[i].integers(0, cfg.episode_length)

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    @property
    def action_dim(self) -> int:
        return self.cfg.action_dim

    def _reset_env(self, i: int) -> None:
        rng = self.rngs[i]
        fresh = rest_state(self.cfg, 1, self._command(rng))
        self.state.assign(np.array([i]), fresh)
        episode_cfg = domain_randomize(self.cfg, rng)
        self.kp[i, 0] = episode_cfg.kp
        self.mass[i, 0] = episode_cfg.joint_mass

    def _command(self, rng: np.random.Generator) -> np.ndarray:
        if self.fixed_command is not None:
            return self.fixed_command
        return sample_command(rng, self.cfg)

    def observe(self) -> np.ndarray:
        return assemble_observation(self.state, self.cfg)

    def noise(self) -> np.ndarray:
        return np.stack([rng.standard_normal(self.cfg.J) for rng in self.rngs])

    def step(self, action):
        """Advance all envs; finished envs are reset in place.

        Returns ``(obs, reward, done, terms)`` where ``obs`` is already the
        post-reset observation for finished envs. The pre-reset observation
        and a mask of episodes cut by the time limit (rather than by tipping
        over) are kept in ``terminal_obs`` and ``timeouts``.
        """
        prev = self.state
        nxt, tau = advance(prev, action, self.cfg, kp=self.kp, mass=self.mass)
        reward, terms = compute_reward(nxt, prev, action, prev.prev_action, tau, self.cfg)
        done, reason = is_done(nxt, self.cfg)
        self.timeouts = reason == "timeout"
        self.terminal_obs = assemble_observation(nxt, self.cfg) if done.any() else None
        self.state = nxt
        for i in np.flatnonzero(done):
            self._reset_env(int(i))
        every = self.cfg.resample_steps
        if every and self.fixed_command is None:
            due = ~done & (nxt.step_index % every == 0)
            for i in np.flatnonzero(due):
                self.state.command[i] = sample_command(self.rngs[i], self.cfg)
        return self.observe(), reward, done, terms
