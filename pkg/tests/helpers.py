"""Shared test helpers (oracles, small nets)."""

import numpy as np
from ptrl import net


def canonical_shapes(obs_dim=45, act_dim=12):
    return net.MlpShape(obs_dim, output_dim=act_dim), net.MlpShape(obs_dim)


def small_params(seed, obs=4, hidden=(8, 8), act=2):
    """Random small net with nonzero biases and log_std so every partial is exercised."""
    p = net.init_params(net.MlpShape(obs, hidden, act), net.MlpShape(obs, hidden, 1), seed)
    rng = np.random.default_rng(1000 + seed)
    for _, arr in p.arrays():
        arr += 0.1 * rng.standard_normal(arr.shape)
    return p


def central_difference(params, loss_of, h=1e-5):
    """Finite-difference gradient of ``loss_of(params)`` for every scalar parameter."""
    out = params.zeros_like()
    for (_, arr), (_, g) in zip(params.arrays(), out.arrays()):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_of(params)
            arr[idx] = orig - h
            down = loss_of(params)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
    return out


def reward_oracle(state_t, state_prev, action_t, action_prev, tau, cfg, env=0):
    """Table of raw reward terms for one env, written with scalar Python math."""
    import math

    c = state_t.command[env]
    v = state_t.v[env]
    w = state_t.omega[env]
    sig = cfg.tracking_sigma
    J = cfg.J
    out = {
        "lin_track": math.exp(-((c[0] - v[0]) ** 2 + (c[1] - v[1]) ** 2) / sig),
        "ang_track": math.exp(-((c[2] - w[2]) ** 2) / sig),
        "zvel": v[2] * v[2],
        "xyang": w[0] * w[0] + w[1] * w[1],
        "torque": sum(tau[env][i] ** 2 for i in range(J)),
        "jacc": sum(((state_t.qdot[env][i] - state_prev.qdot[env][i]) / cfg.dt) ** 2 for i in range(J)),
        "limits": 0.0,
        "action_rate": sum((action_t[env][i] - action_prev[env][i]) ** 2 for i in range(J)),
    }
    for i in range(J):
        q = state_t.q[env][i]
        if q < cfg.c1[i]:
            out["limits"] += cfg.c1[i] - q
        if q > cfg.c2[i]:
            out["limits"] += q - cfg.c2[i]
    return out


def random_state(rng, cfg, n=1, scale=1.0):
    from ptrl import envsim

    J = cfg.J
    return envsim.SimState(
        q=rng.uniform(-2.5, 2.5, (n, J)) * scale,
        qdot=rng.standard_normal((n, J)) * scale,
        qdot_prev=rng.standard_normal((n, J)) * scale,
        v=rng.standard_normal((n, 3)) * scale,
        omega=rng.standard_normal((n, 3)) * scale,
        roll=rng.uniform(-0.5, 0.5, n),
        pitch=rng.uniform(-0.5, 0.5, n),
        prev_action=rng.standard_normal((n, J)),
        step_index=rng.integers(0, cfg.episode_length, n),
        command=rng.uniform(-1, 1, (n, 3)),
    )
