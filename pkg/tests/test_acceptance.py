"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 10 and 11 train canonical-width policies with configs/desk.json and
take tens of minutes on one CPU core.
"""

import csv
import json
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from ptrl import envsim, harness, net, ppo, transfer
from ptrl.errors import CheckpointVersionError, CorruptCheckpointError
from ptrl.transfer import CheckpointMeta, make_freeze_spec

from helpers import central_difference, random_state, reward_oracle, small_params

DESK = Path(__file__).resolve().parent.parent / "configs" / "desk.json"


def verdict(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def run(*argv):
    return harness.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def short_source(tmp_path_factory):
    """A briefly trained canonical toy-quad checkpoint."""
    out = tmp_path_factory.mktemp("short")
    assert run("train", "--config", DESK, "--robot", "toy-quad", "--iterations", 5, "--out", out,
               "--deterministic") == 0
    return out / harness.CHECKPOINT


@pytest.fixture(scope="module")
def desk_source(tmp_path_factory):
    """The 300-iteration toy-quad source policy shared by criteria 10 and 11."""
    out = tmp_path_factory.mktemp("desk-src")
    start = time.perf_counter()
    assert run("train", "--config", DESK, "--robot", "toy-quad", "--seed", 0, "--iterations", 300,
               "--out", out, "--deterministic") == 0
    return out / harness.CHECKPOINT, time.perf_counter() - start


def test_c01_gradient_correctness(capsys):
    start = time.perf_counter()
    worst = 0.0
    ok = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = small_params(seed, obs=4, hidden=(8, 8), act=2)
        obs = rng.standard_normal((6, 4))
        actions = rng.standard_normal((6, 2))
        mean, log_std = net.actor_forward(p, obs)
        logp, _ = net.log_prob_and_entropy(mean, log_std, actions)
        fn = ppo.make_loss(actions, logp + 0.1 * rng.standard_normal(6), rng.standard_normal(6),
                           rng.standard_normal(6), ppo.PpoConfig())
        _, grads = net.backward(p, obs, fn)
        fd = central_difference(p, lambda q: net.backward(q, obs, fn)[0], h=1e-5)
        for (_, g), (_, f) in zip(grads.arrays(), fd.arrays()):
            err = np.abs(g - f)
            rel = err / np.maximum(np.maximum(np.abs(g), np.abs(f)), 1e-300)
            bad = (rel >= 1e-4) & (err >= 1e-7)
            ok &= not bad.any()
            worst = max(worst, float(np.max(err)))
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, ok and elapsed < 30,
            f"20 nets, every partial within tolerance: {ok}, max abs error {worst:.2e}, {elapsed:.1f} s")


def test_c02_freeze_soundness(capsys, short_source, tmp_path):
    src, _ = transfer.load_checkpoint(short_source)
    start = time.perf_counter()
    ok = True
    details = []
    for mode, blocks in (("l2", (2,)), ("both", (1, 2))):
        out = tmp_path / mode
        assert run("transfer", "--config", DESK, "--robot", "toy-biped", "--source", short_source, "--freeze", mode,
                   "--iterations", 50, "--num-envs", 8, "--out", out, "--deterministic") == 0
        final, _ = transfer.load_checkpoint(out / harness.CHECKPOINT)
        for k in blocks:
            same = (final.actor_layers[k].weight.tobytes() == src.actor_layers[k].weight.tobytes()
                    and final.actor_layers[k].bias.tobytes() == src.actor_layers[k].bias.tobytes())
            ok &= same
            details.append(f"{mode}:L{k} {'bit-identical' if same else 'CHANGED'}")
        # the trainable hidden block must actually have moved for the check to mean anything
        if mode == "l2":
            ok &= final.actor_layers[1].weight.tobytes() != src.actor_layers[1].weight.tobytes()
    elapsed = time.perf_counter() - start
    verdict(capsys, 2, ok and elapsed < 120, f"{', '.join(details)}; 2 x 50 iterations in {elapsed:.1f} s")


def test_c03_transfer_copy(capsys, short_source):
    src, _ = transfer.load_checkpoint(short_source)
    biped = envsim.load_robot("toy-biped")
    shapes = (net.MlpShape(biped.obs_dim, (512, 256, 128), biped.action_dim), net.MlpShape(biped.obs_dim))
    tgt = transfer.transfer_actor(src, *shapes, seed=1)
    hidden_equal = all(tgt.actor_layers[k].weight.tobytes() == src.actor_layers[k].weight.tobytes()
                       and tgt.actor_layers[k].bias.tobytes() == src.actor_layers[k].bias.tobytes() for k in (1, 2))
    fresh = net.init_params(*shapes, seed=1)
    io_reinit = all(tgt.actor_layers[k].weight.shape != src.actor_layers[k].weight.shape
                    and np.array_equal(tgt.actor_layers[k].weight, fresh.actor_layers[k].weight) for k in (0, 3))
    verdict(capsys, 3, hidden_equal and io_reinit,
            f"L1/L2 bit-equal: {hidden_equal}; input/output re-initialized: {io_reinit}")


def test_c04_parameter_accounting(capsys):
    p = net.init_params(net.MlpShape(45, (512, 256, 128), 12), net.MlpShape(45), 0)
    counts = {m: transfer.trainable_param_count(p, make_freeze_spec(m)) for m in ("none", "l2", "l1", "both")}
    dims = [45, 512, 256, 128, 12]
    blocks = [a * b + b for a, b in zip(dims[:-1], dims[1:])]
    closed = {"none": sum(blocks) + 12}
    closed.update(l1=closed["none"] - blocks[1], l2=closed["none"] - blocks[2],
                  both=closed["none"] - blocks[1] - blocks[2])
    expected = {"none": 189_336, "l2": 156_440, "l1": 58_008, "both": 25_112}
    verdict(capsys, 4, counts == expected == closed, f"counts {counts}")


def test_c05_gae_oracle(capsys):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 65))
        r, v = rng.standard_normal(T), rng.standard_normal(T)
        d = (rng.random(T) < 0.2).astype(float)
        boot = float(rng.standard_normal())
        gamma = float(rng.uniform(0.5, 1.0))
        nxt = np.append(v[1:], boot)
        td = r + gamma * nxt * (1 - d) - v
        returns = np.empty(T)
        acc = boot
        for t in reversed(range(T)):
            acc = r[t] + gamma * acc * (1 - d[t])
            returns[t] = acc
        a1, _ = ppo.compute_gae(r[None], v[None], d[None], np.array([boot]), gamma, 1.0)
        a0, _ = ppo.compute_gae(r[None], v[None], d[None], np.array([boot]), gamma, 0.0)
        worst = max(worst, float(np.max(np.abs(a1[0] - (returns - v)))), float(np.max(np.abs(a0[0] - td))))
    verdict(capsys, 5, worst <= 1e-10, f"100 sequences, max deviation {worst:.2e}")


def test_c06_surrogate_hand_cases(capsys):
    cases = [((1.0, 0.7, 0.2), 0.7), ((1.5, 1.0, 0.2), 1.2), ((0.5, -1.0, 0.2), -0.8)]
    got = [float(ppo.ppo_surrogate(np.array(r), np.array(a), e)) for (r, a, e), _ in cases]
    ok = all(g == want for g, (_, want) in zip(got, cases))
    verdict(capsys, 6, ok, f"got {got}")


def test_c07_reward_oracle(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    sums_ok = True
    for i in range(1000):
        cfg = envsim.load_robot("toy-quad" if i % 2 else "toy-biped")
        s_prev, s = random_state(rng, cfg), random_state(rng, cfg)
        a, a_prev, tau = rng.standard_normal((3, 1, cfg.J)) * 3
        total, terms = envsim.compute_reward(s, s_prev, a, a_prev, tau, cfg)
        oracle = reward_oracle(s, s_prev, a, a_prev, tau, cfg)
        sums_ok &= len(oracle) == 8 and set(terms) == set(oracle)
        for name, value in oracle.items():
            worst = max(worst, abs(terms[name][0][0] - value) / max(1.0, abs(value)))
            sums_ok &= terms[name][1][0] == cfg.reward_weights[name] * terms[name][0][0]
        sums_ok &= abs(total[0] - sum(w[0] for _, w in terms.values())) <= 1e-12
    verdict(capsys, 7, worst <= 1e-12 and sums_ok, f"1000 states, 8 terms, max deviation {worst:.2e}")


def test_c08_checkpoint_round_trip(capsys, short_source, tmp_path):
    p, meta = transfer.load_checkpoint(short_source)
    path = tmp_path / "copy.ckpt"
    transfer.save_checkpoint(p, meta, path)
    q, meta2 = transfer.load_checkpoint(path)
    exact = path.read_bytes() == short_source.read_bytes() and meta2 == meta and all(
        a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(p.arrays(), q.arrays()))
    data = path.read_bytes()
    raised = []
    for label, blob, err in (("truncated", data[:-100], CorruptCheckpointError),
                             ("corrupted magic", b"XXXX" + data[4:], CorruptCheckpointError),
                             ("version bump", data[:4] + struct.pack("<I", 2) + data[8:], CheckpointVersionError)):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob)
        try:
            transfer.load_checkpoint(bad)
            raised.append((label, False))
        except err:
            raised.append((label, True))
    ok = exact and all(r for _, r in raised)
    verdict(capsys, 8, ok, f"bit-exact: {exact}; errors: {raised}")


def test_c09_mmd(capsys):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((40, 6))
    y = rng.standard_normal((30, 6)) + 0.5
    same = transfer.mmd(x, x.copy())
    single = transfer.mmd(np.zeros((1, 2)), np.array([[1.0, 0.0]]), transfer.MmdConfig(bandwidth=1.0))
    closed = 2.0 - 2.0 * np.exp(-0.5)
    sym = transfer.mmd(x, y) == transfer.mmd(y, x)
    ok = abs(same) <= 1e-12 and abs(single - closed) <= 1e-12 and sym
    verdict(capsys, 9, ok, f"identical {same:.1e}, single-point error {abs(single - closed):.1e}, symmetric {sym}")


def test_c10_desk_transfer_benefit(capsys, desk_source, tmp_path):
    ckpt, src_seconds = desk_source
    out = tmp_path / "ablate"
    start = time.perf_counter()
    assert run("ablate", "--config", DESK, "--robot", "toy-biped", "--source", ckpt, "--seeds", 5,
               "--iterations", 200, "--out", out) == 0
    total = src_seconds + time.perf_counter() - start
    report = json.loads((out / "ablation_summary.json").read_text())
    table = {t["condition"]: t for t in report["conditions"]}
    scratch = table["scratch"]["median_iterations_to_threshold"]
    l2 = table["l2"]["median_iterations_to_threshold"]
    finals = {c: table[c]["median_final_reward"] for c in ("l2", "l1", "both")}
    ordering = finals["l2"] >= finals["l1"] >= finals["both"]
    with capsys.disabled():
        print("\n" + harness.format_table(report))
        print(f"soft: final reward l2 {finals['l2']:.4f} >= l1 {finals['l1']:.4f} >= both {finals['both']:.4f}: "
              f"{ordering}; runtime {total / 60:.1f} min (target < 15 min): {total < 900}")
    verdict(capsys, 10, l2 <= scratch,
            f"median iterations-to-threshold l2 {l2} vs scratch {scratch} (threshold {report['threshold']:.4f})")


def test_c11_tracking(capsys, desk_source, tmp_path):
    ckpt, _ = desk_source
    out = tmp_path / "eval"
    assert run("eval", "--robot", "toy-quad", "--checkpoint", ckpt, "--command", 0.5, 0, 0, "--out", out) == 0
    rows = read_rows(out / "tracking.csv")
    vx = np.array([float(r["vx"]) for r in rows])
    steady = vx[-500:]
    err = float(np.mean(np.abs(steady - 0.5)))
    verdict(capsys, 11, len(rows) >= 500 and err <= 0.15,
            f"{len(rows)} steps, mean |vx - 0.5| over the last 500 = {err:.4f}")


def test_c12_reproducibility(capsys, tmp_path):
    blobs = []
    for name in ("a", "b"):
        assert run("train", "--config", DESK, "--robot", "toy-biped", "--seed", 3, "--iterations", 10,
                   "--out", tmp_path / name, "--deterministic") == 0
        blobs.append((tmp_path / name / "metrics.csv").read_bytes())
    verdict(capsys, 12, blobs[0] == blobs[1] and len(blobs[0]) > 0,
            f"metrics.csv byte-identical across two runs: {blobs[0] == blobs[1]}")
