"""Acceptance criteria 1 to 10.

Each test records one PASS/FAIL line that is printed in the terminal
summary and also printed directly. The long training runs behind
criteria 6, 7 and 8 are cached under ``acceptance_runs/<key>/`` where the
key hashes the package sources and the run configuration, so a cached CSV
is reused only when it was produced by the same code and settings. Set
``D2RL_ACCEPTANCE_DIR`` to relocate the cache.
"""
import hashlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_RESULTS
from d2rl import env as wenv
from d2rl.agent import StateExplorationConfig, StateExplorer
from d2rl.config import dump_config, load_config
from d2rl.gdm import (NoisePredictor, forward_jump, forward_step, make_schedule,
                      mode1_policy_grad_step, mode2_train_and_generate)
from d2rl.harness.ablation import ARMS, ablation_checks, run_ablation
from d2rl.harness.experiment import run_experiment
from d2rl.harness.metrics import coefficient_of_variation, read_metrics
from d2rl.numerics import Mlp
from d2rl.rewards import RewardShaper
from d2rl.trainer import Trainer

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src" / "d2rl"
SEEDS = (0, 1, 2)


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((number, bool(passed), detail))
    print(f"\ncriterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def cache_dir(tag: str, cfg) -> Path:
    h = hashlib.sha256()
    for path in sorted(SRC.rglob("*.py")):
        h.update(path.relative_to(SRC).as_posix().encode())
        h.update(path.read_bytes())
    h.update(dump_config(cfg).encode())
    base = Path(os.environ.get("D2RL_ACCEPTANCE_DIR", ROOT / "acceptance_runs"))
    return base / f"{tag}-{h.hexdigest()[:12]}"


# -- 1. numerics -----------------------------------------------------------

def _fd_probe(params, grads, objective, rng, n_probes=100, h=1e-6):
    """Worst relative error over random central-difference probes.

    The denominator is floored at 1e-6 so gradients that are zero up to
    rounding do not produce spurious ratios."""
    worst = 0.0
    sizes = np.array([p.size for p in params], dtype=float)
    for _ in range(n_probes):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        idx = tuple(int(rng.integers(d)) for d in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        up = objective()
        params[k][idx] = old - h
        dn = objective()
        params[k][idx] = old
        fd = (up - dn) / (2 * h)
        an = grads[k][idx]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def _mlp_case(net: Mlp, x, rng):
    c = rng.standard_normal((x.shape[0], net.out_width))
    net.zero_grad()
    net.forward(x, record=True)
    net.backward(c)
    grads = [g.copy() for g in net.gradients()]
    return _fd_probe(net.parameters(), grads, lambda: float(np.sum(c * net(x))), rng)


def test_criterion_1_numerics_fd():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    cfg = load_config(profile="tiny")
    env_cfg = cfg.env_config()
    sw, aw = wenv.state_width(env_cfg), wenv.action_width(env_cfg)
    hw = cfg.hidden_width
    worst = {}
    # plain networks: MLP actor, critics, all activations
    worst["mlp_actor"] = _mlp_case(Mlp([sw, hw, hw, aw], rng), rng.standard_normal((8, sw)), rng)
    worst["critic"] = _mlp_case(Mlp([sw + aw, hw, hw, 1], rng),
                                rng.standard_normal((8, sw + aw)), rng)
    worst["tanh_mlp"] = _mlp_case(Mlp([5, 16, 3], rng, activation="tanh"),
                                  rng.standard_normal((8, 5)), rng)
    worst["linear_mlp"] = _mlp_case(Mlp([5, 3], rng, activation="linear"),
                                    rng.standard_normal((8, 5)), rng)
    # noise predictors: action (conditioned on S), state (unconditional),
    # reward (conditioned on S, A and the rate)
    for name, (width, cond) in {"aenpnn": (aw, sw), "senpnn": (sw, 0),
                                "renpnn": (1, sw + aw + 1)}.items():
        net = NoisePredictor(width, cond, [hw, hw], rng)
        x = rng.standard_normal((8, width))
        cvec = rng.standard_normal((8, cond)) if cond else None
        p = rng.integers(1, 7, size=8)
        weights = rng.standard_normal((8, width))
        net.net.zero_grad()
        net(x, p, cvec, record=True)
        net.backward(weights)
        grads = [g.copy() for g in net.net.gradients()]
        worst[name] = _fd_probe(net.net.parameters(), grads,
                                lambda: float(np.sum(weights * net(x, p, cvec))), rng)
    # reward shaper (two parallel networks)
    sh = RewardShaper(sw + aw + 1, [hw, hw], rng)
    sh.residual.weights[-1][...] = rng.standard_normal(sh.residual.weights[-1].shape)
    z = rng.standard_normal((8, sw + aw + 1))
    c = rng.standard_normal(8)
    sh.zero_grad()
    sh(z, record=True)
    sh.backward(c[:, None])
    params = sh.linear.parameters() + sh.residual.parameters()
    grads = [g.copy() for g in sh.linear.gradients() + sh.residual.gradients()]
    worst["shaper"] = _fd_probe(params, grads, lambda: float(c @ sh(z)[:, 0]), rng)

    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(1, ok, f"max rel err per network ({detail}); {elapsed:.1f}s")
    assert ok


# -- 2. environment oracle ---------------------------------------------------

def _oracle_sum_rate(cfg, dl_pos, ul_pos, action):
    sigma2 = oracles.noise_watts(cfg.noise_dbm_hz)

    def channel(pos, n):
        d = math.sqrt(pos[0] ** 2 + pos[1] ** 2 + cfg.bs_height ** 2)
        th = math.atan2(pos[1], pos[0])
        a = oracles.pathloss(d, cfg.rho0, cfg.pathloss_exp, cfg.gain_model == "power")
        return [a * oracles.steering_entry(th, m, n) for m in range(n)]

    g = [channel(p, cfg.n_tx) for p in dl_pos]
    h = [channel(p, cfg.n_rx) for p in ul_pos]
    G = oracles.clutter([math.radians(a) for a in cfg.interferer_angles_deg],
                        100 * sigma2, cfg.n_rx, cfg.n_tx)
    dl = oracles.dl_snr(g, oracles.as_lists(action.v), sigma2)
    ul = oracles.ul_sinr(h, oracles.as_lists(action.w), list(action.p),
                         oracles.as_lists(action.v), G, sigma2)
    return oracles.sum_rate(dl, ul)


def test_criterion_2_environment_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        n_t, n_r = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        cfg = wenv.EnvConfig(n_dl=int(rng.integers(1, 3)), n_ul=int(rng.integers(1, 3)),
                             n_tx=n_t, n_rx=n_r)
        st = wenv.sample_channels(cfg, rng=rng)
        raw = rng.standard_normal(wenv.action_width(cfg)) * rng.uniform(0.1, 3)
        action = wenv.project_action(raw, cfg)
        got = wenv.sum_rate(st, action, cfg).sum_rate
        want = _oracle_sum_rate(cfg, st.dl_pos.tolist(), st.ul_pos.tolist(), action)
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 60
    record(2, ok, f"1000 instances, max |C - oracle| = {worst:.1e}; {elapsed:.1f}s")
    assert ok


# -- 3. diffusion marginals --------------------------------------------------

def test_criterion_3_marginal_consistency():
    t0 = time.perf_counter()
    sched = make_schedule()
    n = 100_000
    rng = np.random.default_rng(303)
    # a shifted, non-Gaussian start distribution
    x0 = 2.0 + rng.exponential(0.5, size=n)
    iterated = x0.copy()
    for p in range(1, sched.n_steps + 1):
        iterated = forward_step(iterated, p, sched, rng)
    jumped, _ = forward_jump(2.0 + rng.exponential(0.5, size=n), sched.n_steps, sched, rng)
    rel = {
        "mean": abs(jumped.mean() / iterated.mean() - 1),
        "second moment": abs(np.mean(jumped ** 2) / np.mean(iterated ** 2) - 1),
        "variance": abs(jumped.var() / iterated.var() - 1),
    }
    elapsed = time.perf_counter() - t0
    ok = all(v < 0.02 for v in rel.values()) and elapsed < 120
    record(3, ok, ", ".join(f"{k} rel diff {v:.2%}" for k, v in rel.items()) + f"; {elapsed:.1f}s")
    assert ok


# -- 4. Mode II fit ----------------------------------------------------------

def test_criterion_4_mode2_gaussian_fit():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    mean = np.array([1.0, -2.0])
    cov = np.array([[1.0, 0.6], [0.6, 0.8]])
    data = rng.multivariate_normal(mean, cov, size=4000)
    net = NoisePredictor(2, 0, [64, 64], rng)
    samples, _ = mode2_train_and_generate(data, None, net, make_schedule(), rng, n_iters=3000,
                                          batch_size=256, learning_rate=1e-3, n_generate=20_000)
    d_mean = np.linalg.norm(samples.mean(axis=0) - data.mean(axis=0)) / np.linalg.norm(data.mean(axis=0))
    c_data = np.cov(data.T)
    d_cov = np.linalg.norm(np.cov(samples.T) - c_data) / np.linalg.norm(c_data)
    elapsed = time.perf_counter() - t0
    ok = d_mean < 0.15 and d_cov < 0.15 and elapsed < 300
    record(4, ok, f"mean rel err {d_mean:.1%}, covariance rel err (Frobenius) {d_cov:.1%}; "
                  f"{elapsed:.1f}s")
    assert ok


# -- 5. Mode I sanity --------------------------------------------------------

def test_criterion_5_mode1_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    sched = make_schedule()
    # 2-D samples: with six steps the noise added at step 2 leaves a floor of
    # roughly 0.04 per dimension that the predictor removes only slowly
    net = NoisePredictor(2, 0, [64, 64], rng)

    def critic(x):
        return -np.sum(x ** 2, axis=1), -2.0 * x

    norms, windows = [], []
    reached = False
    for _ in range(5000):
        loss, _, _ = mode1_policy_grad_step(None, net, sched, critic, rng, 1e-3, n=64)
        norms.append(loss)  # loss = -E[Q] = E||X0||^2
        if len(norms) % 50 == 0:
            windows.append(float(np.mean(norms[-50:])))
            if windows[-1] < 0.1:
                reached = True
                break
    decreasing = all(b < a for a, b in zip(windows, windows[1:]))
    elapsed = time.perf_counter() - t0
    ok = reached and decreasing and elapsed < 300
    record(5, ok, f"{len(norms)} updates, window means {windows[0]:.3f} -> {windows[-1]:.4f}, "
                  f"strictly decreasing={decreasing}; {elapsed:.1f}s")
    assert ok


# -- 6. feasibility over a full desk-scale run -------------------------------

def test_criterion_6_feasibility_desk_run():
    cfg = load_config(profile="desk", seed=0)
    out = cache_dir("desk", cfg)
    csv_path = out / "desk.csv"
    if not csv_path.exists():
        run_experiment(cfg, out, name="desk", checkpoint=False)
    run = read_metrics(csv_path)
    n_actions = len(run) * cfg.steps_per_epoch
    infeasible = int(run["infeasible_actions"].sum())
    worst = float(run["max_residual"].max())
    ok = not run.failed and len(run) == cfg.epochs and infeasible == 0 and worst < 1e-9
    record(6, ok, f"{len(run)} epochs, {n_actions} executed actions, {infeasible} infeasible, "
                  f"max residual {worst:.1e}")
    assert ok


# -- 7 and 8. ablation at the tiny profile -----------------------------------

@pytest.fixture(scope="module")
def ablation():
    cfg = load_config(profile="tiny")
    out = cache_dir("ablation", cfg)
    return cfg, out, run_ablation(cfg, SEEDS, out, arms=ARMS)


def test_criterion_7_ablation_ordering(ablation):
    _, _, res = ablation
    checks = ablation_checks(res, min_seeds=2)
    table = "; ".join(f"{arm}={[res.convergence[arm][s] for s in SEEDS]}" for arm in ARMS)
    parts = ", ".join(f"{name}:{'ok' if ok else 'no'}{per}" for name, (ok, per) in checks.items())
    ok = all(ok for ok, _ in checks.values())
    record(7, ok, f"{parts} | convergence epochs {table}")
    assert ok


def test_criterion_8_raw_plateau_stability(ablation):
    cfg, out, _ = ablation
    covs = []
    for s in SEEDS:
        run = read_metrics(out / f"raw__seed{s}.csv")
        covs.append(coefficient_of_variation(run["sum_rate"], cfg.ma_window))
    ok = all(c < 0.10 for c in covs)
    record(8, ok, "CoV of the trailing-mean sum rate over the last 20% per seed: "
                  + ", ".join(f"{c:.1%}" for c in covs))
    assert ok


# -- 9. state-substitution controller ----------------------------------------

def test_criterion_9_controller():
    sw = wenv.state_width(load_config(profile="tiny").env_config())
    sched = make_schedule()
    rng = np.random.default_rng(909)
    ex = StateExplorer(StateExplorationConfig(eta=0.01, max_prob=0.6, threshold=5e-4),
                       NoisePredictor(sw, 0, [8], rng), sched)
    ex.generate = lambda s0, r: s0 + 1.0
    s0 = np.zeros(sw)
    losses = np.r_[np.full(300, 5e-3), np.geomspace(5e-3, 1e-5, 400), np.full(300, 1e-5)]
    losses = losses * np.exp(0.3 * rng.standard_normal(len(losses)))
    chis, emas = [], []
    violations = 0
    for loss in losses:
        ex.observe_loss(loss)
        ema = ex.ema_loss
        before = ex.cfg.chi
        ex.substitute(s0, rng)
        after = ex.cfg.chi
        expected = min(before + 0.01, 0.6) if ema < 5e-4 else before
        violations += abs(after - expected) > 1e-12
        chis.append(after)
        emas.append(ema)
    chis = np.array(chis)
    nondecreasing = bool(np.all(np.diff(chis) >= 0))
    capped = bool(chis.max() <= 0.6 and chis[-1] == pytest.approx(0.6))
    # substitution frequency at fixed chi
    freq_err = 0.0
    for chi in (0.1, 0.5, 0.9):
        fx = StateExplorer(StateExplorationConfig(eta=0.0, max_prob=1.0, chi=chi),
                           NoisePredictor(sw, 0, [8], rng), sched)
        fx.generate = lambda s, r: s
        freq = np.mean([fx.substitute(s0, rng)[1] for _ in range(10_000)])
        freq_err = max(freq_err, abs(freq - chi))
    # the same invariants inside a real training run
    tr = Trainer(load_config(profile="tiny", epochs=20, steps_per_epoch=16, state_exploration=True,
                             se_threshold=1e9, se_eta=0.01, se_max_prob=0.5, hidden_width=16))
    for _ in range(20):
        tr.train_epoch()
    hist = np.array(tr.explorer.chi_history)
    run_ok = bool(np.all(np.diff(hist) >= 0) and hist.max() <= 0.5)
    ok = nondecreasing and capped and violations == 0 and freq_err <= 0.02 and run_ok
    record(9, ok, f"nondecreasing={nondecreasing}, capped at M={capped}, gate violations={violations}, "
                  f"max |freq - chi| at 1e4 draws={freq_err:.4f}, trainer run ok={run_ok}")
    assert ok


# -- 10. reproducibility -----------------------------------------------------

def test_criterion_10_byte_identical(tmp_path):
    cfg = load_config(profile="tiny", epochs=12, reward_variant="designed_gdm",
                      state_exploration=True, se_threshold=1e9, seed=11)
    a = run_experiment(cfg, tmp_path / "a", name="run")
    b = run_experiment(cfg, tmp_path / "b", name="run")
    same = a.csv_path.read_bytes() == b.csv_path.read_bytes()
    record(10, same, f"two runs of seed 11 ({len(a.csv_path.read_bytes())} bytes each) "
                     f"byte-identical={same}")
    assert same
