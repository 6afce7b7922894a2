import numpy as np
import pytest

from d2rl import env as wenv
from d2rl.agent import (AgentConfig, CriticPair, D2RLAgent, ReplayBuffer,
                        StateExplorationConfig, StateExplorer, Transition, critic_target,
                        min_q_with_grad, soft_update)
from d2rl.config import load_config
from d2rl.gdm import NoisePredictor, make_schedule, mode1_policy_grad_step, sample_chain
from d2rl.numerics import Mlp
from d2rl.trainer import Trainer

ENV = wenv.EnvConfig(n_dl=2, n_ul=2, n_tx=3, n_rx=3)


def tiny_agent(gdm=True, seed=0, **kw):
    cfg = AgentConfig(hidden_width=16, actor_hidden_layers=2, batch_size=8, buffer_size=64,
                      gdm_actor=gdm, **kw)
    return D2RLAgent(cfg, ENV, np.random.default_rng(seed))


def constant_net(width, value, rng):
    net = Mlp([width, 4, 1], rng)
    net.weights[-1][...] = 0.0
    net.biases[-1][...] = value
    return net


def fake_batch(agent, n, rng, done=None):
    return {
        "state": rng.standard_normal((n, agent.state_width)),
        "action": rng.uniform(0, 1, (n, agent.action_width)),
        "next_state": rng.standard_normal((n, agent.state_width)),
        "reward": rng.standard_normal(n),
        "done": np.zeros(n, bool) if done is None else done,
        "sum_rate": rng.uniform(0, 2, n),
        "bound": rng.uniform(2, 4, n),
    }


class TestReplayBuffer:
    def tr(self, i):
        return Transition(np.full(2, i, float), np.full(3, i, float), np.full(2, i + 1, float),
                          float(i))

    def test_fifo_overwrite(self):
        buf = ReplayBuffer(5, 2, 3)
        for i in range(8):
            buf.add(self.tr(i))
        assert len(buf) == 5
        present = sorted(buf.rewards.tolist())
        assert present == [3.0, 4.0, 5.0, 6.0, 7.0]
        assert buf.rewards[buf.ordered_indices()].tolist() == [3.0, 4.0, 5.0, 6.0, 7.0]

    def test_sample_without_replacement(self):
        buf = ReplayBuffer(10, 2, 3)
        for i in range(10):
            buf.add(self.tr(i))
        b = buf.sample(10, np.random.default_rng(0))
        assert sorted(b["reward"].tolist()) == list(map(float, range(10)))
        np.testing.assert_array_equal(b["state"][:, 0], b["reward"])

    def test_errors(self):
        buf = ReplayBuffer(3, 2, 3)
        with pytest.raises(ValueError):
            buf.sample(1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            buf.add(Transition(np.zeros(2), np.zeros(3), np.zeros(2), float("nan")))
        with pytest.raises(ValueError):
            ReplayBuffer(0, 2, 3)


class TestSoftUpdate:
    def nets(self):
        rng = np.random.default_rng(1)
        return Mlp([3, 5, 2], rng), Mlp([3, 5, 2], rng)

    def test_tau_one(self):
        a, b = self.nets()
        soft_update(a, b, 1.0)
        for p, q in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_tau_zero(self):
        a, b = self.nets()
        before = [q.copy() for q in b.parameters()]
        soft_update(a, b, 0.0)
        for p, q in zip(before, b.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_elementwise(self):
        a, b = self.nets()
        before = [q.copy() for q in b.parameters()]
        soft_update(a, b, 0.005)
        for p, q0, q in zip(a.parameters(), before, b.parameters()):
            for idx in np.ndindex(p.shape):
                assert abs(q[idx] - (0.005 * p[idx] + 0.995 * q0[idx])) <= 1e-15

    def test_shape_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            soft_update(Mlp([3, 5, 2], rng), Mlp([3, 4, 2], rng), 0.1)


class TestCriticTarget:
    def test_gamma_zero(self):
        rng = np.random.default_rng(0)
        agent = tiny_agent()
        batch = fake_batch(agent, 6, rng)
        y = critic_target(batch, agent.critics.q1_target, agent.critics.q2_target,
                          rng.uniform(size=(6, agent.action_width)), 0.0)
        np.testing.assert_array_equal(y, batch["reward"])

    def test_min_rule(self):
        rng = np.random.default_rng(0)
        agent = tiny_agent()
        w = agent.state_width + agent.action_width
        batch = fake_batch(agent, 4, rng)
        batch["reward"][:] = 1.0
        feats = rng.uniform(size=(4, agent.action_width))
        y = critic_target(batch, constant_net(w, 2.0, rng), constant_net(w, 5.0, rng), feats, 1.0)
        np.testing.assert_allclose(y, 3.0, atol=1e-15)
        # and the other way round
        y = critic_target(batch, constant_net(w, 5.0, rng), constant_net(w, 2.0, rng), feats, 1.0)
        np.testing.assert_allclose(y, 3.0, atol=1e-15)

    def test_literal_oracle(self):
        rng = np.random.default_rng(3)
        agent = tiny_agent()
        done = np.array([False, True, False, False, True])
        batch = fake_batch(agent, 5, rng, done=done)
        feats = rng.uniform(size=(5, agent.action_width))
        q1, q2 = agent.critics.targets()
        y = critic_target(batch, q1, q2, feats, 0.7)
        for j in range(5):
            x = np.concatenate([batch["next_state"][j], feats[j]])[None]
            m = min(q1(x)[0, 0], q2(x)[0, 0])
            want = batch["reward"][j] + (0.0 if done[j] else 0.7 * m)
            assert abs(y[j] - want) < 1e-12

    def test_agent_targets_use_minimum(self):
        rng = np.random.default_rng(4)
        agent = tiny_agent()
        batch = fake_batch(agent, 8, rng)
        y = agent.critic_targets(batch, np.random.default_rng(5))
        raw = agent.policy_raw(batch["next_state"], np.random.default_rng(5), target=True)
        feats, _ = wenv.action_features(raw, ENV)
        x = np.concatenate([batch["next_state"], feats], axis=1)
        q = np.minimum(agent.critics.q1_target(x)[:, 0], agent.critics.q2_target(x)[:, 0])
        np.testing.assert_allclose(y, batch["reward"] + q, rtol=1e-12)

    def test_min_q_with_grad_picks_smaller(self):
        rng = np.random.default_rng(6)
        agent = tiny_agent()
        s = rng.standard_normal((20, agent.state_width))
        f = rng.uniform(size=(20, agent.action_width))
        q, g, pick = min_q_with_grad(agent.critics.q1, agent.critics.q2, s, f)
        x = np.concatenate([s, f], axis=1)
        a, b = agent.critics.q1(x)[:, 0], agent.critics.q2(x)[:, 0]
        np.testing.assert_array_equal(q, np.minimum(a, b))
        np.testing.assert_array_equal(pick, a <= b)
        # action gradient matches finite differences of the min
        h = 1e-6
        for j in range(agent.action_width):
            fp, fm = f.copy(), f.copy()
            fp[:, j] += h
            fm[:, j] -= h
            up = np.minimum(agent.critics.q1(np.concatenate([s, fp], 1))[:, 0],
                            agent.critics.q2(np.concatenate([s, fp], 1))[:, 0])
            dn = np.minimum(agent.critics.q1(np.concatenate([s, fm], 1))[:, 0],
                            agent.critics.q2(np.concatenate([s, fm], 1))[:, 0])
            np.testing.assert_allclose(g[:, j], (up - dn) / (2 * h), atol=1e-6)


class TestCriticUpdate:
    def test_targets_equal_predictions(self):
        rng = np.random.default_rng(0)
        agent = tiny_agent(weight_decay=0.0)
        batch = fake_batch(agent, 8, rng)
        x = np.concatenate([batch["state"], batch["action"]], axis=1)
        before = [p.copy() for p in agent.critics.q1.parameters()]
        losses, reports = agent.critic_update(batch, agent.critics.q1(x)[:, 0])
        assert losses[0] == 0.0
        assert reports[0].weight_total == 0.0 and reports[0].bias_total == 0.0
        for p, q in zip(before, agent.critics.q1.parameters()):
            np.testing.assert_array_equal(p, q)

    def test_hand_stepped_adam(self):
        # linear scalar critic q = a * x + b on a single sample
        agent = tiny_agent(weight_decay=0.0, lr_critic=0.1)
        rng = np.random.default_rng(1)
        batch = fake_batch(agent, 1, rng)
        w = agent.state_width + agent.action_width
        for name in ("q1", "q2"):
            setattr(agent.critics, name, Mlp([w, 1], rng, activation="linear"))
        x = np.concatenate([batch["state"], batch["action"]], axis=1)[0]
        q = agent.critics.q1
        W0, b0 = q.weights[0].copy(), q.biases[0].copy()
        err = float(x @ W0[:, 0] + b0[0]) - 2.0
        agent.critic_update(batch, np.array([2.0]))
        gW = 2 * err * x
        gb = 2 * err
        # first Adam step moves each parameter by lr * g / (|g| + eps)
        np.testing.assert_allclose(q.weights[0][:, 0], W0[:, 0] - 0.1 * gW / (np.abs(gW) + 1e-8),
                                   rtol=1e-12, atol=1e-15)
        assert abs(q.biases[0][0] - (b0[0] - 0.1 * gb / (abs(gb) + 1e-8))) < 1e-12

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        agent = tiny_agent()
        batch = fake_batch(agent, 6, rng)
        y = rng.standard_normal(6)
        x = np.concatenate([batch["state"], batch["action"]], axis=1)
        q = agent.critics.q1
        q.zero_grad()
        pred = q.forward(x, record=True)[:, 0]
        q.backward((2 * (pred - y) / 6)[:, None])
        h = 1e-6
        for k, p in enumerate(q.parameters()):
            for idx in list(np.ndindex(p.shape))[:8]:
                old = p[idx]
                p[idx] = old + h
                up = np.mean((q(x)[:, 0] - y) ** 2)
                p[idx] = old - h
                dn = np.mean((q(x)[:, 0] - y) ** 2)
                p[idx] = old
                fd = (up - dn) / (2 * h)
                an = q.gradients()[k][idx]
                assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-7)


class TestActorUpdate:
    @pytest.mark.parametrize("gdm", [True, False])
    def test_constant_critics_zero_gradient(self, gdm):
        agent = tiny_agent(gdm=gdm)
        rng = np.random.default_rng(0)
        w = agent.state_width + agent.action_width
        agent.critics.q1 = constant_net(w, 1.0, rng)
        agent.critics.q2 = constant_net(w, 3.0, rng)
        _, report = agent.actor_update(fake_batch(agent, 8, rng), rng)
        assert report.weight_total + report.bias_total < 1e-8

    def test_synthetic_critic_drives_norm_down(self):
        agent = tiny_agent(lr_actor=3e-3, weight_decay=0.0)
        agent._critic_hook = lambda states: (lambda raw: (-np.sum(raw ** 2, axis=1), -2 * raw))
        rng = np.random.default_rng(1)
        states = rng.standard_normal((32, agent.state_width))
        norms = []
        for _ in range(100):
            agent.actor_update({"state": states}, rng)
            norms.append(np.mean(np.sum(agent.policy_raw(states, rng) ** 2, axis=1)))
        assert np.polyfit(np.arange(100), norms, 1)[0] < 0
        assert np.mean(norms[-20:]) < 0.8 * np.mean(norms[:20])

    def test_gradient_finite_differences_two_steps(self):
        agent = tiny_agent(diffusion_steps=2)
        rng = np.random.default_rng(2)
        states = rng.standard_normal((4, agent.state_width))
        hook = agent._critic_hook(states)
        mode1_policy_grad_step(states, agent.actor, agent.sched, hook, np.random.default_rng(7),
                               0.0, apply=False)
        net = agent.actor.net
        grads = [g.copy() for g in net.gradients()]

        def loss():
            raw = sample_chain(states, agent.actor, agent.sched, np.random.default_rng(7))
            return -float(np.mean(hook(raw)[0]))

        h = 1e-6
        for k, p in enumerate(net.parameters()):
            for idx in list(np.ndindex(p.shape))[:4]:
                old = p[idx]
                p[idx] = old + h
                up = loss()
                p[idx] = old - h
                dn = loss()
                p[idx] = old
                fd = (up - dn) / (2 * h)
                assert abs(fd - grads[k][idx]) <= 1e-3 * max(abs(fd), abs(grads[k][idx]), 1e-6)


class TestSelectAction:
    def test_pure_exploration_ignores_state(self):
        agent = tiny_agent(epsilon=1.0)
        rng = np.random.default_rng(0)
        states = rng.standard_normal((2000, agent.state_width)) * 3
        raws = np.array([agent.select_action(s, rng)[0] for s in states])
        corr = np.corrcoef(states[:, 0], raws[:, 0])[0, 1]
        assert abs(corr) < 4 / np.sqrt(len(states))
        assert raws.min() >= -1 and raws.max() <= 1

    @pytest.mark.parametrize("gdm", [True, False])
    def test_greedy_deterministic(self, gdm):
        agent = tiny_agent(gdm=gdm, epsilon=0.0)
        s = np.random.default_rng(1).standard_normal(agent.state_width)
        a = agent.select_action(s, np.random.default_rng(2))[0]
        b = agent.select_action(s, np.random.default_rng(2))[0]
        np.testing.assert_array_equal(a, b)

    def test_all_actions_feasible(self):
        agent = tiny_agent(epsilon=0.1)
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            s = rng.standard_normal(agent.state_width) * 5
            _, action, feats = agent.select_action(s, rng)
            assert action.is_feasible(ENV)
            assert feats.shape == (agent.action_width,)


class TestStateExplorer:
    def explorer(self, **kw):
        sw = wenv.state_width(ENV)
        net = NoisePredictor(sw, 0, [8], np.random.default_rng(0))
        return StateExplorer(StateExplorationConfig(**kw), net, make_schedule())

    def test_chi_zero_keeps_state(self):
        ex = self.explorer(eta=0.0)
        s0 = np.ones(wenv.state_width(ENV))
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, sub = ex.substitute(s0, rng)
            assert not sub and s is s0

    def test_chi_one_always_substitutes(self):
        ex = self.explorer(max_prob=1.0, chi=1.0)
        s0 = np.ones(wenv.state_width(ENV))
        rng = np.random.default_rng(0)
        for _ in range(200):
            s, sub = ex.substitute(s0, rng)
            assert sub and not np.array_equal(s, s0)

    def test_bernoulli_frequency(self):
        ex = self.explorer(chi=0.5, eta=0.0)
        ex.generate = lambda s0, rng: s0 + 1.0
        rng = np.random.default_rng(1)
        s0 = np.zeros(wenv.state_width(ENV))
        freq = np.mean([ex.substitute(s0, rng)[1] for _ in range(10_000)])
        assert abs(freq - 0.5) <= 0.02

    def test_controller(self):
        ex = self.explorer(eta=0.3, max_prob=0.8, threshold=5e-4, ema_decay=0.0)
        assert ex.cfg.chi == 0.0
        ex.observe_loss(1e-3)
        assert ex.update_chi() == 0.0
        ex.observe_loss(1e-4)
        assert ex.update_chi() == pytest.approx(0.3)
        ex.observe_loss(5e-4)  # not strictly below the threshold
        assert ex.update_chi() == pytest.approx(0.3)
        for _ in range(5):
            ex.observe_loss(0.0)
            ex.update_chi()
        assert ex.cfg.chi == 0.8
        assert np.all(np.diff(ex.chi_history) >= 0)

    def test_ema(self):
        ex = self.explorer()
        ex.observe_loss(1.0)
        assert ex.ema_loss == 1.0
        ex.observe_loss(0.0)
        assert ex.ema_loss == pytest.approx(0.99)

    @pytest.mark.parametrize("kw", [{"max_prob": 1.5}, {"eta": -0.1}, {"chi": 0.95}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            StateExplorationConfig(**kw)


def tiny_trainer(**kw):
    base = dict(epochs=3, steps_per_epoch=8, hidden_width=16, batch_size=16, updates_per_epoch=1,
                actor_hidden_layers=2, renpnn_hidden_layers=2, senpnn_hidden_layers=2)
    base.update(kw)
    return Trainer(load_config(profile="tiny", **base))


class TestTrainer:
    def test_warmup_then_updates(self):
        tr = tiny_trainer()
        r1 = tr.train_epoch()
        assert r1.warmup and np.isnan(r1.critic_loss)
        r2 = tr.train_epoch()
        assert not r2.warmup and np.isfinite(r2.critic_loss)
        assert r2.actor_grad.weight_total > 0

    def test_buffer_count(self):
        tr = tiny_trainer(buffer_size=20)
        counts = []
        for _ in range(4):
            tr.train_epoch()
            counts.append(len(tr.agent.buffer))
        assert counts == [min(8 * e, 20) for e in range(1, 5)]

    def test_deterministic(self):
        a = [tiny_trainer(seed=3).train_epoch() for _ in range(1)]
        recs = []
        for _ in range(2):
            tr = tiny_trainer(seed=3, state_exploration=True, reward_variant="designed_gdm")
            recs.append([(r.sum_rate, r.reward, r.critic_loss, r.actor_grad.weight)
                         for r in (tr.train_epoch() for _ in range(3))])
        assert recs[0] == recs[1]
        assert a[0].epoch == 0

    def test_stored_actions_feasible(self):
        tr = tiny_trainer(epsilon=0.5)
        for _ in range(3):
            rec = tr.train_epoch()
            assert rec.infeasible_actions == 0 and rec.max_residual <= 1e-9
        feats = tr.agent.buffer.actions[:len(tr.agent.buffer)]
        nv = 2 * ENV.n_dl * ENV.n_tx
        assert np.all(np.sum(feats[:, :nv] ** 2, axis=1) <= 1 + 1e-12)
        assert np.all((feats[:, -ENV.n_ul:] >= 0) & (feats[:, -ENV.n_ul:] <= 1))

    def test_episodes_span_epochs(self):
        tr = tiny_trainer(steps_per_epoch=5, episode_length=4)
        tr.train_epoch()
        assert tr.env.t == 1  # 4 steps, reset, 1 step
        dones = tr.agent.buffer.dones[:5]
        assert dones.tolist() == [False, False, False, True, False]

    def test_chi_nondecreasing(self):
        tr = tiny_trainer(state_exploration=True, se_threshold=1e9, se_eta=0.1, se_max_prob=0.5,
                          epochs=8)
        chis = [tr.train_epoch().chi for _ in range(8)]
        assert np.all(np.diff(chis) >= 0) and max(chis) == 0.5
        assert all(c <= 0.5 for c in tr.explorer.chi_history)
