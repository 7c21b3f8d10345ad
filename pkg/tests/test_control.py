import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from reccontrol.control import (
    ACT_DIM, MAGIC, Adam, NoiseState, PolicyParams, ReplayBuffer, TrainConfig, Trainer, Transition,
    act, action_limits, init_mlp, init_policy, load_checkpoint, mlp_backward, mlp_forward,
    rbc_act, replay_sample, reward, sample_indices, save_checkpoint, soft_update, train_step,
    update_on_batch,
)
from reccontrol.errors import InsufficientData, ShapeMismatch
from reccontrol.telemetry import OBS_DIM, OBS_FIELDS, AlignedFrame, Cell

from builders import battery, building, charger


def small_policy(n=2, obs_dim=OBS_DIM, hidden=8, seed=0):
    lo = np.tile([-1.0, 0.0], (n, 1))
    hi = np.ones((n, ACT_DIM))
    return init_policy([f"B{i + 1}" for i in range(n)], obs_dim, np.ones(obs_dim), lo, hi, seed,
                       hidden)


def random_batch(policy, size, seed=0):
    rng = np.random.default_rng(seed)
    n, od = policy.n_agents, policy.obs_dim
    buf = ReplayBuffer(size, n, od, ACT_DIM, policy.action_low, policy.action_high)
    for _ in range(size):
        buf.add(Transition(rng.normal(size=(n, od)), rng.uniform(-1, 1, (n, ACT_DIM)),
                           rng.normal(size=n), rng.normal(size=(n, od)), bool(rng.random() < 0.1)))
    return buf


def fd_check(params, x, tanh_out, rng, coords=100, eps=1e-6):
    """Largest relative error between backprop and central differences.

    The differences are taken in extended precision so round-off in the
    oracle stays far below the tolerance even for tiny gradients.
    """
    y, cache = mlp_forward(params, x, tanh_out)
    gy = rng.normal(size=y.shape)
    grads, gx = mlp_backward(params, cache, gy, tanh_out)
    wide = [p.astype(np.longdouble) for p in params]
    wx = x.astype(np.longdouble)
    wgy = gy.astype(np.longdouble)
    targets = [(p, g) for p, g in zip(wide, grads)] + [(wx, gx)]
    sizes = np.array([p.size for p, _ in targets], dtype=float)
    worst = 0.0
    for _ in range(coords):
        k = rng.choice(len(targets), p=sizes / sizes.sum())
        p, g = targets[k]
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p[idx]
        p[idx] = old + eps
        up = np.sum(wgy * mlp_forward(wide, wx, tanh_out)[0])
        p[idx] = old - eps
        down = np.sum(wgy * mlp_forward(wide, wx, tanh_out)[0])
        p[idx] = old
        num = float((up - down) / (2 * eps))
        ana = float(g[idx])
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return worst


class TestGradients:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31))
    @example(315113675)  # tiny critic gradient: float64 differences were too coarse here
    def test_actor_and_critic_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        actor = init_mlp((6, 16, 16, 2), rng, final_scale=0.5)
        critic = init_mlp((20, 16, 16, 1), rng, final_scale=0.5)
        assert fd_check(actor, rng.normal(size=(5, 6)), True, rng) < 1e-4
        assert fd_check(critic, rng.normal(size=(5, 20)), False, rng) < 1e-4

    def test_adam_first_step_moves_by_lr(self):
        p = [np.array([1.0, -2.0])]
        Adam(p, 0.1).step(p, [np.array([3.0, -0.5])])
        assert p[0] == pytest.approx([0.9, -1.9], abs=1e-7)


class TestSoftUpdate:
    def test_copy(self):
        t, o = [np.zeros(3)], [np.arange(3.0)]
        assert np.array_equal(soft_update(t, o, 1.0)[0], o[0])

    def test_unchanged(self):
        t = [np.full(3, 5.0)]
        assert np.array_equal(soft_update(t, [np.arange(3.0)], 0.0)[0], np.full(3, 5.0))

    def test_hand_arithmetic(self):
        assert soft_update([np.zeros(2)], [np.full(2, 2.0)], 0.25)[0].tolist() == [0.5, 0.5]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            soft_update([np.zeros(2)], [np.zeros(3)], 0.5)


class TestAct:
    def test_zero_weights_give_zero_action(self):
        pol = small_policy()
        for p in pol.agents[0].actor:
            p[...] = 0.0
        obs = np.ones(OBS_DIM)
        assert act(pol, 0, obs).tolist() == [0.0, 0.0]

    def test_deterministic_without_exploration(self):
        pol = small_policy()
        obs = np.random.default_rng(1).normal(size=OBS_DIM)
        assert act(pol, 1, obs).tobytes() == act(pol, 1, obs).tobytes()

    def test_hand_set_single_layer(self):
        pol = PolicyParams(("B1",), 2, 2, np.ones(2), np.array([[-1.0, -1.0]]),
                           np.array([[1.0, 1.0]]))
        W = np.array([[0.5, -1.0], [0.25, 2.0]])
        b = np.array([0.1, 0.0])
        pol.agents.append(SimpleNamespace(actor=[W, b]))
        out = act(pol, 0, np.array([0.4, -0.2]))
        expect = [math.tanh(0.4 * 0.5 - 0.2 * 0.25 + 0.1), math.tanh(-0.4 - 0.4)]
        assert out.tolist() == pytest.approx(expect, abs=1e-15)

    def test_exploration_pure_in_noise_state(self):
        pol = small_policy()
        obs = np.ones(OBS_DIM)
        ns = NoiseState(7, 123, 0.3)
        assert act(pol, 0, obs, True, ns).tobytes() == act(pol, 0, obs, True, ns).tobytes()
        assert act(pol, 0, obs, True, ns).tobytes() != act(pol, 0, obs, True, NoiseState(7, 124, 0.3)).tobytes()

    def test_wrong_observation_shape(self):
        with pytest.raises(ShapeMismatch):
            act(small_policy(), 0, np.ones(OBS_DIM + 1))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=OBS_DIM, max_size=OBS_DIM),
           st.integers(0, 10**6), st.floats(0, 5))
    def test_never_outside_legal_ranges(self, obs, step, sigma):
        pol = small_policy()
        a = act(pol, 0, np.array(obs), True, NoiseState(1, step, sigma))
        assert -1 <= a[0] <= 1 and 0 <= a[1] <= 1
        if obs[OBS_FIELDS.index("ev_connected")] == 0.0:
            assert a[1] == 0.0

    def test_action_limits_follow_assets(self):
        bs = [building("B1", battery=battery(), charger=charger()),
              building("B2", charger=charger(v2g_enabled=True)), building("B3")]
        lo, hi = action_limits(bs)
        assert lo.tolist() == [[-1, 0], [0, -1], [0, 0]]
        assert hi.tolist() == [[1, 1], [0, 1], [0, 0]]


def frame(load, pv, soc=0.5):
    return AlignedFrame(0, {"B1": {"load_kwh": Cell(load, "measured"), "pv_kwh": Cell(pv, "measured"),
                                   "battery_soc": Cell(soc, "measured")}})


class TestRbc:
    B = building("B1", battery=battery(), charger=charger())

    def test_ev_below_target_charges(self):
        ev = SimpleNamespace(connected=True, soc=0.4, soc_target=0.8)
        assert rbc_act(frame(0.2, 0.2), self.B, ev, 0.25).ev_cmd == 1.0

    def test_ev_at_target_idles(self):
        ev = SimpleNamespace(connected=True, soc=0.8, soc_target=0.8)
        assert rbc_act(frame(0.2, 0.2), self.B, ev, 0.25).ev_cmd == 0.0

    def test_surplus_clipped_to_full_power(self):
        # 2 kWh surplus against 3 kW x 0.25 h = 0.75 kWh per interval -> 2/0.75 > 1 -> 1
        assert rbc_act(frame(0.0, 2.0), self.B, None, 0.25).battery_cmd == 1.0

    def test_balanced_building_idles(self):
        assert rbc_act(frame(0.3, 0.3), self.B, None, 0.25) .battery_cmd == 0.0

    def test_deficit_discharges_only_what_is_needed(self):
        a = rbc_act(frame(0.6, 0.3), self.B, None, 0.25)
        assert a.battery_cmd == pytest.approx(-0.4)

    def test_respects_soc_floor(self):
        assert rbc_act(frame(0.6, 0.0, soc=0.1), self.B, None, 0.25).battery_cmd == 0.0


class TestReward:
    def outcome(self, cost, community, unmet):
        return SimpleNamespace(cost=np.array(cost), community_kwh=community, unmet_kwh=np.array(unmet))

    def test_zero(self):
        assert reward(self.outcome([0.0], 0.0, [0.0])).tolist() == [0.0]

    def test_cost_and_peak(self):
        r = reward(self.outcome([0.10, 0, 0, 0], 4.0, [0, 0, 0, 0]), 0.01, 1.0)
        assert r[0] == pytest.approx(-0.14, abs=1e-15)

    def test_shortfall(self):
        r = reward(self.outcome([0.0, 0.0], 0.0, [4.0, 0.0]), 0.01, 1.0)
        assert r.tolist() == [-4.0, 0.0]

    def test_exports_carry_no_peak_penalty(self):
        assert reward(self.outcome([0.0], -3.0, [0.0])).tolist() == [0.0]


class TestReplay:
    def test_size_one_repeats(self):
        pol = small_policy(n=1)
        buf = random_batch(pol, 1)
        b = replay_sample(buf, 3, seed=0)
        assert len(b) == 3
        assert all(np.array_equal(b.obs[i], buf.obs[0]) for i in range(3))

    def test_same_seed_same_indices(self):
        assert np.array_equal(sample_indices(50, 20, 3, 9), sample_indices(50, 20, 3, 9))
        assert not np.array_equal(sample_indices(50, 20, 3, 9), sample_indices(50, 20, 3, 10))

    def test_uniform_frequencies(self):
        counts = np.bincount(sample_indices(10, 100_000, 42, 0), minlength=10)
        assert np.all(np.abs(counts - 10_000) <= 3 * math.sqrt(100_000 * 0.1 * 0.9))

    def test_empty_buffer(self):
        with pytest.raises(InsufficientData):
            replay_sample(ReplayBuffer(4, 1, 3), 2, 0)

    def test_ring_overwrites_oldest(self):
        buf = ReplayBuffer(3, 1, 1, 1)
        for k in range(5):
            buf.add(Transition(np.array([[k]]), np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), False))
        assert len(buf) == 3
        assert sorted(buf.obs[:, 0, 0].tolist()) == [2.0, 3.0, 4.0]

    def test_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            ReplayBuffer(3, 2, 4).add(Transition(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2),
                                                 np.zeros((2, 3)), False))


class TestTrainStep:
    def test_insufficient_data(self):
        tr = Trainer(small_policy(), TrainConfig(batch=16))
        with pytest.raises(InsufficientData):
            train_step(tr)

    def test_zero_discount_target_is_reward(self):
        pol = small_policy()
        batch = replay_sample(random_batch(pol, 32), 32, 0)
        q = [mlp_forward(ag.critic, np.concatenate([batch.obs.reshape(32, -1),
                                                    batch.actions.reshape(32, -1)], 1), False)[0][:, 0]
             for ag in pol.agents]
        expect = np.mean([np.mean((q[i] - batch.rewards[:, i]) ** 2) for i in range(2)])
        cfg = TrainConfig(gamma=1e-300, batch=32)
        opts = ([Adam(a.actor, 1e-4) for a in pol.agents], [Adam(a.critic, 1e-3) for a in pol.agents])
        losses = update_on_batch(pol, *opts, batch, cfg)
        assert losses["critic_loss"] == pytest.approx(expect, rel=1e-12)

    def test_terminal_target_ignores_future(self):
        pol = small_policy()
        buf = random_batch(pol, 16)
        buf.done[:] = 1.0
        batch = buf.take(np.arange(16))
        x = np.concatenate([batch.obs.reshape(16, -1), batch.actions.reshape(16, -1)], 1)
        q = mlp_forward(pol.agents[0].critic, x, False)[0][:, 0]
        cfg = TrainConfig(batch=16)
        opts = ([Adam(a.actor, 1e-4) for a in pol.agents], [Adam(a.critic, 1e-3) for a in pol.agents])
        q1 = mlp_forward(pol.agents[1].critic, x, False)[0][:, 0]
        expect = (np.mean((q - batch.rewards[:, 0]) ** 2) + np.mean((q1 - batch.rewards[:, 1]) ** 2)) / 2
        assert update_on_batch(pol, *opts, batch, cfg)["critic_loss"] == pytest.approx(expect, rel=1e-12)

    def test_overfits_one_frozen_batch(self):
        pol = small_policy(hidden=32)
        batch = replay_sample(random_batch(pol, 256), 256, 0)
        cfg = TrainConfig()
        opts = ([Adam(a.actor, cfg.lr_actor) for a in pol.agents],
                [Adam(a.critic, cfg.lr_critic) for a in pol.agents])
        losses = [update_on_batch(pol, *opts, batch, cfg, update_targets=False)["critic_loss"]
                  for _ in range(51)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_trainer_is_deterministic(self):
        def run():
            pol = small_policy(seed=3)
            tr = Trainer(pol, TrainConfig(batch=32, seed=5))
            src = random_batch(pol, 64, seed=2)
            for t in src.take(np.arange(64)).transitions():
                tr.buffer.add(t)
            for _ in range(5):
                tr.train_step()
            return b"".join(p.tobytes() for ag in pol.agents for p in ag.actor + ag.critic)
        assert run() == run()

    def test_targets_track_online_networks(self):
        pol = small_policy()
        tr = Trainer(pol, TrainConfig(batch=32, tau=1.0))
        for t in random_batch(pol, 32).take(np.arange(32)).transitions():
            tr.buffer.add(t)
        tr.train_step()
        for ag in pol.agents:
            assert all(np.array_equal(a, b) for a, b in zip(ag.actor, ag.actor_target))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.gamma, c.tau, c.lr_actor, c.lr_critic, c.batch) == (0.99, 0.005, 1e-4, 1e-3, 256)
        assert (c.sigma, c.sigma_decay, c.episodes, c.lambda_peak, c.lambda_ev) == (
            0.3, 0.995, 15, 0.01, 1.0)
        assert c.buffer_capacity == 100_000

    @pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"gamma": 0.0}, {"tau": 0.0}, {"tau": 1.5},
                                    {"batch": 0}, {"lr_actor": 0.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_round_trip_and_digest(self):
        c = TrainConfig(seed=9, episodes=3)
        assert TrainConfig.from_dict(c.to_dict()) == c
        assert c.digest() == TrainConfig(episodes=3, seed=9).digest() != TrainConfig().digest()
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"learning_rate": 1})


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        pol = small_policy(n=3)
        p = tmp_path / "policy.ckpt"
        save_checkpoint(p, pol, "abc")
        back = load_checkpoint(p, pol.agent_ids, OBS_DIM)
        q = tmp_path / "again.ckpt"
        save_checkpoint(q, back, "abc")
        assert p.read_bytes() == q.read_bytes()
        assert p.read_bytes().startswith(MAGIC)
        obs = np.linspace(-1, 1, OBS_DIM)
        assert act(pol, 2, obs).tobytes() == act(back, 2, obs).tobytes()

    def test_refuses_mismatched_layout(self, tmp_path):
        p = tmp_path / "policy.ckpt"
        save_checkpoint(p, small_policy(n=2))
        with pytest.raises(ShapeMismatch):
            load_checkpoint(p, ("B1", "B2", "B3"))
        with pytest.raises(ShapeMismatch):
            load_checkpoint(p, obs_dim=OBS_DIM + 1)

    def test_refuses_damaged_files(self, tmp_path):
        p = tmp_path / "policy.ckpt"
        save_checkpoint(p, small_policy(n=1))
        data = p.read_bytes()
        for bad in (data[:-8], data + b"\0" * 8, b"NOTACKPT" + data[8:]):
            p.write_bytes(bad)
            with pytest.raises(ShapeMismatch):
                load_checkpoint(p)
