import io

import numpy as np
import pytest
import torch

from oracles import constant_q_net, finite_difference_error, random_records, tiny_net_config
from primmesh.geometry import ContractError
from primmesh.io import FormatError
from primmesh.qnetwork import (
    DDQNPair,
    QFunction,
    ReferenceCache,
    combined_loss,
    load_checkpoint,
    make_batch,
    margin_loss,
    q_values,
    save_checkpoint,
    select_action,
    supervised_loss,
    td_loss,
)
from primmesh.replay import Experience
from primmesh.spaces import Observation


def tiny_pair(seed):
    config = tiny_net_config()
    pair = DDQNPair(config, seed=seed, dtype=torch.float64)
    # a target that differs from the current net exercises the double-DQN split
    with torch.no_grad():
        for p in pair.target.parameters():
            p.add_(0.1 * torch.randn_like(p))
    return pair


class TestGradients:
    @pytest.mark.parametrize("seed", range(4))
    def test_td(self, seed):
        pair = tiny_pair(seed)
        batch = make_batch(random_records(pair.config, np.random.default_rng(seed)), pair.config, torch.float64)
        err = finite_difference_error(lambda: td_loss(pair, batch), pair.current, np.random.default_rng(seed))
        assert err <= 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_margin(self, seed):
        pair = tiny_pair(seed)
        recs = random_records(pair.config, np.random.default_rng(seed), demo_fraction=1.0)
        batch = make_batch(recs, pair.config, torch.float64)
        err = finite_difference_error(lambda: margin_loss(pair.current, batch), pair.current,
                                      np.random.default_rng(seed))
        assert err <= 1e-4

    @pytest.mark.parametrize("seed", range(4))
    def test_combined(self, seed):
        pair = tiny_pair(seed)
        batch = make_batch(random_records(pair.config, np.random.default_rng(seed)), pair.config, torch.float64)
        err = finite_difference_error(lambda: combined_loss(pair, batch), pair.current, np.random.default_rng(seed))
        assert err <= 1e-4

    def test_target_receives_no_gradient(self):
        pair = tiny_pair(0)
        batch = make_batch(random_records(pair.config, np.random.default_rng(0)), pair.config, torch.float64)
        combined_loss(pair, batch).backward()
        assert all(p.grad is None for p in pair.target.parameters())


class TestLossValues:
    @torch.no_grad()
    def test_combined_is_sum(self):
        pair = tiny_pair(1)
        recs = random_records(pair.config, np.random.default_rng(1), n=10)
        batch = make_batch(recs, pair.config, torch.float64)
        demo = make_batch([r for r in recs if r.is_demo], pair.config, torch.float64)
        n_demo = len(demo)
        # margin term is averaged over demo records only
        expect = td_loss(pair, batch) + margin_loss(pair.current, demo)
        assert n_demo and float(combined_loss(pair, batch)) == pytest.approx(float(expect), rel=1e-12)
        assert float(combined_loss(pair, batch, lam=0)) == pytest.approx(float(td_loss(pair, batch)), rel=1e-12)

    @torch.no_grad()
    def test_td_terminal_no_bootstrap(self):
        pair = tiny_pair(2)
        config = pair.config
        ref = np.zeros((8, 8), np.float32)
        obs = Observation(ref, np.zeros(6, np.float32), 4, 5)
        nxt = Observation(ref, np.zeros(6, np.float32), 5, 5)
        rec = Experience(obs, 4 % 3 * 4, 0.7, nxt, True)
        batch = make_batch([rec], config, torch.float64)
        q = pair.current(batch.refs, batch.params, batch.steps, batch.ref_index)[0, rec.action]
        assert float(td_loss(pair, batch)) == pytest.approx((0.7 - float(q)) ** 2, rel=1e-12)

    @torch.no_grad()
    def test_td_uses_target_value_at_current_argmax(self):
        pair = tiny_pair(3)
        rec = random_records(pair.config, np.random.default_rng(3), n=1)[0]
        rec = Experience(rec.observation, rec.action, 0.25, rec.next_observation, False)
        batch = make_batch([rec], pair.config, torch.float64)
        with torch.no_grad():
            qn = pair.current(batch.refs, batch.next_params, batch.next_steps, batch.ref_index)[0]
            legal = batch.next_masks[0]
            a = int(torch.where(legal, qn, torch.tensor(-np.inf, dtype=qn.dtype)).argmax())
            qt = pair.target(batch.refs, batch.next_params, batch.next_steps, batch.ref_index)[0, a]
            q = pair.current(batch.refs, batch.params, batch.steps, batch.ref_index)[0, rec.action]
        y = 0.25 + 0.9 * float(qt)
        assert float(td_loss(pair, batch)) == pytest.approx((y - float(q)) ** 2, rel=1e-10)


def q_table_batch(config, action, step=0):
    ref = np.zeros((8, 8), np.float32)
    obs = Observation(ref, np.zeros(config.n_params, np.float32), step, config.n_steps)
    rec = Experience(obs, action, 0.0, obs, False, True)
    return make_batch([rec], config, torch.float64)


class TestMarginSemantics:
    config = tiny_net_config()

    @pytest.mark.parametrize("gap,expect", [(0.8, 0.0), (1.5, 0.0), (0.79, 0.01), (0.0, 0.8), (-0.5, 1.3)])
    @torch.no_grad()
    def test_gap(self, gap, expect):
        table = np.zeros(12)
        table[1] = 1.0
        table[2] = 1.0 - gap  # best legal competitor
        table[8] = 50.0  # illegal at step 0, ignored
        loss = float(margin_loss(constant_q_net(self.config, table), q_table_batch(self.config, 1)))
        assert loss == pytest.approx(expect, abs=1e-12)
        assert loss >= 0

    def test_rejects_self_records(self):
        config = self.config
        recs = random_records(config, np.random.default_rng(0), demo_fraction=0.0)
        with pytest.raises(ContractError):
            margin_loss(QFunction(config), make_batch(recs, config))

    def test_supervised_ignores_self_records(self):
        config = self.config
        recs = random_records(config, np.random.default_rng(0), demo_fraction=0.0)
        assert float(supervised_loss(QFunction(config), make_batch(recs, config))) == 0.0


class TestSelection:
    config = tiny_net_config()

    def obs(self, step=0):
        return Observation(np.zeros((8, 8), np.float32), np.zeros(6, np.float32), step, 5)

    def test_greedy_masked(self):
        table = np.arange(12, dtype=float)
        net = constant_q_net(self.config, table)
        mask = np.zeros(12, bool)
        mask[4:8] = True
        assert select_action(net, self.obs(), mask, epsilon=0.0) == 7

    def test_ties_lowest_index(self):
        net = constant_q_net(self.config, np.ones(12))
        mask = np.zeros(12, bool)
        mask[4:8] = True
        assert select_action(net, self.obs(), mask, epsilon=0.0) == 4

    def test_exploration_stays_legal_and_uniform(self):
        net = constant_q_net(self.config, np.arange(12, dtype=float))
        mask = np.zeros(12, bool)
        mask[[0, 5, 9]] = True
        rng = np.random.default_rng(0)
        picks = np.array([select_action(net, self.obs(), mask, 1.0, rng) for _ in range(3000)])
        assert set(picks) == {0, 5, 9}
        assert np.all(np.abs(np.bincount(picks, minlength=12)[[0, 5, 9]] - 1000) < 3 * np.sqrt(3000 * 2 / 9))

    def test_epsilon_rate(self):
        net = constant_q_net(self.config, np.arange(12, dtype=float))
        mask = np.ones(12, bool)
        rng = np.random.default_rng(1)
        picks = np.array([select_action(net, self.obs(), mask, 0.02, rng) for _ in range(5000)])
        # random picks that land on the greedy action are indistinguishable
        off = (picks != 11).mean()
        assert abs(off - 0.02 * 11 / 12) < 3 * np.sqrt(0.02 * 11 / 12 / 5000)

    def test_no_legal(self):
        with pytest.raises(ContractError):
            select_action(QFunction(self.config), self.obs(), np.zeros(12, bool), 0.0)

    def test_cache_matches_uncached(self):
        net = QFunction(self.config)
        o = Observation(np.random.default_rng(0).random((8, 8)).astype(np.float32), np.ones(6, np.float32), 2, 5)
        cache = ReferenceCache(net)
        assert np.allclose(q_values(net, o), q_values(net, o, cache(o.reference)))


class TestPair:
    def test_sync(self):
        pair = tiny_pair(0)
        assert any(not torch.equal(a, b) for a, b in zip(pair.current.parameters(), pair.target.parameters()))
        pair.sync_target()
        assert all(torch.equal(a, b) for a, b in zip(pair.current.parameters(), pair.target.parameters()))

    def test_seeded_init_deterministic(self):
        a, b = DDQNPair(tiny_net_config(), seed=5), DDQNPair(tiny_net_config(), seed=5)
        assert all(torch.equal(x, y) for x, y in zip(a.current.parameters(), b.current.parameters()))

    def test_batch_dedups_references(self):
        recs = random_records(tiny_net_config(), np.random.default_rng(0), n=20, n_refs=3)
        batch = make_batch(recs, tiny_net_config())
        assert len(batch.refs) == 3 and len(batch) == 20


class TestCheckpoint:
    def test_round_trip(self):
        net = QFunction(tiny_net_config())
        buf = io.BytesIO()
        save_checkpoint(net, buf, {"kind": "prim"})
        back, extra = load_checkpoint(io.BytesIO(buf.getvalue()))
        assert extra == {"kind": "prim"} and back.config == net.config
        for (k, a), (k2, b) in zip(net.state_dict().items(), back.state_dict().items()):
            assert k == k2 and torch.equal(a, b)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            load_checkpoint(io.BytesIO(b"NOPE" + bytes(20)))
