import itertools

import numpy as np
import pytest

from oracles import box_target, prim_reward, prim_terms
from primmesh.env_prim import (
    ACTIONS_PER_PRIM,
    N_PRIM_ACTIONS,
    PrimEnv,
    decode_action,
    encode_action,
    initial_boxes,
    merge_primitives,
    observation_length,
)
from primmesh.geometry import ContractError, Cuboid, OccupancyGrid, voxelize_cuboids


def random_target(R, rng, n=3):
    cs = []
    for _ in range(n):
        lo = rng.integers(0, R - 2, 3)
        hi = [int(rng.integers(l + 1, R + 1)) for l in lo]
        cs.append(Cuboid(tuple(lo), tuple(hi)))
    return voxelize_cuboids(cs, R)


class TestReset:
    def test_placement_r24(self):
        env = PrimEnv(24)
        state = env.reset(box_target(24, (0, 0, 0), (24, 24, 24)))
        assert tuple(state.boxes[0]) == (2, 2, 2, 6, 6, 6)
        assert state.step == 0 and not state.deleted.any()
        # containment oracle: each seed sits centred in its own 8^3 cell
        for box in state.boxes:
            cell = box[:3] // 8
            assert np.all(box[:3] >= cell * 8) and np.all(box[3:] <= cell * 8 + 8)
            assert np.all(box[3:] - box[:3] == 4)
            assert np.all((box[:3] - cell * 8) == (cell * 8 + 8 - box[3:]))

    @pytest.mark.parametrize("R", [6, 24, 32, 64])
    def test_pairwise_disjoint(self, R):
        boxes = initial_boxes(R)
        assert len(boxes) == 27
        for a, b in itertools.combinations(boxes, 2):
            overlap = np.minimum(a[3:], b[3:]) - np.maximum(a[:3], b[:3])
            assert np.any(overlap <= 0)

    def test_deterministic(self):
        t = box_target(24, (3, 3, 3), (20, 10, 15))
        a, b = PrimEnv(24).reset(t), PrimEnv(24).reset(t)
        assert np.array_equal(a.boxes, b.boxes) and np.array_equal(a.reference, b.reference)

    def test_resolution_mismatch(self):
        with pytest.raises(ContractError):
            PrimEnv(32).reset(OccupancyGrid.empty(24))


class TestActions:
    def test_examples(self):
        a = decode_action(0)
        assert (a.primitive, a.kind, a.axis, a.amount) == (0, "drag_v", 0, -2)
        assert (decode_action(27).primitive, decode_action(27).kind) == (0, "delete")
        assert (decode_action(755).primitive, decode_action(755).kind) == (26, "delete")

    def test_bijection(self):
        seen = set()
        for i in range(N_PRIM_ACTIONS):
            a = decode_action(i)
            if a.kind == "delete":
                j = encode_action(a.primitive, "delete", variant=i % ACTIONS_PER_PRIM - 24)
                seen.add((a.primitive, "delete", i % ACTIONS_PER_PRIM - 24))
            else:
                j = encode_action(a.primitive, a.kind, a.axis, a.amount)
                seen.add((a.primitive, a.kind, a.axis, a.amount))
            assert j == i
        assert len(seen) == 756

    def test_per_primitive_count(self):
        counts = np.bincount([decode_action(i).primitive for i in range(N_PRIM_ACTIONS)])
        assert np.all(counts == 28)

    @pytest.mark.parametrize("bad", [-1, 756])
    def test_out_of_range(self, bad):
        with pytest.raises(ContractError):
            decode_action(bad)


class TestMask:
    def setup_method(self):
        self.env = PrimEnv(24)
        self.env.reset(box_target(24, (2, 2, 2), (20, 20, 20)))

    def test_step_zero(self):
        assert np.array_equal(np.flatnonzero(self.env.legal_mask()), np.arange(28))

    def test_wraps_at_27(self):
        for _ in range(27):
            self.env.step(int(np.flatnonzero(self.env.legal_mask())[0]))
        assert self.env.step_count == 27
        assert np.array_equal(np.flatnonzero(self.env.legal_mask()), np.arange(28))

    def test_popcount(self):
        for _ in range(60):
            mask = self.env.legal_mask()
            assert mask.sum() == 28
            self.env.step(int(np.flatnonzero(mask)[3]))

    def test_illegal_action_rejected(self):
        with pytest.raises(ContractError):
            self.env.step(28)


class TestStep:
    def test_all_deleted_penalty(self):
        env = PrimEnv(24)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        env.deleted[:] = True
        env.deleted[0] = False
        for b in env.boxes[1:]:
            env.coverage.replace(b, None)
        _, reward, done = env.step(24)
        assert reward == -1.0 and done

    def test_noop_drag_scores_zero(self):
        env = PrimEnv(24)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        env.boxes[0] = (0, 2, 2, 4, 6, 6)
        env.coverage = type(env.coverage)(env.target)
        for b in env.boxes:
            env.coverage.replace(None, b)
        before = env.terms()
        _, reward, _ = env.step(encode_action(0, "drag_v", 0, -2))
        assert reward == 0.0 and env.terms() == before

    def test_drag_saturates_without_inverting(self):
        env = PrimEnv(24)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        # seed 0 spans [2, 6): pushing V'.x down by 2 twice leaves a 1-voxel slab
        for _ in range(3):
            while env.step_count % 27:
                env.step(int(np.flatnonzero(env.legal_mask())[0]))
            env.step(encode_action(0, "drag_v_prime", 0, -2))
        assert tuple(env.boxes[0][[0, 3]]) == (2, 3)

    def test_delete_outside_target_matches_recompute(self):
        R = 24
        target = box_target(R, (0, 0, 0), (8, 8, 8))
        env = PrimEnv(R)
        env.reset(target)
        # seed 0 sits inside the target: deleting it loses intersection
        before = env.state.cuboids
        _, reward, done = env.step(encode_action(0, "delete", variant=2))
        assert not done and reward < 0
        assert reward == pytest.approx(prim_reward(before, env.state.cuboids, target), abs=1e-12)
        # seed 26 lies wholly outside: deleting it only shrinks the union
        env = PrimEnv(R)
        env.reset(target)
        for _ in range(26):
            env.step(int(np.flatnonzero(env.legal_mask())[0]) + 2)
        before = env.state.cuboids
        i1_before = env.terms()[0]
        _, reward, _ = env.step(encode_action(26, "delete"))
        assert env.terms()[0] > i1_before
        assert reward == pytest.approx(prim_reward(before, env.state.cuboids, target), abs=1e-12)
        assert reward > 0

    def test_delete_idempotent(self):
        env = PrimEnv(24)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        env.step(24)
        for _ in range(26):
            env.step(int(np.flatnonzero(env.legal_mask())[0]))
        _, reward, _ = env.step(25)
        assert reward == 0.0 and env.deleted[0] and env.terms()[2] == 1

    def test_done_after_horizon(self):
        env = PrimEnv(24, n_steps=30)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        for k in range(30):
            _, _, done = env.step(int(np.flatnonzero(env.legal_mask())[1]))
            assert done == (k == 29)
        with pytest.raises(ContractError):
            env.step(0)

    def test_random_episodes_match_recompute_and_telescope(self):
        rng = np.random.default_rng(7)
        R = 12
        for episode in range(4):
            target = random_target(R, rng)
            env = PrimEnv(R, n_steps=120)
            env.reset(target)
            start = prim_terms(env.state.cuboids, target)
            total = 0.0
            while not env.done:
                legal = np.flatnonzero(env.legal_mask())
                a = int(rng.choice(legal[:24])) if rng.random() < 0.9 else int(rng.choice(legal))
                before = env.state.cuboids
                deleted_before = env.deleted.copy()
                _, r, _ = env.step(a)
                after = env.state.cuboids
                assert r == pytest.approx(prim_reward(before, after, target), abs=1e-9)
                assert np.all(env.deleted >= deleted_before)
                for c in after:
                    c.validate(R)
                assert np.array_equal(env.target.cells, target.cells)
                total += r
            end = prim_terms(env.state.cuboids, target)
            if not env.deleted.all():
                expect = (end[0] - start[0]) + 0.1 * (end[1] - start[1]) + 0.01 * end[2]
                assert total == pytest.approx(expect, abs=1e-9)


class TestObserve:
    def test_layout(self):
        env = PrimEnv(24)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        obs = env.observe()
        assert len(obs.to_vector()) == 128 * 128 + 162 + 300 == observation_length()
        one_hot = obs.step_one_hot()
        assert one_hot[0] == 1 and one_hot.sum() == 1
        assert np.all(np.isfinite(obs.to_vector()))
        assert obs.params.max() <= 1.0

    def test_deleted_zeroed(self):
        env = PrimEnv(24)
        env.reset(box_target(24, (0, 0, 0), (12, 12, 12)))
        env.step(24)
        params = env.observe().params.reshape(27, 6)
        assert not params[0].any() and params[1].all()


class TestMerge:
    def test_identical_merge(self):
        c = Cuboid((0, 0, 0), (4, 4, 4))
        assert merge_primitives([c, c]) == [c]

    def test_distant_unmerged(self):
        a, b = Cuboid((0, 0, 0), (2, 2, 2)), Cuboid((10, 10, 10), (12, 12, 12))
        assert merge_primitives([a, b]) == [a, b]

    def test_abutting_merge(self):
        a, b = Cuboid((0, 0, 0), (4, 4, 4)), Cuboid((4, 0, 0), (8, 4, 4))
        assert merge_primitives([a, b]) == [Cuboid((0, 0, 0), (8, 4, 4))]

    def test_deleted_dropped(self):
        a, b = Cuboid((0, 0, 0), (4, 4, 4)), Cuboid((10, 0, 0), (12, 4, 4), True)
        assert merge_primitives([a, b]) == [a]

    def test_threshold_between_passes(self):
        # union/bbox = 0.875: merged at 0.85 in the first pass
        a, b = Cuboid((0, 0, 0), (4, 4, 4)), Cuboid((4, 0, 0), (8, 4, 3))
        assert merge_primitives([a, b]) == [Cuboid((0, 0, 0), (8, 4, 4))]
        # 0.75 stays apart under both thresholds
        c = Cuboid((4, 0, 0), (8, 4, 2))
        assert len(merge_primitives([a, c])) == 2
        assert len(merge_primitives([a, b], thresholds=(0.9,))) == 2

    def test_second_pass_uses_merged_boxes(self):
        # first pass joins a+b (ratio 1); the merged box then fills 0.9 with c
        a, b = Cuboid((0, 0, 0), (4, 10, 10)), Cuboid((4, 0, 0), (9, 10, 10))
        c = Cuboid((9, 0, 0), (10, 10, 9))
        assert merge_primitives([a, c], thresholds=(0.85,)) == [a, c]
        assert merge_primitives([a, b, c]) == [Cuboid((0, 0, 0), (10, 10, 10))]

    def test_transitive_component(self):
        cs = [Cuboid((i * 2, 0, 0), (i * 2 + 2, 2, 2)) for i in range(3)]
        assert merge_primitives(cs) == [Cuboid((0, 0, 0), (6, 2, 2))]
