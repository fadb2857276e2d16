import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from somacube import dqn
from somacube.env import N_ACTIONS, EmptyMaskError


@pytest.fixture
def net():
    return dqn.QNet(rng=np.random.default_rng(7))


def random_batch(rng, n=32, terminal_frac=0.25, legal_frac=0.05):
    masks = rng.random((n, N_ACTIONS)) < legal_frac
    masks[:, 0] = True  # never empty
    return {
        "states": rng.standard_normal((n, 36)).astype(np.float32),
        "actions": rng.integers(0, N_ACTIONS, n),
        "rewards": rng.standard_normal(n).astype(np.float32) * 10,
        "next_states": rng.standard_normal((n, 36)).astype(np.float32),
        "next_masks": masks,
        "terminals": rng.random(n) < terminal_frac,
    }


class TestForward:
    def test_zero_weights_zero_outputs(self, net):
        for k in net.params:
            net.params[k][:] = 0
        heads, _ = net.forward(np.ones(36, dtype=np.float32))
        assert not heads["ori"].any()
        assert not heads["pos"].any()

    def test_head_shapes(self, net):
        heads, _ = net.forward(np.zeros((5, 36), dtype=np.float32))
        assert heads["ori"].shape == (5, 116)
        assert heads["pos"].shape == (5, 27)

    def test_eval_deterministic(self, net, rng):
        x = rng.standard_normal(36).astype(np.float32)
        a, _ = net.forward(x)
        b, _ = net.forward(x)
        assert np.array_equal(a["ori"], b["ori"])
        assert np.array_equal(a["pos"], b["pos"])

    def test_train_mode_needs_rng(self, net):
        with pytest.raises(ValueError):
            net.forward(np.zeros(36), train=True)

    def test_flat_arch(self):
        net = dqn.QNet(arch="flat", rng=np.random.default_rng(0))
        q = net.q_full(np.zeros(36, dtype=np.float32))
        assert q.shape == (N_ACTIONS,)


class TestCombine:
    def test_zero_ori_tiles_pos(self):
        q_pos = np.arange(27.0)
        q = dqn.combine(np.zeros(116), q_pos)
        assert np.array_equal(q.reshape(116, 27), np.tile(q_pos, (116, 1)))

    def test_index_arithmetic(self):
        q_ori = np.zeros(116)
        q_pos = np.zeros(27)
        q_ori[3] = 2.0
        q_pos[5] = 7.0
        assert dqn.combine(q_ori, q_pos)[3 * 27 + 5] == 9.0

    def test_batched(self, rng):
        q_ori = rng.standard_normal((4, 116))
        q_pos = rng.standard_normal((4, 27))
        q = dqn.combine(q_ori, q_pos)
        assert q.shape == (4, N_ACTIONS)
        assert q[2, 10 * 27 + 4] == pytest.approx(q_ori[2, 10] + q_pos[2, 4])

    @given(st.floats(-50, 50))
    @settings(max_examples=25, deadline=None)
    def test_constant_shift_preserves_argmax(self, c):
        rng = np.random.default_rng(5)
        q_ori = rng.standard_normal(116)
        q_pos = rng.standard_normal(27)
        base = np.argmax(dqn.combine(q_ori, q_pos))
        shifted = np.argmax(dqn.combine(q_ori + c, q_pos))
        assert base == shifted


class TestSelectAction:
    def test_single_legal_always_returned(self, net, rng):
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[1234] = True
        for eps in (0.0, 0.5, 1.0):
            assert dqn.select_action(net, np.zeros(36, dtype=np.float32), mask, eps, rng) == 1234

    def test_empty_mask_raises(self, net, rng):
        with pytest.raises(EmptyMaskError):
            dqn.select_action(net, np.zeros(36), np.zeros(N_ACTIONS, dtype=bool), 0.0, rng)

    def test_epsilon_one_uniform_chi_square(self, net):
        from scipy import stats

        rng = np.random.default_rng(11)
        legal = np.array([3, 100, 999, 2000, 3131])
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[legal] = True
        n = 100_000
        counts = {a: 0 for a in legal}
        for _ in range(n):
            counts[dqn.select_action(net, np.zeros(36, dtype=np.float32), mask, 1.0, rng)] += 1
        stat, p = stats.chisquare(list(counts.values()))
        assert p > 1e-3

    def test_greedy_never_returns_illegal(self, net, rng):
        # make an illegal action's Q the global maximum via the bias
        heads, _ = net.forward(np.zeros(36, dtype=np.float32))
        top = int(np.argmax(dqn.combine(heads["ori"], heads["pos"])))
        mask = np.ones(N_ACTIONS, dtype=bool)
        mask[top] = False
        choice = dqn.select_action(net, np.zeros(36, dtype=np.float32), mask, 0.0, rng)
        assert choice != top
        assert mask[choice]

    def test_tie_breaks_to_lowest_id(self, rng):
        net = dqn.QNet(rng=np.random.default_rng(0))
        for k in net.params:
            net.params[k][:] = 0  # all Q equal
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[[50, 51, 900]] = True
        assert dqn.select_action(net, np.zeros(36, dtype=np.float32), mask, 0.0, rng) == 50

    def test_uniform_head_shift_preserves_greedy(self, net, rng):
        x = np.zeros(36, dtype=np.float32)
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[::13] = True
        base = dqn.select_action(net, x, mask, 0.0, rng)
        net.params["b_ori"] += 3.5
        assert dqn.select_action(net, x, mask, 0.0, rng) == base
        net.params["b_pos"] -= 11.0
        assert dqn.select_action(net, x, mask, 0.0, rng) == base


class TestMaskedArgmaxIsolation:
    def test_illegal_values_never_matter(self, rng):
        for _ in range(50):
            q = rng.standard_normal(N_ACTIONS)
            mask = rng.random(N_ACTIONS) < 0.02
            mask[int(rng.integers(N_ACTIONS))] = True
            base = dqn.masked_argmax(q, mask)
            q2 = q.copy()
            q2[~mask] += 1e6
            q3 = q.copy()
            q3[~mask] -= 1e6
            assert dqn.masked_argmax(q2, mask) == base
            assert dqn.masked_argmax(q3, mask) == base


class TestEpsilonSchedules:
    def test_exponential_closed_form(self):
        sched = dqn.EpsilonSchedule()
        for e in (0, 1, 10, 500, 5000):
            assert sched.value(e) == max(0.05, 0.9 * 0.995**e)

    def test_linear_endpoints(self):
        sched = dqn.EpsilonSchedule(kind="linear")
        assert sched.value(0) == 0.9
        assert sched.value(40_000) == 0.1
        assert sched.value(45_000) == 0.1

    @given(st.integers(0, 100_000), st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_monotone_non_increasing(self, a, b):
        lo, hi = sorted((a, b))
        for sched in (dqn.EpsilonSchedule(), dqn.EpsilonSchedule(kind="linear")):
            assert sched.value(lo) >= sched.value(hi)
            assert sched.value(hi) >= min(sched.floor, sched.end)
            assert sched.value(lo) <= sched.start


class TestReplayBuffer:
    def _transition(self, i, terminal=False):
        mask = np.zeros(N_ACTIONS, dtype=bool)
        mask[i % N_ACTIONS] = True
        return dqn.Transition(
            state=np.full(36, i, dtype=np.float32),
            action=i % N_ACTIONS,
            reward=float(i),
            next_state=np.full(36, i + 1, dtype=np.float32),
            next_mask=mask,
            terminal=terminal,
        )

    def test_fifo_eviction(self):
        buf = dqn.ReplayBuffer(capacity=5)
        for i in range(8):
            buf.push(self._transition(i))
        assert len(buf) == 5
        assert set(buf.rewards.astype(int)) == {3, 4, 5, 6, 7}

    def test_sample_without_replacement(self, rng):
        buf = dqn.ReplayBuffer(capacity=64)
        for i in range(64):
            buf.push(self._transition(i))
        batch = buf.sample(64, rng)
        assert len(set(batch["rewards"].astype(int))) == 64

    def test_mask_round_trip(self, rng):
        buf = dqn.ReplayBuffer(capacity=4)
        t = self._transition(17)
        buf.push(t)
        batch = buf.sample(1, rng)
        assert np.array_equal(batch["next_masks"][0], t.next_mask)

    def test_sample_too_large(self, rng):
        buf = dqn.ReplayBuffer(capacity=4)
        buf.push(self._transition(0))
        with pytest.raises(ValueError):
            buf.sample(2, rng)


class TestTrainStep:
    def test_terminal_targets_equal_rewards(self, net, rng):
        batch = random_batch(rng, n=16, terminal_frac=1.0)
        batch["terminals"][:] = True
        targets = dqn.compute_targets(
            net, batch["rewards"], batch["next_states"], batch["next_masks"],
            batch["terminals"], 0.99,
        )
        assert np.array_equal(targets, batch["rewards"].astype(np.float64))

    def test_targets_match_bellman_op(self, net, rng):
        from somacube.env import bellman_target

        batch = random_batch(rng, n=8, terminal_frac=0.3)
        targets = dqn.compute_targets(
            net, batch["rewards"], batch["next_states"], batch["next_masks"],
            batch["terminals"], 0.99,
        )
        for j in range(8):
            q_next = net.q_full(batch["next_states"][j])
            want = bellman_target(
                float(batch["rewards"][j]), 0.99, q_next, batch["next_masks"][j],
                bool(batch["terminals"][j]),
            )
            assert targets[j] == pytest.approx(want, rel=1e-6)

    def test_empty_nonterminal_mask_raises(self, net, rng):
        batch = random_batch(rng, n=4)
        batch["terminals"][:] = False
        batch["next_masks"][2, :] = False
        with pytest.raises(EmptyMaskError):
            dqn.compute_targets(
                net, batch["rewards"], batch["next_states"], batch["next_masks"],
                batch["terminals"], 0.99,
            )

    def test_duplicated_transition_loss_is_single_td_error(self, rng):
        net = dqn.QNet(rng=np.random.default_rng(3), dropout=0.0)
        state = rng.standard_normal(36).astype(np.float32)
        action = 777
        target = 5.0
        batch = {
            "states": np.tile(state, (512, 1)),
            "actions": np.full(512, action),
        }
        heads, _ = net.forward(state)
        q = heads["ori"][action // 27] + heads["pos"][action % 27]
        loss, _ = dqn.td_loss_and_grads(net, batch, np.full(512, target), rng)
        assert loss == pytest.approx(float((q - target) ** 2), rel=1e-5)

    def test_gradcheck_against_central_differences(self):
        """Finite-difference oracle: 10 random parameters x 10 random batches,
        dropout disabled, float64."""
        rng = np.random.default_rng(17)
        net = dqn.QNet(rng=rng).astype(np.float64)
        worst = 0.0
        for b in range(10):
            batch = {
                "states": rng.standard_normal((8, 36)),
                "actions": rng.integers(0, N_ACTIONS, 8),
            }
            targets = rng.standard_normal(8) * 5
            dummy = np.random.default_rng(0)
            _, grads = dqn.td_loss_and_grads(net, batch, targets, dummy, train_mode=False)
            for _ in range(10):
                key = list(net.params)[int(rng.integers(len(net.params)))]
                flat = net.params[key].reshape(-1)
                i = int(rng.integers(flat.size))
                h = 1e-6 * max(1.0, abs(flat[i]))
                orig = flat[i]
                flat[i] = orig + h
                lp, _ = dqn.td_loss_and_grads(net, batch, targets, dummy, train_mode=False)
                flat[i] = orig - h
                lm, _ = dqn.td_loss_and_grads(net, batch, targets, dummy, train_mode=False)
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                an = grads[key].reshape(-1)[i]
                denom = max(abs(fd), abs(an), 1e-10)
                worst = max(worst, abs(fd - an) / denom)
        assert worst <= 1e-4

    def test_one_step_reduces_loss_on_fixed_batch(self, rng):
        net = dqn.QNet(rng=np.random.default_rng(1), dropout=0.0)
        target = net.copy()
        opt = dqn.Adam(lr=1e-3)
        cfg = dqn.TrainConfig(lr=1e-3)
        batch = random_batch(rng, n=64, terminal_frac=1.0)
        first = dqn.train_step(net, target, batch, cfg, opt, rng)
        for _ in range(50):
            last = dqn.train_step(net, target, batch, cfg, opt, rng)
        assert last < first

    def test_nonfinite_loss_raises(self, net, rng):
        batch = random_batch(rng, n=8, terminal_frac=1.0)
        batch["rewards"][0] = np.inf
        with pytest.raises(dqn.NonFiniteLossError):
            dqn.train_step(net, net.copy(), batch, dqn.TrainConfig(), dqn.Adam(), rng)

    def test_finite_params_after_updates(self, net, rng):
        opt = dqn.Adam()
        cfg = dqn.TrainConfig()
        for _ in range(5):
            dqn.train_step(net, net.copy(), random_batch(rng, n=32), cfg, opt, rng)
        net.assert_finite()


class TestTargetSync:
    def test_post_sync_outputs_bitwise_equal(self, net, rng):
        target = dqn.sync_target(net)
        x = rng.standard_normal((3, 36)).astype(np.float32)
        a, _ = net.forward(x)
        b, _ = target.forward(x)
        assert np.array_equal(a["ori"], b["ori"])
        assert np.array_equal(a["pos"], b["pos"])

    def test_target_unchanged_by_training(self, net, rng):
        target = dqn.sync_target(net)
        before = {k: v.copy() for k, v in target.params.items()}
        opt = dqn.Adam()
        for _ in range(3):
            dqn.train_step(net, target, random_batch(rng, n=32), dqn.TrainConfig(), opt, rng)
        for k in before:
            assert np.array_equal(target.params[k], before[k])
        # and the online network did change
        assert any(not np.array_equal(net.params[k], before[k]) for k in before)


class TestCheckpoints:
    def test_round_trip_bitwise(self, net, tmp_path):
        p = tmp_path / "net.bin"
        dqn.save_checkpoint(net, p)
        loaded = dqn.load_checkpoint(p)
        assert loaded.arch == net.arch
        for k in net.params:
            assert np.array_equal(loaded.params[k], net.params[k])
        dqn.save_checkpoint(loaded, tmp_path / "again.bin")
        assert (tmp_path / "again.bin").read_bytes() == p.read_bytes()

    def test_flat_arch_round_trip(self, tmp_path):
        net = dqn.QNet(arch="flat", rng=np.random.default_rng(2))
        p = tmp_path / "flat.bin"
        dqn.save_checkpoint(net, p)
        assert dqn.load_checkpoint(p).arch == "flat"

    def test_bad_magic(self, net, tmp_path):
        p = tmp_path / "net.bin"
        dqn.save_checkpoint(net, p)
        data = bytearray(p.read_bytes())
        data[0] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(dqn.BadMagicError):
            dqn.load_checkpoint(p)

    def test_shape_mismatch_on_wrong_head(self, net, tmp_path):
        net.params["W_ori"] = net.params["W_ori"][:, :115].copy()
        p = tmp_path / "net.bin"
        dqn.save_checkpoint(net, p)
        with pytest.raises(dqn.ShapeMismatchError):
            dqn.load_checkpoint(p)

    def test_truncated_file(self, net, tmp_path):
        p = tmp_path / "net.bin"
        dqn.save_checkpoint(net, p)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(dqn.TruncatedFileError):
            dqn.load_checkpoint(p)

    def test_missing_array(self, net, tmp_path):
        del net.params["b_pos"]
        p = tmp_path / "net.bin"
        dqn.save_checkpoint(net, p)
        with pytest.raises(dqn.ShapeMismatchError):
            dqn.load_checkpoint(p)


class TestConfig:
    def test_defaults_match_reference_table(self):
        cfg = dqn.TrainConfig()
        assert cfg.lr == 1e-4
        assert cfg.gamma == 0.99
        assert cfg.batch == 512
        assert cfg.target_update_every == 20
        assert cfg.warmup == 1_000
        assert cfg.grad_clip == 1.0
        assert cfg.buffer_capacity == 50_000
        assert cfg.dropout == 0.3

    def test_validation(self):
        with pytest.raises(ValueError):
            dqn.TrainConfig(gamma=1.0)
        with pytest.raises(ValueError):
            dqn.TrainConfig(batch=0)
