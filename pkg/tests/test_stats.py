import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitta import net as N
from vitta import stats as S
from vitta import tensor as T
from vitta.tensor import Tape, Tensor

from conftest import TINY_NET
from oracles import central_difference, ema_closed_form, max_rel_err, two_pass_stats


class TestComputeStats:
    def test_constant(self):
        m, v = S.compute_stats(Tensor(np.full((2, 3, 2, 2, 2), 5.0)))
        np.testing.assert_array_equal(m.data, 5.0)
        np.testing.assert_array_equal(v.data, 0.0)

    def test_hand_example(self):
        x = np.array([1.0, 3.0, 2.0, 2.0]).reshape(1, 2, 1, 1, 2)
        m, v = S.compute_stats(Tensor(x))
        np.testing.assert_allclose(m.data, [2.0, 2.0])
        np.testing.assert_allclose(v.data, [1.0, 0.0])

    def test_random_matches_two_pass(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 2, 4, 4)).astype(np.float32)
        m, v = S.compute_stats(Tensor(x))
        rm, rv = two_pass_stats(x)
        np.testing.assert_allclose(m.data, rm, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(v.data, rv, rtol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(dims=st.tuples(*[st.integers(1, 6)] * 5), seed=st.integers(0, 2**31), shift=st.floats(-3, 3))
    def test_random_shapes(self, dims, seed, shift):
        x = (np.random.default_rng(seed).standard_normal(dims) + shift).astype(np.float32)
        m, v = S.compute_stats(Tensor(x))
        rm, rv = two_pass_stats(x)
        np.testing.assert_allclose(m.data, rm, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(v.data, rv, rtol=1e-6, atol=1e-6)

    def test_zero_extent(self):
        with pytest.raises(T.ShapeError, match="zero-extent"):
            S.compute_stats(Tensor(np.zeros((1, 2, 0, 2, 2))))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x64 = rng.standard_normal((2, 3, 2, 2, 3))
        wm, wv = rng.standard_normal(3), rng.standard_normal(3)

        def f():
            m, v = two_pass_stats(x64)
            return float(wm @ m + wv @ v)

        x = Tensor(x64, requires_grad=True)
        with Tape() as tape:
            m, v = S.compute_stats(x)
            loss = T.add(T.sum(T.mul(m, Tensor(wm))), T.sum(T.mul(v, Tensor(wv))))
        tape.backward(loss)
        num = central_difference(f, [x64])
        assert max_rel_err([x.grad], num) < 1e-3


@pytest.fixture(scope="module")
def trained(tiny_train):
    net = N.ToyVideoNet(TINY_NET)
    N.train_source(net, tiny_train, N.TrainConfig(epochs=2, batch_size=4))
    return net


class TestCapture:
    def test_single_clip_equals_compute_stats(self, trained, tiny_train):
        one = tiny_train.subset([3])
        layers = S.capture_train_stats(trained, one, (3, 4))
        x, _ = N.batch_inputs(one, [0], TINY_NET.frames)
        _, feats = trained.forward(x, {3, 4})
        for s in layers:
            m, v = S.compute_stats(feats[s.block])
            np.testing.assert_allclose(s.mean, m.data, rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(s.var, v.data, rtol=1e-6, atol=1e-6)
            assert s.provenance == "train-computed"

    def test_matches_whole_set_not_mean_of_batches(self, trained, tiny_train):
        layers = S.capture_train_stats(trained, tiny_train, (2, 4), batch=5)
        x, _ = N.batch_inputs(tiny_train, range(len(tiny_train)), TINY_NET.frames)
        _, feats = trained.forward(x, {2, 4})
        for s in layers:
            rm, rv = two_pass_stats(feats[s.block].data)
            np.testing.assert_allclose(s.mean, rm, rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(s.var, rv, rtol=1e-6, atol=1e-6)
            assert s.sample_count == feats[s.block].data.size // len(s.mean)

    def test_two_halves_merge(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4, 2, 3, 3)) + 2
        b = rng.standard_normal((5, 4, 2, 3, 3)) * 3
        run = S._Running(4)
        run.add(a)
        run.add(b)
        rm, rv = two_pass_stats(np.concatenate([a, b]))
        np.testing.assert_allclose(run.mean, rm, rtol=1e-10)
        np.testing.assert_allclose(run.var, rv, rtol=1e-10)

    def test_order_invariant(self, trained, tiny_train):
        a = S.capture_train_stats(trained, tiny_train, (3,), batch=4)[0]
        perm = np.random.default_rng(1).permutation(len(tiny_train))
        b = S.capture_train_stats(trained, tiny_train.subset(perm), (3,), batch=4)[0]
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(a.var, b.var, rtol=1e-6, atol=1e-7)

    def test_capture_twice_identical_files(self, trained, tiny_train, tmp_path):
        for name in ("a", "b"):
            S.save_stats(tmp_path / f"{name}.vtt", S.capture_train_stats(trained, tiny_train, (3, 4)))
        assert (tmp_path / "a.vtt").read_bytes() == (tmp_path / "b.vtt").read_bytes()
        assert (tmp_path / "a.vtt.json").read_bytes() == (tmp_path / "b.vtt.json").read_bytes()

    def test_tap_errors(self, trained, tiny_train):
        with pytest.raises(ValueError, match="tap index"):
            S.capture_train_stats(trained, tiny_train, (5,))
        with pytest.raises(S.StatsError):
            S.capture_train_stats(trained, tiny_train, ())


class TestNormStats:
    def test_fresh_net_buffers(self):
        for s in S.extract_norm_stats(N.ToyVideoNet(TINY_NET), (1, 2, 3, 4)):
            np.testing.assert_array_equal(s.mean, 0.0)
            np.testing.assert_array_equal(s.var, 1.0)
            assert s.provenance == "norm-stored"

    def test_group_norm_unsupported(self):
        gn = N.ToyVideoNet(N.preset("gn-net", frames=4, size=16, widths=(4, 4, 8, 8), groups=2))
        with pytest.raises(N.ArchitectureError, match="no stored"):
            S.extract_norm_stats(gn)

    def test_stored_differs_from_computed(self, trained, tiny_train):
        computed = S.capture_train_stats(trained, tiny_train, (3,))[0]
        stored = S.to_tap_space(S.extract_norm_stats(trained, (3,))[0], trained)
        assert not np.allclose(computed.mean, stored.mean, atol=1e-3)

    def test_tap_space_of_fresh_buffers(self):
        net = N.ToyVideoNet(TINY_NET)
        s = S.to_tap_space(S.extract_norm_stats(net, (2,))[0], net)
        np.testing.assert_allclose(s.mean, 0.0)
        np.testing.assert_allclose(s.var, 1.0 / (1.0 + TINY_NET.eps))

    def test_tap_space_matches_eval_forward(self, trained, rng):
        # features whose norm-input statistics equal the buffers come out with the mapped statistics
        l = 2
        rm = trained.buffers[f"block{l}.norm.running_mean"].astype(np.float64)
        rv = trained.buffers[f"block{l}.norm.running_var"].astype(np.float64)
        z = rng.standard_normal((4000, len(rm)))
        z = (z - z.mean(0)) / z.std(0)
        x = rm + z * np.sqrt(rv)
        g = trained.params[f"block{l}.norm.weight"].data
        b = trained.params[f"block{l}.norm.bias"].data
        y = (x - rm) / np.sqrt(rv + TINY_NET.eps) * g + b
        mapped = S.to_tap_space(S.extract_norm_stats(trained, (l,))[0], trained)
        np.testing.assert_allclose(y.mean(0), mapped.mean, atol=1e-5)
        np.testing.assert_allclose(y.var(0), mapped.var, rtol=1e-5)


class TestStatsFile:
    def test_round_trip_with_sidecar(self, tmp_path):
        layers = [S.LayerStats(3, np.array([1.0, 2.0]), np.array([0.5, 0.25]), "train-computed", 42),
                  S.LayerStats(4, np.array([-1.0]), np.array([2.0]), "train-computed", 7)]
        S.save_stats(tmp_path / "s.vtt", layers, {"note": "x"})
        back = S.load_stats(tmp_path / "s.vtt")
        assert [(s.block, s.sample_count, s.provenance) for s in back] == [(3, 42, "train-computed"), (4, 7, "train-computed")]
        np.testing.assert_allclose(back[0].var, [0.5, 0.25])
        meta = json.loads((tmp_path / "s.vtt.json").read_text())
        assert meta["note"] == "x"

    def test_foreign_override(self, tmp_path):
        S.save_stats(tmp_path / "s.vtt", [S.LayerStats(3, np.zeros(2), np.ones(2))])
        assert S.load_stats(tmp_path / "s.vtt", provenance="foreign")[0].provenance == "foreign"

    def test_negative_variance_rejected(self):
        with pytest.raises(S.StatsError, match="negative"):
            S.LayerStats(1, np.zeros(2), np.array([1.0, -0.1]))


def est(alpha, init=0.0, channels=1, blocks=(1,)):
    return S.EmaEstimator.from_stats(alpha, [S.LayerStats(b, np.full(channels, init), np.full(channels, 1.0))
                                             for b in blocks])


class TestEma:
    def test_alpha_one_tracks_sample(self):
        e = est(1.0)
        out = e.update({1: (np.array([3.5]), np.array([0.25]))})
        np.testing.assert_array_equal(out[1][0].data, [3.5])
        np.testing.assert_array_equal(e.mean[1], [3.5])
        np.testing.assert_array_equal(e.var[1], [0.25])

    def test_hand_example(self):
        e = est(0.1)
        e.update({1: (np.array([10.0]), np.array([1.0]))})
        assert e.mean[1][0] == pytest.approx(1.0, abs=1e-12)
        e.update({1: (np.array([20.0]), np.array([1.0]))})
        assert e.mean[1][0] == pytest.approx(2.9, abs=1e-12)
        assert e.step == 2

    @pytest.mark.parametrize("alpha", [1.0, 0.5, 0.1, 0.01])
    def test_closed_form(self, alpha):
        rng = np.random.default_rng(int(alpha * 100))
        init = rng.standard_normal(3)
        samples = rng.standard_normal((200, 3)) * 5
        e = S.EmaEstimator.from_stats(alpha, [S.LayerStats(2, init, np.ones(3))])
        for s in samples:
            e.update({2: (s, np.abs(s))})
        np.testing.assert_allclose(e.mean[2], ema_closed_form(samples, alpha, init), rtol=0, atol=1e-10)

    def test_convergence_bound(self):
        s0, s = 2.0, 7.0
        e = est(0.1, init=s0)
        for k in range(1, 81):
            e.update({1: (np.array([s]), np.array([1.0]))})
            if k >= 60:
                assert abs(e.mean[1][0] - s) <= abs(1 - (1 - 0.1) ** k) * abs(s - s0)
                assert abs(e.mean[1][0] - s) <= (1 - 0.1) ** k * abs(s - s0) + 1e-12

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(S.StatsError):
            S.EmaEstimator(alpha)

    def test_layer_mismatch(self):
        with pytest.raises(S.StatsError, match="layer mismatch"):
            est(0.1, blocks=(3, 4)).update({3: (np.zeros(1), np.ones(1))})

    def test_channel_mismatch(self):
        with pytest.raises(S.StatsError, match="channels"):
            est(0.1, channels=2).update({1: (np.zeros(3), np.ones(3))})

    def test_gradient_flows_only_through_current_term(self):
        e = est(0.25, init=4.0, channels=2)
        m = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        v = Tensor(np.array([1.0, 1.0]), requires_grad=True)
        with Tape() as tape:
            out = e.update({1: (m, v)})
            loss = T.add(T.sum(out[1][0]), T.sum(out[1][1]))
        tape.backward(loss)
        np.testing.assert_allclose(m.grad, 0.25)
        np.testing.assert_allclose(v.grad, 0.25)

    def test_finite_for_finite_inputs(self):
        e = est(0.3, channels=4)
        rng = np.random.default_rng(0)
        for _ in range(500):
            e.update({1: (rng.standard_normal(4) * 1e3, rng.uniform(0, 1e3, 4))})
        assert np.all(np.isfinite(e.mean[1])) and np.all(np.isfinite(e.var[1]))
