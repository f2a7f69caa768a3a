import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamseg import numerics as nx
from streamseg.errors import ConfigError, ResolutionError
from streamseg.numerics import Parameters, Tensor, grad_check
from streamseg.streams import (AppearanceNet, FusionHead, ModelConfig, MultiScaleStack, PixelModel,
                               appearance_forward, cascaded_bidirectional, detach_state, fuse_streams,
                               multiscale_step)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def small_stack(in_ch=2, hidden=(2, 4, 2), out=3, k=3, seed=0, dtype=np.float64, prefix="s", params=None):
    params = params if params is not None else Parameters()
    stack = MultiScaleStack(params, prefix, in_ch, list(hidden), k, out, rng=np.random.default_rng(seed),
                            dtype=dtype)
    return stack, params


class TestMultiScale:
    def test_scale_trace_l5(self, rng):
        stack, _ = small_stack(hidden=(2, 2, 2, 2, 2), dtype=np.float32)
        assert stack.ladder() == [2, 4, 8, 4, 2]
        x = Tensor(rng.standard_normal((2, 2, 64, 64)).astype(np.float32))
        o, states = multiscale_step(stack, x, stack.zero_state(2, 64, 64))
        assert [s.h.shape[2] for s in states] == [32, 16, 8, 16, 32]
        assert o.shape == (2, 3, 64, 64)

    def test_zero_parameters(self, rng):
        stack, params = small_stack()
        for name, p in params.items():
            p.data = np.zeros_like(p.data)
        params["s.out.b"].data = np.array([0.5, -1.0, 2.0])
        o, states = stack.step(t64(rng.standard_normal((1, 2, 8, 8))), stack.zero_state(1, 8, 8, np.float64))
        for c, b in enumerate([0.5, -1.0, 2.0]):
            np.testing.assert_array_equal(o.data[:, c], b)
        for s in states:
            np.testing.assert_array_equal(s.h.data, 0.0)

    def test_paper_widths_accepted(self, rng):
        params = Parameters()
        stack = MultiScaleStack(params, "p", 2, [16, 64, 128, 64, 16], 7, 16, rng=rng)
        o, _ = stack.step(Tensor(rng.standard_normal((1, 2, 16, 16)).astype(np.float32)), stack.zero_state(1, 16, 16))
        assert o.shape == (1, 16, 16, 16)

    @pytest.mark.parametrize("size", [(12, 16), (16, 20), (7, 8)])
    def test_resolution_error(self, size):
        stack, _ = small_stack(hidden=(2, 2, 2, 2, 2))
        with pytest.raises(ResolutionError):
            stack.zero_state(1, *size)

    def test_skip_scales_match(self):
        stack, _ = small_stack(hidden=(2, 4, 6, 4, 2, 2, 2))
        lad = stack.ladder()
        for l in range(stack.L):
            assert lad[l] == lad[stack.L - 1 - l]


class TestCascaded:
    def _stacks(self, seed=0):
        params = Parameters()
        fwd, _ = small_stack(seed=seed, params=params, prefix="f")
        bwd, _ = small_stack(in_ch=5, seed=seed + 1, params=params, prefix="b")
        return fwd, bwd, params

    def test_single_frame(self, rng):
        fwd, bwd, _ = self._stacks()
        f = t64(rng.standard_normal((1, 2, 8, 8)))
        h0 = fwd.zero_state(1, 8, 8, np.float64)
        z, h_out = cascaded_bidirectional(fwd, bwd, [f], h0)
        o_f, hf = fwd.step(f, h0)
        o_b, _ = bwd.step(nx.concat_channels([o_f, f]), hf)
        assert len(z) == 1 and z[0].shape[1] == 6
        np.testing.assert_allclose(z[0].data, np.concatenate([o_f.data, o_b.data], axis=1), atol=1e-13)
        for a, b in zip(h_out, hf):
            np.testing.assert_array_equal(a.h.data, b.h.data)

    def test_backward_sees_reversed_sequence(self, rng):
        fwd, bwd, _ = self._stacks()
        flows = [t64(rng.standard_normal((1, 2, 8, 8))) for _ in range(3)]
        h0 = fwd.zero_state(1, 8, 8, np.float64)
        z, _ = cascaded_bidirectional(fwd, bwd, flows, h0)
        outs, state = [], h0
        for f in flows:
            o, state = fwd.step(f, state)
            outs.append(o)
        bstate, back = state, []
        for o, f in reversed(list(zip(outs, flows))):
            ob, bstate = bwd.step(nx.concat_channels([o, f]), bstate)
            back.append(ob)
        back = back[::-1]
        for t in range(3):
            np.testing.assert_allclose(z[t].data[:, 3:], back[t].data, atol=1e-13)
            np.testing.assert_allclose(z[t].data[:, :3], outs[t].data, atol=1e-13)

    def test_empty_rejected(self):
        fwd, bwd, _ = self._stacks()
        with pytest.raises(Exception):
            cascaded_bidirectional(fwd, bwd, [], fwd.zero_state(1, 8, 8))

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 1000), total=st.integers(2, 7), data=st.data())
    def test_batch_split_invariance(self, seed, total, data):
        split = data.draw(st.integers(1, total - 1))
        fwd, bwd, _ = self._stacks(seed)
        rng = np.random.default_rng(seed)
        flows = [Tensor(rng.standard_normal((2, 2, 8, 8)).astype(np.float32)) for _ in range(total)]
        for s in (fwd, bwd):
            for c in s.cells:
                for name in list(c.params):
                    c.params[name].data = c.params[name].data.astype(np.float32)
            s.w_out.data = s.w_out.data.astype(np.float32)
            s.b_out.data = s.b_out.data.astype(np.float32)
        z_all, _ = cascaded_bidirectional(fwd, bwd, flows, fwd.zero_state(2, 8, 8))
        z1, h = cascaded_bidirectional(fwd, bwd, flows[:split], fwd.zero_state(2, 8, 8))
        z2, _ = cascaded_bidirectional(fwd, bwd, flows[split:], detach_state(h))
        got = [z.data[:, :3] for z in z1 + z2]
        want = [z.data[:, :3] for z in z_all]
        assert max(np.abs(a - b).max() for a, b in zip(got, want)) < 1e-5


class TestAppearance:
    def _net(self, seed=0):
        params = Parameters()
        return AppearanceNet(params, "app", [4, 6, 6, 5], rng=np.random.default_rng(seed), dtype=np.float64), params

    def test_zero_parameters(self, rng):
        net, params = self._net()
        for _, p in params.items():
            p.data = np.zeros_like(p.data)
        params["app.conv4.b"].data = np.arange(5, dtype=np.float64)
        out = appearance_forward(net, t64(rng.standard_normal((1, 3, 8, 12))))
        for c in range(5):
            np.testing.assert_allclose(out.data[0, c], float(c), atol=1e-14)

    def test_output_size(self, rng):
        net, _ = self._net()
        assert net.forward(t64(rng.standard_normal((2, 3, 16, 8)))).shape == (2, 5, 16, 8)

    def test_frames_are_independent(self, rng):
        net, _ = self._net()
        x = rng.standard_normal((2, 3, 8, 8))
        a = net.forward(t64(x)).data
        b = net.forward(t64(x[::-1].copy())).data
        np.testing.assert_allclose(a[::-1], b, atol=1e-13)

    def test_resolution_error(self, rng):
        net, _ = self._net()
        with pytest.raises(ResolutionError):
            net.forward(t64(rng.standard_normal((1, 3, 10, 8))))


class TestFusion:
    def test_zero_weights_half(self, rng):
        head = FusionHead(Parameters(), "f", 7, dtype=np.float64)
        head.w.data[:] = 0
        out = fuse_streams(head, t64(rng.standard_normal((1, 4, 4, 4))), t64(rng.standard_normal((1, 1, 4, 4))),
                           t64(rng.standard_normal((1, 2, 4, 4))))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_single_channel_passthrough(self, rng):
        head = FusionHead(Parameters(), "f", 7, dtype=np.float64)
        head.w.data[:] = 0
        head.w.data[0, 2] = 1.0
        z = rng.standard_normal((1, 4, 4, 4))
        out = fuse_streams(head, t64(z), t64(rng.standard_normal((1, 1, 4, 4))), t64(rng.standard_normal((1, 2, 4, 4))))
        np.testing.assert_allclose(out.data[0, 0], 1 / (1 + np.exp(-z[0, 2])), atol=1e-14)

    def test_grad_reaches_all_inputs(self, rng):
        head = FusionHead(Parameters(), "f", 7, rng=rng, dtype=np.float64)
        z, a, f = (t64(rng.standard_normal((1, c, 4, 4))) for c in (4, 1, 2))
        assert grad_check(lambda: fuse_streams(head, z, a, f), [z, a, f, head.w, head.b]) < 1e-3
        for t in (z, a, f):
            assert np.abs(t.grad).max() > 0

    def test_resolution_mismatch(self, rng):
        head = FusionHead(Parameters(), "f", 3, dtype=np.float64)
        with pytest.raises(ResolutionError):
            fuse_streams(head, t64(np.zeros((1, 1, 4, 4))), None, t64(np.zeros((1, 2, 4, 8))))


class TestPixelModel:
    cfg = dict(num_layers=3, hidden=[2, 4, 2], kernel_size=3, motion_out=3, app_widths=[3, 4, 4, 3])

    def _inputs(self, rng, T=2, n=1, size=16, flow_zero=False):
        rgb = [Tensor(rng.uniform(-1, 1, (n, 3, size, size)).astype(np.float32)) for _ in range(T)]
        fl = [Tensor(np.zeros((n, 2, size, size), np.float32) if flow_zero else
                     rng.uniform(-1, 1, (n, 2, size, size)).astype(np.float32)) for _ in range(T)]
        return rgb, fl

    def test_fusion_channels(self):
        m = PixelModel(ModelConfig(**self.cfg))
        assert m.fusion.w.shape[1] == 2 * 3 + 3 + 2

    @pytest.mark.parametrize("streams", [["motion", "appearance"], ["motion"], ["appearance"]])
    def test_output_in_unit_interval(self, rng, streams):
        m = PixelModel(ModelConfig(**self.cfg, streams=streams))
        rgb, fl = self._inputs(rng, T=3, n=2)
        prob, state = m.forward(rgb, fl, None)
        assert prob.shape == (6, 1, 16, 16)
        assert np.all((prob.data > 0) & (prob.data < 1))
        assert (state is None) == ("motion" not in streams)

    def test_zero_flow_still_valid(self, rng):
        m = PixelModel(ModelConfig(**self.cfg))
        rgb, fl = self._inputs(rng, flow_zero=True)
        prob, _ = m.forward(rgb, fl, None)
        assert np.all(np.isfinite(prob.data)) and np.all((prob.data > 0) & (prob.data < 1))

    def test_resolution_error(self, rng):
        m = PixelModel(ModelConfig(**self.cfg))
        rgb, fl = self._inputs(rng, size=10)
        with pytest.raises(ResolutionError):
            m.forward(rgb, fl, None)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(num_layers=4, hidden=[2, 2, 2, 2])
        with pytest.raises(ConfigError):
            ModelConfig(streams=["sound"])

    def test_paper_configuration_builds(self):
        m = PixelModel(ModelConfig(hidden=[16, 64, 128, 64, 16]))
        assert m.params.count() > PixelModel().params.count()
