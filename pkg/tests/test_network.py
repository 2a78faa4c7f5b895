import dataclasses

import numpy as np
import pytest

from fgrelu.activation import FgReluParams
from fgrelu.autograd import finite_diff_check
from fgrelu.data import synthetic_fixture
from fgrelu.errors import DimensionError, ParameterError, SpecError
from fgrelu.experiments import preset, with_feedback
from fgrelu.network import (FeedbackEdge, LayerSpec, Network, NetworkSpec, comprehensive_edges,
                            compute_feedback, conv, deconv, dense, init_params, load_checkpoint,
                            param_count, save_checkpoint, shared_dropout_masks, sum_feedback,
                            unroll)


def small_ae(gated=("E1",), timesteps=2, edges=((2, 0),), **kw):
    layers = tuple(dense(n, "fg_relu" if name in gated else act, name)
                   for n, act, name in ((8, "relu", "E1"), (3, "relu", "E2"),
                                        (8, "relu", "D1"), (16, "sigmoid", "D2")))
    return NetworkSpec((16,), layers, tuple(FeedbackEdge(s, t) for s, t in edges), timesteps, **kw)


def small_conv(timesteps=2):
    layers = (conv(3, 3, "fg_relu", "C1"), LayerSpec("max_pool", name="P1"),
              conv(4, 3, "relu", "C2"), deconv(3, 3, "relu", "U1"), deconv(2, 3, "sigmoid", "U2"))
    return NetworkSpec((2, 10, 10), layers, (FeedbackEdge(3, 0),), timesteps)


def forward_passes(spec, params, x, state=None):
    tape = unroll(spec, params, state=state)
    tape.forward({"x": x})
    return [np.array(tape[f"out/p{p}"].value) for p in range(1, spec.timesteps + 1)]


class TestComprehensiveEdges:
    def test_four_layer_autoencoder(self):
        layers = tuple(dense(n, "fg_relu", name) for n, name in
                       ((392, "E1"), (10, "E2"), (392, "D1"), (784, "D2")))
        edges = comprehensive_edges(layers)
        pairs = {(e.target, e.source) for e in edges}
        assert pairs == {(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)}
        for e in edges:
            assert e.weights.shape == (layers[e.target].size, layers[e.source].size)
            assert not e.weights.any()

    def test_single_gateable_layer(self):
        assert comprehensive_edges((dense(4, "fg_relu"),)) == []

    def test_partial_edge_parameter_count(self):
        spec = preset("mnist_ae_10_partial")
        (edge,) = spec.feedback_edges
        params, _ = init_params(spec)
        assert params[spec.edge_name(edge)].size == 392 * 392 == 153664


class TestComputeFeedback:
    def test_zero_weights(self):
        e = FeedbackEdge(1, 0, np.zeros((3, 2)))
        np.testing.assert_array_equal(compute_feedback(e, np.ones((1, 2))), np.zeros((1, 3)))

    def test_scalar_weight(self):
        e = FeedbackEdge(1, 0, np.array([[2.0]]))
        assert compute_feedback(e, np.array([[3.0]]))[0, 0] == 6.0

    def test_conv_pools_per_filter(self):
        h = np.zeros((1, 2, 3, 3))
        h[0, 0] = 1.0
        h[0, 1] = np.arange(9.0).reshape(3, 3) * (3.0 / 4.0)  # spatial mean 3
        e = FeedbackEdge(1, 0, np.array([[1.0, 1.0]]))
        assert compute_feedback(e, h)[0, 0] == pytest.approx(4.0, abs=1e-12)

    def test_conv_feedback_identical_across_space(self):
        spec = small_conv()
        params, _ = init_params(spec, seed=3)
        params["fb/U1->C1"][:] = np.random.default_rng(0).normal(size=(3, 3))
        x = np.random.default_rng(1).random((2, 2, 10, 10))
        tape = unroll(spec, params)
        tape.forward({"x": x})
        mu_d = tape["C1/p2/mu_d"].value
        assert mu_d.shape == (2, 3)
        # broadcast map inside the gate: every spatial unit of a filter shares the value
        bcast = [n for n in tape.nodes if n.kind == "broadcast_filters"][-1].value
        np.testing.assert_array_equal(bcast, np.broadcast_to(mu_d[:, :, None, None], bcast.shape))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            compute_feedback(FeedbackEdge(1, 0, np.ones((2, 3))), np.ones((1, 4)))


class TestSumFeedback:
    def test_one_edge(self):
        e = FeedbackEdge(1, 0, np.eye(2))
        out = sum_feedback([e], {1: np.array([[1.0, 2.0]])}, 2)
        np.testing.assert_array_equal(out, [[1, 2]])

    def test_two_edges_sum(self):
        e1, e2 = FeedbackEdge(1, 0, np.eye(2)), FeedbackEdge(2, 0, np.eye(2))
        prev = {1: np.array([[1.0, 2.0]]), 2: np.array([[3.0, 4.0]])}
        np.testing.assert_array_equal(sum_feedback([e1, e2], prev, 2), [[4, 6]])

    def test_no_edges(self):
        np.testing.assert_array_equal(sum_feedback([], {}, 3), np.zeros((1, 3)))

    def test_mixed_targets_rejected(self):
        with pytest.raises(SpecError):
            sum_feedback([FeedbackEdge(2, 0, np.eye(2)), FeedbackEdge(2, 1, np.eye(2))],
                         {2: np.ones((1, 2))}, 2)


class TestSpecValidation:
    def test_feedback_needs_two_passes(self):
        with pytest.raises(SpecError):
            small_ae(timesteps=1)

    def test_override_allows_single_pass(self):
        spec = small_ae(timesteps=1, fg_params=FgReluParams(gain_override=10.0))
        assert spec.active_edges == ()

    def test_bottom_up_edge_rejected(self):
        with pytest.raises(SpecError):
            small_ae(edges=((0, 2),), gated=("D1",))

    def test_target_must_be_gated(self):
        with pytest.raises(SpecError):
            small_ae(gated=())

    def test_edge_weight_shape(self):
        layers = small_ae().layers
        with pytest.raises(SpecError):
            NetworkSpec((16,), layers, (FeedbackEdge(2, 0, np.zeros((3, 3))),), 2)

    def test_unknown_kind(self):
        with pytest.raises(SpecError):
            LayerSpec("lstm")

    def test_roundtrip_dict(self):
        spec = small_conv()
        again = NetworkSpec.from_dict(spec.to_dict())
        assert again.to_dict() == spec.to_dict()


class TestUnroll:
    def test_single_pass_equals_plain(self):
        spec = small_ae().without_feedback()
        params, _ = init_params(spec, seed=0)
        x = synthetic_fixture(5, 16, seed=0).images
        (out,) = forward_passes(spec, params, x)
        # hand-rolled forward
        h = x
        for name, f in (("E1", "relu"), ("E2", "relu"), ("D1", "relu"), ("D2", "sigmoid")):
            h = h @ params[f"{name}/W"].T + params[f"{name}/b"]
            h = np.maximum(h, 0) if f == "relu" else 1 / (1 + np.exp(-h))
        np.testing.assert_allclose(out, h, rtol=1e-12)

    def test_partial_parameter_count(self):
        fb, base = preset("mnist_ae_10_partial"), preset("mnist_ae_10")
        n_fb = param_count(init_params(fb)[0])
        n_base = param_count(init_params(base)[0])
        assert n_fb - n_base == 153664
        t4 = param_count(init_params(fb.replace(timesteps=4))[0])
        assert t4 == n_fb

    def test_node_count_scales_with_passes(self):
        spec = small_ae()
        params, _ = init_params(spec)
        t2 = unroll(spec, params)
        t4 = unroll(spec.replace(timesteps=4), params)
        compute = lambda t: sum(n.kind not in ("parameter", "placeholder") for n in t.nodes)
        assert compute(t4) == 2 * compute(t2)

    def test_first_pass_feedback_zero(self):
        spec = small_ae()
        params, _ = init_params(spec)
        params["fb/D1->E1"][:] = 1.0
        tape = unroll(spec, params)
        tape.forward({"x": synthetic_fixture(3, 16).images})
        assert not tape["E1/p1/mu_d"].value.any()
        assert tape["E1/p2/mu_d"].value.any()

    def test_pass_two_reads_pass_one_source(self):
        spec = small_ae()
        params, _ = init_params(spec, seed=4)
        w = np.random.default_rng(2).normal(size=(8, 8))
        params["fb/D1->E1"][:] = w
        tape = unroll(spec, params)
        tape.forward({"x": synthetic_fixture(3, 16).images})
        expected = tape["D1/p1/block"].value @ w.T
        np.testing.assert_allclose(tape["E1/p2/mu_d"].value, expected, rtol=1e-12)

    @pytest.mark.parametrize("builder", [small_ae, small_conv])
    def test_zero_feedback_equivalence(self, builder):
        spec = builder()
        params, _ = init_params(spec, seed=7)
        base = spec.without_feedback()
        base_params = {k: v for k, v in params.items() if not k.startswith("fb/")}
        x = synthetic_fixture(4, 1, seed=0, image_shape=spec.input_shape).images
        (ref,) = forward_passes(base, base_params, x)
        for out in forward_passes(spec, params, x):
            np.testing.assert_array_equal(out, ref)

    def test_t_invariance_without_feedback(self):
        spec = small_ae(edges=(), gated=(), timesteps=4)
        params, _ = init_params(spec)
        outs = forward_passes(spec, params, synthetic_fixture(3, 16).images)
        for o in outs[1:]:
            np.testing.assert_array_equal(o, outs[0])

    def test_gradient_reaches_feedback_weights(self):
        spec = small_ae()
        params, _ = init_params(spec, seed=1)
        tape = unroll(spec, params, loss="bce")
        x = synthetic_fixture(6, 16, seed=2).images
        tape.forward({"x": x, "target": x})
        g = tape.backward()["fb/D1->E1"]
        assert np.any(g != 0)

    def test_full_unrolled_gradient_check(self):
        spec = small_ae(gated=("E1", "E2"), edges=((2, 0), (3, 1)))
        params, _ = init_params(spec, seed=5)
        rng = np.random.default_rng(0)
        for k in params:
            # nonzero biases keep pre-activations off the ReLU kink even when
            # every unit below is silent
            if k.startswith("fb/") or k.endswith("/b"):
                params[k][:] = 0.3 * rng.normal(size=params[k].shape)
        tape = unroll(spec, params, loss="bce")
        x = synthetic_fixture(4, 16, seed=3).images
        for name in params:
            assert finite_diff_check(tape, name, 1e-5, {"x": x, "target": x}) <= 1e-5, name

    def test_conv_gradient_check(self):
        spec = small_conv()
        params, _ = init_params(spec, seed=5)
        rng = np.random.default_rng(1)
        params["fb/U1->C1"][:] = 0.5 * rng.normal(size=(3, 3))
        for k in params:
            if k.endswith("/b"):
                params[k][:] = 0.2 * rng.normal(size=params[k].shape)
        tape = unroll(spec, params, loss="mse")
        x = synthetic_fixture(2, 1, seed=3, image_shape=(2, 10, 10)).images
        target = rng.random((2,) + spec.shapes[-1])
        for name in ("fb/U1->C1", "C1/W", "C2/b", "U2/W"):
            assert finite_diff_check(tape, name, 1e-5, {"x": x, "target": target}) <= 1e-5

    def test_threshold_variant_has_alpha(self):
        spec = small_ae()
        layers = tuple(dataclasses.replace(l, activation="fg_relu_threshold") if i == 0 else l
                       for i, l in enumerate(spec.layers))
        spec = spec.replace(layers=layers)
        params, _ = init_params(spec)
        for k in params:
            if k.endswith("/b"):
                params[k][:] = 0.1
        assert params["E1/alpha"].shape == (1,)
        tape = unroll(spec, params, loss="bce")
        x = synthetic_fixture(3, 16).images
        params["fb/D1->E1"][:] = 0.2
        assert finite_diff_check(tape, "E1/alpha", 1e-5, {"x": x, "target": x}) <= 1e-6

    def test_override_bypasses_feedback(self):
        spec = small_ae()
        layers = tuple(dataclasses.replace(l, gain_override=1.0) if l.name == "E1" else l
                       for l in spec.layers)
        spec = spec.replace(layers=layers)
        params, _ = init_params(spec)
        assert not any(k.startswith("fb/") for k in params)

    def test_unit_override_matches_plain(self):
        base = small_ae().without_feedback()
        ovr = base.replace(fg_params=FgReluParams(gain_override=1.0))
        params, _ = init_params(base, seed=2)
        x = synthetic_fixture(3, 16).images
        np.testing.assert_array_equal(forward_passes(ovr, params, x)[0],
                                      forward_passes(base, params, x)[0])


class TestDropout:
    def spec(self, rate):
        layers = (dense(8, "fg_relu", "E1"), LayerSpec("dropout", name="DO"),
                  dense(8, "relu", "D1"), dense(4, "sigmoid", "OUT"))
        return NetworkSpec((4,), layers, (FeedbackEdge(2, 0),), 2, dropout_rate=rate)

    def test_rate_zero_all_ones(self):
        masks = shared_dropout_masks(self.spec(0.0), np.random.default_rng(0), 5)
        assert np.all(masks["dropout/DO"] == 1.0)

    def test_shared_across_passes(self):
        spec = self.spec(0.5)
        params, _ = init_params(spec)
        tape = unroll(spec, params, training=True)
        masks = shared_dropout_masks(spec, np.random.default_rng(0), 3)
        tape.forward({"x": np.ones((3, 4)), **masks})
        mul_nodes = [n for n in tape.nodes if n.kind == "mul"]
        assert len(mul_nodes) == 2
        assert mul_nodes[0].parents[1] is mul_nodes[1].parents[1]
        assert set(np.unique(masks["dropout/DO"])) <= {0.0, 2.0}

    def test_eval_no_masking(self):
        spec = self.spec(0.5)
        masks = shared_dropout_masks(spec, np.random.default_rng(0), 3, training=False)
        assert np.all(masks["dropout/DO"] == 1.0)
        params, _ = init_params(spec)
        assert not any(n.startswith("dropout/") for n in unroll(spec, params).placeholders)

    def test_bad_rate(self):
        spec = self.spec(0.0)
        layers = tuple(dataclasses.replace(l, rate=1.0) if l.kind == "dropout" else l
                       for l in spec.layers)
        with pytest.raises(ParameterError):
            shared_dropout_masks(spec.replace(layers=layers), np.random.default_rng(0), 2)


class TestPresets:
    def test_mnist_widths(self):
        spec = preset("mnist_ae_196")
        assert [l.size for l in spec.layers] == [392, 196, 392, 784]
        assert spec.input_shape == (784,)
        assert spec.layers[-1].activation == "sigmoid"

    def test_bottleneck(self):
        assert preset("mnist_ae_10").layers[1].size == 10

    def test_partial_edge(self):
        spec = preset("mnist_ae_10_partial")
        assert [(e.source, e.target) for e in spec.feedback_edges] == [(2, 0)]
        assert spec.timesteps == 2

    def test_comprehensive(self):
        spec = preset("mnist_ae_10_comprehensive")
        assert len(spec.feedback_edges) == 6
        fb = param_count(init_params(spec)[0]) - param_count(init_params(preset("mnist_ae_10"))[0])
        sizes = [392, 10, 392, 784]
        assert fb == sum(sizes[t] * sizes[s] for t in range(4) for s in range(t + 1, 4))

    def test_cifar_shapes(self):
        assert preset("cifar_ae").shapes[-1] == (3, 32, 32)
        assert preset("cifar_ae_bn").shapes[-1] == (3, 32, 32)
        clf = preset("cifar_clf")
        kinds = [l.kind for l in clf.layers]
        assert kinds[:4] == ["conv2d", "max_pool", "batch_norm", "dropout"]
        assert clf.shapes[-1] == (10,) and clf.dropout_rate == 0.5
        assert clf.layers[-1].activation == "softmax"

    def test_cifar_feedback_is_filterwise(self):
        spec = with_feedback(preset("cifar_ae"), "partial")
        params, _ = init_params(spec)
        assert params["fb/D1->E1"].shape == (16, 16)


class TestNetworkAndCheckpoint:
    def test_call_and_passes(self):
        net = Network(small_ae(), seed=0)
        x = synthetic_fixture(2, 16).images
        passes = net(x, passes=True)
        assert len(passes) == 2
        np.testing.assert_array_equal(net(x), passes[-1])

    def test_seed_determines_init(self):
        a, b = Network(small_ae(), seed=3), Network(small_ae(), seed=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_feedback_twin_shares_init(self):
        fb = Network(small_ae(), seed=3)
        base = Network(small_ae().without_feedback(), seed=3)
        for k, v in base.params.items():
            np.testing.assert_array_equal(fb.params[k], v)

    def test_checkpoint_roundtrip(self, tmp_path):
        net = Network(preset("cifar_ae_bn").replace(), seed=1)
        net.state["E1_bn/mean"] += 0.5
        path = tmp_path / "checkpoint.bin"
        rng_state = np.random.default_rng(5).bit_generator.state
        save_checkpoint(path, net, rng_state)
        again, rs = load_checkpoint(path)
        assert rs == rng_state
        assert again.spec.to_dict() == net.spec.to_dict()
        for k in net.params:
            assert again.params[k].tobytes() == net.params[k].tobytes()
        for k in net.state:
            assert again.state[k].tobytes() == net.state[k].tobytes()

    def test_single_precision(self):
        net = Network(small_ae(), seed=0, dtype=np.float32)
        assert all(v.dtype == np.float32 for v in net.params.values())
        assert net(synthetic_fixture(2, 16).images.astype(np.float32)).dtype == np.float32
