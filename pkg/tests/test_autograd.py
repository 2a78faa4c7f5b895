import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fgrelu.activation import FgReluParams
from fgrelu.autograd import PRIMITIVES, Tape, backward, finite_diff_check, forward
from fgrelu.errors import ContractError, DimensionError, DomainError, GraphError


def scalar_tape(fn, **params):
    """Tape whose parameters are ``params`` and whose output is ``fn(tape, *nodes)``."""
    tape = Tape({k: np.asarray(v, dtype=float) for k, v in params.items()})
    nodes = [tape.parameter(k) for k in params]
    fn(tape, *nodes)
    return tape


class TestForward:
    def test_identity(self):
        tape = Tape()
        tape.apply("identity", tape.placeholder("x"))
        assert forward(tape, {"x": 7.0}) == 7.0

    def test_square(self):
        tape = Tape()
        tape.apply("square", tape.placeholder("x"))
        assert forward(tape, {"x": 3.0}) == 9.0

    def test_unbound_placeholder(self):
        tape = Tape()
        tape.apply("identity", tape.placeholder("x"))
        with pytest.raises(GraphError):
            forward(tape, {})

    def test_unknown_primitive_and_parameter(self):
        tape = Tape()
        with pytest.raises(GraphError):
            tape.apply("nope", tape.placeholder("x"))
        with pytest.raises(GraphError):
            tape.parameter("w")

    def test_foreign_parent_rejected(self):
        a, b = Tape(), Tape()
        x = a.placeholder("x")
        with pytest.raises(GraphError):
            b.apply("identity", x)

    def test_parents_precede_children(self):
        tape = scalar_tape(lambda t, w: t.apply("sum", t.apply("square", w)), w=[1.0, 2.0])
        for node in tape.nodes:
            assert all(p.id < node.id for p in node.parents)


class TestBackward:
    def test_identity_grad(self):
        tape = scalar_tape(lambda t, x: t.apply("identity", x), x=5.0)
        tape.forward()
        assert backward(tape)["x"] == 1.0

    def test_square_grad_matches_central_difference(self):
        tape = scalar_tape(lambda t, x: t.apply("square", x), x=3.0)
        tape.forward()
        g = backward(tape)["x"]
        numeric = ((3 + 1e-6) ** 2 - (3 - 1e-6) ** 2) / 2e-6
        assert g == 6.0
        assert abs(g - numeric) < 1e-8

    def test_relu_dead(self):
        tape = scalar_tape(lambda t, x: t.apply("relu", x), x=-1.0)
        tape.forward()
        assert backward(tape)["x"] == 0.0

    def test_relu_at_zero(self):
        tape = scalar_tape(lambda t, x: t.apply("relu", x), x=0.0)
        tape.forward()
        assert backward(tape)["x"] == 0.0

    def test_non_scalar_output(self):
        tape = scalar_tape(lambda t, x: t.apply("identity", x), x=[1.0, 2.0])
        tape.forward()
        with pytest.raises(ContractError):
            backward(tape)

    def test_backward_before_forward(self):
        tape = scalar_tape(lambda t, x: t.apply("identity", x), x=1.0)
        with pytest.raises(ContractError):
            tape.backward()

    def test_shared_parameter_doubles_gradient(self):
        x = np.array([[0.3, -1.2, 2.0]])
        w = np.random.default_rng(0).normal(size=(2, 3))

        def once(t, w_):
            return t.apply("sum", t.apply("square", t.apply("matmul_t", t.constant(x), w_)))

        single = scalar_tape(once, w=w)
        single.forward()
        g1 = single.backward()["w"]
        double = Tape({"w": w.copy()})
        wn = double.parameter("w")
        double.apply("add", once(double, wn), once(double, wn))
        double.forward()
        g2 = double.backward()["w"]
        np.testing.assert_array_equal(g2, 2 * g1)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        tape = scalar_tape(lambda t, w: t.apply("mean", t.apply("sigmoid", w)),
                           w=rng.normal(size=(4, 5)))
        tape.forward()
        g1 = tape.backward()["w"].copy()
        tape.forward()
        np.testing.assert_array_equal(tape.backward()["w"], g1)

    def test_stop_gradient(self):
        tape = scalar_tape(lambda t, x: t.apply("mul", x, t.apply("stop_gradient", x)), x=3.0)
        tape.forward()
        assert tape.backward()["x"] == 3.0

    def test_unused_parameter_gets_zero(self):
        tape = Tape({"a": np.ones(2), "b": np.ones(3)})
        tape.parameter("b")
        tape.apply("sum", tape.parameter("a"))
        tape.forward()
        np.testing.assert_array_equal(tape.backward()["b"], np.zeros(3))

    def test_grad_shape_equals_value_shape(self):
        tape = scalar_tape(lambda t, w: t.apply("sum", t.apply("relu", w)),
                           w=np.ones((3, 2)))
        tape.forward()
        tape.backward()
        for node in tape.nodes:
            if node.grad is not None:
                assert np.shape(node.grad) == np.shape(node.value)


class TestFiniteDiffCheck:
    def test_linear_model_exact(self):
        x = np.array([[1.5, -2.0, 0.25]])
        tape = scalar_tape(lambda t, w: t.apply("sum", t.apply("matmul_t", t.constant(x), w)),
                           w=[[0.1, 0.2, 0.3]])
        assert finite_diff_check(tape, "w") <= 1e-9

    def test_two_layer_relu(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 5))
        params = {"W1": rng.normal(size=(6, 5)), "W2": rng.normal(size=(1, 6))}
        tape = Tape(params)
        h = tape.apply("relu", tape.apply("matmul_t", tape.placeholder("x"), tape.parameter("W1")))
        tape.apply("mean", tape.apply("matmul_t", h, tape.parameter("W2")))
        # random Gaussian init keeps every pre-activation far from 0
        for p in params:
            assert finite_diff_check(tape, p, 1e-6, {"x": x}) <= 1e-6

    def test_restores_parameters(self):
        w = np.array([1.0, 2.0])
        tape = scalar_tape(lambda t, w_: t.apply("sum", t.apply("square", w_)), w=w)
        before = tape.params["w"].copy()
        finite_diff_check(tape, "w")
        np.testing.assert_array_equal(tape.params["w"], before)

    def test_extended_oracle_on_tiny_gradient(self):
        # d/dw mean(1e-9 * w^2 + 1) at w = 1 is 2e-9: float64 differences of a
        # loss near 1 lose most of that, extended precision keeps it
        tape = scalar_tape(lambda t, w_: t.apply("mean", t.apply(
            "add", t.apply("scale", t.apply("square", w_), factor=1e-9), t.constant(np.ones(1)))),
            w=[1.0])
        assert finite_diff_check(tape, "w", 1e-5) > 1e-6
        wide = finite_diff_check(tape, "w", 1e-5, oracle_dtype=np.longdouble)
        if np.finfo(np.longdouble).eps < np.finfo(np.float64).eps:
            assert wide < 1e-6
        assert tape.params["w"].dtype == np.float64


# --- every differentiable primitive against central differences ------------

def _check_primitive(kind, values, attrs=None, param_slots=None, tol=1e-6, eps=1e-6):
    """Build ``sum(r * kind(*values))`` with a fixed random ``r`` and check each slot."""
    attrs = attrs or {}
    slots = range(len(values)) if param_slots is None else param_slots
    params = {f"p{i}": np.array(v, dtype=float) for i, v in enumerate(values) if i in slots}
    tape = Tape(params)
    parents = [tape.parameter(f"p{i}") if i in slots else tape.constant(np.asarray(v))
               for i, v in enumerate(values)]
    out = tape.apply(kind, *parents, **attrs)
    tape.forward()
    r = np.random.default_rng(9).normal(size=np.shape(out.value))
    tape.apply("sum", tape.apply("mul", out, tape.constant(r)))
    for name in params:
        err = finite_diff_check(tape, name, eps)
        assert err <= tol, (kind, name, err)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


class TestPrimitiveGradients:
    rng = np.random.default_rng(42)

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_binary(self, kind):
        _check_primitive(kind, [self.rng.normal(size=(3, 4)), self.rng.normal(size=(3, 4))])

    @pytest.mark.parametrize("kind", ["square", "sigmoid", "identity", "mean", "sum"])
    def test_unary(self, kind):
        _check_primitive(kind, [self.rng.normal(size=(3, 4))])

    def test_scale(self):
        _check_primitive("scale", [self.rng.normal(size=5)], {"factor": -2.5})

    def test_relu(self):
        _check_primitive("relu", [_away_from_zero(self.rng, (4, 4))])

    def test_matmul_and_matmul_t(self):
        _check_primitive("matmul", [self.rng.normal(size=(3, 4)), self.rng.normal(size=(4, 2))])
        _check_primitive("matmul_t", [self.rng.normal(size=(3, 4)), self.rng.normal(size=(2, 4))])

    @pytest.mark.parametrize("shape", [(3, 4), (2, 3, 4, 4)])
    def test_add_bias(self, shape):
        _check_primitive("add_bias", [self.rng.normal(size=shape), self.rng.normal(size=shape[1])])

    def test_reshape(self):
        _check_primitive("reshape", [self.rng.normal(size=(2, 3, 2, 2))], {"shape": (12,)})

    def test_softmax(self):
        _check_primitive("softmax", [self.rng.normal(size=(3, 5))])

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_conv2d(self, padding):
        _check_primitive("conv2d", [self.rng.normal(size=(2, 2, 5, 5)),
                                    self.rng.normal(size=(3, 2, 3, 3))],
                         {"stride": 1, "padding": padding})

    def test_conv2d_transpose(self):
        _check_primitive("conv2d_transpose", [self.rng.normal(size=(2, 2, 3, 3)),
                                              self.rng.normal(size=(2, 3, 3, 3))], {"stride": 2})

    def test_max_pool(self):
        x = np.arange(2 * 2 * 4 * 4, dtype=float).reshape(2, 2, 4, 4)
        x = self.rng.permutation(x.ravel()).reshape(x.shape) * 0.1  # distinct values
        _check_primitive("max_pool2d", [x], eps=1e-4)

    def test_global_avg_pool_and_broadcast(self):
        _check_primitive("global_avg_pool", [self.rng.normal(size=(2, 3, 4, 4))])
        _check_primitive("broadcast_filters", [self.rng.normal(size=(2, 3))], {"spatial": (2, 3)})

    @pytest.mark.parametrize("training", [True, False])
    @pytest.mark.parametrize("shape", [(6, 4), (3, 2, 3, 3)])
    def test_batch_norm(self, training, shape):
        c = shape[1]
        run = (self.rng.normal(size=c), self.rng.uniform(0.5, 2.0, size=c))
        _check_primitive("batch_norm", [self.rng.normal(size=shape), self.rng.normal(size=c),
                                        self.rng.normal(size=c)],
                         {"training": training, "running": run}, tol=1e-5)

    def test_fg_relu(self):
        mu_s = _away_from_zero(self.rng, (4, 6))
        mu_d = self.rng.uniform(-4, 4, size=(4, 6))
        _check_primitive("fg_relu", [mu_s, mu_d], {"params": FgReluParams()})

    def test_fg_relu_threshold(self):
        mu_s = self.rng.uniform(0.5, 2.0, size=(4, 6))
        mu_d = self.rng.uniform(-3, 4, size=(4, 6))
        _check_primitive("fg_relu_threshold", [mu_s, mu_d, np.array([0.1])],
                         {"params": FgReluParams()})

    def test_gain_override(self):
        _check_primitive("gain_override", [_away_from_zero(self.rng, (3, 4))],
                         {"override": (0.0, 1.0, 2.5, 10.0)})

    def test_losses(self):
        p = self.rng.uniform(0.05, 0.95, size=(3, 4))
        t = self.rng.uniform(0, 1, size=(3, 4))
        _check_primitive("mse", [p, t], param_slots=[0])
        _check_primitive("bce", [p, t], param_slots=[0])
        probs = np.exp(p) / np.exp(p).sum(axis=1, keepdims=True)
        _check_primitive("softmax_cross_entropy", [probs, np.array([0, 3, 1])], param_slots=[0])

    def test_registry_covers_differentiable_kinds(self):
        for kind in ("fg_relu", "fg_relu_threshold", "gain_override", "batch_norm", "conv2d"):
            assert kind in PRIMITIVES


class TestLossDomain:
    def test_bce_rejects_out_of_range(self):
        tape = Tape()
        tape.apply("bce", tape.placeholder("p"), tape.placeholder("t"))
        with pytest.raises(DomainError):
            tape.forward({"p": np.array([1.2]), "t": np.array([1.0])})

    def test_shape_mismatch(self):
        tape = Tape()
        tape.apply("mse", tape.placeholder("p"), tape.placeholder("t"))
        with pytest.raises(DimensionError):
            tape.forward({"p": np.ones(3), "t": np.ones(4)})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dense_chain_gradients(seed):
    """Random small dense/sigmoid chains: analytic gradients agree with central differences."""
    rng = np.random.default_rng(seed)
    params = {"W1": rng.normal(size=(3, 4)), "b1": rng.normal(size=3), "W2": rng.normal(size=(2, 3))}
    tape = Tape(params)
    h = tape.apply("sigmoid", tape.apply("add_bias", tape.apply(
        "matmul_t", tape.placeholder("x"), tape.parameter("W1")), tape.parameter("b1")))
    tape.apply("mean", tape.apply("square", tape.apply("matmul_t", h, tape.parameter("W2"))))
    bind = {"x": rng.normal(size=(5, 4))}
    for name in params:
        assert finite_diff_check(tape, name, 1e-5, bind) <= 1e-6
