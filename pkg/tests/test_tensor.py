import math

import numpy as np
import pytest

from udfgen.tensor import (
    AdamState,
    Graph,
    GraphError,
    OptimizerError,
    adam_update,
    backpropagate,
    evaluate,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
)


def scalar(fwd, node):
    return float(fwd[node])


class TestForward:
    def test_matmul_ones(self):
        g = Graph()
        a = g.input("a", (2, 3))
        b = g.input("b", (3, 1))
        y = g.matmul(a, b)
        fwd = evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((3, 1))})
        assert np.array_equal(fwd[y], np.full((2, 1), 3.0))

    def test_sigmoid_zero(self):
        g = Graph()
        x = g.input("x", ())
        y = g.sigmoid(x)
        assert scalar(evaluate(g, {"x": 0.0}), y) == 0.5

    def test_softmax_uniform(self):
        g = Graph()
        x = g.input("x", (3,))
        y = g.softmax(x, axis=0)
        out = evaluate(g, {"x": np.ones(3)})[y]
        assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_purity_bit_identical(self):
        rng = np.random.default_rng(0)
        g = Graph()
        x = g.input("x", (5, 4))
        w = g.parameter("w", (4, 3))
        y = g.softmax(g.relu(g.matmul(x, w)), axis=1)
        binds = {"x": rng.normal(size=(5, 4))}
        params = {"w": rng.normal(size=(4, 3))}
        a = evaluate(g, binds, params)[y]
        b = evaluate(g, binds, params)[y]
        assert np.array_equal(a, b)

    def test_shape_mismatch_names_node(self):
        g = Graph()
        a = g.input("a", (2, 3))
        b = g.input("b", (2, 3))
        with pytest.raises(GraphError, match="matmul"):
            g.matmul(a, b)

    def test_nonfinite_output_names_node(self):
        g = Graph()
        x = g.input("x", (2,))
        y = g.log(x)
        with pytest.raises(GraphError, match="non-finite"):
            evaluate(g, {"x": np.array([1.0, 0.0])})

    def test_missing_binding(self):
        g = Graph()
        g.input("x", (2,))
        with pytest.raises(GraphError, match="missing"):
            evaluate(g, {})

    def test_topological_order_structural(self):
        g = Graph()
        x = g.input("x", (2, 2))
        y = g.relu(x)
        z = g.add(x, y)
        for node in g.nodes:
            for i in node.inputs:
                assert i < node.idx
        assert z.idx > y.idx > x.idx


class TestBackward:
    def test_linear_gradient(self):
        g = Graph()
        w = g.parameter("w", (2,))
        x = g.constant([1.0, 2.0])
        loss = g.sum_reduce(g.mul(w, x))
        fwd = evaluate(g, params={"w": np.zeros(2)})
        grads = backpropagate(g, loss, fwd)
        assert np.array_equal(grads["w"], [1.0, 2.0])

    def test_sigmoid_gradient_quarter(self):
        g = Graph()
        w = g.parameter("w", ())
        loss = g.sigmoid(w)
        fwd = evaluate(g, params={"w": 0.0})
        grads = backpropagate(g, loss, fwd)
        assert grads["w"] == pytest.approx(0.25, abs=1e-15)

    def test_detached_parameter_zero_grad(self):
        g = Graph()
        w = g.parameter("w", (3,))
        unused = g.parameter("u", (2, 2))
        loss = g.sum_reduce(w)
        fwd = evaluate(g, params={"w": np.ones(3), "u": np.ones((2, 2))})
        grads = backpropagate(g, loss, fwd)
        assert np.array_equal(grads["u"], np.zeros((2, 2)))

    def test_nonscalar_loss_rejected(self):
        g = Graph()
        w = g.parameter("w", (3,))
        loss = g.relu(w)
        fwd = evaluate(g, params={"w": np.ones(3)})
        with pytest.raises(GraphError, match="scalar"):
            backpropagate(g, loss, fwd)

    def test_mlp_matches_finite_differences(self):
        # random 3-layer MLP, finite-difference oracle with step 1e-5
        rng = np.random.default_rng(7)
        g = Graph()
        x = g.input("x", (4, 3))
        h = x
        sizes = [(3, 8), (8, 8), (8, 1)]
        params = {}
        for i, (m, n) in enumerate(sizes):
            w = g.parameter(f"w{i}", (m, n))
            b = g.parameter(f"b{i}", (n,))
            params[f"w{i}"] = rng.normal(size=(m, n)) * 0.5
            params[f"b{i}"] = rng.normal(size=n) * 0.1
            h = g.add(g.matmul(h, w), b)
            if i < 2:
                h = g.relu(h)
            else:
                h = g.sigmoid(h)
        loss = g.mean(h)
        err = gradient_check(g, loss, {"x": rng.normal(size=(4, 3))}, params, step=1e-5)
        assert err < 1e-4

    def test_zero_parameter_graph(self):
        g = Graph()
        x = g.input("x", (3,))
        loss = g.mean(x)
        assert gradient_check(g, loss, {"x": np.ones(3)}, {}) == 0.0

    def test_linear_check_near_exact(self):
        g = Graph()
        w = g.parameter("w", (4,))
        x = g.constant(np.arange(4.0))
        loss = g.sum_reduce(g.mul(w, x))
        err = gradient_check(g, loss, {}, {"w": np.ones(4)}, step=1e-4)
        assert err < 1e-8


OP_CASES = [
    "add",
    "add_bias",
    "sub",
    "mul",
    "mul_row",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "softmax",
    "reshape",
    "broadcast",
    "concat",
    "slice",
    "gather",
    "max",
    "sum_axis",
    "sum_all",
    "mean",
]


@pytest.mark.parametrize("kind", OP_CASES)
def test_every_op_kind_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    g = Graph()
    params = {}
    inputs = {}

    def new_param(shape, spread=1.0, offset=0.0):
        name = f"p{len(params)}"
        node = g.parameter(name, shape)
        params[name] = rng.normal(size=shape) * spread + offset
        return node

    if kind == "add":
        out = g.add(new_param((3, 4)), new_param((3, 4)))
    elif kind == "add_bias":
        out = g.add(new_param((3, 4)), new_param((4,)))
    elif kind == "sub":
        out = g.sub(new_param((3, 4)), new_param((1, 4)))
    elif kind == "mul":
        out = g.mul(new_param((2, 5)), new_param((2, 5)))
    elif kind == "mul_row":
        out = g.mul(new_param((6, 3)), new_param((1, 3)))
    elif kind == "neg":
        out = g.neg(new_param((4,)))
    elif kind == "scale":
        out = g.scale(new_param((4, 2)), -2.5)
    elif kind == "matmul":
        out = g.matmul(new_param((3, 4)), new_param((4, 2)))
    elif kind == "transpose":
        out = g.transpose(new_param((3, 5)))
    elif kind == "relu":
        out = g.relu(new_param((40,)))
    elif kind == "sigmoid":
        out = g.sigmoid(new_param((7,), spread=2.0))
    elif kind == "log":
        out = g.log(new_param((6,), spread=0.2, offset=2.0))
    elif kind == "clip":
        out = g.clip(new_param((30,)), -0.5, 0.5)
    elif kind == "softmax":
        out = g.softmax(new_param((4, 5)), axis=1)
    elif kind == "reshape":
        out = g.reshape(new_param((3, 4)), (2, 6))
    elif kind == "broadcast":
        out = g.broadcast(new_param((1, 4)), (5, 4))
    elif kind == "concat":
        out = g.concat([new_param((2, 3)), new_param((2, 2))], axis=1)
    elif kind == "slice":
        out = g.slice(new_param((6, 3)), 0, 1, 4)
    elif kind == "gather":
        idx = g.input("idx", (5,))
        inputs["idx"] = np.array([0.0, 2.0, 1.0, 2.0, 0.0])
        out = g.gather(new_param((3, 4)), idx)
    elif kind == "max":
        out = g.max_reduce(new_param((4, 6)), axis=1)
    elif kind == "sum_axis":
        out = g.sum_reduce(new_param((3, 4)), axis=0, keepdims=True)
    elif kind == "sum_all":
        out = g.sum_reduce(new_param((3, 4)))
    elif kind == "mean":
        out = g.mean(new_param((5, 2)))
    else:
        raise AssertionError(kind)

    # reduce through a fixed random projection so the loss mixes every output
    if out.shape != ():
        w = g.constant(rng.normal(size=out.shape))
        loss = g.sum_reduce(g.mul(out, w))
    else:
        loss = out
    err = gradient_check(g, loss, inputs, params, step=1e-5)
    assert err < 1e-4, f"{kind}: {err}"


class TestAdam:
    def test_first_step_moves_by_lr(self):
        state = AdamState(learning_rate=1e-4)
        params = {"p": np.zeros(())}
        adam_update(state, params, {"p": np.asarray(1.0)})
        assert params["p"] == pytest.approx(-1e-4, rel=1e-6)
        assert state.step_count == 1

    def test_zero_gradient_no_move(self):
        state = AdamState()
        params = {"p": np.full((3,), 2.0)}
        adam_update(state, params, {"p": np.zeros(3)})
        assert np.array_equal(params["p"], np.full(3, 2.0))
        assert state.step_count == 1

    def test_two_steps_match_hand_recurrence(self):
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        state = AdamState(learning_rate=lr, beta1=b1, beta2=b2, eps=eps)
        params = {"p": np.asarray(1.0)}
        grads = [0.5, -0.3]

        # hand recurrence
        p, m, v = 1.0, 0.0, 0.0
        for t, gr in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * gr
            v = b2 * v + (1 - b2) * gr * gr
            p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)

        for gr in grads:
            adam_update(state, params, {"p": np.asarray(gr)})
        assert float(params["p"]) == pytest.approx(p, abs=1e-15)

    def test_nonfinite_gradient_names_parameter(self):
        state = AdamState()
        with pytest.raises(OptimizerError, match="bad_param"):
            adam_update(state, {"bad_param": np.zeros(2)}, {"bad_param": np.array([1.0, np.nan])})


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        tensors = {
            "layer/weight": rng.normal(size=(4, 7)),
            "layer/bias": rng.normal(size=7),
            "scalar": np.asarray(3.5),
        }
        path = tmp_path / "model.udfw"
        save_checkpoint(path, tensors)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.udfw"
        save_checkpoint(path, {"a": np.zeros(2)})
        raw = path.read_bytes()
        assert raw[:4] == b"UDFW"
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 1  # count

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "m.bin"
        save_checkpoint(path, {"a": np.zeros(2)}, magic=b"ZLAT")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
        assert load_checkpoint(path, magic=b"ZLAT")["a"].shape == (2,)
