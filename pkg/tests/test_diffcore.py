import numpy as np
import pytest

from czsl import diffcore as dc
from czsl import kernels


def tree(**leaves):
    return dc.ParamTree((k, np.asarray(v, dtype=float)) for k, v in leaves.items())


def central_diff(f, params, *inputs, step=1e-5):
    """Independent oracle: plain central differences, no kink handling."""
    out = {}
    for name in params:
        leaf = params[name]
        g = np.zeros(leaf.size)
        for i in range(leaf.size):
            vals = []
            for s in (step, -step):
                b = leaf.copy().reshape(-1)
                b[i] += s
                t = dc.ParamTree((k, b.reshape(leaf.shape) if k == name else v) for k, v in params.items())
                vals.append(float(dc.evaluate(f, t, *inputs)))
            g[i] = (vals[0] - vals[1]) / (2 * step)
        out[name] = g.reshape(leaf.shape)
    return dc.ParamTree(out)


def rel_err(a: dc.ParamTree, b: dc.ParamTree, floor=1e-6):
    return max(float(np.max(np.abs(a[k] - b[k]) / np.maximum(np.maximum(np.abs(a[k]), np.abs(b[k])), floor)))
               for k in a)


# --- evaluate ---------------------------------------------------------------

def test_evaluate_identity():
    out = dc.evaluate(lambda P, x: dc.as_tensor(x), dc.ParamTree(), np.array([1.0, 2.0, 3.0]))
    assert out.tolist() == [1.0, 2.0, 3.0]


def test_evaluate_identity_matrix():
    x = np.array([[0.5], [-1.0], [2.0]])
    out = dc.evaluate(lambda P, x: P["W"] @ x, tree(W=np.eye(3)), x)
    np.testing.assert_array_equal(out, x)


def test_softmax_uniform():
    out = dc.evaluate(lambda P: dc.softmax(dc.Tensor(np.zeros(4))), dc.ParamTree())
    np.testing.assert_allclose(out, [0.25] * 4, atol=1e-15)


def test_shape_error_names_op():
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.evaluate(lambda P: P["a"] @ P["b"], tree(a=np.ones((2, 3)), b=np.ones((2, 3))))


def test_evaluate_is_referentially_transparent():
    rng = np.random.default_rng(0)
    P = tree(w=rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))
    f = lambda P, x: dc.sigmoid(dc.as_tensor(x) @ P["w"])  # noqa: E731
    a, b = dc.evaluate(f, P, x), dc.evaluate(f, P, x)
    assert a.tobytes() == b.tobytes()
    assert P["w"].flags.writeable is False


# --- gradient ---------------------------------------------------------------

def test_grad_square():
    g = dc.gradient(lambda P: dc.tsum(P["w"] * P["w"]), tree(w=[3.0]))
    assert g["w"].tolist() == [6.0]


def test_grad_constant_is_zero_tree():
    P = tree(w=[1.0, 2.0], b=[[3.0]])
    g = dc.gradient(lambda P: dc.Tensor(np.array(7.0)), P)
    assert list(g) == list(P)
    assert all(np.all(v == 0) for v in g.values())


def test_non_scalar_output_rejected():
    with pytest.raises(dc.NonScalarError):
        dc.gradient(lambda P: P["w"] * 2.0, tree(w=[1.0, 2.0]))


def _mlp_loss(P, x, y):
    h = dc.relu(dc.as_tensor(x) @ P["w0"] + P["b0"])
    return dc.mean(dc.softmax_cross_entropy(h @ P["w1"] + P["b1"], y))


def _mlp(rng):
    P = tree(w0=rng.normal(size=(6, 8)), b0=rng.normal(size=8) * 0.1,
             w1=rng.normal(size=(8, 4)), b1=rng.normal(size=4) * 0.1)
    x = rng.normal(size=(10, 6))
    y = np.eye(4)[rng.integers(0, 4, 10)]
    return P, x, y


def test_mlp_gradient_matches_oracle():
    P, x, y = _mlp(np.random.default_rng(1))
    assert rel_err(dc.gradient(_mlp_loss, P, x, y), central_diff(_mlp_loss, P, x, y)) < 1e-4
    assert dc.finite_diff_check(_mlp_loss, P, x, y) < 1e-4


def test_finite_diff_linear_exact():
    rng = np.random.default_rng(2)
    c = rng.normal(size=(3, 4))
    assert dc.finite_diff_check(lambda P: dc.tsum(P["w"] * c), tree(w=rng.normal(size=(3, 4)))) < 1e-9


def test_finite_diff_skips_relu_kink():
    # pre-activation exactly at 0 for the first coordinate: its one-sided slopes disagree
    f = lambda P: dc.tsum(dc.relu(P["w"]))  # noqa: E731
    P = tree(w=[0.0, 1.0, -2.0])
    err, info = dc.finite_diff_check(f, P, return_details=True)
    assert info["skipped"] == 1
    assert err < 1e-9


def test_gradient_linearity():
    P, x, y = _mlp(np.random.default_rng(3))
    f = lambda P, x, y: _mlp_loss(P, x, y)  # noqa: E731
    g_ = lambda P, x, y: dc.tsum(dc.sigmoid(dc.as_tensor(x) @ P["w0"]))  # noqa: E731
    both = dc.gradient(lambda P, x, y: f(P, x, y) + g_(P, x, y), P, x, y)
    split = dc.gradient(f, P, x, y) + dc.gradient(g_, P, x, y)
    assert both.max_abs_diff(split) < 1e-10


# --- per-op property test: >= 100 seeded trials per op --------------------------

def _ops():
    def add(P):
        return dc.tsum(dc.sigmoid(P["a"] + P["b"]))

    def matmul(P):
        return dc.tsum(dc.sigmoid(P["a"] @ P["c"]))

    def relu(P):
        return dc.tsum(dc.relu(P["a"]) * P["b"])

    def sigmoid(P):
        return dc.tsum(dc.sigmoid(P["a"]) * P["b"])

    def sce(P):
        t = np.full(P["a"].shape, 1.0 / P["a"].shape[-1])
        return dc.mean(dc.softmax_cross_entropy(P["a"] * P["b"], t))

    def gap(P):
        x = dc.reshape(P["a"] * P["b"], (1, 1) + P["a"].shape)
        return dc.tsum(dc.sigmoid(dc.global_avg_pool(x)) * 3.0)

    def mul(P):
        return dc.tsum(dc.sigmoid(P["a"] * P["b"]))

    def cat(P):
        return dc.tsum(dc.sigmoid(dc.concat([P["a"], P["b"]], axis=0)) * np.arange(2 * P["a"].shape[0])[:, None])

    return {"add": add, "matmul": matmul, "relu": relu, "sigmoid": sigmoid,
            "softmax_cross_entropy": sce, "global_avg_pool": gap, "mul": mul, "concat": cat}


@pytest.mark.parametrize("name", list(_ops()))
def test_primitive_op_gradients(name):
    f = _ops()[name]
    rng = np.random.default_rng(sorted(_ops()).index(name))
    worst = 0.0
    for _ in range(100):
        r, c = rng.integers(1, 4, 2)
        P = tree(a=rng.normal(size=(r, c)), b=rng.normal(size=(r, c)), c=rng.normal(size=(c, 3)))
        worst = max(worst, dc.finite_diff_check(f, P))
    assert worst < 1e-4


# --- second order ---------------------------------------------------------------

def test_second_derivative_of_cube():
    w = dc.Tensor(np.array([2.0]), requires_grad=True)
    (g,) = dc.grad(dc.tsum(w * w * w), [w], create_graph=True)
    (h,) = dc.grad(dc.tsum(g), [w])
    assert h.data.tolist() == [12.0]


def test_hessian_vector_product_matches_fd():
    P, x, y = _mlp(np.random.default_rng(4))
    P = P.subtree("w1").merge(P.subtree("b1"))
    h = np.maximum(x @ np.random.default_rng(4).normal(size=(6, 8)), 0)

    def loss(P):
        return dc.mean(dc.softmax_cross_entropy(dc.as_tensor(h) @ P["w1"] + P["b1"], y))

    v = P.map(lambda a: np.random.default_rng(5).normal(size=a.shape))
    leaves = P.to_tensors(requires_grad=True)
    gs = dc.grad(loss(leaves), list(leaves.values()), create_graph=True)
    gv = sum(dc.tsum(g * v[k]) for g, k in zip(gs, leaves))
    hv = dc.grad(gv, list(leaves.values()))
    eps = 1e-5
    fd = (dc.gradient(loss, P + v * eps) - dc.gradient(loss, P - v * eps)) / (2 * eps)
    for (k, a), b in zip(fd.items(), hv):
        np.testing.assert_allclose(b.data, a, rtol=1e-5, atol=1e-8)


# --- conv / pool, both kernel paths ----------------------------------------------

@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def kernel_path(request):
    prev = kernels.use_numba()
    kernels.use_numba(request.param)
    yield request.param
    kernels.use_numba(prev)


def test_conv_pool_gradients(kernel_path):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 3, 6, 6))
    P = tree(w=rng.normal(size=(4, 3, 3, 3)) * 0.3, b=rng.normal(size=4) * 0.1)

    def f(P, x):
        return dc.tsum(dc.sigmoid(dc.maxpool2x2(dc.conv2d(x, P["w"], P["b"], pad=1))))

    assert dc.finite_diff_check(f, P, x) < 1e-4


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(w), dc.Tensor(b), pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_kernel_paths_agree():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4, 8, 8))
    prev = kernels.use_numba()
    try:
        res = {}
        for flag in (True, False):
            kernels.use_numba(flag)
            cols = kernels.im2col(x, 3, 1)
            pooled, arg = kernels.maxpool2x2(x)
            back = kernels.col2im(cols, x.shape, 3, 1)
            res[flag] = (cols, pooled, arg, back, kernels.maxpool2x2_backward(pooled, arg, x.shape))
        for a, b in zip(res[True], res[False]):
            np.testing.assert_array_equal(a, b)
    finally:
        kernels.use_numba(prev)


def test_conv_is_first_order_only():
    x = dc.Tensor(np.ones((1, 1, 4, 4)))
    w = dc.Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    out = dc.tsum(dc.conv2d(x, w, None, pad=1))
    with pytest.raises(NotImplementedError, match="conv2d"):
        dc.grad(out, [w], create_graph=True)
    (g,) = dc.grad(out, [w])
    assert g.data.sum() == 100.0  # valid taps over a 4x4 input with zero padding


# --- ParamTree ------------------------------------------------------------------

def test_paramtree_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    P = tree(**{"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "s": np.array(np.pi)})
    P.save(tmp_path / "p.params")
    Q = dc.ParamTree.load(tmp_path / "p.params")
    assert list(Q) == list(P) and P.bit_equal(Q)
    assert dc.ParamTree.from_bytes(P.to_bytes()).bit_equal(P)


def test_paramtree_arithmetic_and_structure_checks():
    P = tree(a=[1.0, 2.0], b=[[3.0]])
    Q = (P + P) * 0.5 - P
    assert Q.norm() == 0.0
    assert P.dot(P) == 14.0
    with pytest.raises(ValueError):
        P + tree(a=[1.0, 2.0])
