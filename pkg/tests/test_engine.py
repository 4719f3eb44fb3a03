import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vltseg.engine import (
    Adam,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    concat,
    current_tape,
    exp,
    kernels,
    log,
    matmul,
    no_grad,
    relu,
    reset_tape,
    sigmoid,
    tanh,
)
from vltseg.engine import checkpoint as ckpt
from vltseg.engine import functional as F
from vltseg.engine.gradcheck import check_gradients
from vltseg.engine.nn import Conv2d, LayerNorm, Linear, Module, Parameter


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- matmul ----------------------------------------------------------------


def test_matmul_identity_and_zero():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    assert not matmul(Tensor(np.zeros((2, 2))), Tensor(x)).data.any()


def test_matmul_hand_example():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_matmul_bitwise_equals_triple_loop(backend):
    if backend == "cython":
        pytest.importorskip("vltseg.engine._kernels")
    default = kernels.BACKEND
    kernels.use(backend)
    try:
        rng = np.random.default_rng(0)
        for _ in range(200):
            m, k, p = rng.integers(1, 9, size=3)
            a = rng.standard_normal((m, k))
            b = rng.standard_normal((k, p))
            assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b))
    finally:
        kernels.use(default)


def test_backends_agree_bitwise_on_batched_shapes():
    pytest.importorskip("vltseg.engine._kernels")
    from vltseg.engine import _kernels, _pykernels

    rng = np.random.default_rng(1)
    for shape in [(3, 17, 9, 33), (1, 64, 27, 16), (2, 1, 1, 1), (4, 5, 0, 3)]:
        n, m, k, p = shape
        a = rng.standard_normal((n, m, k))
        b = rng.standard_normal((n, k, p))
        assert np.array_equal(_kernels.matmul3(a, b), _pykernels.matmul3(a, b))


def test_matmul_backward_rule():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    backward((matmul(a, b) * Tensor(g)).sum())
    assert np.allclose(a.grad, g @ b.data.T, atol=1e-14)
    assert np.allclose(b.grad, a.data.T @ g, atol=1e-14)


def test_batched_matmul_broadcasts_weight():
    rng = np.random.default_rng(3)
    x, w = leaf(rng.standard_normal((2, 5, 3))), leaf(rng.standard_normal((3, 4)))
    out = matmul(x, w)
    assert np.allclose(out.data, x.data @ w.data, atol=1e-13)
    backward(out.sum())
    assert np.allclose(w.grad, x.data.reshape(-1, 3).T @ np.ones((10, 4)), atol=1e-12)


# -- softmax ---------------------------------------------------------------


def test_softmax_trivial_cases():
    assert F.softmax(Tensor([[3.0]])).data.tolist() == [[1.0]]
    assert np.allclose(F.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)


def test_softmax_large_logits_against_mpmath():
    out = F.softmax(Tensor([1000.0, 1001.0])).data
    e = mpmath.e
    want = [float(1 / (1 + e)), float(e / (1 + e))]
    assert abs(out[0] - want[0]) < 1e-15 and abs(out[1] - want[1]) < 1e-15
    assert abs(out[0] - 0.2689) < 1e-4


def test_softmax_empty_axis_errors():
    with pytest.raises(ShapeError):
        F.softmax(Tensor(np.zeros((2, 0))))


def test_softmax_mask_gives_exact_zero():
    out = F.softmax(Tensor([1.0, 2.0, 3.0]), mask=[True, True, False]).data
    assert out[2] == 0.0
    assert abs(out.sum() - 1.0) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_probability_vector(vals):
    out = F.softmax(Tensor(vals)).data
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) < 1e-9


# -- elementwise suite -----------------------------------------------------


def test_elementwise_examples():
    assert sigmoid(Tensor(0.0)).item() == 0.5
    assert relu(Tensor([-3.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1.0, 2.0, 3.0]


def test_broadcast_incompatible_is_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4,)))


def test_sigmoid_stable_at_extremes():
    out = sigmoid(Tensor([-800.0, 800.0])).data
    assert out[0] == 0.0 or out[0] < 1e-300
    assert out[1] == 1.0


# -- backward --------------------------------------------------------------


def test_backward_square_sum():
    x = leaf([1.0, 2.0])
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_sigmoid_at_zero():
    w = leaf([0.0, 0.0, 0.0])
    x = Tensor([1.0, -2.0, 3.0])
    backward(sigmoid((w * x).sum()))
    assert np.allclose(w.grad, 0.25 * x.data, atol=1e-15)


def test_backward_non_scalar_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(x * 2.0)
    reset_tape()


def test_tensor_used_twice_accumulates():
    x = leaf([3.0])
    y = x * 2.0 + x * x
    backward(y.sum())
    assert x.grad.tolist() == [2.0 + 6.0]


def test_tape_is_topological_and_consumed():
    reset_tape()
    x = leaf([1.0, 2.0])
    y = exp(x)
    z = (y * x).sum()
    tape = current_tape()
    seen = {x.node_id}
    for rec in tape.records:
        assert all(t.node_id in seen or t.is_leaf for t in rec.inputs)
        seen.add(rec.output.node_id)
    backward(z)
    assert len(current_tape().records) == 0


def test_no_grad_records_nothing():
    reset_tape()
    x = leaf([1.0])
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(current_tape().records) == 0


def test_non_finite_values_are_checked_errors():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NonFiniteError):
        log(Tensor([0.0]))


def test_threads_have_independent_tapes():
    reset_tape()
    x = leaf([1.0])
    _ = x * 2.0
    sizes = []

    def worker():
        sizes.append(len(current_tape().records))

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert sizes == [0]
    assert len(current_tape().records) == 1
    reset_tape()


def _random_graph_loss(params, rng):
    a, b, c = params
    x = Tensor(rng.standard_normal((3, 4)))

    def loss():
        h = tanh(matmul(x, a) + b)
        h2 = sigmoid(h * c) + relu(h) * 0.5
        s = F.softmax(h2, axis=-1)
        return (log(s + 1.0) * exp(h * 0.1)).mean() + (concat([h, h2], axis=0) ** 2).sum() * 0.01

    return loss


@pytest.mark.parametrize("seed", range(5))
def test_random_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params = [leaf(rng.standard_normal((4, 5))), leaf(rng.standard_normal(5)), leaf(rng.standard_normal((3, 5)))]
    rep = check_gradients(_random_graph_loss(params, rng), [(str(i), p) for i, p in enumerate(params)])
    assert rep.pass_fraction == 1.0, rep.failures()[:3]


def test_fused_ops_match_finite_differences():
    rng = np.random.default_rng(7)
    x = leaf(rng.standard_normal((2, 4, 4, 3)))
    conv = Conv2d(3, 2, 3, rng, stride=2)
    conv.bias.data = rng.standard_normal(2)
    ln = LayerNorm(2)
    ln.gamma.data = rng.uniform(0.5, 1.5, 2)
    target = (rng.uniform(size=(2, 4, 4)) > 0.5).astype(float)

    def loss():
        y = ln(conv(x))
        up = F.upsample2x(y)
        return F.bce_with_logits(up.sum(axis=-1), target) + F.resize_nearest(y, (3, 3)).mean()

    named = [("x", x)] + list(conv.named_parameters("conv.")) + list(ln.named_parameters("ln."))
    rep = check_gradients(loss, named)
    assert rep.pass_fraction == 1.0, rep.failures()[:3]


# -- fused ops against oracles ---------------------------------------------


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 5, 4, 3))
    conv = Conv2d(3, 4, 3, rng)
    conv.bias.data = rng.standard_normal(4)
    got = conv(Tensor(x)).data
    want = oracles.conv2d_same(x, conv.weight.data, conv.bias.data, 3)
    assert np.max(np.abs(got - want)) < 1e-12


def test_layer_norm_matches_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 6))
    ln = LayerNorm(6)
    ln.gamma.data = rng.standard_normal(6)
    ln.beta.data = rng.standard_normal(6)
    got = ln(Tensor(x)).data
    for i in range(3):
        want = oracles.layer_norm_vec(list(x[i]), ln.gamma.data, ln.beta.data, 1e-5)
        assert np.max(np.abs(got[i] - want)) < 1e-12


def test_bce_against_mpmath():
    x = np.array([[-1.5, 0.3], [2.0, -0.7]])
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    got = F.bce_with_logits(Tensor(x), t).item()
    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for xi, ti in zip(x.ravel(), t.ravel()):
        s = 1 / (1 + mpmath.exp(-mpmath.mpf(xi)))
        total += -(ti * mpmath.log(s) + (1 - ti) * mpmath.log(1 - s))
    assert abs(got - float(total / 4)) < 1e-12


# -- optimiser & checkpoints -----------------------------------------------


def test_adam_first_step_moves_by_lr_times_sign():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([0.5, -4.0])
    opt.step()
    # first bias-corrected step is g/|g| (up to eps)
    assert np.allclose(p.data, [1.0 - 1e-3, -2.0 + 1e-3], atol=1e-9)


def test_adam_matches_reference_formula_over_steps():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(3))
    ref = p.data.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    opt = Adam([p], lr=0.01)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, ref, atol=1e-14)


def test_adam_clipping_rescales_global_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    opt = Adam([a, b], lr=0.1, max_grad_norm=1.0)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert opt.step() == 5.0
    # clipped gradient is (0.6, 0, 0.8); v carries its square, not the raw one
    assert np.allclose(opt.v[0], [0.001 * 0.36, 0.0]) and np.allclose(opt.v[1], [0.001 * 0.64])
    c = Parameter(np.zeros(1))
    free = Adam([c], lr=0.1, max_grad_norm=10.0)
    c.grad = np.array([4.0])
    free.step()
    assert np.allclose(free.v[0], [0.001 * 16.0])


class _Tiny(Module):
    def __init__(self, rng):
        self.a = Linear(3, 2, rng)
        self.blocks = [Linear(2, 2, rng), Linear(2, 1, rng)]


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    m = _Tiny(rng)
    path = tmp_path / "w.vltw"
    ckpt.save(str(path), m.state_dict())
    raw = path.read_bytes()
    assert raw[:4] == b"VLTW"
    assert int.from_bytes(raw[4:8], "little") == 1
    loaded = ckpt.load(str(path))
    assert list(loaded) == [n for n, _ in m.named_parameters()]
    for name, p in m.named_parameters():
        assert loaded[name].tobytes() == p.data.tobytes()
    manifest = (tmp_path / "w.vltw.manifest").read_text().splitlines()
    assert manifest[0] == "a.weight\t3x2"
    m2 = _Tiny(np.random.default_rng(1))
    m2.load_state_dict(loaded)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(m.parameters(), m2.parameters()))


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.vltw"
    bad.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(str(bad))
    good = tmp_path / "good.vltw"
    ckpt.save(str(good), {"w": np.ones((4, 4))}, manifest=False)
    good.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(str(good))


def test_load_state_dict_rejects_mismatch():
    m = _Tiny(np.random.default_rng(0))
    state = m.state_dict()
    state.pop("a.bias")
    with pytest.raises(KeyError):
        m.load_state_dict(state)


def test_math_sanity_of_oracle_module():
    # the oracles themselves: tiny hand-checked values
    assert oracles.softmax([0.0, math.log(3.0)]) == pytest.approx([0.25, 0.75], abs=1e-15)
    assert oracles.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]]))[0, 0] == 11.0


def test_stage_memo_matches_full_forward():
    from vltseg.engine.gradcheck import numeric_grad
    from vltseg.gradsuite import staged, tiny_problem

    model, loss_fn = tiny_problem(3)
    probes = [(n, p, i) for n, p in model.named_parameters() for i in (0, p.size - 1)][::5]
    plain = [numeric_grad(loss_fn, p, i, 1e-4) for _, p, i in probes]
    with staged(model, loss_fn):
        memo = [numeric_grad(loss_fn, p, i, 1e-4) for _, p, i in probes]
    assert plain == memo


def test_full_model_gradcheck_sampled():
    from vltseg.gradsuite import full_model_gradcheck

    rep = full_model_gradcheck(seed=1, max_per_param=3)
    assert rep.pass_fraction >= 0.99 and rep.max_abs_err_of_failures <= 1e-6
