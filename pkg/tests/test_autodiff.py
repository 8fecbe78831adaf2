"""Engine tests: gradients against finite differences, double backprop,
shape/NaN error handling, Adam semantics, determinism."""

import numpy as np
import pytest

import aflgan.autodiff as ad
from aflgan.rng import stream

import oracles


def _sample_input(rng, shape, positive_only, kinked):
    x = rng.normal(size=shape)
    if positive_only:
        x = np.abs(x) + 0.5
    if kinked:
        # keep coordinates away from the non-differentiable point
        x = np.where(np.abs(x) < 1e-2, np.sign(x) * 1e-2 + (x == 0) * 1e-2, x)
    return x


def test_registry_gradients_match_finite_differences():
    # every registered op, 10 seeded points each, scalarized via weighted sum
    for name, info in ad.OPS.items():
        rng = stream(101, f"fd/{name}")
        for trial in range(10):
            arrays = [_sample_input(rng, s, info.positive_only, info.kinked)
                      for s in info.shapes]
            weights = [rng.normal(size=np.asarray(
                info.fn(*[ad.constant(a) for a in arrays]).data).shape)]

            def scalar_fn(*flat):
                ts = [ad.Tensor(f, requires_grad=True) for f in flat]
                out = info.fn(*ts)
                return ad.sum_all(ad.mul(out, ad.constant(weights[0]))), ts

            out, ts = scalar_fn(*arrays)
            gs = ad.grad(out, ts)
            for i, a in enumerate(arrays):
                def numeric_target(v, i=i):
                    args = [arrays[j] if j != i else v for j in range(len(arrays))]
                    with ad.no_grad():
                        o = info.fn(*[ad.constant(x) for x in args])
                        return float((o.data * weights[0]).sum())
                num = oracles.fd_gradient(numeric_target, a.copy())
                err = oracles.rel_err(gs[i].data, num)
                assert err < 1e-4, f"{name} trial {trial} input {i}: rel err {err:.2e}"


def test_shape_mismatch_raises():
    a = ad.constant(np.zeros((2, 3)))
    b = ad.constant(np.zeros((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, a)
    with pytest.raises(ad.ShapeError):
        ad.affine(a, b, ad.constant(np.zeros(3)))
    with pytest.raises(ad.ShapeError):
        ad.narrow(a, 1, 2, 5)
    with pytest.raises(ad.ShapeError):
        ad.Tensor(np.zeros((2, 2, 2, 2, 2)))


def test_non_scalar_loss_rejected():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ad.NonScalarLossError):
        ad.backward(ad.square(x))


def test_nan_gradient_fails_fast_with_node_name():
    x = ad.parameter(np.array([0.0, 4.0]), name="probe")
    loss = ad.sum_all(ad.sqrt(x))  # finite value, infinite gradient at 0
    with np.errstate(divide="ignore", invalid="ignore"):
        with pytest.raises(ad.NanGradientError) as exc:
            ad.backward(loss)
    assert "probe" in str(exc.value)


def test_nan_loss_fails_fast():
    x = ad.parameter(np.array([-1.0]))
    with np.errstate(invalid="ignore"):
        with pytest.raises(ad.NanGradientError):
            ad.backward(ad.log(x))


def test_relu_subgradient_at_zero_is_zero():
    x = ad.parameter(np.array([-1.0, 0.0, 2.0]))
    ad.backward(ad.sum_all(ad.relu(x)))
    assert np.array_equal(x.grad, np.array([0.0, 0.0, 1.0]))


def test_shared_subexpression_accumulates_both_paths():
    rng = stream(7, "shared")
    xv = rng.normal(size=(3, 3))
    x = ad.parameter(xv.copy())
    z = ad.tanh(x)
    loss = ad.sum_all(ad.add(ad.mul(z, z), z))
    ad.backward(loss)

    def f(v):
        t = np.tanh(v)
        return float((t * t + t).sum())

    num = oracles.fd_gradient(f, xv.copy())
    assert oracles.rel_err(x.grad, num) < 1e-6


def test_backward_twice_accumulates_grad():
    x = ad.parameter(np.array([1.0, 2.0]))
    loss = ad.sum_all(ad.square(x))
    ad.backward(loss)
    first = x.grad.copy()
    loss2 = ad.sum_all(ad.square(x))
    ad.backward(loss2)
    assert np.array_equal(x.grad, 2 * first)


def test_functional_grad_leaves_grad_untouched_and_prunes():
    rng = stream(8, "prune")
    a = ad.parameter(rng.normal(size=(4, 4)), name="a")
    b = ad.parameter(rng.normal(size=(4, 4)), name="b")
    loss = ad.sum_all(ad.mul(ad.tanh(a), ad.square(b)))
    ga_only = ad.grad(loss, [a])
    assert a.grad is None and b.grad is None
    ad.backward(loss)
    assert np.allclose(ga_only[0].data, a.grad, rtol=0, atol=0)
    # node unreachable from the loss gets a zero gradient
    c = ad.parameter(np.ones((2, 2)), name="c")
    gc = ad.grad(loss, [c])
    assert np.array_equal(gc[0].data, np.zeros((2, 2)))


def test_second_derivative_of_tanh_sum():
    rng = stream(9, "tanh2")
    xv = rng.normal(size=(5,))
    x = ad.parameter(xv.copy())
    y = ad.sum_all(ad.tanh(x))
    (g,) = ad.grad(y, [x], create_graph=True)
    (h,) = ad.grad(ad.sum_all(g), [x])
    t = np.tanh(xv)
    expected = -2.0 * t * (1.0 - t * t)
    assert oracles.rel_err(h.data, expected) < 1e-10


def test_gradient_penalty_second_order_matches_nested_oracle():
    rng = stream(10, "gp")
    sizes = [(3, 8), (8, 8), (8, 1)]
    weights_np = [(rng.normal(size=s) * 0.5, rng.normal(size=(s[1],)) * 0.1)
                  for s in sizes]
    xhat = rng.normal(size=(6, 3))

    params = []
    for i, (w, b) in enumerate(weights_np):
        params.append((ad.parameter(w.copy(), name=f"w{i}"),
                       ad.parameter(b.copy(), name=f"b{i}")))

    def critic(xt):
        h = xt
        for i, (w, b) in enumerate(params):
            h = ad.affine(h, w, b)
            if i < len(params) - 1:
                h = ad.leaky_relu(h, 0.2)
        return h

    xt = ad.parameter(xhat.copy(), name="xhat")
    score = ad.sum_all(critic(xt))
    (gx,) = ad.grad(score, [xt], create_graph=True)
    norms = ad.norm2_rows(gx)
    penalty = ad.scale(ad.mean_all(ad.square(ad.add_scalar(norms, -1.0))), 10.0)

    flat = [p for pair in params for p in pair]
    gs = ad.grad(penalty, flat)
    ref = oracles.gp_weight_grad_fd(xhat, [(w.copy(), b.copy())
                                           for w, b in weights_np])
    for i in range(len(sizes)):
        ew = oracles.rel_err(gs[2 * i].data, ref[i][0])
        eb = oracles.rel_err(gs[2 * i + 1].data, ref[i][1])
        assert ew < 1e-3, f"layer {i} weight grad rel err {ew:.2e}"
        assert eb < 1e-3, f"layer {i} bias grad rel err {eb:.2e}"


def test_conv_under_create_graph_raises():
    rng = stream(11, "convdd")
    x = ad.parameter(rng.normal(size=(1, 2, 4, 4)))
    w = ad.parameter(rng.normal(size=(3, 2, 3, 3)))
    b = ad.parameter(np.zeros(3))
    y = ad.sum_all(ad.conv2d(x, w, b, stride=1, padding=1))
    with pytest.raises(ad.DoubleBackpropError) as exc:
        ad.grad(y, [x], create_graph=True)
    assert "conv2d" in str(exc.value)


def test_conv2d_matches_naive_loops():
    rng = stream(12, "convref")
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b),
                    stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    B, _, Ho, Wo = out.shape
    ref = np.zeros_like(out)
    for bi in range(B):
        for o in range(4):
            for i0 in range(Ho):
                for j0 in range(Wo):
                    patch = xp[bi, :, 2 * i0:2 * i0 + 3, 2 * j0:2 * j0 + 3]
                    ref[bi, o, i0, j0] = (patch * w[o]).sum() + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    # <conv(x), y> == <x, conv_transpose(y)> when both share the kernel
    rng = stream(13, "adjoint")
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))       # conv layout (Cout, Cin, k, k)
    y = rng.normal(size=(2, 4, 4, 4))
    zb = np.zeros(4)
    conv_out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(zb),
                         stride=2, padding=1).data
    # conv weight (Cout=4, Cin=3, k, k) doubles as transpose-conv weight
    # (Cin=4, Cout=3, k, k) for the adjoint map
    tconv_out = ad.conv2d_transpose(ad.constant(y), ad.constant(w),
                                    ad.constant(np.zeros(3)),
                                    stride=2, padding=1).data
    lhs = float((conv_out * y).sum())
    rhs = float((x * tconv_out).sum())
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_upsample_nearest_forward_and_adjoint():
    rng = stream(14, "ups")
    x = rng.normal(size=(1, 2, 3, 3))
    out = ad.upsample_nearest(ad.constant(x), 2).data
    assert out.shape == (1, 2, 6, 6)
    assert np.array_equal(out[0, 0, :2, :2], np.full((2, 2), x[0, 0, 0, 0]))
    xt = ad.parameter(x.copy())
    y = rng.normal(size=(1, 2, 6, 6))
    loss = ad.sum_all(ad.mul(ad.upsample_nearest(xt, 2), ad.constant(y)))
    ad.backward(loss)
    ref = y.reshape(1, 2, 3, 2, 3, 2).sum(axis=(3, 5))
    assert np.allclose(xt.grad, ref, atol=1e-12)


def test_registry_double_diff_flags():
    dense = ["matmul", "add", "scale", "concat", "tanh", "relu", "leaky_relu",
             "mean", "norm2", "affine", "sigmoid", "softplus"]
    for name in dense:
        assert ad.OPS[name].double_differentiable, name
    for name in ["conv2d", "conv2d_transpose", "upsample_nearest"]:
        assert not ad.OPS[name].double_differentiable, name


def test_adam_zero_grad_leaves_param_unchanged():
    p = ad.parameter(np.array([1.0, -2.0]))
    state = ad.AdamState(lr=1e-3, beta1=0.5, beta2=0.9)
    before = p.data.copy()
    ad.adam_step({"p": p}, {"p": np.zeros(2)}, state)
    assert np.array_equal(p.data, before)


def test_adam_missing_grad_raises():
    p = ad.parameter(np.array([1.0]))
    state = ad.AdamState()
    with pytest.raises(ad.MissingGradientError):
        ad.adam_step({"p": p}, {}, state)


def test_adam_first_step_matches_hand_value():
    p = ad.parameter(np.array([1.0]))
    state = ad.AdamState(lr=0.1, beta1=0.5, beta2=0.9, eps=1e-8)
    ad.adam_step({"p": p}, {"p": np.array([1.0])}, state)
    # bias correction makes the first step lr * g/(|g| + eps)
    assert abs(p.data[0] - (1.0 - 0.1 * 1.0 / (1.0 + 1e-8))) < 1e-12


def test_adam_updates_are_deterministic():
    def run():
        rng = stream(15, "adamdet")
        p = ad.parameter(rng.normal(size=(4, 4)))
        state = ad.AdamState(lr=1e-2, beta1=0.5, beta2=0.999)
        for i in range(25):
            g = stream(15, "adamgrad", i).normal(size=(4, 4))
            ad.adam_step({"p": p}, {"p": g}, state)
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_finite_diff_check_passes_on_smooth_composite():
    rng = stream(16, "fdc")

    def f(a, b):
        return ad.mean_all(ad.tanh(ad.matmul(a, b)))

    report = ad.finite_diff_check(
        f, [ad.constant(rng.normal(size=(3, 4))),
            ad.constant(rng.normal(size=(4, 2)))])
    assert report.passed, repr(report)


def test_graph_outputs_bit_identical_across_runs():
    def run():
        rng = stream(17, "det")
        x = ad.parameter(rng.normal(size=(8, 4)))
        w = ad.parameter(rng.normal(size=(4, 4)))
        b = ad.parameter(np.zeros(4))
        h = ad.tanh(ad.affine(x, w, b))
        loss = ad.mean_all(ad.square(h))
        ad.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_no_grad_blocks_tracing():
    x = ad.parameter(np.ones((2, 2)))
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y.parents == ()
    with ad.no_grad():
        with ad.enable_grad():
            z = ad.square(x)
    assert z.requires_grad
