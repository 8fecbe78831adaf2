"""Network construction, initialization, normalization, and tap mechanics."""

import numpy as np
import pytest

import aflgan.autodiff as ad
import oracles as orc
from aflgan.nets import (LayerSpec, Network, NetworkError, UnknownTapError,
                         SpectralNormState, spectral_normalize,
                         build_toy_pair, build_dcgan_pair, toy_tap_binding,
                         dcgan_tap_bindings, tap)
from aflgan.rng import stream


# -- construction and initialization ----------------------------------------

def test_toy_pair_shapes_and_param_counts():
    G, D = build_toy_pair(seed=0)
    assert G.param_count() == orc.TOY_G_PARAM_COUNT
    assert D.param_count() == orc.TOY_D_PARAM_COUNT
    x = ad.constant(np.random.default_rng(0).normal(size=(7, 2)))
    with ad.no_grad():
        y = G.forward(x)
        s = D.forward(y)
    assert y.data.shape == (7, 2)
    assert s.data.shape == (7, 1)


def test_init_is_seed_deterministic():
    a, _ = build_toy_pair(seed=3)
    b, _ = build_toy_pair(seed=3)
    c, _ = build_toy_pair(seed=4)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data)
               for k in a.params)


def test_init_statistics():
    G, _ = build_toy_pair(seed=11)
    w = G.params["fc2.w"].data
    assert abs(w.std() - 0.02) < 0.005
    assert np.all(G.params["fc2.b"].data == 0.0)


def test_unknown_layer_kind_rejected():
    with pytest.raises(NetworkError):
        LayerSpec(kind="dense_fused", name="x", in_dim=2, out_dim=2)


def test_describe_round_trip():
    G, _ = build_toy_pair(seed=5)
    H = Network.from_descriptor(G.describe())
    H.load_state_arrays(G.state_arrays())
    x = ad.constant(np.random.default_rng(1).normal(size=(4, 2)))
    with ad.no_grad():
        assert np.array_equal(G.forward(x).data, H.forward(x).data)


# -- batch norm ---------------------------------------------------------------

def _bn_net(features: int) -> Network:
    return Network("n", [
        LayerSpec(kind="batch_norm", name="bn", features=features),
    ], seed=0)


def test_batch_norm_train_matches_reference_2d():
    net = _bn_net(5)
    net.set_mode("train")
    gamma = np.random.default_rng(2).normal(size=5)
    beta = np.random.default_rng(3).normal(size=5)
    net.params["bn.gamma"].data[:] = gamma
    net.params["bn.beta"].data[:] = beta
    x = np.random.default_rng(4).normal(2.0, 3.0, size=(64, 5))
    out = net.forward(ad.constant(x))
    ref, _, _ = orc.batchnorm_train_ref(x, gamma, beta)
    assert np.allclose(out.data, ref, atol=1e-12)


def test_batch_norm_train_matches_reference_4d():
    net = _bn_net(3)
    net.set_mode("train")
    x = np.random.default_rng(5).normal(1.0, 2.0, size=(8, 3, 4, 4))
    out = net.forward(ad.constant(x))
    ref, _, _ = orc.batchnorm_train_ref(x, np.ones(3), np.zeros(3))
    assert np.allclose(out.data, ref, atol=1e-12)


def test_batch_norm_eval_uses_running_stats():
    net = _bn_net(4)
    net.set_mode("train")
    rng = np.random.default_rng(6)
    with ad.no_grad():
        for _ in range(50):
            net.forward(ad.constant(rng.normal(1.5, 2.0, size=(32, 4))))
    net.set_mode("eval")
    x = rng.normal(1.5, 2.0, size=(16, 4))
    out = net.forward(ad.constant(x)).data
    ref = orc.batchnorm_eval_ref(x, np.ones(4), np.zeros(4),
                                 net.bn_stats["bn"]["mean"],
                                 net.bn_stats["bn"]["var"])
    assert np.allclose(out, ref, atol=1e-12)
    # eval BN is per-sample: a single row gives the same output alone
    single = net.forward(ad.constant(x[:1])).data
    assert np.array_equal(single[0], out[0])


def test_batch_norm_eval_does_not_update_stats():
    net = _bn_net(2)
    net.set_mode("train")
    with ad.no_grad():
        net.forward(ad.constant(np.random.default_rng(0).normal(size=(8, 2))))
    net.set_mode("eval")
    before = {k: v.copy() for k, v in net.bn_stats["bn"].items()}
    with ad.no_grad():
        net.forward(ad.constant(np.random.default_rng(1).normal(size=(8, 2))))
    for k in before:
        assert np.array_equal(before[k], net.bn_stats["bn"][k])


# -- spectral normalization ---------------------------------------------------

def test_power_iteration_matches_svd_oracle():
    # sigma-hat within 1% of the true sigma <=> normalized spectral norm
    # within 1% of 1
    rng = np.random.default_rng(17)
    for i in range(20):
        m, n = rng.integers(2, 17, size=2)
        w = ad.parameter(rng.normal(size=(m, n)), name="w")
        state = SpectralNormState.fresh(m, seed=i, label="sn/test",
                                        n_power_iters=50)
        wn, state = spectral_normalize(w, state)
        assert abs(orc.spectral_norm_ref(wn.data) - 1.0) < 0.01, (i, m, n)


def test_spectral_normalized_matrix_has_unit_norm():
    rng = np.random.default_rng(23)
    w = ad.parameter(rng.normal(size=(12, 7)), name="w")
    state = SpectralNormState.fresh(12, seed=0, label="sn/unit",
                                    n_power_iters=50)
    wn, state = spectral_normalize(w, state)
    assert np.linalg.norm(state.u) == pytest.approx(1.0, abs=1e-6)
    assert orc.spectral_norm_ref(wn.data) <= 1.0 + 1e-3


def test_spectral_norm_eval_does_not_mutate_state():
    rng = np.random.default_rng(29)
    w = ad.parameter(rng.normal(size=(6, 6)), name="w")
    state = SpectralNormState.fresh(6, seed=1, label="sn/frozen")
    _, state = spectral_normalize(w, state)
    u_before = state.u.copy()
    _, state2 = spectral_normalize(w, state, update_state=False)
    assert np.array_equal(state2.u, u_before)


def test_zero_matrix_rejected():
    w = ad.parameter(np.zeros((4, 4)), name="w")
    state = SpectralNormState.fresh(4, seed=0, label="sn/zero")
    with pytest.raises(NetworkError):
        spectral_normalize(w, state)


# -- taps --------------------------------------------------------------------

def test_taps_record_values_and_injection_applies_after():
    G, D = build_toy_pair(seed=7)
    d_tap, g_tap = toy_tap_binding()
    x = ad.constant(np.random.default_rng(8).normal(size=(5, 2)))
    with ad.no_grad():
        y0 = G.forward(x)
        phi = tap(G, g_tap)
        corr = np.random.default_rng(9).normal(size=phi.data.shape)
        y1 = G.forward(x, inject={g_tap: ad.constant(corr)})
        # taps record the pre-injection activation
        assert np.array_equal(tap(G, g_tap).data, phi.data)
        D.forward(y0)
    assert tap(D, d_tap).data.shape == (5, 64)
    assert not np.array_equal(y0.data, y1.data)


def test_unknown_tap_and_unused_injection_raise():
    G, _ = build_toy_pair(seed=0)
    x = ad.constant(np.zeros((2, 2)))
    with pytest.raises(UnknownTapError):
        tap(G, "G/doesnotexist")
    with pytest.raises(UnknownTapError):
        with ad.no_grad():
            G.forward(x, inject={"G/doesnotexist": ad.constant(np.zeros((2, 64)))})


def test_injection_shape_checked():
    G, _ = build_toy_pair(seed=0)
    _, g_tap = toy_tap_binding()
    x = ad.constant(np.zeros((2, 2)))
    with pytest.raises(NetworkError):
        with ad.no_grad():
            G.forward(x, inject={g_tap: ad.constant(np.zeros((2, 3)))})


# -- image pair ----------------------------------------------------------------

def test_dcgan_16_shapes():
    G, D = build_dcgan_pair(image_size=16, base_channels=16, n_taps=1, seed=0)
    z = ad.constant(np.random.default_rng(0).normal(size=(2, 128)))
    with ad.no_grad():
        y = G.forward(z)
        s = D.forward(y)
    assert y.data.shape == (2, 3, 16, 16)
    assert s.data.shape == (2, 1)
    bindings = dcgan_tap_bindings(G, D, n_taps=1)
    assert len(bindings) == 1
    d_tap, g_tap = bindings[0]
    with ad.no_grad():
        G.forward(z)
        D.forward(y)
    assert tap(G, g_tap).data.shape == tap(D, d_tap).data.shape


def test_dcgan_32_four_taps_paired_by_shape():
    G, D = build_dcgan_pair(image_size=32, base_channels=16, n_taps=4, seed=0)
    z = ad.constant(np.random.default_rng(1).normal(size=(2, 128)))
    with ad.no_grad():
        y = G.forward(z)
        D.forward(y)
    bindings = dcgan_tap_bindings(G, D, n_taps=4)
    assert len(bindings) == 4
    for d_tap, g_tap in bindings:
        assert tap(D, d_tap).data.shape == tap(G, g_tap).data.shape
    # the full-resolution pair is the discriminator input vs pre-tanh output
    assert ("D/image", "G/up3") in [tuple(b) for b in bindings]


def test_dcgan_16_with_four_taps_rejected():
    with pytest.raises(NetworkError):
        build_dcgan_pair(image_size=16, base_channels=16, n_taps=4, seed=0)


def test_dcgan_spectral_norm_discriminator():
    G, D = build_dcgan_pair(image_size=16, base_channels=8, n_taps=1, seed=0,
                            spectral_norm_d=True)
    z = ad.constant(np.random.default_rng(2).normal(size=(2, 128)))
    with ad.no_grad():
        s1 = D.forward(G.forward(z))
    assert s1.data.shape == (2, 1)
    assert D.sn_states


def test_forward_is_bit_deterministic():
    G, _ = build_toy_pair(seed=13)
    x = ad.constant(np.random.default_rng(3).normal(size=(9, 2)))
    with ad.no_grad():
        a = G.forward(x).data
        b = G.forward(x).data
    assert np.array_equal(a, b)
