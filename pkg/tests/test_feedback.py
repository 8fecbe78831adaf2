"""Feedback modules, the correction loop, switching, and ablation."""

import numpy as np
import pytest

import aflgan.autodiff as ad
import oracles as orc
from aflgan.feedback import (LoopConfig, FeedbackModule, FeedbackError,
                             afl_generate, feedback_switch_generate,
                             compute_corrections, inject, ablate,
                             DEFAULT_ALPHA, RECOMMENDED_ALPHA_BAND)
from aflgan.nets import build_toy_pair, toy_tap_binding, tap
from aflgan.training import build_modules
from aflgan.rng import stream


def _toy_setup(seed=0, variant="single", alpha=1.0):
    G, D = build_toy_pair(seed=seed)
    G.set_mode("eval")
    D.set_mode("eval")
    modules = build_modules(G, D, [toy_tap_binding()], variant, seed,
                            np.zeros((2, 2)), alpha=alpha)
    for m in modules:
        m.set_mode("eval")
    return G, D, modules


def _inputs(n=32, seed=0):
    return ad.constant(stream(seed, "test/x").normal(size=(n, 2)))


# -- configuration ------------------------------------------------------------

def test_loop_config_validation():
    with pytest.raises(FeedbackError):
        LoopConfig(iterations=-1)
    with pytest.raises(FeedbackError):
        LoopConfig(alpha_global=1.5)
    cfg = LoopConfig(alpha_global=0.5, alpha_overrides={"f0": 0.9, "f1": 2.0})
    assert cfg.effective_alpha("f0") == 0.9
    assert cfg.effective_alpha("other") == 0.5
    assert cfg.effective_alpha("f1") == 1.0  # overrides clamp to [0, 1]


def test_default_alpha_in_recommended_band():
    lo, hi = RECOMMENDED_ALPHA_BAND
    assert lo <= DEFAULT_ALPHA <= hi


# -- deactivation identities ---------------------------------------------------

def test_alpha_zero_is_bit_identical_to_baseline():
    G, D, modules = _toy_setup()
    x = _inputs()
    with ad.no_grad():
        baseline = G.forward(x).data
    y, trace = afl_generate(G, D, modules, x, LoopConfig(iterations=1,
                                                         alpha_global=0.0))
    assert np.array_equal(y.data, baseline)
    assert len(trace) == 2


def test_zero_iterations_is_bit_identical_to_baseline():
    G, D, modules = _toy_setup()
    x = _inputs(seed=1)
    with ad.no_grad():
        baseline = G.forward(x).data
    y, trace = afl_generate(G, D, modules, x, LoopConfig(iterations=0,
                                                         alpha_global=0.7))
    assert np.array_equal(y.data, baseline)
    assert len(trace) == 1


def test_trace_starts_at_baseline_and_iterates():
    G, D, modules = _toy_setup()
    x = _inputs(seed=2)
    with ad.no_grad():
        baseline = G.forward(x).data
    y, trace = afl_generate(G, D, modules, x, LoopConfig(iterations=3,
                                                         alpha_global=0.2))
    assert len(trace) == 4
    assert np.array_equal(trace[0].data, baseline)
    assert np.array_equal(trace[-1].data, y.data)
    assert not np.array_equal(trace[1].data, baseline)


def test_alpha_scales_the_applied_correction_linearly():
    G, D, modules = _toy_setup()
    x = _inputs(seed=3)
    outs = {}
    for alpha in (0.0, 0.25, 0.5):
        y, _ = afl_generate(G, D, modules, x,
                            LoopConfig(iterations=1, alpha_global=alpha))
        outs[alpha] = y.data
    # G's tail after the toy injection tap is affine, so the output moves
    # linearly in alpha for a fixed correction
    lhs = outs[0.5] - outs[0.0]
    rhs = 2.0 * (outs[0.25] - outs[0.0])
    assert np.allclose(lhs, rhs, atol=1e-9)


# -- module mechanics ----------------------------------------------------------

def test_dual_variant_uses_generator_tap():
    G, D, modules = _toy_setup(variant="dual")
    (m,) = modules
    assert m.variant == "dual"
    x = _inputs(n=8, seed=4)
    with ad.no_grad():
        y0 = G.forward(x)
        D.forward(y0)
        theta = tap(D, m.binding[0])
        phi = tap(G, m.binding[1])
        out = m.forward(theta, phi)
        assert out.data.shape == phi.data.shape
        with pytest.raises(FeedbackError):
            m.forward(theta)  # dual needs phi


def test_single_variant_rejects_generator_tap():
    G, D, modules = _toy_setup()
    (m,) = modules
    x = _inputs(n=4, seed=5)
    with ad.no_grad():
        y0 = G.forward(x)
        D.forward(y0)
        theta = tap(D, m.binding[0])
        phi = tap(G, m.binding[1])
        with pytest.raises(FeedbackError):
            m.forward(theta, phi)


def test_module_shape_validation():
    _, _, modules = _toy_setup()
    (m,) = modules
    with ad.no_grad():
        with pytest.raises(FeedbackError):
            m.forward(ad.constant(np.zeros((4, 3))))


def test_train_mode_final_norm_statistics():
    # train-mode output of the closing normalization layer: per-feature
    # mean ~0 and variance ~1 over a large batch
    G, D, modules = _toy_setup()
    (m,) = modules
    m.set_mode("train")
    theta = ad.constant(stream(9, "theta").normal(2.0, 3.0, size=(128, 64)))
    with ad.no_grad():
        out = m.forward(theta).data
    assert np.all(np.abs(out.mean(axis=0)) < 0.05)
    assert np.all(np.abs(out.var(axis=0) - 1.0) < 0.05)


def test_zero_final_scale_gives_zero_output():
    G, D, modules = _toy_setup()
    (m,) = modules
    m.inner.params["n2.gamma"].data[:] = 0.0
    theta = ad.constant(stream(10, "theta").normal(size=(16, 64)))
    with ad.no_grad():
        out = m.forward(theta).data
    assert np.all(out == 0.0)


def test_eval_mode_output_is_batch_composition_independent():
    G, D, modules = _toy_setup()
    (m,) = modules
    m.set_mode("train")
    rng = stream(11, "warm")
    with ad.no_grad():
        for _ in range(30):
            m.forward(ad.constant(rng.normal(size=(64, 64))))
    m.set_mode("eval")
    theta = ad.constant(stream(12, "theta").normal(size=(10, 64)))
    with ad.no_grad():
        full = m.forward(theta).data
        head = m.forward(ad.constant(theta.data[:3])).data
    assert np.array_equal(full[:3], head)


def test_describe_round_trip_preserves_outputs():
    _, _, modules = _toy_setup(variant="dual")
    (m,) = modules
    clone = FeedbackModule.from_descriptor(m.describe())
    clone.inner.load_state_arrays(m.inner.state_arrays())
    clone.set_mode("eval")
    theta = ad.constant(stream(13, "theta").normal(size=(6, 64)))
    phi = ad.constant(stream(14, "phi").normal(size=(6, 64)))
    with ad.no_grad():
        a = m.forward(theta, phi).data
        b = clone.forward(theta, phi).data
    assert np.array_equal(a, b)


# -- loop discipline -----------------------------------------------------------

def test_generate_requires_eval_mode():
    G, D, modules = _toy_setup()
    G.set_mode("train")
    with pytest.raises(FeedbackError):
        afl_generate(G, D, modules, _inputs(), LoopConfig())


def test_missing_correction_for_active_module_raises():
    G, D, modules = _toy_setup()
    with pytest.raises(FeedbackError):
        inject(G, {}, LoopConfig(alpha_global=0.3), _inputs(), modules)


def test_repeated_generation_is_bit_identical():
    G, D, modules = _toy_setup()
    x = _inputs(seed=6)
    cfg = LoopConfig(iterations=2, alpha_global=0.2)
    a, _ = afl_generate(G, D, modules, x, cfg)
    b, _ = afl_generate(G, D, modules, x, cfg)
    assert np.array_equal(a.data, b.data)


# -- switching -----------------------------------------------------------------

def test_switch_with_own_output_matches_single_iteration():
    G, D, modules = _toy_setup()
    x = _inputs(seed=7)
    cfg = LoopConfig(iterations=1, alpha_global=0.2)
    y, trace = afl_generate(G, D, modules, x, cfg)
    switched = feedback_switch_generate(G, D, modules, x, trace[0], cfg)
    assert np.array_equal(y.data, switched.data)


def test_switch_shape_mismatch_rejected():
    G, D, modules = _toy_setup()
    x = _inputs(n=8, seed=8)
    ref = ad.constant(np.zeros((4, 2)))
    with pytest.raises(FeedbackError):
        feedback_switch_generate(G, D, modules, x, ref,
                                 LoopConfig(alpha_global=0.2))


def test_switch_reference_actually_steers():
    G, D, modules = _toy_setup()
    x = _inputs(n=16, seed=9)
    cfg = LoopConfig(iterations=1, alpha_global=0.2)
    ref_a = ad.constant(stream(15, "refa").normal(size=(16, 2)))
    ref_b = ad.constant(stream(16, "refb").normal(size=(16, 2)))
    ya = feedback_switch_generate(G, D, modules, x, ref_a, cfg)
    yb = feedback_switch_generate(G, D, modules, x, ref_b, cfg)
    assert not np.array_equal(ya.data, yb.data)


# -- ablation ------------------------------------------------------------------

def test_ablate_semantics():
    G, D, modules = _toy_setup()
    x = _inputs(seed=10)
    with ad.no_grad():
        baseline = G.forward(x).data
    none_kept = ablate(modules, None, alpha_global=0.4)
    y_none, _ = afl_generate(G, D, modules, x, none_kept)
    assert np.array_equal(y_none.data, baseline)
    only = ablate(modules, modules[0].name, alpha_global=0.4)
    y_only, _ = afl_generate(G, D, modules, x, only)
    full = LoopConfig(iterations=1, alpha_global=0.4)
    y_full, _ = afl_generate(G, D, modules, x, full)
    # with a single module, keeping it equals not ablating
    assert np.array_equal(y_only.data, y_full.data)
    with pytest.raises(FeedbackError):
        ablate(modules, "nosuch")
