import math

import numpy as np
import pytest

from compactlm import autograd as ag
from compactlm.layers import ModelConfig, StaleProjectionError, TransformerLM
from compactlm.optim import (AdamHyper, CompactAdamState, FullAdamState, ModelOptimizer, compact_adam_step,
                             full_adam_step, galore_step)
from compactlm.projections import ProjectionSpec, layer_seed


def scalar_adam(w, grads, lr, b1, b2, eps):
    """Element loop Adam, the textbook form."""
    w = [float(v) for v in w]
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t, g in enumerate(grads, start=1):
        for i, gi in enumerate(g):
            m[i] = b1 * m[i] + (1 - b1) * gi
            v[i] = b2 * v[i] + (1 - b2) * gi * gi
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            w[i] -= lr * mh / (math.sqrt(vh) + eps)
    return np.array(w)


def test_full_adam_matches_scalar_loop(rng):
    W = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(7)]
    h = AdamHyper(lr=0.01)
    st = FullAdamState.zeros(W.shape, np.float64, h)
    Wt = W.copy()
    for g in grads:
        full_adam_step(Wt, g, st)
    ref = scalar_adam(W.ravel(), [g.ravel() for g in grads], 0.01, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(Wt.ravel(), ref, atol=1e-12, rtol=0)


def test_zero_gradient_leaves_weights():
    W = np.ones((2, 2))
    st = FullAdamState.zeros(W.shape, np.float64)
    for _ in range(3):
        full_adam_step(W, np.zeros((2, 2)), st)
    assert np.array_equal(W, np.ones((2, 2)))


def test_first_step_is_minus_lr():
    W = np.zeros((2, 3))
    st = FullAdamState.zeros(W.shape, np.float64, AdamHyper(lr=0.1))
    full_adam_step(W, np.ones((2, 3)), st)
    np.testing.assert_allclose(W, -0.1 / (1 + 1e-8), rtol=1e-12)


def test_degenerate_compact_adam_is_sign_descent():
    spec = ProjectionSpec(kind="identity")
    h = AdamHyper(lr=0.05, beta1=0.0, beta2=0.0, eps=1e-30, alpha=1.0)
    st = CompactAdamState.zeros(4, 3, 4, spec, 0, np.float64, h)
    W = np.zeros((4, 3))
    compact_adam_step(W, np.abs(np.random.default_rng(0).normal(size=(4, 3))) + 0.1, st)
    np.testing.assert_allclose(W, -0.05, rtol=1e-12)


def test_compact_step_formula(rng):
    n, m, r = 16, 10, 4
    spec = ProjectionSpec(ratio=0.25, update_period=None)
    h = AdamHyper(lr=0.01, alpha=0.25)
    st = CompactAdamState.zeros(n, m, r, spec, 2, np.float64, h)
    W = rng.normal(size=(n, m))
    G1, G2 = rng.normal(size=(r, m)), rng.normal(size=(r, m))
    W0 = W.copy()
    compact_adam_step(W, G1, st)
    compact_adam_step(W, G2, st)
    # oracle: moments in r x m, bias-corrected, decompressed with the replayed P
    P = st.projection()
    M = 0.1 * 0.9 * G1 + 0.1 * G2
    V = 0.001 * 0.999 * G1 ** 2 + 0.001 * G2 ** 2
    N2 = (M / (1 - 0.9 ** 2)) / (np.sqrt(V / (1 - 0.999 ** 2)) + 1e-8)
    N1 = np.sign(G1) * (np.abs(G1) / (np.abs(G1) + 1e-8))
    np.testing.assert_allclose(W, W0 - 0.01 * 0.25 * P @ (N1 + N2), atol=1e-12)
    assert st.M.shape == st.V.shape == (r, m)
    assert (st.V >= 0).all()


def test_seed_epoch_advances_every_T(rng):
    spec = ProjectionSpec(ratio=0.5, update_period=3)
    st = CompactAdamState.zeros(8, 5, 4, spec, 0, np.float64)
    W = np.zeros((8, 5))
    epochs = []
    for _ in range(7):
        compact_adam_step(W, rng.normal(size=(4, 5)), st)
        epochs.append(st.spec.seed_epoch)
    assert epochs == [0, 0, 1, 1, 1, 2, 2]


def test_moments_kept_or_reset_on_switch(rng):
    for reset in (False, True):
        spec = ProjectionSpec(ratio=0.5, update_period=2)
        st = CompactAdamState.zeros(8, 5, 4, spec, 0, np.float64, reset_on_update=reset)
        W = np.zeros((8, 5))
        for _ in range(2):
            compact_adam_step(W, rng.normal(size=(4, 5)), st)
        assert st.spec.seed_epoch == 1
        assert (np.abs(st.M).sum() == 0) == reset
        assert st.bias_steps == (0 if reset else 2)


def test_stale_seed_rejected(rng):
    spec = ProjectionSpec(ratio=0.5, update_period=1)
    st = CompactAdamState.zeros(8, 5, 4, spec, 0, np.float64)
    seed0 = layer_seed(spec, 0, 8, 4)
    W = np.zeros((8, 5))
    compact_adam_step(W, rng.normal(size=(4, 5)), st, grad_seed=seed0)
    with pytest.raises(StaleProjectionError):
        compact_adam_step(W, rng.normal(size=(4, 5)), st, grad_seed=seed0)


def test_shape_mismatch(rng):
    st = CompactAdamState.zeros(8, 5, 4, ProjectionSpec(ratio=0.5), 0, np.float64)
    with pytest.raises(ag.DimensionError):
        compact_adam_step(np.zeros((8, 5)), np.zeros((8, 5)), st)


def test_galore_identity_equals_full_adam(rng):
    W1, W2 = rng.normal(size=(6, 4)), None
    W2 = W1.copy()
    s1 = FullAdamState.zeros(W1.shape, np.float64)
    s2 = CompactAdamState.zeros(6, 4, 6, ProjectionSpec(kind="identity"), 0, np.float64)
    for _ in range(5):
        g = rng.normal(size=(6, 4))
        full_adam_step(W1, g, s1)
        galore_step(W2, g, s2)
    assert np.array_equal(W1, W2)


def test_galore_and_compact_agree_for_same_projection(rng):
    n, m = 24, 9
    spec = ProjectionSpec(ratio=0.25)
    x, g = rng.normal(size=(30, n)), rng.normal(size=(30, m))
    s1 = CompactAdamState.zeros(n, m, 6, spec, 4, np.float64)
    s2 = CompactAdamState.zeros(n, m, 6, spec, 4, np.float64)
    P = s1.projection()
    W1, W2 = np.zeros((n, m)), np.zeros((n, m))
    compact_adam_step(W1, (x @ P).T @ g, s1)
    galore_step(W2, x.T @ g, s2, alpha=s2.hyper.alpha)
    assert ag.relative_error(W1, W2) < 1e-10


def test_after_switch_sketch_measured_against_new_projection(store, rng):
    cfg = ModelConfig(n=16, m=40, h=2, layers=1, vocab=9, max_seq_len=4)
    spec = ProjectionSpec(ratio=0.25, update_period=1)
    model = TransformerLM(cfg, spec, np.float64, seed=0)
    twin = TransformerLM(cfg, spec, np.float64, seed=0, compress=False)
    opt = ModelOptimizer(model, AdamHyper(), "compact")
    ids = rng.integers(0, 9, (2, 4))
    model.zero_grad()
    ag.backward(model.loss(ids, ids))
    opt.step(1e-3)
    from compactlm.projections import advance_epoch
    model.set_projection(advance_epoch(spec, 1))
    for (_, a), (_, b) in zip(model.parameters(), twin.parameters()):
        b.data[...] = a.data
    model.zero_grad()
    ag.backward(model.loss(ids, ids))
    ag.backward(twin.loss(ids, ids))
    lay = model.blocks[0]["gate"]
    assert lay.grad_seed.epoch == 1
    P_new = lay.projection()
    assert ag.relative_error(lay.grad_hat, P_new.T @ twin.blocks[0]["gate"].W.grad) < 1e-12


def test_state_bytes_law():
    cfg = ModelConfig(n=32, m=72, h=4, layers=2, vocab=11, max_seq_len=8)
    spec = ProjectionSpec(ratio=0.25)
    model = TransformerLM(cfg, spec, np.float32)
    opt = ModelOptimizer(model, AdamHyper(), "compact")
    for name, nbytes in opt.low_rank_bytes().items():
        lay = opt.layer_of[name]
        assert nbytes == 2 * lay.rank * lay.m * 4
        assert nbytes / (2 * lay.n * lay.m * 4) == lay.rank / lay.n
    assert set(opt.low_rank_bytes()) == {lay.name for lay in model.compressed_layers()}


def test_identity_training_matches_full_adam(rng):
    cfg = ModelConfig(n=16, m=40, h=2, layers=1, vocab=9, max_seq_len=6)
    ident = ProjectionSpec(kind="identity")
    a = TransformerLM(cfg, ident, np.float32, seed=1)
    b = TransformerLM(cfg, ident, np.float32, seed=1, compress=False)
    oa = ModelOptimizer(a, AdamHyper(alpha=1.0), "compact")
    ob = ModelOptimizer(b, AdamHyper(alpha=1.0), "full")
    for _ in range(100):
        ids = rng.integers(0, 9, (2, 6))
        for mdl, o in ((a, oa), (b, ob)):
            mdl.zero_grad()
            ag.backward(mdl.loss(ids, ids))
            o.step(1e-3)
    worst = max(np.abs(pa.data - pb.data).max() for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()))
    assert worst < 1e-6


def test_finite_under_large_gradients(rng):
    st = CompactAdamState.zeros(8, 5, 4, ProjectionSpec(ratio=0.5), 0, np.float32)
    W = np.zeros((8, 5), np.float32)
    for _ in range(50):
        compact_adam_step(W, (rng.normal(size=(4, 5)) * 1e3).astype(np.float32), st)
        assert np.isfinite(W).all() and np.isfinite(st.V).all() and (st.V >= 0).all()


def test_unknown_method():
    model = TransformerLM(ModelConfig(n=16, m=40, h=2, layers=1, vocab=5, max_seq_len=4), ProjectionSpec())
    with pytest.raises(ValueError):
        ModelOptimizer(model, AdamHyper(), "lion")
