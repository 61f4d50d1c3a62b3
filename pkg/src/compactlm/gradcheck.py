"""Algebraic and numerical invariant checks shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor, finite_difference_grad, relative_error
from .layers import (CompactLinear, ModelConfig, TransformerBlock, TransformerBlockConfig, TransformerLM,
                     causal_attention, compact_backward)
from .optim import AdamHyper, CompactAdamState, compact_adam_step, galore_step
from .projections import LayerSeed, ProjectionSpec, projection_matrix

SHAPES = ((16, 24), (32, 48), (64, 64), (48, 128), (128, 344), (344, 128))


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    bound: float

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} {self.value:.3e} (< {self.bound:.0e})"


def sketch_identity(trials=50, dtype=np.float64, corrupt_seed=False, seed=0):
    """Worst relative error of G_hat from compact_backward against P^T (x^T g_o)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        n, m = SHAPES[t % len(SHAPES)]
        kind = ("gaussian", "sparse_jl", "gaussian_shared_seed")[t % 3]
        spec = ProjectionSpec(kind=kind, ratio=0.25, base_seed=int(rng.integers(1 << 30)))
        lay = CompactLinear(n, m, t, spec, dtype=dtype, rng=rng)
        rows = int(rng.integers(4, 40))
        x = Tensor(rng.normal(size=(rows, n)).astype(dtype), requires_grad=True)
        g = rng.normal(size=(rows, m)).astype(dtype)
        store = ag.SavedBufferStore()
        with ag.use_store(store):
            lay(x)
        saved = lay.last_saved
        _, g_hat = compact_backward(lay, saved, g)
        s = saved.layer_seed
        if corrupt_seed:
            s = LayerSeed(s.value ^ 0x9E3779B9, s.epoch)
        P = projection_matrix(spec, s, n, lay.rank, dtype=dtype)
        ref = P.T @ (x.data.T @ g)
        worst = max(worst, relative_error(g_hat, ref))
        store.clear()
    return worst


def _fd(f, x):
    x.grad = None
    ag.backward(f(x))
    return relative_error(x.grad, finite_difference_grad(f, x))


def _condition(params, rng, std=0.3):
    # init-scale weights make attention nearly uniform and q/k gradients tiny,
    # which leaves central differences roundoff-limited
    for name, p in params:
        if p.data.ndim == 2:
            p.data[...] = rng.normal(0.0, std, p.shape)


def finite_differences(seed=0):
    """Relative error of analytic vs central-difference gradients, f64, per layer type."""
    rng = np.random.default_rng(seed)
    d = np.float64
    out = {}
    spec = ProjectionSpec(ratio=0.5)
    vec = rng.normal(size=(2, 5, 12))

    lay = CompactLinear(12, 20, 0, spec, compressed=False, dtype=d, rng=rng)
    w_out = rng.normal(size=(2, 5, 20))
    x = Tensor(vec.copy(), requires_grad=True)
    out["linear (input)"] = _fd(lambda t: ag.sum_all(ag.mul(lay(t), Tensor(w_out))), x)
    out["linear (weight)"] = _fd(lambda W: ag.sum_all(ag.mul(ag.matmul(Tensor(vec.reshape(10, 12)), W),
                                                                   Tensor(w_out.reshape(10, 20)))), lay.W)

    lay_c = CompactLinear(12, 20, 1, spec, compressed=True, dtype=d, rng=rng)
    x = Tensor(vec.copy(), requires_grad=True)
    out["compact linear (input)"] = _fd(lambda t: ag.sum_all(ag.mul(lay_c(t), Tensor(w_out))), x)

    gain = Tensor(rng.normal(1.0, 0.1, 12), requires_grad=True)
    w12 = Tensor(rng.normal(size=(2, 5, 12)))
    x = Tensor(vec.copy(), requires_grad=True)
    out["rmsnorm (input)"] = _fd(lambda t: ag.sum_all(ag.mul(ag.rmsnorm(t, gain, 1e-6), w12)), x)
    xin = Tensor(vec.copy())
    out["rmsnorm (gain)"] = _fd(lambda gn: ag.sum_all(ag.mul(ag.rmsnorm(xin, gn, 1e-6), w12)), gain)

    x = Tensor(vec.copy(), requires_grad=True)
    out["silu"] = _fd(lambda t: ag.sum_all(ag.mul(ag.silu(t), w12)), x)

    x = Tensor(vec.copy(), requires_grad=True)
    out["softmax"] = _fd(lambda t: ag.sum_all(ag.mul(ag.softmax_lastdim(t), w12)), x)

    q = Tensor(rng.normal(size=(2, 5, 12)), requires_grad=True)
    kk, vv = Tensor(rng.normal(size=(2, 5, 12))), Tensor(rng.normal(size=(2, 5, 12)))
    out["causal attention (q)"] = _fd(lambda t: ag.sum_all(ag.mul(causal_attention(t, kk, vv, 3), w12)), q)
    v = Tensor(rng.normal(size=(2, 5, 12)), requires_grad=True)
    out["causal attention (v)"] = _fd(lambda t: ag.sum_all(ag.mul(causal_attention(q, kk, t, 3), w12)), v)

    blk = TransformerBlock(TransformerBlockConfig(12, 20, 3), 0, spec, d, rng, compress=False)
    _condition(blk.parameters(), rng)
    x = Tensor(vec.copy(), requires_grad=True)
    out["transformer block (input)"] = _fd(lambda t: ag.sum_all(ag.mul(blk(t), w12)), x)
    params = [p for _, p in blk.parameters()]
    out["transformer block (params)"] = ag.parameters_grad_check(
        lambda: ag.sum_all(ag.mul(blk(Tensor(vec)), w12)), params)

    model = TransformerLM(ModelConfig(n=12, m=20, h=3, layers=1, vocab=7, max_seq_len=5), spec, d, seed,
                          compress=False)
    _condition(model.parameters(), rng)
    ids = rng.integers(0, 7, (2, 5))
    tg = rng.integers(0, 7, (2, 5))
    out["language model loss (params)"] = ag.parameters_grad_check(
        lambda: model.loss(ids, tg), [p for _, p in model.parameters()])
    return out


def order_equivalence(model, ids, targets, spec=None, lr=1e-3):
    """Worst relative difference between compact and galore weight updates over every compressed layer.

    ``model`` must be compressed; its twin is rebuilt uncompressed from identical weights.
    """
    spec = spec or model.spec
    twin = TransformerLM(model.cfg, spec, model.dtype, compress=False)
    for (_, a), (_, b) in zip(model.parameters(), twin.parameters()):
        b.data[...] = a.data
    for m_ in (model, twin):
        m_.zero_grad()
        ag.backward(m_.loss(ids, targets))
    hyper = AdamHyper(lr=lr)
    worst = 0.0
    twin_layers = {lay.name: lay for lay in twin.linear_layers()}
    for lc in model.compressed_layers():
        lf = twin_layers[lc.name]
        s1 = CompactAdamState.zeros(lc.n, lc.m, lc.rank, lc.spec, lc.layer_id, lc.W.dtype, hyper)
        s2 = CompactAdamState.zeros(lc.n, lc.m, lc.rank, lc.spec, lc.layer_id, lc.W.dtype, hyper)
        W1, W2 = lc.W.data.copy(), lf.W.data.copy()
        compact_adam_step(W1, lc.grad_hat, s1, grad_seed=lc.grad_seed)
        galore_step(W2, lf.W.grad, s2, alpha=hyper.alpha)
        worst = max(worst, relative_error(W1 - lc.W.data, W2 - lf.W.data))
    return worst


def identity_equivalence(steps=5, seed=0):
    """Max loss drift between identity-projection CompAct (alpha=1) and full Adam."""
    from .train import TrainConfig, build

    rng = np.random.default_rng(seed)
    base = TrainConfig(n=32, m=64, heads=4, layers=1, steps=steps, seq_len=16, batch=4, kind="identity",
                       alpha=1.0, seed=seed, metrics=None)
    m1, o1 = build(base, 17)
    m2, o2 = build(replace(base, method="full"), 17)
    drift = 0.0
    for _ in range(steps):
        ids = rng.integers(0, 17, (4, 16))
        tg = rng.integers(0, 17, (4, 16))
        losses = []
        for m_, o_ in ((m1, o1), (m2, o2)):
            m_.zero_grad()
            loss = m_.loss(ids, tg)
            ag.backward(loss)
            o_.step(1e-3)
            losses.append(loss.item())
        drift = max(drift, abs(losses[0] - losses[1]))
    return drift


def run_all(corrupt_seed=False, seed=0):
    results = [
        CheckResult("sketch identity f32", (e := sketch_identity(dtype=np.float32, corrupt_seed=corrupt_seed,
                                                                 seed=seed)) < 1e-5, e, 1e-5),
        CheckResult("sketch identity f64", (e := sketch_identity(dtype=np.float64, corrupt_seed=corrupt_seed,
                                                                 seed=seed)) < 1e-12, e, 1e-12),
    ]
    for name, err in finite_differences(seed).items():
        results.append(CheckResult(f"finite diff: {name}", err < 1e-6, err, 1e-6))
    spec = ProjectionSpec(ratio=0.25)
    model = TransformerLM(ModelConfig(n=32, m=64, h=4, layers=1, vocab=11, max_seq_len=8), spec,
                          np.float64, seed=seed)
    rng = np.random.default_rng(seed)
    ids, tg = rng.integers(0, 11, (2, 8)), rng.integers(0, 11, (2, 8))
    e = order_equivalence(model, ids, tg)
    results.append(CheckResult("compact == galore update", e < 1e-6, e, 1e-6))
    e = identity_equivalence(seed=seed)
    results.append(CheckResult("identity == full adam (loss)", e <= 1e-5, e, 1e-5))
    return results
