import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compactlm import _fallback
from compactlm.projections import (LayerSeed, ProjectionSpec, advance_epoch, epoch_at, hash64, layer_seed,
                                   projection_matrix, resolve_rank, sample_gaussian, sample_sparse_jl,
                                   singular_ratio_probe)

M64 = (1 << 64) - 1


def splitmix_word(key, i):
    # independent scalar SplitMix64 in Python integers
    z = (key + (i + 1) * 0x9E3779B97F4A7C15) & M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
    return z ^ (z >> 31)


def test_counter_stream_matches_scalar_splitmix():
    key = 0x1234_5678_9ABC_DEF0
    got = _fallback.counter_bits(key, 0, 16)
    assert [int(v) for v in got] == [splitmix_word(key, i) for i in range(16)]
    # counter mode: an offset window equals the tail of the full stream
    assert [int(v) for v in _fallback.counter_bits(key, 5, 3)] == [splitmix_word(key, i) for i in (5, 6, 7)]


def test_gaussian_is_box_muller_of_counter_stream():
    key, n, r = 99, 3, 2
    P = sample_gaussian(key, n, r)
    vals = []
    for j in range(3):
        b1, b2 = splitmix_word(key, 2 * j), splitmix_word(key, 2 * j + 1)
        u1 = ((b1 >> 11) + 1) * 2.0 ** -53
        u2 = (b2 >> 11) * 2.0 ** -53
        rad = math.sqrt(-2 * math.log(u1))
        vals += [rad * math.cos(2 * math.pi * u2), rad * math.sin(2 * math.pi * u2)]
    np.testing.assert_allclose(P.ravel(), np.array(vals) / math.sqrt(r), rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("ratio,n,expect", [(0.25, 1024, 256), (0.125, 4, 1), (0.5, 344, 172),
                                            (0.25, 344, 86), (0.125, 344, 43), (1.0, 7, 7)])
def test_resolve_rank_ratio(ratio, n, expect):
    assert resolve_rank(ProjectionSpec(ratio=ratio), n) == expect


def test_resolve_rank_fixed_and_identity():
    assert resolve_rank(ProjectionSpec(ratio=None, rank=8), 4) == 4
    assert resolve_rank(ProjectionSpec(kind="identity"), 33) == 33


def test_rank_rounds_half_up():
    assert resolve_rank(ProjectionSpec(ratio=0.5), 5) == 3


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(1, 10_000))
def test_rank_always_in_range(ratio, n):
    r = resolve_rank(ProjectionSpec(ratio=ratio), n)
    assert 1 <= r <= n
    assert abs(r - ratio * n) <= 0.5 + 1e-9 or r == 1


@pytest.mark.parametrize("bad", [dict(kind="velora"), dict(ratio=0.0), dict(ratio=1.5), dict(ratio=None),
                                 dict(ratio=0.5, rank=3), dict(update_period=0)])
def test_spec_validation(bad):
    with pytest.raises(ValueError):
        ProjectionSpec(**bad)


def test_spec_roundtrip():
    for spec in (ProjectionSpec(), ProjectionSpec(kind="sparse_jl", ratio=None, rank=7, update_period=None)):
        assert ProjectionSpec.from_dict(spec.to_dict()) == spec


def test_sampling_deterministic():
    for f in (sample_gaussian, sample_sparse_jl):
        assert np.array_equal(f(7, 32, 8), f(7, 32, 8))
        assert not np.array_equal(f(7, 32, 8), f(8, 32, 8))


def test_gaussian_moments():
    P = sample_gaussian(2024, 512, 128)
    assert abs(P.mean()) < 1e-3
    assert abs(P.var() / (1 / 128) - 1) < 0.05


def test_mean_ppt_close_to_identity():
    n, r = 64, 16
    acc = np.zeros((n, n))
    for s in range(500):
        P = sample_gaussian(hash64(1, s), n, r)
        acc += P @ P.T
    acc /= 500
    assert np.linalg.norm(acc - np.eye(n)) < 0.1 * np.linalg.norm(np.eye(n))


def test_sparse_jl_values_and_density():
    r = 128
    P = sample_sparse_jl(5, 512, r)
    a = math.sqrt(3 / r)
    assert set(np.unique(P).tolist()) <= {-a, 0.0, a}
    zero = np.mean(P == 0)
    assert abs(zero - 2 / 3) < 0.02
    assert abs(np.mean(P > 0) - np.mean(P < 0)) < 0.01


def test_sparse_jl_norm_preservation(rng):
    n, r = 256, 64
    P = sample_sparse_jl(11, n, r)
    xs = rng.normal(size=(100, n))
    xs /= np.linalg.norm(xs, axis=1, keepdims=True)
    assert 0.9 <= np.mean(np.sum((xs @ P) ** 2, axis=1)) <= 1.1


def test_layer_seeds():
    g = ProjectionSpec(kind="gaussian")
    assert layer_seed(g, 0, 64, 16) != layer_seed(g, 1, 64, 16)
    sh = ProjectionSpec(kind="gaussian_shared_seed")
    assert layer_seed(sh, 0, 64, 16) == layer_seed(sh, 5, 64, 16)
    assert layer_seed(sh, 0, 64, 16) != layer_seed(sh, 0, 64, 8)
    for spec in (g, sh):
        nxt = advance_epoch(spec, spec.update_period)
        assert layer_seed(nxt, 3, 64, 16).value != layer_seed(spec, 3, 64, 16).value


def test_shared_seed_same_matrix():
    sh = ProjectionSpec(kind="gaussian_shared_seed", ratio=0.25)
    P1 = projection_matrix(sh, layer_seed(sh, 0, 128, 32), 128, 32)
    P2 = projection_matrix(sh, layer_seed(sh, 9, 128, 32), 128, 32)
    assert np.array_equal(P1, P2)


def test_epoch_change_changes_projection():
    spec = ProjectionSpec()
    nxt = advance_epoch(spec, 50)
    P0 = projection_matrix(spec, layer_seed(spec, 2, 64, 16), 64, 16)
    P1 = projection_matrix(nxt, layer_seed(nxt, 2, 64, 16), 64, 16)
    assert np.linalg.norm(P0 - P1) > 0


def test_advance_epoch():
    spec = ProjectionSpec(update_period=50)
    assert advance_epoch(spec, 50).seed_epoch == 1
    assert advance_epoch(spec, 49).seed_epoch == 0
    assert advance_epoch(spec, 0).seed_epoch == 0
    inf = ProjectionSpec(update_period=None)
    assert all(advance_epoch(inf, s).seed_epoch == 0 for s in (1, 50, 10**6))
    assert epoch_at(spec, 149) == 2
    with pytest.raises(ValueError):
        advance_epoch(spec, -1)


def test_identity_projection():
    spec = ProjectionSpec(kind="identity")
    assert np.array_equal(projection_matrix(spec, LayerSeed(0, 0), 5, 5), np.eye(5))


def test_probe_identity_ratios_are_one():
    ratios = singular_ratio_probe(32, 32, 4, 32, 5, kind="identity")
    np.testing.assert_allclose(ratios, 1.0, rtol=1e-10)


def test_probe_skips_zero_matrix():
    assert singular_ratio_probe(16, 16, 2, 8, 3, make_matrix=lambda g: np.zeros((16, 16))) == []


def test_probe_preconditions():
    with pytest.raises(ValueError):
        singular_ratio_probe(16, 16, 9, 8, 1)
