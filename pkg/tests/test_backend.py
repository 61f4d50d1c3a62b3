import os
import subprocess
import sys

import numpy as np
import pytest

from compactlm import _fallback, backend

native = pytest.mark.skipif(not backend.native_available(), reason="compiled kernels not built")


@native
@pytest.mark.parametrize("key", [0, 1, 2**63 + 5, 2**64 - 1])
def test_counter_bits_identical(key):
    nat = backend.get("native")
    assert np.array_equal(nat.counter_bits(key, 3, 1001), _fallback.counter_bits(key, 3, 1001))


@native
@pytest.mark.parametrize("n,r", [(1, 1), (7, 3), (128, 32), (344, 86)])
def test_fills_agree(n, r):
    nat = backend.get("native")
    # numpy's vectorised log/cos may differ from libm in the last bits
    np.testing.assert_allclose(nat.gaussian_fill(42, n, r, 0.3), _fallback.gaussian_fill(42, n, r, 0.3),
                               rtol=0, atol=1e-15)
    assert np.array_equal(nat.sparse_jl_fill(42, n, r, 0.3), _fallback.sparse_jl_fill(42, n, r, 0.3))


@native
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_direction_identical(dtype):
    rng = np.random.default_rng(0)
    G = rng.normal(size=(33, 17)).astype(dtype)
    outs = []
    for impl in (backend.get("native"), _fallback):
        M = rng.normal(size=(33, 17)).astype(dtype) * 0 + 0.1
        V = np.full((33, 17), 0.2, dtype)
        d = impl.adam_direction(M, V, G, 0.9, 0.999, 0.19, 0.002, 1e-8)
        outs.append((d, M, V))
    for a, b in zip(*outs):
        assert a.dtype == dtype
        assert np.array_equal(a, b)


def test_backend_env_selection():
    env = dict(os.environ, COMPACTLM_BACKEND="python")
    r = subprocess.run([sys.executable, "-c", "from compactlm import backend; print(backend.NAME)"],
                       env=env, capture_output=True, text=True)
    assert r.stdout.strip() == "python"
    env["COMPACTLM_BACKEND"] = "bogus"
    r = subprocess.run([sys.executable, "-c", "import compactlm.backend"], env=env, capture_output=True)
    assert r.returncode != 0


def test_get_unknown():
    with pytest.raises(ValueError):
        backend.get("gpu")
