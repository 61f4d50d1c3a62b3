"""Pure numpy implementations of the hot kernels.

These are the reference versions of everything in ``_kernels.pyx``.  Both
must produce identical integer streams; floating results agree bit-for-bit
for the Adam kernel and to within libm ulps for the Gaussian transform.
"""

import math

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

INV_2_53 = 1.0 / 9007199254740992.0
TWO_PI = 2.0 * math.pi
# 2**53 // 6 and 2**53 // 3: thresholds for the three-point sparse distribution
JL_PLUS = 1501199875790165
JL_MINUS = 3002399751580330


def counter_bits(key, start, count):
    """SplitMix64 evaluated in counter mode: word i is mix(key + (i + 1) * golden)."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(key) + idx * GOLDEN
    z ^= z >> _S30
    z *= _MIX1
    z ^= z >> _S27
    z *= _MIX2
    z ^= z >> _S31
    return z


def gaussian_fill(key, n, r, scale):
    count = n * r
    pairs = (count + 1) // 2
    bits = counter_bits(key, 0, 2 * pairs).reshape(pairs, 2)
    u1 = ((bits[:, 0] >> _S11) + np.uint64(1)).astype(np.float64) * INV_2_53
    u2 = (bits[:, 1] >> _S11).astype(np.float64) * INV_2_53
    radius = np.sqrt(-2.0 * np.log(u1))
    theta = TWO_PI * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return (out[:count] * scale).reshape(n, r)


def sparse_jl_fill(key, n, r, a):
    h = counter_bits(key, 0, n * r) >> _S11
    out = np.zeros(n * r, dtype=np.float64)
    out[h < np.uint64(JL_PLUS)] = a
    out[(h >= np.uint64(JL_PLUS)) & (h < np.uint64(JL_MINUS))] = -a
    return out.reshape(n, r)


def adam_direction(M, V, G, beta1, beta2, bc1, bc2, eps):
    """Update M, V in place and return the normalized direction M_hat / (sqrt(V_hat) + eps)."""
    M *= beta1
    M += (1.0 - beta1) * G
    V *= beta2
    V += (1.0 - beta2) * (G * G)
    return (M / bc1) / (np.sqrt(V / bc2) + eps)
