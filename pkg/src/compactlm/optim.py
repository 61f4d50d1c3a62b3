"""Adam in full and compressed form.

Compressed layers keep their moments at the r x m shape of the compressed
gradient and rebuild P from the layer seed only at the update,
``W <- W - lr * alpha * P (M_hat / (sqrt(V_hat) + eps))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import backend
from .autograd import DimensionError, Tensor
from .layers import StaleProjectionError
from .projections import ProjectionSpec, layer_seed, projection_matrix, resolve_rank


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 0.25
    weight_decay: float = 0.0


@dataclass
class FullAdamState:
    M: np.ndarray
    V: np.ndarray
    t: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def zeros(cls, shape, dtype=np.float32, hyper=None):
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype), 0, hyper or AdamHyper())

    @property
    def nbytes(self):
        return self.M.nbytes + self.V.nbytes


@dataclass
class CompactAdamState:
    """Moments of one compressed layer plus what is needed to replay its projection."""

    M: np.ndarray
    V: np.ndarray
    spec: ProjectionSpec
    layer_id: int
    n: int
    r: int
    t: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)
    reset_on_update: bool = False
    bias_steps: int = 0

    @classmethod
    def zeros(cls, n, m, r, spec, layer_id, dtype=np.float32, hyper=None, reset_on_update=False):
        return cls(np.zeros((r, m), dtype=dtype), np.zeros((r, m), dtype=dtype), spec, layer_id, n, r,
                   hyper=hyper or AdamHyper(), reset_on_update=reset_on_update)

    @property
    def seed(self):
        return layer_seed(self.spec, self.layer_id, self.n, self.r)

    @property
    def nbytes(self):
        return self.M.nbytes + self.V.nbytes

    def projection(self):
        return projection_matrix(self.spec, self.seed, self.n, self.r, dtype=self.M.dtype)


def _array(W):
    return W.data if isinstance(W, Tensor) else W


def _direction(state, G, bias_steps):
    h = state.hyper
    if G.shape != state.M.shape:
        raise DimensionError(f"gradient shape {G.shape} does not match moments {state.M.shape}")
    bc1 = 1.0 - h.beta1 ** bias_steps
    bc2 = 1.0 - h.beta2 ** bias_steps
    return backend.adam_direction(state.M, state.V, G, h.beta1, h.beta2, bc1, bc2, h.eps)


def full_adam_step(W, G, state: FullAdamState, lr=None, lr_scale=1.0):
    """Textbook bias-corrected Adam on the full n x m gradient, in place."""
    h = state.hyper
    lr = (h.lr if lr is None else lr) * lr_scale
    w = _array(W)
    N = _direction(state, np.asarray(G), state.t + 1)
    if h.weight_decay:
        w -= (lr * h.weight_decay) * w
    w -= lr * N
    state.t += 1
    return W, state


def on_projection_update(state: CompactAdamState):
    """Move to the next seed epoch; optionally drop moments tied to the old subspace."""
    state.spec = replace(state.spec, seed_epoch=state.spec.seed_epoch + 1)
    if state.reset_on_update:
        state.M[...] = 0
        state.V[...] = 0
        state.bias_steps = 0
    return state


def compact_adam_step(W, G_hat, state: CompactAdamState, lr=None, grad_seed=None, lr_scale=1.0, alpha=None):
    """Adam on the r x m compressed gradient, decompressed with the replayed P.

    ``grad_seed`` is the seed that produced the sketch behind ``G_hat``; a
    mismatch with the state's current seed raises StaleProjectionError.
    """
    h = state.hyper
    if grad_seed is not None and grad_seed != state.seed:
        raise StaleProjectionError(
            f"gradient from seed epoch {grad_seed.epoch}, optimizer at epoch {state.spec.seed_epoch}")
    lr = (h.lr if lr is None else lr) * lr_scale
    w = _array(W)
    state.bias_steps += 1
    N = _direction(state, np.asarray(G_hat), state.bias_steps)
    update = N if state.spec.kind == "identity" else state.projection() @ N
    if h.weight_decay:
        w -= (lr * h.weight_decay) * w
    w -= (lr * (h.alpha if alpha is None else alpha)) * update
    state.t += 1
    T = state.spec.update_period
    if T is not None and state.t % T == 0:
        on_projection_update(state)
    return W, state


def galore_step(W, G, state: CompactAdamState, lr=None, lr_scale=1.0, alpha=1.0):
    """Project the full gradient after backward (P^T G), then the same compressed Adam update.

    The comparison arm takes its own scale and defaults to alpha = 1.
    """
    P = state.projection()
    G = np.asarray(G)
    G_hat = G if state.spec.kind == "identity" else P.T @ G
    return compact_adam_step(W, G_hat, state, lr=lr, lr_scale=lr_scale, alpha=alpha)


class ModelOptimizer:
    """Per-parameter Adam states for a :class:`~compactlm.layers.TransformerLM`.

    ``method``: "compact" (compressed layers get CompactAdamState),
    "full" (everything full Adam) or "galore" (uncompressed model, compressible
    layers projected after backward, scaled by ``galore_alpha``).  ``alpha_out``
    scales the learning rate of the uncompressed attention output projection.
    """

    def __init__(self, model, hyper: AdamHyper, method="compact", alpha_out=1.0, reset_on_update=False,
                 galore_alpha=1.0):
        if method not in ("compact", "full", "galore"):
            raise ValueError(f"unknown method {method!r}")
        self.model = model
        self.hyper = hyper
        self.method = method
        self.alpha_out = alpha_out
        self.galore_alpha = galore_alpha
        self.states = {}
        self.layer_of = {}
        for lay in model.linear_layers():
            self.layer_of[lay.name] = lay
            low_rank = (method == "compact" and lay.compressed) or (
                method == "galore" and lay.name.rsplit(".", 1)[-1] != "o")
            if method == "compact" and lay.compressed != low_rank:
                raise ValueError("model compression does not match optimizer method")
            if low_rank:
                r = lay.rank if method == "compact" else resolve_rank(model.spec, lay.n)
                self.states[lay.name] = CompactAdamState.zeros(
                    lay.n, lay.m, r, model.spec, lay.layer_id, lay.W.dtype, hyper, reset_on_update)
        for name, p in model.parameters():
            if name not in self.states:
                self.states[name] = FullAdamState.zeros(p.shape, p.dtype, hyper)
        self.params = dict(model.parameters())

    def low_rank_bytes(self):
        return {k: s.nbytes for k, s in self.states.items() if isinstance(s, CompactAdamState)}

    def state_bytes(self):
        return sum(s.nbytes for s in self.states.values())

    def step(self, lr):
        for name, p in self.params.items():
            state = self.states[name]
            lay = self.layer_of.get(name)
            scale = self.alpha_out if name.endswith(".o") else 1.0
            if isinstance(state, CompactAdamState):
                if self.method == "compact":
                    if lay.grad_hat is None:
                        continue
                    compact_adam_step(p, lay.grad_hat, state, lr=lr, grad_seed=lay.grad_seed)
                else:
                    if p.grad is None:
                        continue
                    galore_step(p, p.grad, state, lr=lr, alpha=self.galore_alpha)
            else:
                if p.grad is None:
                    continue
                full_adam_step(p, p.grad, state, lr=lr, lr_scale=scale)
        # the optimizer owns the seed schedule; layers follow it
        epoch = self.seed_epoch()
        if epoch is not None and epoch != self.model.spec.seed_epoch:
            self.model.set_projection(replace(self.model.spec, seed_epoch=epoch))

    def seed_epoch(self):
        epochs = {s.spec.seed_epoch for s in self.states.values() if isinstance(s, CompactAdamState)}
        if len(epochs) > 1:
            raise StaleProjectionError(f"optimizer states disagree on seed epoch: {sorted(epochs)}")
        return epochs.pop() if epochs else None

