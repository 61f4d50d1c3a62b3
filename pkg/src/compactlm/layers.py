"""CompAct linear layers and a LLaMA-style decoder built from them.

A compressed layer computes the exact output ``o = x W`` but keeps only the
sketch ``z = x P`` for backward.  Its weight gradient is the r x m matrix
``z^T dL/do`` (equal to ``P^T G``), handed to the optimizer through
``layer.grad_hat``; the input gradient ``dL/do W^T`` is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .projections import ProjectionSpec, layer_seed, projection_matrix, resolve_rank


class StaleProjectionError(RuntimeError):
    """A compressed gradient was paired with a projection from another seed epoch."""


@dataclass
class CompressedActivation:
    z: np.ndarray
    layer_seed: object
    r: int
    n: int


class CompactLinear:
    """Bias-free linear layer ``o = x W`` with W of shape (n, m).

    With ``compressed=False`` it is a plain linear layer that saves its input.
    ``save_input`` makes a compressed layer keep x (shared with its sibling
    layers) and build the sketch during backward; set by the block when a full
    input is no larger than the sketches it replaces.
    """

    def __init__(self, n, m, layer_id, spec: ProjectionSpec, compressed=True, dtype=np.float32,
                 rng=None, name="linear", group=None, init_std=0.02):
        rng = np.random.default_rng(layer_id) if rng is None else rng
        self.n, self.m = n, m
        self.layer_id = layer_id
        self.spec = spec
        self.compressed = compressed
        self.name = name
        self.group = group or name
        self.save_input = False
        self.W = Tensor(rng.normal(0.0, init_std, (n, m)).astype(dtype), requires_grad=True, name=name)
        self.grad_hat = None
        self.grad_seed = None
        self.last_saved: Optional[CompressedActivation] = None

    @property
    def rank(self):
        return resolve_rank(self.spec, self.n) if self.compressed else self.n

    def seed(self):
        return layer_seed(self.spec, self.layer_id, self.n, self.rank)

    def projection(self, seed=None):
        seed = self.seed() if seed is None else seed
        return projection_matrix(self.spec, seed, self.n, self.rank, dtype=self.W.dtype)

    def zero_grad(self):
        self.W.grad = None
        self.grad_hat = None
        self.grad_seed = None

    def _route_grad_hat(self, g_hat, seed):
        if self.grad_hat is None:
            self.grad_hat, self.grad_seed = g_hat, seed
            return
        if seed != self.grad_seed:
            raise StaleProjectionError(f"{self.name}: gradients from two seed epochs cannot be summed")
        self.grad_hat = self.grad_hat + g_hat

    def __call__(self, x):
        return compact_forward(self, x)


def compact_forward(layer, x):
    """o = x W in full precision; saves x (plain), or the sketch z = x P (compressed)."""
    if x.shape[-1] != layer.n:
        raise DimensionError(f"{layer.name}: input width {x.shape[-1]} != {layer.n}")
    if x.dtype != layer.W.dtype:
        raise TypeError(f"dtype mismatch: {x.dtype} vs {layer.W.dtype}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, layer.n)
    W = layer.W
    out = (x2 @ W.data).reshape(lead + (layer.m,))
    if not (ag.grad_enabled() and (x.requires_grad or W.requires_grad)):
        return Tensor(out, dtype=out.dtype)

    Wd = W.data
    lead_n = lead + (layer.n,)

    if not layer.compressed:
        hx = ag.save_for_backward(f"{layer.group}.x", x2)

        def backward(g):
            g2 = g.reshape(-1, layer.m)
            gx = (g2 @ Wd.T).reshape(lead_n) if x.requires_grad else None
            gW = hx.array.T @ g2 if W.requires_grad else None
            return gx, gW

        return ag.custom("linear", out, (x, W), [hx], backward)

    seed = layer.seed()
    identity = layer.spec.kind == "identity"
    if layer.save_input:
        hx = ag.save_for_backward(f"{layer.group}.x", x2)
        layer.last_saved = None

        def sketch():
            xs = hx.array
            return xs if identity else xs @ layer.projection(seed)
    else:
        z = x2 if identity else x2 @ layer.projection(seed)
        hx = ag.save_for_backward(f"{layer.name}.z", z)
        layer.last_saved = CompressedActivation(z, seed, layer.rank, layer.n)

        def sketch():
            return hx.array

    def backward(g):
        g2 = g.reshape(-1, layer.m)
        gx = (g2 @ Wd.T).reshape(lead_n) if x.requires_grad else None
        zs = sketch()
        if zs.shape[0] != g2.shape[0]:
            raise ag.StaleGraphError(f"{layer.name}: sketch rows {zs.shape[0]} != gradient rows {g2.shape[0]}")
        layer._route_grad_hat(zs.T @ g2, seed)
        return gx, None

    return ag.custom("compact_linear", out, (x, W), [hx], backward)


def compact_backward(layer, saved: CompressedActivation, g_o):
    """Stand-alone backward of one compressed layer: (dL/dx, G_hat = z^T dL/do)."""
    g_o = np.asarray(g_o)
    if saved.z.shape[0] != g_o.shape[0]:
        raise ag.StaleGraphError(f"sketch rows {saved.z.shape[0]} != gradient rows {g_o.shape[0]}")
    g_x = g_o @ layer.W.data.T
    return g_x, saved.z.T @ g_o


def rmsnorm(x, gain, eps):
    return ag.rmsnorm(x, gain, eps)


@dataclass(frozen=True)
class TransformerBlockConfig:
    n: int
    m: int
    h: int
    eps: float = 1e-6

    def __post_init__(self):
        if self.n % self.h:
            raise ValueError(f"hidden width {self.n} not divisible by {self.h} heads")
        if self.m <= self.n:
            raise ValueError(f"MLP width m={self.m} must exceed n={self.n}")


LAYER_NAMES = ("q", "k", "v", "o", "gate", "up", "down")
_GROUPS = {"q": "qkv", "k": "qkv", "v": "qkv", "o": "o", "gate": "gate_up", "up": "gate_up", "down": "down"}


def causal_attention(q, k, v, h):
    """Multi-head causal softmax attention on (b, l, n) inputs."""
    b, l, n = q.shape
    d = n // h

    def heads(t):
        return ag.transpose(ag.reshape(t, (b, l, h, d)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = ag.scale(ag.matmul(qh, ag.swap_last(kh), tag="attn.qk"), 1.0 / np.sqrt(d))
    mask = np.triu(np.ones((l, l), dtype=bool), k=1)
    probs = ag.softmax_lastdim(ag.masked_fill(scores, mask, -np.inf), tag="attn.probs")
    ctx = ag.matmul(probs, vh, tag="attn.pv")
    return ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, l, n))


class TransformerBlock:
    """Pre-norm block: RMSNorm, attention (q, k, v, o), RMSNorm, SwiGLU MLP (gate, up, down).

    The attention output projection ``o`` is never compressed.
    """

    def __init__(self, cfg: TransformerBlockConfig, block_id, spec, dtype=np.float32, rng=None,
                 compress=True, share_policy="auto"):
        rng = np.random.default_rng(block_id) if rng is None else rng
        self.cfg = cfg
        self.block_id = block_id
        n, m = cfg.n, cfg.m
        shapes = {"q": (n, n), "k": (n, n), "v": (n, n), "o": (n, n),
                  "gate": (n, m), "up": (n, m), "down": (m, n)}
        self.layers = {}
        for j, name in enumerate(LAYER_NAMES):
            a, c = shapes[name]
            self.layers[name] = CompactLinear(
                a, c, block_id * len(LAYER_NAMES) + j, spec,
                compressed=compress and name != "o", dtype=dtype, rng=rng,
                name=f"block{block_id}.{name}", group=f"block{block_id}.{_GROUPS[name]}")
        self.norm1 = Tensor(np.ones(n, dtype=dtype), requires_grad=True, name=f"block{block_id}.norm1")
        self.norm2 = Tensor(np.ones(n, dtype=dtype), requires_grad=True, name=f"block{block_id}.norm2")
        self.share_policy = share_policy
        self.apply_share_policy()

    def apply_share_policy(self):
        """Decide per input group whether to keep sketches or the shared input."""
        for members in (("q", "k", "v"), ("gate", "up"), ("down",)):
            layers = [self.layers[k] for k in members]
            n_in = layers[0].n
            sketch_width = sum(lay.rank for lay in layers)
            share = self.share_policy == "auto" and sketch_width >= n_in
            for lay in layers:
                lay.save_input = share and lay.compressed

    def set_projection(self, spec):
        for lay in self.layers.values():
            lay.spec = spec
        self.apply_share_policy()

    def __getitem__(self, name):
        return self.layers[name]

    def parameters(self):
        out = [(lay.name, lay.W) for lay in self.layers.values()]
        return out + [(self.norm1.name, self.norm1), (self.norm2.name, self.norm2)]

    def __call__(self, x1):
        c = self.cfg
        L = self.layers
        x2 = ag.rmsnorm(x1, self.norm1, c.eps, tag=f"block{self.block_id}.norm1")
        q, k, v = L["q"](x2), L["k"](x2), L["v"](x2)
        x3 = causal_attention(q, k, v, c.h)
        x5 = ag.add(L["o"](x3), x1)
        x6 = ag.rmsnorm(x5, self.norm2, c.eps, tag=f"block{self.block_id}.norm2")
        act = ag.silu(L["gate"](x6), tag=f"block{self.block_id}.silu")
        x7 = ag.mul(act, L["up"](x6), tag=f"block{self.block_id}.hadamard")
        return ag.add(L["down"](x7), x5)


def transformer_block_forward(block, x1):
    return block(x1)


@dataclass(frozen=True)
class ModelConfig:
    n: int = 128
    m: int = 344
    h: int = 4
    layers: int = 2
    vocab: int = 256
    max_seq_len: int = 64
    eps: float = 1e-6

    def block(self):
        return TransformerBlockConfig(self.n, self.m, self.h, self.eps)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("n", "m", "h", "layers", "vocab", "max_seq_len", "eps") if k in d}
        return cls(**known)


class TransformerLM:
    """Token + learned position embeddings, decoder blocks, final RMSNorm, untied LM head.

    ``compress=False`` builds the uncompressed baseline with identical
    initial weights for the same ``seed``.
    """

    def __init__(self, cfg: ModelConfig, spec: ProjectionSpec, dtype=np.float32, seed=0,
                 compress=True, share_policy="auto"):
        self.cfg = cfg
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        n = cfg.n
        self.tok_emb = Tensor(rng.normal(0, 0.02, (cfg.vocab, n)).astype(dtype), requires_grad=True,
                              name="tok_emb")
        self.pos_emb = Tensor(rng.normal(0, 0.02, (cfg.max_seq_len, n)).astype(dtype), requires_grad=True,
                              name="pos_emb")
        self.blocks = [TransformerBlock(cfg.block(), i, spec, dtype, rng, compress, share_policy)
                       for i in range(cfg.layers)]
        self.norm_f = Tensor(np.ones(n, dtype=dtype), requires_grad=True, name="norm_f")
        self.head = Tensor(rng.normal(0, 0.02, (n, cfg.vocab)).astype(dtype), requires_grad=True,
                           name="head")

    def set_projection(self, spec):
        self.spec = spec
        for b in self.blocks:
            b.set_projection(spec)

    def linear_layers(self):
        return [lay for b in self.blocks for lay in b.layers.values()]

    def compressed_layers(self):
        return [lay for lay in self.linear_layers() if lay.compressed]

    def parameters(self):
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for b in self.blocks:
            out.extend(b.parameters())
        return out + [("norm_f", self.norm_f), ("head", self.head)]

    def zero_grad(self):
        for _, p in self.parameters():
            p.grad = None
        for lay in self.linear_layers():
            lay.zero_grad()

    def logits(self, ids):
        ids = np.asarray(ids)
        b, l = ids.shape
        if l > self.cfg.max_seq_len:
            raise DimensionError(f"sequence length {l} exceeds {self.cfg.max_seq_len}")
        x = ag.embedding(self.tok_emb, ids, tag="tok_emb")
        x = ag.add(x, ag.embedding(self.pos_emb, np.arange(l), tag="pos_emb"))
        for blk in self.blocks:
            x = blk(x)
        x = ag.rmsnorm(x, self.norm_f, self.cfg.eps, tag="norm_f")
        return ag.matmul(ag.reshape(x, (b * l, self.cfg.n)), self.head, tag="head")

    def loss(self, ids, targets):
        return ag.cross_entropy(self.logits(ids), np.asarray(targets).reshape(-1))
