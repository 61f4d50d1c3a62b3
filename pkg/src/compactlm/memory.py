"""Analytic training-memory model.

Per linear layer W (n_in x m_out) with r resolved from n_in, the components
scale as

=============  ======  ==========  =========  ======  =======
component      full    lora        galore     flora   compact
=============  ======  ==========  =========  ======  =======
weights        nm      r(n+m)      nm         nm      nm
gradients      nm      r(n+m)      nm         nm      rm
optim states   2nm     2r(n+m)     nr + 2mr   2mr     2rm
activations    bln     bln         bln        bln     blr
=============  ======  ==========  =========  ======  =======

Activations follow the per-operation inventory of a LLaMA block (RMSNorm,
q/k/v, attention, o, RMSNorm, gate/up, SiLU, Hadamard, down).  "Linear"
activations are the saved inputs of the layers CompAct can compress (q, k,
v share one input, as do gate and up); everything else, including the
attention output that feeds W_o, is non-linear.

All figures are steady-state component sums, not allocator peaks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Optional

from .errors import CheckFailure, ConfigError
from .projections import ProjectionSpec, resolve_rank

METHODS = ("full", "lora", "galore", "flora", "compact")
REPORT_FIELDS = ("weights_bytes", "gradients_bytes", "optimizer_bytes",
                 "linear_activation_bytes", "nonlinear_activation_bytes", "total_bytes")
INDEX_BYTES = 8
GIB = 1 << 30

# name, input width, output width, shared-input group, compressible
_BLOCK_LAYERS = (
    ("q", "n", "n", "qkv", True),
    ("k", "n", "n", "qkv", True),
    ("v", "n", "n", "qkv", True),
    ("o", "n", "n", "o", False),
    ("gate", "n", "m", "gate_up", True),
    ("up", "n", "m", "gate_up", True),
    ("down", "m", "n", "down", True),
)


@dataclass(frozen=True)
class ModelDims:
    n: int
    m: int
    h: int
    L: int
    V: int
    l: int
    b: int
    bytes_per_element: int = 2
    tie_embeddings: bool = False
    learned_positions: bool = False
    name: str = ""

    def __post_init__(self):
        for k in ("n", "m", "h", "L", "V", "l", "b"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive")
        if self.n % self.h:
            raise ConfigError(f"n={self.n} not divisible by h={self.h}")
        if self.bytes_per_element not in (2, 4, 8):
            raise ConfigError("bytes_per_element must be 2, 4 or 8")

    def with_(self, **kw):
        return replace(self, **kw)

    def parameter_count(self):
        n, m, L, V = self.n, self.m, self.L, self.V
        block = 4 * n * n + 3 * n * m + 2 * n
        emb = V * n * (1 if self.tie_embeddings else 2)
        pos = self.l * n if self.learned_positions else 0
        return L * block + emb + pos + n

    @classmethod
    def from_dict(cls, d):
        fields_ = {k: d[k] for k in ("n", "m", "h", "L", "V", "l", "b", "bytes_per_element",
                                      "tie_embeddings", "learned_positions", "name") if k in d}
        try:
            return cls(**fields_)
        except TypeError as e:
            raise ConfigError(f"bad model dims: {e}") from None


def load_presets():
    text = resources.files("compactlm").joinpath("resources/llama_dims.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


def llama_dims(size, b=256, l=256, bytes_per_element=2):
    presets = load_presets()
    key = size.lower()
    if key not in presets:
        raise ConfigError(f"unknown LLaMA size {size!r}; known: {sorted(presets)}")
    p = presets[key]
    return ModelDims(p["n"], p["m"], p["h"], p["L"], p["V"], l, b, bytes_per_element,
                     p.get("tie_embeddings", False), name=f"llama-{key}")


@dataclass
class MemoryReport:
    method: str
    rank_rule: str
    weights_bytes: int
    gradients_bytes: int
    optimizer_bytes: int
    linear_activation_bytes: int
    nonlinear_activation_bytes: int
    total_bytes: int
    compressible_state_bytes: int = 0
    linear_inventory: dict = field(default_factory=dict)
    dims: Optional[ModelDims] = None

    def to_dict(self):
        d = {k: getattr(self, k) for k in REPORT_FIELDS}
        d["method"] = self.method
        d["rank_rule"] = self.rank_rule
        d["compressible_state_bytes"] = self.compressible_state_bytes
        if self.dims is not None:
            d["dims"] = asdict(self.dims)
        return d


def _rule(rank_rule):
    if rank_rule is None:
        return ProjectionSpec(ratio=1.0)
    if isinstance(rank_rule, ProjectionSpec):
        return rank_rule
    if isinstance(rank_rule, bool):
        raise ConfigError("rank rule must be a ratio, an integer rank or a ProjectionSpec")
    if isinstance(rank_rule, int):
        return ProjectionSpec(ratio=None, rank=rank_rule)
    if isinstance(rank_rule, float):
        return ProjectionSpec(ratio=rank_rule)
    raise ConfigError(f"bad rank rule {rank_rule!r}")


def _rule_label(spec):
    return f"rank={spec.rank}" if spec.rank is not None else f"ratio={spec.ratio:g}"


def estimate(dims: ModelDims, method="full", rank_rule=None, attention="flash", share_policy="auto"):
    """Component byte estimates for one training configuration."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    if attention not in ("flash", "standard"):
        raise ConfigError(f"attention must be flash or standard, got {attention!r}")
    spec = _rule(rank_rule)
    d = dims
    width = {"n": d.n, "m": d.m}
    tokens = d.b * d.l
    bpe = d.bytes_per_element

    weights = grads = optim = comp_state = 0
    per_block_linear = {}
    for name, a, c, group, compressible in _BLOCK_LAYERS:
        n_in, m_out = width[a], width[c]
        r = resolve_rank(spec, n_in)
        full = n_in * m_out
        if method == "full":
            w, g, o = full, full, 2 * full
        elif method == "lora":
            w = g = r * (n_in + m_out)
            o = 2 * w
        elif method == "galore":
            w = g = full
            o = min(n_in, m_out) * r + 2 * max(n_in, m_out) * r
        elif method == "flora":
            w = g = full
            o = 2 * max(n_in, m_out) * r
        elif compressible:
            w, g, o = full, r * m_out, 2 * r * m_out
        else:
            w, g, o = full, full, 2 * full
        weights += w
        grads += g
        optim += o
        if compressible:
            comp_state += g + o

    # saved linear inputs per block, in elements per token
    for group, members in (("qkv", ("q", "k", "v")), ("gate_up", ("gate", "up")), ("down", ("down",))):
        n_in = d.m if group == "down" else d.n
        if method != "compact":
            per_block_linear[f"{group}.x"] = n_in
            continue
        ranks = [resolve_rank(spec, n_in) for _ in members]
        if (share_policy == "auto" and sum(ranks) >= n_in) or spec.kind == "identity":
            per_block_linear[f"{group}.x"] = n_in
        else:
            for mem, r in zip(members, ranks):
                per_block_linear[f"{mem}.z"] = r

    weights *= d.L
    grads *= d.L
    optim *= d.L
    comp_state *= d.L

    other = d.V * d.n * (1 if d.tie_embeddings else 2) + 2 * d.n * d.L + d.n
    if d.learned_positions:
        other += d.l * d.n
    weights += other
    grads += other
    optim += 2 * other

    inventory = {}
    for i in range(d.L):
        for key, width_ in per_block_linear.items():
            inventory[f"block{i}.{key}"] = tokens * width_ * bpe
    linear_act = sum(inventory.values())

    n, m, h = d.n, d.m, d.h
    # x1, x5 (norm inputs); q, k, v; attention output; x_gate, x_up, x_act
    block_nl = 2 * n + 3 * n + n + 3 * m
    attn_extra = 2 * h if attention == "flash" else h * d.l
    block_nl_elems = tokens * (block_nl + attn_extra) + 2 * tokens  # + two inverse-rms vectors
    model_nl_elems = tokens * (2 * n + 1 + d.V)  # final norm input + inv rms, head input, probs
    index_bytes = 2 * tokens * INDEX_BYTES + (d.l * INDEX_BYTES if d.learned_positions else 0)
    nonlinear = (d.L * block_nl_elems + model_nl_elems) * bpe + index_bytes

    report = MemoryReport(
        method=method, rank_rule=_rule_label(spec),
        weights_bytes=weights * bpe, gradients_bytes=grads * bpe, optimizer_bytes=optim * bpe,
        linear_activation_bytes=linear_act, nonlinear_activation_bytes=nonlinear, total_bytes=0,
        compressible_state_bytes=comp_state * bpe, linear_inventory=inventory, dims=dims)
    report.total_bytes = (report.weights_bytes + report.gradients_bytes + report.optimizer_bytes
                          + report.linear_activation_bytes + report.nonlinear_activation_bytes)
    return report


@dataclass
class ClassShares:
    name: str
    linear_compressible: float
    nonlinear: float
    params_states: float
    total_bytes: int


def breakdown_by_class(reports):
    """Split each report into what CompAct compresses, non-linear activations, and the rest.

    The compressible class holds the linear-layer activations plus the
    gradients and optimizer states of the compressible layers.
    """
    if not reports:
        raise ConfigError("breakdown needs at least one report")
    rows = []
    for rep in reports:
        total = rep.total_bytes
        blue = rep.linear_activation_bytes + rep.compressible_state_bytes
        red = rep.nonlinear_activation_bytes
        green = total - blue - red
        name = rep.dims.name if rep.dims is not None and rep.dims.name else rep.method
        rows.append(ClassShares(name, blue / total, red / total, green / total, total))
    return rows


def total_saving(full: MemoryReport, other: MemoryReport):
    return 1.0 - other.total_bytes / full.total_bytes


def format_report(reports, unit=GIB, unit_name="GiB"):
    """Aligned text table, one column per report."""
    labels = [("weights", "weights_bytes"), ("gradients", "gradients_bytes"),
              ("optimizer states", "optimizer_bytes"), ("linear activations", "linear_activation_bytes"),
              ("non-linear activations", "nonlinear_activation_bytes"), ("total (steady state)", "total_bytes")]
    heads = [f"{r.method} {r.rank_rule}" if r.method != "full" else "full" for r in reports]
    w0 = max(len(lab) for lab, _ in labels) + 2
    cols = [max(len(hd), 12) for hd in heads]
    lines = [" " * w0 + "  ".join(hd.rjust(c) for hd, c in zip(heads, cols)) + f"   [{unit_name}]"]
    for lab, key in labels:
        vals = [f"{getattr(r, key) / unit:.3f}" for r in reports]
        lines.append(lab.ljust(w0) + "  ".join(v.rjust(c) for v, c in zip(vals, cols)))
    return "\n".join(lines)


@dataclass
class AuditResult:
    measured: dict
    predicted: dict
    discrepancies: dict
    measured_linear_bytes: int
    predicted_linear_bytes: int
    measured_total_bytes: int
    predicted_activation_bytes: int

    @property
    def ok(self):
        return not self.discrepancies


LINEAR_SUFFIXES = (".qkv.x", ".gate_up.x", ".down.x", ".q.z", ".k.z", ".v.z", ".gate.z", ".up.z", ".down.z")


def runtime_audit(store, dims: ModelDims, method="compact", rank_rule=None, share_policy="auto", strict=True):
    """Compare the live saved-buffer store after one forward pass with the estimator.

    Only linear-layer entries are compared per layer; a nonzero discrepancy
    raises CheckFailure when ``strict``.
    """
    measured = {}
    total = 0
    for entry in store.entries():
        total += entry.byte_count
        if entry.tag.endswith(LINEAR_SUFFIXES):
            measured[entry.tag] = measured.get(entry.tag, 0) + entry.byte_count
    rep = estimate(dims, method, rank_rule, attention="standard", share_policy=share_policy)
    predicted = rep.linear_inventory
    disc = {}
    for key in set(measured) | set(predicted):
        delta = measured.get(key, 0) - predicted.get(key, 0)
        if delta:
            disc[key] = delta
    result = AuditResult(measured, predicted, disc, sum(measured.values()), sum(predicted.values()),
                         total, rep.linear_activation_bytes + rep.nonlinear_activation_bytes)
    if strict and disc:
        worst = sorted(disc.items())[:5]
        raise CheckFailure(f"estimator-engine drift on {len(disc)} linear buffers, e.g. {worst}")
    return result
