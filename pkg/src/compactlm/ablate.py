"""Grid drivers for the projection, rank, period and batch-memory ablations."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .errors import ConfigError
from .memory import ModelDims, estimate, runtime_audit
from .train import TrainConfig, build, train

GRIDS = {
    "projection": ("gaussian", "gaussian_shared_seed", "sparse_jl", "identity"),
    "rank": (1.0, 0.5, 0.25, 0.125),
    "period": (1, 10, 50, 200, None),
    "batch-memory": (1, 2, 4, 8),
}


@dataclass
class AblationRow:
    label: str
    final_eval_loss: Optional[float]
    perplexity: Optional[float]
    saved_activation_bytes: int
    optimizer_bytes: int
    seconds_per_step: Optional[float]
    baseline_activation_bytes: Optional[int] = None
    predicted_activation_bytes: Optional[int] = None


def _key(cfg: TrainConfig):
    d = dataclasses.asdict(cfg)
    d.pop("metrics")
    return json.dumps(d, sort_keys=True)


def run_point(cfg: TrainConfig, cache=None, corpus=None):
    """Train one configuration, reusing a cached result for an identical config."""
    k = _key(cfg)
    if cache is not None and k in cache:
        return cache[k]
    res = train(cfg, corpus=corpus)
    row = dict(final_eval_loss=res.final.eval_loss, perplexity=res.final.perplexity,
               init_eval_loss=res.records[0].eval_loss,
               saved_activation_bytes=res.final.saved_activation_bytes,
               optimizer_bytes=res.optimizer.state_bytes(), seconds_per_step=res.seconds_per_step)
    if cache is not None:
        cache[k] = row
    return row


def _label(kind, v):
    if kind == "period":
        return "T=inf" if v is None else f"T={v}"
    if kind == "rank":
        return f"ratio={v:g}"
    if kind == "batch-memory":
        return f"b={v}"
    return str(v)


def point_config(kind, value, base: TrainConfig):
    if kind == "projection":
        kw = {"kind": value}
        if value == "identity":
            kw["alpha"] = 1.0
        return base.replace(**kw)
    if kind == "rank":
        return base.replace(ratio=float(value), rank=None)
    if kind == "period":
        return base.replace(T=value)
    raise ConfigError(f"no training config for ablation {kind!r}")


def batch_memory_point(base: TrainConfig, b, vocab=256, seed=0):
    """One forward pass each for compact and baseline at batch b; audited against the estimator."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, vocab, (b, base.seq_len))
    out = {}
    for method in ("compact", "full"):
        cfg = base.replace(method=method, batch=b)
        model, opt = build(cfg, vocab)
        store = ag.SavedBufferStore()
        with ag.use_store(store):
            model.loss(ids, ids)
            dims = ModelDims(cfg.n, cfg.m, cfg.heads, cfg.layers, vocab, cfg.seq_len, b,
                             np.dtype(cfg.dtype).itemsize, learned_positions=True)
            rule = cfg.projection() if method == "compact" else None
            audit = runtime_audit(store, dims, method, rule, share_policy=cfg.share_policy)
            pred = estimate(dims, method, rule, attention="standard", share_policy=cfg.share_policy)
        out[method] = (audit, pred, opt.state_bytes())
        store.clear()
    (ca, cp, co), (fa, fp, _) = out["compact"], out["full"]
    return AblationRow(f"b={b}", None, None, ca.measured_linear_bytes, co, None,
                       baseline_activation_bytes=fa.measured_linear_bytes,
                       predicted_activation_bytes=cp.linear_activation_bytes)


def ablate(kind, base: TrainConfig, grid=None, cache=None, corpus=None, log=None):
    if kind not in GRIDS:
        raise ConfigError(f"unknown ablation {kind!r}; expected one of {sorted(GRIDS)}")
    grid = list(GRIDS[kind] if grid is None else grid)
    if not grid:
        raise ConfigError("ablation grid is empty")
    rows = []
    for v in grid:
        if kind == "batch-memory":
            row = batch_memory_point(base, int(v), seed=base.seed)
        else:
            r = run_point(point_config(kind, v, base), cache, corpus)
            row = AblationRow(_label(kind, v), r["final_eval_loss"], r["perplexity"],
                              r["saved_activation_bytes"], r["optimizer_bytes"], r["seconds_per_step"])
        rows.append(row)
        if log:
            log(row)
    return rows


def format_rows(rows):
    head = f"{'point':<22}{'eval loss':>10}{'ppl':>9}{'saved act B':>13}{'optim B':>11}{'s/step':>8}"
    lines = [head]
    for r in rows:
        loss = "-" if r.final_eval_loss is None else f"{r.final_eval_loss:.4f}"
        ppl = "-" if r.perplexity is None else f"{r.perplexity:.2f}"
        sps = "-" if r.seconds_per_step is None else f"{r.seconds_per_step:.3f}"
        lines.append(f"{r.label:<22}{loss:>10}{ppl:>9}{r.saved_activation_bytes:>13}{r.optimizer_bytes:>11}{sps:>8}")
        if r.baseline_activation_bytes is not None:
            lines[-1] += f"   baseline {r.baseline_activation_bytes}"
    return "\n".join(lines)


# shape checks used by the CLI and the acceptance tests

def rank_monotone(rows, noise=0.02):
    """Loss nonincreasing in ratio, allowing a relative noise band."""
    pts = sorted(((float(r.label.split("=")[1]), r.final_eval_loss) for r in rows), reverse=True)
    return all(big <= small * (1 + noise) for (_, big), (_, small) in zip(pts, pts[1:]))


def period_interior_optimum(rows):
    by = {r.label: r.final_eval_loss for r in rows}
    labels = [r.label for r in rows]
    interior = min(by[k] for k in labels[1:-1])
    return interior < by[labels[0]] and interior < by[labels[-1]]


def projections_comparable(rows, tol=0.15):
    losses = [r.final_eval_loss for r in rows if r.label != "identity"]
    return (max(losses) - min(losses)) / min(losses) <= tol


def batch_linear(rows):
    """Compact bytes are c*b exactly; optimizer bytes constant; the gap to baseline grows."""
    bs = [int(r.label[2:]) for r in rows]
    per = {r.saved_activation_bytes / b for r, b in zip(rows, bs)}
    gaps = [r.baseline_activation_bytes - r.saved_activation_bytes for r in rows]
    return (len(per) == 1 and len({r.optimizer_bytes for r in rows}) == 1
            and all(a < c for a, c in zip(gaps, gaps[1:])))
