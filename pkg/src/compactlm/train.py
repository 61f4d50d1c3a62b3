"""Training loop, learning-rate schedule and metrics persistence."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .data import BatchStream, chunk, ingest_text, split_holdout
from .errors import CheckFailure, ConfigError, NumericalError
from .layers import ModelConfig, TransformerLM
from .optim import AdamHyper, ModelOptimizer
from .projections import ProjectionSpec, advance_epoch, epoch_at


@dataclass
class TrainConfig:
    # model
    n: int = 128
    m: int = 344
    heads: int = 4
    layers: int = 2
    # schedule
    steps: int = 2000
    lr: float = 3e-3
    warmup_fraction: float = 0.10
    min_lr_fraction: float = 0.10
    alpha: float = 0.25
    alpha_out: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    # projection
    method: str = "compact"  # compact | full | galore
    kind: str = "gaussian"
    ratio: Optional[float] = 0.25
    rank: Optional[int] = None
    base_seed: int = 0
    T: Optional[int] = 50
    reset_on_update: bool = False
    share_policy: str = "auto"
    # data / io
    batch: int = 16
    seq_len: int = 64
    data: str = "corpus.txt"
    metrics: Optional[str] = "metrics.jsonl"
    eval_interval: int = 100
    eval_batches: int = 16
    holdout_fraction: float = 0.05
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in (0, 1)")
        if not 0 <= self.min_lr_fraction <= 1:
            raise ConfigError("min_lr_fraction must be in [0, 1]")
        if self.method not in ("compact", "full", "galore"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.share_policy not in ("auto", "sketch"):
            raise ConfigError("share_policy must be auto or sketch")
        if self.T in ("inf", "infinity", "∞") or (isinstance(self.T, float) and math.isinf(self.T)):
            self.T = None
        if self.eval_interval < 1 or self.batch < 1 or self.seq_len < 1:
            raise ConfigError("eval_interval, batch and seq_len must be positive")
        if self.rank is not None:
            self.ratio = None
        try:
            self.projection()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def projection(self):
        return ProjectionSpec(kind=self.kind, ratio=self.ratio, rank=self.rank, base_seed=self.base_seed,
                              update_period=None if self.T is None else int(self.T))

    def model_config(self, vocab):
        return ModelConfig(n=self.n, m=self.m, h=self.heads, layers=self.layers, vocab=vocab,
                           max_seq_len=self.seq_len)

    def hyper(self):
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps, self.alpha, self.weight_decay)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def load_config(path, overrides=None):
    text = Path(path).read_text()
    try:
        if str(path).endswith(".json"):
            d = json.loads(text)
        else:
            import yaml
            d = yaml.safe_load(text)
    except Exception as e:  # malformed file of either flavour
        raise ConfigError(f"cannot parse {path}: {e}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path} must hold a mapping")
    d.update(overrides or {})
    return TrainConfig.from_dict(d)


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    eval_loss: float
    perplexity: float
    lr: float
    saved_activation_bytes: int
    seed_epoch: int


def lr_at(step, config: TrainConfig):
    """Linear warmup over ceil(warmup_fraction * steps), then cosine down to min_lr_fraction * lr."""
    if not 0 <= step <= config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    eta = config.lr
    warm = math.ceil(config.warmup_fraction * config.steps)
    if step < warm:
        return eta * step / warm
    floor = config.min_lr_fraction * eta
    if config.steps == warm:
        return floor if step == config.steps else eta
    p = (step - warm) / (config.steps - warm)
    return floor + (eta - floor) * 0.5 * (1.0 + math.cos(math.pi * p))


@dataclass
class TrainResult:
    final: MetricsRecord
    records: list
    model: TransformerLM
    optimizer: ModelOptimizer
    seconds_per_step: float
    vocab_path: Optional[str] = None
    extra: dict = field(default_factory=dict)


def evaluate(model, x, y, b):
    losses = []
    with ag.no_grad():
        for i in range(0, len(x) - b + 1, b):
            losses.append(model.loss(x[i:i + b], y[i:i + b]).item())
    return float(np.mean(losses))


def _clip(model, max_norm):
    grads = [p.grad for _, p in model.parameters() if p.grad is not None]
    grads += [lay.grad_hat for lay in model.linear_layers() if lay.grad_hat is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads:
            g *= s
    return total


def _diagnostics(model):
    return ", ".join(f"{name}={float(np.linalg.norm(p.data)):.3g}" for name, p in model.parameters())


def build(config: TrainConfig, vocab):
    spec = config.projection()
    dtype = np.dtype(config.dtype)
    model = TransformerLM(config.model_config(vocab), spec, dtype, seed=config.seed,
                          compress=config.method == "compact", share_policy=config.share_policy)
    opt = ModelOptimizer(model, config.hyper(), config.method, config.alpha_out, config.reset_on_update)
    return model, opt


def train(config: TrainConfig, corpus=None, log=None) -> TrainResult:
    corpus = corpus or ingest_text(config.data)
    x, y = chunk(corpus.ids, config.seq_len)
    tr, ev = split_holdout(len(x), config.holdout_fraction, config.seed)
    if len(ev) == 0:
        raise ConfigError("held-out split is empty; corpus too small")
    eval_idx = ev[: config.eval_batches * config.batch]
    ex, ey = x[eval_idx], y[eval_idx]
    eb = min(config.batch, len(ex))
    stream = BatchStream(x, y, config.batch, seed=config.seed, indices=tr)
    model, opt = build(config, corpus.vocab_size)
    spec = model.spec

    out = None
    vocab_path = None
    if config.metrics:
        mpath = Path(config.metrics)
        mpath.parent.mkdir(parents=True, exist_ok=True)
        out = mpath.open("w")
        vocab_path = str(mpath) + ".vocab.json"
        corpus.save_vocab(vocab_path)

    records = []

    def emit(rec):
        records.append(rec)
        if out is not None:
            out.write(json.dumps(dataclasses.asdict(rec)) + "\n")
            out.flush()
        if log:
            log(rec)

    store = ag.SavedBufferStore()
    t0 = time.perf_counter()
    try:
        with ag.use_store(store):
            bx, by = stream.x[stream._order[:config.batch]], stream.y[stream._order[:config.batch]]
            init_eval = evaluate(model, ex, ey, eb)
            with ag.no_grad():
                init_train = model.loss(bx, by).item()
            emit(MetricsRecord(0, init_train, init_eval, math.exp(init_eval), 0.0, 0, spec.seed_epoch))
            for step in range(1, config.steps + 1):
                bx, by = next(stream)
                model.zero_grad()
                loss = model.loss(bx, by)
                saved = store.current_bytes
                lval = loss.item()
                if not math.isfinite(lval):
                    raise NumericalError(f"non-finite loss {lval} at step {step}; weight norms: "
                                         f"{_diagnostics(model)}")
                ag.backward(loss)
                if config.grad_clip:
                    _clip(model, config.grad_clip)
                lr = lr_at(step, config)
                opt.step(lr)
                spec = advance_epoch(spec, step)
                if config.method != "full" and not (
                        opt.seed_epoch() == model.spec.seed_epoch == spec.seed_epoch == epoch_at(spec, step)):
                    raise CheckFailure(f"seed epoch drift at step {step}: optimizer {opt.seed_epoch()}, "
                                       f"layers {model.spec.seed_epoch}, schedule {spec.seed_epoch}")
                if step % config.eval_interval == 0 or step == config.steps:
                    el = evaluate(model, ex, ey, eb)
                    if not math.isfinite(el):
                        raise NumericalError(f"non-finite eval loss at step {step}; weight norms: "
                                             f"{_diagnostics(model)}")
                    emit(MetricsRecord(step, lval, el, math.exp(el), lr, saved, spec.seed_epoch))
    finally:
        if out is not None:
            out.close()
    dt = (time.perf_counter() - t0) / config.steps
    return TrainResult(records[-1], records, model, opt, dt, vocab_path)


def read_metrics(path):
    return [MetricsRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
