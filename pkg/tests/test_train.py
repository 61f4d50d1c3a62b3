import json
import math

import numpy as np
import pytest

from compactlm.data import ingest_text
from compactlm.errors import ConfigError, NumericalError
from compactlm.train import TrainConfig, load_config, lr_at, read_metrics, train


def tiny(small_corpus, tmp_path, **kw):
    base = dict(n=32, m=72, heads=4, layers=1, steps=30, batch=4, seq_len=16, eval_interval=10, eval_batches=2,
                T=7, data=str(small_corpus), metrics=str(tmp_path / "m.jsonl"), lr=3e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_schedule():
    cfg = TrainConfig(steps=1000, lr=0.01)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == pytest.approx(0.01)
    assert lr_at(50, cfg) == pytest.approx(0.005)
    assert lr_at(1000, cfg) == pytest.approx(0.001)
    assert lr_at(550, cfg) == pytest.approx(0.001 + 0.009 * 0.5)
    vals = [lr_at(s, cfg) for s in range(100, 1001)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        lr_at(1001, cfg)


def test_lr_warmup_rounds_up():
    cfg = TrainConfig(steps=15, lr=1.0)
    assert lr_at(2, cfg) == pytest.approx(1.0)  # ceil(1.5) = 2


@pytest.mark.parametrize("bad", [dict(steps=0), dict(warmup_fraction=0.0), dict(warmup_fraction=1.0),
                                 dict(method="sgd"), dict(ratio=2.0), dict(kind="velora"), dict(dtype="float16")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_config_file_roundtrip(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("steps: 12\nratio: 0.5\nT: inf\n")
    cfg = load_config(p, {"lr": 0.02})
    assert (cfg.steps, cfg.ratio, cfg.T, cfg.lr) == (12, 0.5, None, 0.02)
    q = tmp_path / "c.json"
    q.write_text(json.dumps({"steps": 3, "bogus": 1}))
    with pytest.raises(ConfigError):
        load_config(q)


def test_metrics_integrity_and_epochs(small_corpus, tmp_path):
    cfg = tiny(small_corpus, tmp_path)
    res = train(cfg)
    recs = read_metrics(cfg.metrics)
    assert recs == res.records
    steps = [r.step for r in recs]
    assert steps == sorted(set(steps)) and steps[0] == 0 and steps[-1] == 30
    for r in recs:
        assert abs(r.perplexity - math.exp(r.eval_loss)) <= 1e-12 * r.perplexity
        assert r.perplexity >= 1
        assert r.seed_epoch == r.step // 7
    assert all(r.saved_activation_bytes > 0 for r in recs[1:])
    vocab = json.loads(open(cfg.metrics + ".vocab.json").read())["vocab"]
    assert vocab == list(ingest_text(small_corpus).vocab)


def test_bit_identical_reruns(small_corpus, tmp_path):
    a = tiny(small_corpus, tmp_path, metrics=str(tmp_path / "a.jsonl"))
    b = tiny(small_corpus, tmp_path, metrics=str(tmp_path / "b.jsonl"))
    train(a)
    train(b)
    assert open(a.metrics).read() == open(b.metrics).read()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_valid_prefix(small_corpus, tmp_path):
    cfg = tiny(small_corpus, tmp_path, lr=1e30, method="full", steps=40, eval_interval=1)
    with pytest.raises(NumericalError, match="step"):
        train(cfg)
    lines = open(cfg.metrics).read().splitlines()
    assert lines and all(json.loads(line)["step"] >= 0 for line in lines)


def test_loss_decreases(small_corpus, tmp_path):
    res = train(tiny(small_corpus, tmp_path, steps=60))
    assert res.final.eval_loss < res.records[0].eval_loss


def test_galore_arm_runs(small_corpus, tmp_path):
    res = train(tiny(small_corpus, tmp_path, method="galore", steps=10))
    assert np.isfinite(res.final.eval_loss)
    assert res.final.seed_epoch == 1
