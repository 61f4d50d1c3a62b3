"""compactlm command line."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import backend
from .errors import CheckFailure, ConfigError, NumericalError
from .projections import ProjectionSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


def _period(s):
    # kept as the string "inf" so it can override a finite T from a config file
    return "inf" if s.lower() in ("none", "inf", "infinity") else int(s)


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s}")


def _add_train_flags(p):
    from .train import TrainConfig

    p.add_argument("--config", help="YAML or JSON file with TrainConfig fields")
    for f in dataclasses.fields(TrainConfig):
        kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
        if f.name == "T":
            conv = _period
        elif "bool" in kind:
            conv = _bool
        elif "int" in kind:
            conv = int
        elif "float" in kind:
            conv = float
        else:
            conv = str
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=conv, default=None)


def _train_config(args):
    from .train import TrainConfig, load_config

    names = [f.name for f in dataclasses.fields(TrainConfig)]
    overrides = {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}
    if args.config:
        return load_config(args.config, overrides)
    return TrainConfig.from_dict(overrides)


def cmd_train(args):
    from .train import train

    cfg = _train_config(args)

    def log(rec):
        print(f"step {rec.step:6d}  train {rec.train_loss:.4f}  eval {rec.eval_loss:.4f}  "
              f"ppl {rec.perplexity:8.2f}  lr {rec.lr:.2e}  saved {rec.saved_activation_bytes}", flush=True)

    res = train(cfg, log=log)
    print(json.dumps(dataclasses.asdict(res.final)))
    return EXIT_OK


def cmd_estimate(args):
    from .memory import ModelDims, estimate, format_report, llama_dims

    if args.dims:
        try:
            dims = ModelDims.from_dict(json.loads(Path(args.dims).read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise ConfigError(f"cannot load dims from {args.dims}: {e}") from None
        if args.batch is not None:
            dims = dims.with_(b=args.batch)
        if args.seq_len is not None:
            dims = dims.with_(l=args.seq_len)
    else:
        dims = llama_dims(args.size, b=args.batch or 128, l=args.seq_len or 256,
                          bytes_per_element=args.bytes_per_element)
    try:
        rule = ProjectionSpec(ratio=args.ratio) if args.rank is None else ProjectionSpec(ratio=None, rank=args.rank)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    methods = args.method or ["full", "compact"]
    reports = [estimate(dims, m, None if m == "full" else rule, attention=args.attention) for m in methods]
    print(format_report(reports))
    doc = {"dims": dataclasses.asdict(dims), "reports": [r.to_dict() for r in reports]}
    text = json.dumps(doc, indent=2)
    if args.json:
        Path(args.json).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def _ablate(kind, check):
    def run(args):
        from . import ablate as ab

        cfg = _train_config(args)
        grid = None
        if args.grid:
            conv = {"projection": str, "rank": float, "period": _period, "batch-memory": int}[kind]
            grid = [conv(s) for s in args.grid.split(",")]
            grid = [None if v == "inf" else v for v in grid]
        rows = ab.ablate(kind, cfg, grid, log=lambda r: print(f"  done {r.label}", flush=True))
        print(ab.format_rows(rows))
        if args.json:
            Path(args.json).write_text(json.dumps([dataclasses.asdict(r) for r in rows], indent=2) + "\n")
        ok = check(ab, rows)
        print(f"shape check: {'PASS' if ok else 'FAIL'}")
        return EXIT_OK if ok else EXIT_CHECK
    return run


def cmd_gradcheck(args):
    from .gradcheck import run_all

    results = run_all(corrupt_seed=args.corrupt_seed, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (backend: {backend.NAME})")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_make_corpus(args):
    from .data import make_corpus

    n = make_corpus(args.out, args.bytes)
    print(f"wrote {n} bytes to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="compactlm", description="Compressed-activation training toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy language model")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate-mem", help="analytic memory report")
    e.add_argument("--size", default="350m", help="LLaMA preset (60m ... 65b)")
    e.add_argument("--dims", help="JSON file with ModelDims fields instead of a preset")
    e.add_argument("--batch", type=int, default=None)
    e.add_argument("--seq-len", type=int, default=None)
    e.add_argument("--bytes-per-element", type=int, default=2, choices=(2, 4, 8))
    e.add_argument("--ratio", type=float, default=0.25)
    e.add_argument("--rank", type=int, default=None)
    e.add_argument("--method", action="append", choices=("full", "lora", "galore", "flora", "compact"))
    e.add_argument("--attention", default="flash", choices=("flash", "standard"))
    e.add_argument("--json", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_estimate)

    checks = {
        "projection": lambda ab, rows: ab.projections_comparable(rows),
        "rank": lambda ab, rows: ab.rank_monotone(rows),
        "period": lambda ab, rows: ab.period_interior_optimum(rows),
        "batch-memory": lambda ab, rows: ab.batch_linear(rows),
    }
    for kind, name in (("projection", "ablate-projection"), ("rank", "ablate-rank"),
                       ("period", "ablate-period"), ("batch-memory", "ablate-batch-mem")):
        a = sub.add_parser(name, help=f"{kind} ablation")
        _add_train_flags(a)
        a.add_argument("--grid", help="comma-separated grid values")
        a.add_argument("--json", help="write rows as JSON")
        a.set_defaults(func=_ablate(kind, checks[kind]))

    g = sub.add_parser("gradcheck", help="run the invariant suite")
    g.add_argument("--corrupt-seed", action="store_true", help="negative control: replay the wrong projection")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("make-corpus", help="build a text corpus from standard-library docstrings")
    c.add_argument("out")
    c.add_argument("--bytes", type=int, default=1 << 20)
    c.set_defaults(func=cmd_make_corpus)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
