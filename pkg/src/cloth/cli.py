"""Command-line entry point: ``cloth <verb> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
during training, 4 failed verification.
"""
import argparse
import dataclasses
import json
import os
import sys
import time

from . import bench, engine, plot, runconfig, verify
from .errors import ClothError, ConfigError, NumericError, TrainingError
from .hmm import check_order

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
COMPARE_TOL = 1e-6


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _resolve(args):
    overrides = {"seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}
    if getattr(args, "row", None) is not None:
        overrides["ablation_row"] = args.row
    if args.config is None and not getattr(args, "print_config", False):
        raise ConfigError("--config", "required")
    if args.config is None:
        doc = runconfig.apply_env(runconfig.default_document(args.seed or 0))
        for k, v in overrides.items():
            if v is not None:
                doc[k] = v
        return runconfig.validate_document(doc)
    return runconfig.resolve(args.config, overrides=overrides)


def _print_config(rc):
    print(json.dumps(rc.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def train_bundle(rc, out_dir, compare_epsilon=0.1):
    """Train one run and write metrics.csv, model.json and summary.json into ``out_dir``."""
    cfg = rc.effective_train()
    source, target = runconfig.build_datasets(rc.dataset, cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f) for k, f in
             (("metrics", "metrics.csv"), ("model", "model.json"), ("summary", "summary.json"),
              ("config", "config.json"))}
    _dump_json(paths["config"], rc.to_dict())
    log = engine.MetricsLog(paths["metrics"])
    start = time.perf_counter()
    try:
        model = engine.train(cfg, source, target, log)
    except TrainingError as e:
        log.close()
        if e.checkpoint is not None:
            paths["checkpoint"] = os.path.join(out_dir, "checkpoint_last_good.json")
            engine.save_model(paths["checkpoint"], e.checkpoint, cfg)
        _dump_json(paths["summary"], {"status": "numeric_failure", "error": str(e), "iteration": e.iteration,
                                      "files": paths})
        raise
    log.close()
    elapsed = time.perf_counter() - start
    engine.save_model(paths["model"], model, cfg)
    tgt = engine.evaluate(model, target)
    src = engine.evaluate(model, source)
    last = log.rows[-1] if log.rows else {}
    summary = {
        "status": "ok",
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "ablation_row": rc.ablation_row,
        "final": {"source_accuracy": src.accuracy, "target_accuracy": tgt.accuracy,
                  "target_per_class": tgt.per_class.tolist(), "target_confusion": tgt.confusion.tolist()},
        "losses": {k: last.get(k) for k in engine.METRIC_COLUMNS[1:7]},
        "W_est_first": log.rows[0]["W_est"] if log.rows else None,
        "W_est_last": last.get("W_est"),
        "timing": {"train_s": elapsed, "ms_per_iter": 1000.0 * elapsed / max(cfg.iters, 1)},
        "files": paths,
    }
    if model.nets["D"].spec.n_out == model.num_classes + 1:
        summary["oracle"] = engine.compare_amortized_vs_exact(model, target.features, epsilon=compare_epsilon)
    _dump_json(paths["summary"], summary)
    return model, summary, log


# ------------------------------------------------------------------ verbs

def cmd_train(args):
    rc = _resolve(args)
    if args.print_config:
        return _print_config(rc)
    _, summary, _ = train_bundle(rc, rc.out)
    f = summary["final"]
    print(f"target accuracy {f['target_accuracy']:.4f}  source accuracy {f['source_accuracy']:.4f}  "
          f"({summary['timing']['train_s']:.1f} s)")
    print(f"wrote {', '.join(summary['files'].values())}")
    return EXIT_OK


def cmd_verify(args):
    checks = verify.run(args.suite, args.seed)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_bench(args):
    batch, seed = args.batch, args.seed
    if args.config is not None:
        rc = runconfig.resolve(args.config)
        batch = batch or rc.train.batch_size
        seed = rc.train.seed if seed is None else seed
    batch = batch or 128
    for q in args.q:
        try:
            check_order(q)
        except ValueError as e:
            raise ConfigError("--q", str(e)) from None
    rows = bench.run_bench(args.p, args.q, batch, args.repeats, seed=seed or 0)
    text = bench.format_csv(rows)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    faster = bench.kernel_faster(rows)
    if faster is False:
        print("kernel form is not faster than flattening at p=16, q=3", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _csv_write(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(r[h]) for h in header) + "\n")


def cmd_sweep_q(args):
    rc = _resolve(args)
    if len(set(args.q)) != len(args.q):
        raise ConfigError("--q", f"duplicate moment orders in {args.q}")
    for q in args.q:
        if q < 1:
            raise ConfigError("--q", f"moment orders must be >= 1, got {q}")
    if args.print_config:
        return _print_config(rc)
    rows = []
    for q in args.q:
        cfg = dataclasses.replace(rc.effective_train(), q=q)
        cfg.validate()
        src, tgt = runconfig.build_datasets(rc.dataset, cfg.seed)
        log = engine.MetricsLog()
        start = time.perf_counter()
        model = engine.train(cfg, src, tgt, log)
        wall = (time.perf_counter() - start) * 1000.0
        rows.append({"q": q, "src_acc": engine.evaluate(model, src).accuracy,
                     "tgt_acc": engine.evaluate(model, tgt).accuracy, "wall_ms": f"{wall:.3f}"})
        print(f"q={q} target accuracy {rows[-1]['tgt_acc']:.4f}", flush=True)
    path = os.path.join(rc.out, "sweep_q.csv")
    _csv_write(path, ("q", "src_acc", "tgt_acc", "wall_ms"), rows)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args):
    rc = _resolve(args)
    if args.print_config:
        return _print_config(rc)
    seeds = args.seeds if args.seeds else [rc.train.seed]
    rows = []
    for seed in seeds:
        base = dataclasses.replace(rc.train, seed=seed)
        src, tgt = runconfig.build_datasets(rc.dataset, seed)
        for row in args.rows:
            cfg = engine.apply_ablation(base, row)
            log = engine.MetricsLog()
            model = engine.train(cfg, src, tgt, log)
            w = log.column("W_est")
            rows.append({"row": row, "seed": seed, "src_acc": engine.evaluate(model, src).accuracy,
                         "tgt_acc": engine.evaluate(model, tgt).accuracy,
                         "W_first": w[0] if len(w) else float("nan"), "W_last": w[-1] if len(w) else float("nan")})
            print(f"row {row} seed {seed} target accuracy {rows[-1]['tgt_acc']:.4f}", flush=True)
    path = os.path.join(rc.out, "ablation.csv")
    _csv_write(path, ("row", "seed", "src_acc", "tgt_acc", "W_first", "W_last"), rows)
    for row in args.rows:
        accs = [r["tgt_acc"] for r in rows if r["row"] == row]
        print(f"row {row}: mean target accuracy {sum(accs) / len(accs):.4f} over {len(accs)} seed(s)")
    print(f"wrote {path}")
    return EXIT_OK


def _compare_flags(report):
    report["amortized_le_sinkhorn"] = bool(report["amortized"] <= report["sinkhorn"] + COMPARE_TOL)
    report["amortized_ge_exact"] = bool(report["amortized"] >= report["exact_free_pi"] - COMPARE_TOL)
    return report


def compare_fixed_cost(seeds, n=64, num_classes=4, dim=8, epsilon=0.1, small_epsilon=1e-3):
    """Fit transport networks to convergence on fixed random costs and compare each with exact and entropic OT."""
    reports = []
    for seed in seeds:
        x, cost = engine.fixed_cost_instance(n, num_classes, dim, seed)
        net, _ = engine.amortize_fixed_cost(x, cost, seed=seed)
        rep = engine.compare_plans(net.run(x, shadow=True)[0], cost, epsilon, small_epsilon)
        rep["seed"] = seed
        reports.append(_compare_flags(rep))
    return reports


COMPARE_KEYS = ("amortized", "exact_free_pi", "sinkhorn", "sinkhorn_small", "ratio_amortized_exact",
                "ratio_amortized_sinkhorn", "argmax_agreement", "argmax_agreement_clear",
                "amortized_le_sinkhorn", "amortized_ge_exact")


def cmd_compare_ot(args):
    if args.fixed_cost:
        seeds = args.seeds or [0]
        reports = compare_fixed_cost(seeds, args.n, args.classes, args.dim, args.epsilon, args.small_epsilon)
        out = args.out or "runs/compare_ot"
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, "compare_ot_fixed_cost.json")
        _dump_json(path, reports)
        for rep in reports:
            print(f"seed {rep['seed']}: " + "  ".join(f"{k}={rep[k]}" for k in COMPARE_KEYS))
        print(f"wrote {path}")
        return EXIT_OK
    rc = _resolve(args)
    if args.print_config:
        return _print_config(rc)
    cfg = rc.effective_train()
    _, target = runconfig.build_datasets(rc.dataset, cfg.seed)
    if args.model:
        try:
            model = engine.load_model(args.model)
        except FileNotFoundError:
            raise ConfigError("--model", f"no such file: {args.model}") from None
    else:
        model, _, _ = train_bundle(rc, rc.out, args.epsilon)
    report = _compare_flags(engine.compare_amortized_vs_exact(model, target.features, epsilon=args.epsilon,
                                                              small_epsilon=args.small_epsilon))
    os.makedirs(rc.out, exist_ok=True)
    path = os.path.join(rc.out, "compare_ot.json")
    _dump_json(path, report)
    for key in COMPARE_KEYS:
        print(f"{key}: {report[key]}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export_plot(args):
    plot.export_plot(args.csv, args.columns, args.out, args.x)
    print(f"wrote {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _config_args(p, out=True):
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="override the configured seed")
    if out:
        p.add_argument("--out", help="output directory (overrides the configured 'out')")
    p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")


def build_parser():
    parser = argparse.ArgumentParser(prog="cloth", description="Class-aware transport with moment matching.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one run and write a report bundle")
    _config_args(p)
    p.add_argument("--row", type=int, choices=range(1, 8), help="ablation row to apply")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("verify", help="run oracle and property suites")
    p.add_argument("--suite", choices=(*verify.SUITES, "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="time the moment loss in kernel and flattened form")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--p", type=_int_list, default=[8, 16], help="latent widths, e.g. 8,16")
    p.add_argument("--q", type=_int_list, default=[2, 3], help="moment orders, e.g. 2,3")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep-q", help="train once per moment order")
    _config_args(p)
    p.add_argument("--q", type=_int_list, default=[1, 2, 3, 4, 5])
    p.set_defaults(fn=cmd_sweep_q)

    p = sub.add_parser("ablate", help="train the loss-group ablation rows")
    _config_args(p)
    p.add_argument("--rows", type=_int_list, default=list(range(1, 8)))
    p.add_argument("--seeds", type=_int_list)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("compare-ot", help="amortised transport against exact and entropic OT")
    _config_args(p)
    p.add_argument("--model", help="saved model; trains from the config when omitted")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--small-epsilon", type=float, default=1e-3)
    p.add_argument("--fixed-cost", action="store_true",
                   help="fit transport networks on fixed random costs instead of loading a trained model")
    p.add_argument("--seeds", type=_int_list, help="instance seeds for --fixed-cost")
    p.add_argument("--n", type=int, default=64, help="rows for --fixed-cost")
    p.add_argument("--classes", type=int, default=4, help="columns for --fixed-cost")
    p.add_argument("--dim", type=int, default=8, help="feature width for --fixed-cost")
    p.set_defaults(fn=cmd_compare_ot)

    p = sub.add_parser("export-plot", help="SVG line chart of metrics CSV columns")
    p.add_argument("--csv", required=True)
    p.add_argument("--columns", type=_str_list, required=True, help="comma-separated column names")
    p.add_argument("--x", default="iter")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "rows", None) is not None:
        bad = [r for r in args.rows if r not in engine.ABLATION_ROWS]
        if bad:
            parser.error(f"unknown ablation rows {bad}")
    try:
        return args.fn(args)
    except (TrainingError, NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ClothError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
