"""Command-line entry point: ``msadgn <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or format
error, 3 numeric error (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ABLATIONS, TrainConfig, load_config, save_config
from .data import benchmark_names, load_benchmark_dir, load_dataset, make_benchmark, save_dataset
from .errors import ConfigurationError, DataError, MsadgnError, NumericError, ParameterError
from .evaluation import BenchmarkSpec, ablation_sweep, directional_checks, dump_embeddings, evaluate
from .trainer import load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def progress(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)


def _seeds(text: str) -> list[int]:
    """'0,1,2' or '1-5'."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty seed list")
    return out


def _variants(text: str) -> list[str]:
    """'M1,M7' or 'M1..M7'."""
    text = text.upper()
    if ".." in text:
        lo, hi = (v.strip().lstrip("M") for v in text.split("..", 1))
        if not (lo.isdigit() and hi.isdigit()):
            raise argparse.ArgumentTypeError(f"bad variant range {text!r}")
        names = [f"M{i}" for i in range(int(lo), int(hi) + 1)]
    else:
        names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in ABLATIONS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown variants {bad}; choose from {', '.join(ABLATIONS)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msadgn", description="Semisupervised multisource domain generalization on clutter spectra.")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic benchmark to a directory")
    g.add_argument("--out", required=True)
    g.add_argument("--base-seed", type=int, default=0)
    g.add_argument("--K", type=int, default=3)
    g.add_argument("--target-domain", type=int, default=4)
    g.add_argument("--n-per-class", type=int, default=1000)
    g.add_argument("--length", type=int, default=512)

    def train_args(sp):
        sp.add_argument("--config", help="JSON or TOML training config")
        sp.add_argument("--data-dir", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one model on a benchmark directory")
    train_args(t)
    t.add_argument("--ablation", choices=ABLATIONS)

    b = sub.add_parser("baseline-erm", help="train the ERM baseline (M1) and score the target if present")
    train_args(b)

    e = sub.add_parser("eval", help="score a checkpoint on a labeled target dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--target", required=True, help="dataset path (without .bin/.json)")
    e.add_argument("--report", required=True, help="report JSON path")
    e.add_argument("--predictions", help="prediction JSONL path (default: next to the report)")
    e.add_argument("--embeddings", help="also dump shared-extractor features to this CSV")
    e.add_argument("--no-figures", action="store_true")

    a = sub.add_parser("ablate", help="run the M1..M7 sweep over several seeds")
    a.add_argument("--config")
    a.add_argument("--data-dir", help="benchmark directory; default builds one from --base-seed etc.")
    a.add_argument("--variants", type=_variants, default=list(ABLATIONS))
    a.add_argument("--seeds", type=_seeds, default=[0])
    a.add_argument("--epochs", type=int)
    a.add_argument("--base-seed", type=int, default=0)
    a.add_argument("--target-domain", type=int, default=4)
    a.add_argument("--n-per-class", type=int, default=1000)
    a.add_argument("--length", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--no-figures", action="store_true")

    c = sub.add_parser("grad-check", help="run the finite-difference suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default="grad_check.json")
    return p


# ---------------------------------------------------------------- commands


def _config(args, **defaults) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig(**defaults)
    over = {k: v for k, v in (("seed", getattr(args, "seed", None)), ("epochs", args.epochs)) if v is not None}
    if getattr(args, "ablation", None):
        over["ablation"] = args.ablation
    return cfg.with_(**over) if over else cfg


def cmd_gen_data(args, out: _Out) -> int:
    sources, target = make_benchmark(args.base_seed, args.K, args.target_domain, args.n_per_class, args.length)
    root = Path(args.out)
    manifest = {"base_seed": args.base_seed, "K": args.K, "target_domain": args.target_domain,
                "n_per_class": args.n_per_class, "length": args.length, "files": {}}
    for name, ds in benchmark_names(sources, target).items():
        save_dataset(ds, root / name)
        manifest["files"][name] = {"domain_id": ds.domain_id, "n": ds.n, "labeled": ds.labeled}
        out.progress(f"wrote {root / name} (domain {ds.domain_id}, {ds.n} signals)")
    (root / "benchmark.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return EXIT_OK


def _train_run(args, out: _Out, cfg_defaults: dict | None = None, force: dict | None = None) -> int:
    sources, target = load_benchmark_dir(args.data_dir)
    defaults = {"K": len(sources), "signal_len": sources[0].length, **(cfg_defaults or {})}
    cfg = _config(args, **defaults)
    if force:
        cfg = cfg.with_(**force)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    out.progress(f"training {cfg.ablation} seed={cfg.seed} K={cfg.K} len={cfg.signal_len} epochs={cfg.epochs}")
    model, tlog = train(cfg, sources, progress=lambda ep, s: out.progress(
        f"epoch {ep:3d}  L={s['L']:.4f} L_inv={s['L_inv']:.4f} L_cls={s['L_cls']:.4f} L_w={s['L_w']:.4f}"))
    save_checkpoint(model, cfg, root / "checkpoint.npz")
    save_config(cfg, root / "config.json")
    tlog.write_csv(root / "train_log.csv")
    if tlog.audit:
        tlog.write_audit_csv(root / "pseudolabel_audit.csv")
    if not getattr(args, "no_figures", False):
        from .plotting import plot_losses

        plot_losses(tlog.rows, root / "losses.png")
    if target is not None and target.labeled:
        rep = evaluate(model, cfg, target, root / "predictions.jsonl")
        rep.save(root / "report.json")
        print(f"target_accuracy={rep.overall_accuracy!r}")
    return EXIT_OK


def cmd_train(args, out: _Out) -> int:
    return _train_run(args, out)


def cmd_baseline_erm(args, out: _Out) -> int:
    return _train_run(args, out, force={"ablation": "M1"})


def cmd_eval(args, out: _Out) -> int:
    model, cfg = load_checkpoint(args.checkpoint)
    target = load_dataset(args.target)
    report_path = Path(args.report)
    pred_path = Path(args.predictions) if args.predictions else report_path.with_suffix(".predictions.jsonl")
    rep = evaluate(model, cfg, target, pred_path)
    rep.save(report_path)
    if args.embeddings:
        dump_embeddings(model, target, args.embeddings)
    if not args.no_figures:
        from .plotting import plot_confusion

        plot_confusion(rep.confusion, report_path.with_suffix(".confusion.png"),
                       title=f"accuracy {rep.overall_accuracy:.4f}")
    print(f"accuracy={rep.overall_accuracy!r}")
    print(f"n_samples={rep.n_samples}")
    return EXIT_OK


def cmd_ablate(args, out: _Out) -> int:
    root = Path(args.out)
    if args.data_dir:
        man_path = Path(args.data_dir) / "benchmark.json"
        if not man_path.exists():
            raise DataError(f"no benchmark.json in {args.data_dir}; write one with gen-data")
        man = json.loads(man_path.read_text())
        bench = BenchmarkSpec(man["base_seed"], man["K"], man["target_domain"], man["n_per_class"], man["length"])
    else:
        length = args.length or (load_config(args.config).signal_len if args.config else 512)
        bench = BenchmarkSpec(args.base_seed, 3, args.target_domain, args.n_per_class, length)
    cfg = _config(args, K=bench.K, signal_len=bench.length)
    matrix = ablation_sweep(cfg, bench, args.variants, args.seeds, root / "runs",
                            progress=lambda v, s, r: out.progress(f"{v} seed {s}: {r.overall_accuracy:.4f}"))
    matrix.write_csv(root / "run_matrix.csv")
    summary = matrix.to_dict()
    if "M7" in args.variants and "M1" in args.variants:
        summary["checks"] = [{"name": c.name, "passed": c.passed, "detail": c.detail}
                             for c in directional_checks(matrix)]
    (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if not args.no_figures:
        from .plotting import plot_ablation

        plot_ablation(matrix.summary(), root / "ablation.png")
    for row in matrix.summary():
        print(f"{row['scenario']}\tmean={row['mean']:.4f}\tstd={row['std']:.4f}\tn={row['n']}")
    return EXIT_OK


def cmd_grad_check(args, out: _Out) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    worst = max(r.max_rel_err for r in results)
    report = {"tolerance": TOLERANCE, "max_rel_err": worst, "passed": worst < TOLERANCE,
              "checks": [{"name": r.name, "max_rel_err": r.max_rel_err, "n_params": r.n_params,
                          "passed": r.passed} for r in results]}
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n")
    for r in results:
        out.progress(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<22s} {r.max_rel_err:.3e}")
    print(f"max_rel_err={worst!r}")
    return EXIT_OK if worst < TOLERANCE else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "baseline-erm": cmd_baseline_erm,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    out = _Out(args.quiet)
    try:
        return COMMANDS[args.command](args, out)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MsadgnError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    _entry()

