"""Command line: ``run``, ``privacy`` and ``sweep``.

Exit status is 0 on success, 1 when a config or privacy certificate is
refused, and 2 when a run fails at runtime (divergence, I/O).
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from pathlib import Path

from .config import ConfigError, help_text, parse_config, parse_value
from .engine import CertificateRefused, run_experiment
from .metrics import emit_csv, summarize
from .models import DivergenceError
from .privacy import (
    PrivacyError, issue_certificate, log_delta_bound, max_sampling_probability, max_sampling_size,
)

EXIT_OK = 0
EXIT_REFUSED = 1
EXIT_FAILED = 2

SWEEP_KEYS = ("K", "epsilon", "clients")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_REFUSED, f"{self.prog}: error: {message}\n")


def _write_atomically(history, out: Path):
    """The CSV appears under its final name only once fully written."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".part")
    try:
        emit_csv(history, tmp)
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            tmp.unlink()


def _execute(cfg, out: Path):
    """Run one config; returns (exit code, message, summary or None)."""
    try:
        history = run_experiment(cfg)
    except CertificateRefused as exc:
        return EXIT_REFUSED, f"privacy certificate refused: {exc}", None
    except (ConfigError, PrivacyError, ValueError) as exc:
        return EXIT_REFUSED, f"invalid configuration: {exc}", None
    except DivergenceError as exc:
        return EXIT_FAILED, f"diverged: {exc}", None
    try:
        _write_atomically(history, out)
    except OSError as exc:
        return EXIT_FAILED, str(exc), None
    return EXIT_OK, "", summarize(history)


def _fmt_summary(acc, ot, acc_ot):
    acc_s = "n/a" if acc is None else f"{acc:.4f}"
    return f"final_accuracy={acc_s} OT={ot:.6g}B acc_per_ot={acc_ot:.6g}/MiB"


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    out = args.out or cfg.output
    if out is None:
        print("error: no output path (pass --out or set 'output' in the config)", file=sys.stderr)
        return EXIT_REFUSED
    code, msg, summary = _execute(cfg, Path(out))
    if code != EXIT_OK:
        print(f"error: {msg}", file=sys.stderr)
        return code
    print(f"{out}: {_fmt_summary(*summary)}")
    return EXIT_OK


def cmd_privacy(args) -> int:
    eps, d = args.epsilon, args.d
    if not eps > 0 or not math.isfinite(eps):
        print(f"error: --epsilon must be a positive number, got {eps}", file=sys.stderr)
        return EXIT_REFUSED
    if d < 1:
        print(f"error: --d must be at least 1, got {d}", file=sys.stderr)
        return EXIT_REFUSED
    p_max = max_sampling_probability(eps)
    print(f"epsilon   = {eps:.10g}")
    print(f"d         = {d}")
    print(f"p_max     = {p_max:.10g}")
    if args.p is None:
        if args.K is not None:
            print("error: --K needs --p", file=sys.stderr)
            return EXIT_REFUSED
        return EXIT_OK
    print(f"p         = {args.p:.10g}")
    try:
        k_max = max_sampling_size(eps, args.p, d)
    except PrivacyError as exc:
        print(f"refused: {exc}")
        return EXIT_REFUSED
    print(f"K_max     = {k_max}")
    if args.K is None:
        return EXIT_OK
    K = args.K
    print(f"K         = {K}")
    if 0 <= K <= d and K != args.p * d:
        log_delta = log_delta_bound(d, K, args.p)
        print(f"log_delta = {log_delta:.10g}")
        print(f"delta     = {math.exp(log_delta):.10g}")
        print(f"1/d       = {1.0 / d:.10g}")
        print(f"delta < 1/d: {'yes' if log_delta < -math.log(d) else 'no'}")
    cert = issue_certificate(eps, args.p, K, d)
    print(f"certificate: {cert.report()}")
    return EXIT_OK if cert.issued else EXIT_REFUSED


def _sweep_value(key, text):
    """K accepts a trailing % meaning a ratio of the model size."""
    if key == "K" and text.endswith("%"):
        return {"K": None, "sampling_ratio": float(text[:-1]) / 100.0}
    return {key: parse_value(key, text)}


def cmd_sweep(args) -> int:
    try:
        base = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    texts = [v.strip() for v in args.values.split(",") if v.strip()]
    if not texts:
        print("error: empty value list", file=sys.stderr)
        return EXIT_REFUSED
    try:
        changes = [_sweep_value(args.key, t) for t in texts]
    except ValueError as exc:
        print(f"error: bad value for {args.key}: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, worst = [], EXIT_OK
    for text, change in zip(texts, changes):
        out = out_dir / f"run_{args.key}={text}.csv"
        try:
            cfg = base.replace(**change)
        except ConfigError as exc:
            code, msg, summary = EXIT_REFUSED, f"invalid configuration: {exc}", None
        else:
            code, msg, summary = _execute(cfg, out)
        if summary is None:
            print(f"{args.key}={text}: error: {msg}", file=sys.stderr)
            rows.append([text, "failed", "", "", "", msg])
        else:
            print(f"{args.key}={text}: {_fmt_summary(*summary)}")
            acc, ot, acc_ot = summary
            rows.append([text, "ok", "" if acc is None else format(acc, ".17g"),
                         format(ot, ".17g"), format(acc_ot, ".17g"), ""])
        worst = max(worst, code)
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.key, "status", "final_accuracy", "ot", "acc_per_ot", "error"])
        w.writerows(rows)
    return worst


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crsfl", description="CRS federated-learning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fmt = argparse.RawDescriptionHelpFormatter
    keys = "config keys:\n" + help_text()
    run = sub.add_parser("run", help="run one experiment", epilog=keys, formatter_class=fmt)
    run.add_argument("config")
    run.add_argument("--out", help="CSV path (default: the config's 'output')")
    run.set_defaults(func=cmd_run)

    priv = sub.add_parser("privacy", help="print the admissible p, K and delta bound")
    priv.add_argument("--epsilon", type=float, required=True)
    priv.add_argument("--d", type=int, required=True)
    priv.add_argument("--p", type=float)
    priv.add_argument("--K", type=int)
    priv.set_defaults(func=cmd_privacy)

    sweep = sub.add_parser("sweep", help="one run per value of a key", epilog=keys, formatter_class=fmt)
    sweep.add_argument("config")
    sweep.add_argument("--key", required=True, choices=SWEEP_KEYS)
    sweep.add_argument("--values", required=True, help="comma separated; K also takes 0.7%% style ratios")
    sweep.add_argument("--out-dir", required=True)
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
