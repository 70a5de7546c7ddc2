"""Command-line entry point: ``failpred {train,confidnet,eval,ablate,plot,metrics}``.

Failures print exactly one line, ``error: <CODE>: <message>``, to stderr and
exit non-zero (2 for usage/config/data problems, 1 for internal errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics
from .errors import ConfigError, FailpredError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="failpred", description="Learn and evaluate failure-prediction confidence.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")
        return p

    experiment_cmd("train", "train the classifier and write its checkpoint")
    experiment_cmd("confidnet", "train the confidence head (phase 1 and optional phase 2)")
    experiment_cmd("eval", "compare MCP, MCDropout, TrustScore and ConfidNet on the test fold")
    experiment_cmd("ablate", "learning-scheme, fold, loss and criterion ablations")
    run = experiment_cmd("run", "train, confidnet and eval in one go")
    run.add_argument("--plot", action="store_true", help="also emit plots")

    p = sub.add_parser("plot", help="histogram and risk-coverage artifacts from a report")
    p.add_argument("--report", help="path to report.json (default: <out>/report.json)")
    p.add_argument("--config", help="experiment config JSON (locates the report and bin count)")
    p.add_argument("--seed", type=int, help="accepted for symmetry; unused")
    p.add_argument("--out", help="output directory")
    p.add_argument("--bins", type=int, help="histogram bins")

    p = sub.add_parser("metrics", help="evaluate a confidence,is_error CSV")
    p.add_argument("--csv", required=True, dest="csv_path", help="CSV with header confidence,is_error")
    p.add_argument("--out", help="write metrics JSON (and risk_coverage.csv) into this directory")
    return parser


def _run(args) -> int:
    if args.command == "metrics":
        conf, err = metrics.load_outcomes_csv(args.csv_path)
        result = metrics.evaluate(conf, err)
        text = json.dumps(result, indent=2, sort_keys=True)
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "metrics.json").write_text(text + "\n")
            with open(out / "risk_coverage.csv", "w") as f:
                f.write("threshold,coverage,selective_risk\n")
                for pt in metrics.risk_coverage(conf, err):
                    f.write(f"{pt.threshold!r},{pt.coverage!r},{pt.selective_risk!r}\n")
        print(text)
        return 0

    # heavy imports only for experiment verbs
    from . import experiment as exp
    from .plots import run_plot

    if args.command == "plot":
        bins = args.bins
        if args.report:
            report = Path(args.report)
        elif args.config:
            cfg = exp.ExperimentConfig.load(args.config, args.seed, args.out)
            report = cfg.output_dir / "report.json"
            bins = bins or cfg.raw["plot"]["bins"]
        elif args.out:
            report = Path(args.out) / "report.json"
        else:
            raise ConfigError("usage: plot needs --report, --config or --out")
        for path in run_plot(report, args.out, bins or 20):
            print(path)
        return 0

    cfg = exp.ExperimentConfig.load(args.config, args.seed, args.out)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "train":
        model = exp.run_train(cfg)
        print(json.dumps({"checkpoint": str(cfg.output_dir / "classifier.json"),
                          "params_sha256": model.params_hash()}))
    elif args.command == "confidnet":
        predictor = exp.run_confidnet(cfg)
        print(json.dumps({"checkpoint": str(cfg.output_dir / f"confidnet_phase{predictor.phase}.json"),
                          "phase": predictor.phase}))
    elif args.command == "eval":
        report = exp.run_eval(cfg)
        print(format_table(report))
    elif args.command == "ablate":
        report = exp.run_ablate(cfg)
        print(json.dumps(report["tables"], indent=2))
    elif args.command == "run":
        report = exp.run_pipeline(cfg)
        print(format_table(report))
        if args.plot:
            run_plot(cfg.output_dir / "report.json", None, cfg.raw["plot"]["bins"])
    return 0


def format_table(report: dict) -> str:
    cols = ("fpr_at_95_tpr", "aupr_error", "aupr_success", "auroc")
    lines = [f"test accuracy {100 * report['classifier']['test_accuracy']:.2f}%  "
             f"({report['classifier']['n_test_errors']} errors)",
             f"{'method':<12}" + "".join(f"{c:>15}" for c in cols)]
    for m in report["methods"]:
        if m["status"] != "ok":
            lines.append(f"{m['name']:<12} failed: {m.get('error', '')}")
            continue
        lines.append(f"{m['name']:<12}" + "".join(
            f"{100 * m['metrics'][c]:>15.2f}" if c in m["metrics"] else f"{'-':>15}" for c in cols))
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return _run(args)
    except FailpredError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: E_IO: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: E_INTERNAL: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
