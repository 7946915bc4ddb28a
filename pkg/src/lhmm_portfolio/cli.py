"""``lhmm-portfolio`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback

from lhmm_portfolio import backtest
from lhmm_portfolio.errors import ConfigError, LhmmError

COMMANDS = ("ingest", "fit", "simulate", "optimize", "backtest", "compare", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--jobs", type=int, help="parallel workers (overrides config)")
    common.add_argument("--output-dir", dest="output_dir", help="output directory")
    common.add_argument("--prices", help="long-format price CSV (date,ticker,close)")
    common.add_argument("--sectors", help="sector CSV (ticker,sector)")
    common.add_argument("--index", help="benchmark index CSV (date,close)")
    common.add_argument("--model", help="model JSON path")
    common.add_argument("--replicates", type=int)
    common.add_argument("--n-simulations", dest="n_simulations", type=int)
    common.add_argument("--restarts", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lhmm-portfolio", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="load prices and write the training return panel")
    sub.add_parser("fit", parents=[common], help="fit the two-stage model and write model.json")
    sub.add_parser("simulate", parents=[common], help="simulate cumulative returns from a model")
    sub.add_parser("optimize", parents=[common], help="solve both allocation problems once")
    sub.add_parser("backtest", parents=[common], help="replicated backtest on the test window")
    cmp_ = sub.add_parser("compare", parents=[common], help="fit and backtest one or both model modes")
    cmp_.add_argument("--mode", choices=("lhmm", "independent_hmms", "both"), default="both")
    rep = sub.add_parser("report", parents=[common], help="render report.json as text tables")
    rep.add_argument("report_file", nargs="?", help="report JSON (default: <output-dir>/report.json)")
    return p


def _config(args) -> backtest.RunConfig:
    overrides = {
        k: getattr(args, k)
        for k in ("seed", "jobs", "output_dir", "prices", "sectors", "index", "model",
                  "replicates", "n_simulations", "restarts")
        if getattr(args, k, None) is not None
    }
    if args.config:
        return backtest.RunConfig.from_file(args.config, **overrides)
    return backtest.RunConfig.from_dict(overrides)


def _run(args) -> None:
    cfg = _config(args)
    cmd = args.command
    if cmd == "ingest":
        print(json.dumps(backtest.cmd_ingest(cfg), indent=1))
    elif cmd == "fit":
        model = backtest.cmd_fit(cfg)
        print(f"fitted {model.mode} model: D={model.D} K={model.K}")
    elif cmd == "simulate":
        R = backtest.cmd_simulate(cfg)
        print(f"simulated {R.shape[0]} datasets x {R.shape[1]} stocks")
    elif cmd == "optimize":
        sols = backtest.cmd_optimize(cfg)
        for name, pw in sols.items():
            print(f"{name}: E={pw.expected_return:.6f} V={pw.variance:.6g}")
    elif cmd == "backtest":
        print(backtest.render_report(backtest.cmd_backtest(cfg)))
    elif cmd == "compare":
        print(backtest.render_report(backtest.cmd_compare(cfg, args.mode)))
    elif cmd == "report":
        from pathlib import Path

        path = Path(args.report_file or Path(cfg.output_dir) / "report.json")
        if not path.exists():
            raise ConfigError(f"report file {path} not found")
        doc = json.loads(path.read_text(encoding="utf-8"))
        backtest.validate_report(doc)
        print(backtest.render_report(doc))


def _error_json(exc: BaseException) -> dict:
    if isinstance(exc, LhmmError):
        doc = exc.to_dict()
    else:
        doc = {"error": type(exc).__name__, "message": str(exc)}
        tb = traceback.extract_tb(exc.__traceback__)
        mods = [f.filename for f in tb if "lhmm_portfolio" in f.filename]
        if mods:
            doc["module"] = mods[-1].rsplit("/", 1)[-1].removesuffix(".py")
    return doc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (LhmmError, ValueError, OSError, KeyError) as exc:
        print(json.dumps(_error_json(exc)), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort structured error
        doc = _error_json(exc)
        doc["unexpected"] = True
        print(json.dumps(doc), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
