"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings

from . import config as config_mod
from .errors import ConfigError, DataError, GazeRefineError
from .pipeline import STAGES, ablate_history, run, train_pt
from .pt import save_checkpoint
from .simulator import generate_people
from .streams import read_csv, write_csv

log = logging.getLogger("gazerefine")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int)


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("online", "offline"))
    p.add_argument("--checkpoint", help="PT checkpoint (.npz)")
    p.add_argument("--online-threshold", type=int)
    p.add_argument("--g-tr", type=float, nargs=2, metavar=("X_CM", "Y_CM"))
    for stage in ("vm", "sc", "pt"):
        p.add_argument(f"--no-{stage}", action="store_true", help=f"disable the {stage.upper()} stage")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gazerefine", description="Refine cross-person point-of-gaze predictions.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate synthetic prediction streams")
    _common(p)
    p.add_argument("--output", required=True, help="CSV to write")
    p.add_argument("--n-people", type=int)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--family", choices=("kappa", "augmented", "identity"))
    p.add_argument("--trajectory", choices=("free_viewing", "random_points"))

    p = sub.add_parser("train-pt", help="train the person-specific transform")
    _common(p)
    p.add_argument("--input", help="ground-truth CSV; simulated from [simulate] when omitted")
    p.add_argument("--checkpoint", required=True, help="checkpoint to write")
    p.add_argument("--loss-trace", help="CSV of per-epoch training loss")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--subsample", type=float)

    p = sub.add_parser("refine", help="refine a prediction CSV")
    _common(p)
    _pipeline_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="refined CSV to write")
    p.add_argument("--report", help="also write the evaluation report (JSON)")

    p = sub.add_parser("eval", help="refine and report errors per stage")
    _common(p)
    _pipeline_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--report", help="JSON report path (stdout when omitted)")

    p = sub.add_parser("ablate-history", help="errors versus usable history length")
    _common(p)
    _pipeline_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--lengths", required=True, help="comma separated, e.g. 50,200,500")
    p.add_argument("--output", help="CSV table path (stdout when omitted)")
    return ap


def _overrides(args) -> list[str]:
    out = list(args.overrides)
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    pairs = {
        "mode": "pipeline.mode", "online_threshold": "pipeline.online_threshold",
        "n_people": "simulate.n_people", "n_samples": "simulate.n_samples",
        "family": "simulate.family", "trajectory": "simulate.trajectory",
        "epochs": "train.epochs", "lr": "train.lr", "subsample": "train.subsample",
    }
    for attr, key in pairs.items():
        val = getattr(args, attr, None)
        if val is not None:
            out.append(f"{key}={json.dumps(val)}")
    if args.command != "train-pt" and getattr(args, "checkpoint", None):
        out.append(f"pipeline.checkpoint={json.dumps(args.checkpoint)}")
    if getattr(args, "g_tr", None):
        out.append(f"pipeline.g_tr=[{args.g_tr[0]!r}, {args.g_tr[1]!r}]")
    for stage in ("vm", "sc", "pt"):
        if getattr(args, f"no_{stage}", False):
            out.append(f"pipeline.{stage}=false")
    return out


def _read(path):
    try:
        return read_csv(path)
    except FileNotFoundError:
        raise DataError(f"input not found: {path}") from None


def cmd_simulate(args, st) -> None:
    sim = st.simulate
    streams = generate_people(sim.n_people, sim.n_samples, st.seed, sim.family, sim.trajectory,
                              st.pipeline.screen, st.augment, sim.blink_rate, sim.prefix)
    write_csv(streams, args.output)
    log.info("wrote %d people to %s", len(streams), args.output)


def cmd_train(args, st) -> None:
    if args.input:
        streams = _read(args.input)
    else:
        sim = st.simulate
        streams = generate_people(sim.n_people, sim.n_samples, st.seed, sim.family, sim.trajectory,
                                  st.pipeline.screen, st.augment, sim.blink_rate, sim.prefix)
    model, meta = train_pt(streams, st.train, st.pipeline.grid, st.augment, st.subsample, st.arch,
                           log=lambda e, loss: log.info("epoch %d loss %.6f", e, loss))
    save_checkpoint(model, args.checkpoint, meta)
    if args.loss_trace:
        with open(args.loss_trace, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for i, x in enumerate(meta["loss_trace"]):
                w.writerow([i, repr(x)])


def _write_report(report, path) -> None:
    text = "{}" if report is None else report.to_json()
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def cmd_refine(args, st) -> None:
    refined, report = run(st.pipeline, _read(args.input))
    write_csv([r.stream for r in refined], args.output, {r.stream.person_id: r.columns() for r in refined})
    if args.report:
        _write_report(report, args.report)


def cmd_eval(args, st) -> None:
    _, report = run(st.pipeline, _read(args.input))
    if report is None:
        raise DataError("evaluation needs ground-truth columns g_x_cm, g_y_cm")
    _write_report(report, args.report)


def cmd_ablate(args, st) -> None:
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad --lengths {args.lengths!r}") from None
    rows = ablate_history(st.pipeline, _read(args.input), lengths)
    cols = ["length"] + [f"{s}_{u}" for s in STAGES for u in ("cm", "deg")]
    out = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["length"]] + [repr(r[c]) for c in cols[1:]])
    finally:
        if args.output:
            out.close()


COMMANDS = {
    "simulate": cmd_simulate,
    "train-pt": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ablate-history": cmd_ablate,
}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        st = config_mod.load(args.config, _overrides(args))
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            COMMANDS[args.command](args, st)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GazeRefineError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
