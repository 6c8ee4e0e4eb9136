"""``pgat`` command line: gen-data, train, retrieve, eval, verify."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch
import yaml

from . import inference, synthdata, verify
from .agnn import CheckpointError, load_checkpoint
from .numerics import DegenerateInputError, DimensionError
from .pose_graph import (
    DatasetError,
    build_subgraphs,
    check_unique_ids,
    read_keynodes,
    read_positions,
    write_keynodes,
    write_positions,
)
from .trainer import SamplingError, TrainConfig, TrainingError, train

log = logging.getLogger("pgat")

# exit codes by failure category
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5
EXIT_IO = 6
EXIT_VERIFY = 7


def _load_runs(paths):
    runs = []
    for p in paths:
        runs.extend(read_keynodes(p))
    check_unique_ids(runs)
    return runs


def cmd_gen_data(args) -> int:
    values = _read_mapping(args.config) if args.config else {}
    for key in ("seed", "num_runs", "num_loops", "spacing_m", "loop_length_m", "descriptor_dim",
                "descriptor_noise_sigma", "viewpoint_drift_sigma", "lengthscale_m"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    cfg = synthdata.SynthConfig.from_mapping(values)
    runs = synthdata.generate(cfg, first_id=args.first_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for traj in runs:
        write_keynodes(out / f"run_{traj.run_id}.csv", [traj])
    write_positions(out / "positions.csv", runs)
    print(f"wrote {len(runs)} runs x {len(runs[0])} keynodes to {out}")
    return 0


def cmd_train(args) -> int:
    values = _read_mapping(args.config) if args.config else {}
    overrides = {"learning_rate": args.lr, "epochs": args.epochs, "max_steps": args.max_steps,
                 "seed": args.seed, "batch_size": args.batch_size}
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.deterministic:
        values["deterministic"] = True
    runs = _load_runs(args.data)
    if "dim" not in values:
        values["dim"] = len(runs[0].keynodes[0].d)
    cfg = TrainConfig.from_mapping(values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    result = train(cfg, runs, out)
    last = result.metrics[-1]["mean_active_loss"] if result.metrics else float("nan")
    print(f"trained {result.state.step} steps; final epoch loss {last:.5f}; checkpoints in {out}")
    return 0


def cmd_retrieve(args) -> int:
    queries = _load_runs(args.query)
    database = _load_runs(args.database)
    check_unique_ids(queries + database)
    positions = {k.global_id: k.t for t in queries + database for k in t.keynodes}
    qs = [sg for t in queries for sg in build_subgraphs(t, args.distance_threshold)]
    ds = [sg for t in database for sg in build_subgraphs(t, args.distance_threshold)]
    if args.raw:
        scorer = inference.raw_scorer
    else:
        if args.checkpoint is None:
            raise argparse.ArgumentTypeError("retrieve needs --checkpoint or --raw")
        model = load_checkpoint(args.checkpoint)
        scorer = inference.model_scorer(model, args.batch_size)
    acc = inference.average_scheme(qs, ds, scorer)
    num_db = len(acc.db_ids)
    k = args.top_k or max(25, inference.one_percent_n(num_db))
    ranked = inference.rank_all(acc, k)
    inference.write_report_csv(args.out, ranked, positions, args.radius)
    print(f"ranked {len(ranked)} queries against {num_db} database keynodes -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ranked = inference.read_report_csv(args.report)
    table = read_positions(args.positions)
    positions = {g: t for g, (_, t) in table.items()}
    missing = [g for g in list(ranked) + [c for v in ranked.values() for c, _ in v] if g not in table]
    if missing:
        raise DatasetError(f"{args.positions}: no position for global_id {missing[0]}")
    if args.db_runs:
        db_runs = set(args.db_runs)
    else:
        db_runs = {table[c][0] for v in ranked.values() for c, _ in v}
    db_ids = [g for g, (run, _) in table.items() if run in db_runs]
    report = inference.evaluate(ranked, positions, db_ids, args.radius)
    summary = report.summary()
    print(f"AR@1={report.ar1:.3f}")
    print(f"AR@1%={report.ar1pct:.3f} (N={report.n_1pct})")
    if args.out:
        inference.write_summary(args.out, report)
    if args.curve:
        inference.write_curve_csv(args.curve, report)
    log.debug("summary %s", summary)
    return 0


def cmd_verify(args) -> int:
    ok = verify.run_all(print)
    print("all suites passed" if ok else "verification FAILED")
    return 0 if ok else EXIT_VERIFY


def _read_mapping(path) -> dict:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise DatasetError(f"{path}: expected a flat key/value mapping")
    return data


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="torch worker threads (default 1)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true",
                        help="deterministic kernels; no wall-clock values in outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="pgat", description="Pose-graph attentional place recognition")
    sub = ap.add_subparsers(dest="command", required=True)
    add = lambda name, **kw: sub.add_parser(name, parents=[common], **kw)

    g = add("gen-data", help="write synthetic keynode CSVs")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--num-runs", dest="num_runs", type=int)
    g.add_argument("--num-loops", dest="num_loops", type=int)
    g.add_argument("--spacing", dest="spacing_m", type=float)
    g.add_argument("--loop-length", dest="loop_length_m", type=float)
    g.add_argument("--dim", dest="descriptor_dim", type=int)
    g.add_argument("--noise", dest="descriptor_noise_sigma", type=float)
    g.add_argument("--drift", dest="viewpoint_drift_sigma", type=float)
    g.add_argument("--lengthscale", dest="lengthscale_m", type=float)
    g.add_argument("--first-id", dest="first_id", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = add("train", help="train a model on keynode CSVs")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.set_defaults(func=cmd_train)

    r = add("retrieve", help="average-scheme retrieval report")
    r.add_argument("--checkpoint")
    r.add_argument("--raw", action="store_true", help="score with the input descriptors only")
    r.add_argument("--query", nargs="+", required=True)
    r.add_argument("--database", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--top-k", dest="top_k", type=int)
    r.add_argument("--distance-threshold", dest="distance_threshold", type=float, default=200.0)
    r.add_argument("--radius", type=float, default=inference.DEFAULT_RADIUS_M)
    r.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    r.set_defaults(func=cmd_retrieve)

    e = add("eval", help="AR@N summary of a retrieval report")
    e.add_argument("--report", required=True)
    e.add_argument("--positions", required=True)
    e.add_argument("--radius", type=float, default=inference.DEFAULT_RADIUS_M)
    e.add_argument("--db-runs", dest="db_runs", type=int, nargs="+")
    e.add_argument("--out")
    e.add_argument("--curve")
    e.set_defaults(func=cmd_eval)

    v = add("verify", help="run gradient, oracle and invariant checks")
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except DatasetError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DimensionError, DegenerateInputError, TrainingError, SamplingError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, argparse.ArgumentTypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
