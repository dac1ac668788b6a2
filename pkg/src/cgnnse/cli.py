"""Command-line entry point: ``cgnnse {datagen,train,estimate,study,certify,inspect}``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 contract
violation (a stability certificate that does not hold).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, bddc, datagen, evaluation, stability
from .container import ContainerError
from .datagen import DataError, NoiseModel
from .estimator import SchemaError, StateEstimator
from .gnn import Architecture, load_model, save_model
from .grid import CaseFormatError, TopologyError, load_case, parse_case
from .powerflow import PowerFlowError
from .train import TrainConfig, TrainingDiverged, fit, init_model, split_indices

log = logging.getLogger("cgnnse")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONTRACT = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ContractViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------

def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, args, inputs, artifacts, seeds):
    """One ``manifest.json`` per run directory with the resolved config and file hashes."""
    out = Path(out_dir)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): file_hash(p) for p in inputs},
        "artifacts": {str(Path(p).relative_to(out)): file_hash(p) for p in artifacts},
        "tool_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def verify_manifest(out_dir):
    """List of artifact or input paths whose hash no longer matches."""
    out = Path(out_dir)
    manifest = json.loads((out / MANIFEST).read_text())
    bad = [p for p, h in manifest["artifacts"].items() if not (out / p).exists() or file_hash(out / p) != h]
    bad += [p for p, h in manifest["inputs"].items() if not Path(p).exists() or file_hash(p) != h]
    return bad


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def threads(args):
    value = args.threads if args.threads is not None else os.environ.get("CGNNSE_THREADS", "1")
    n = int(value)
    if n < 1:
        raise ValueError("thread count must be at least 1")
    return n


def parse_pmus(spec, grid):
    if spec == "highest-voltage":
        return grid.highest_voltage_buses()
    try:
        return [int(b) for b in spec.split(",") if b.strip()]
    except ValueError:
        raise ValueError(f"--pmu must be a comma-separated bus list or 'highest-voltage', got {spec!r}") from None


def grid_of(ds):
    if ds.case_text:
        return parse_case(ds.case_text, ds.case_name)
    return load_case(ds.case_name)


def out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def alpha_value(text):
    a = float(text)
    if not 0.0 < a < 1.0:
        raise argparse.ArgumentTypeError(f"alpha must lie in the open interval (0, 1), got {text}")
    return a


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_datagen(args):
    grid = load_case(args.case)
    pmus = parse_pmus(args.pmu, grid)
    datagen.pmu_mask(grid, pmus)        # fail before any power flow runs
    noise = NoiseModel.from_spec(args.noise)
    history = datagen.synthetic_load_history(grid, args.history_points, args.history_seed,
                                             args.history_swing, args.history_jitter)
    model = datagen.fit_load_model(history, correlated=not args.independent_loads)
    states = datagen.generate_snapshots(grid, model, args.count, args.seed, workers=threads(args))
    worst = float(datagen.verify_states(grid, states)) if len(states) else 0.0
    ds = datagen.build_dataset(grid, states, pmus, noise, args.seed, args.components)
    out = out_dir(args.out)
    path = out / "dataset.cgds"
    datagen.write_dataset(path, ds)
    inputs = [args.case] if Path(args.case).exists() else []
    write_manifest(out, "datagen", args, inputs, [path], {"seed": args.seed, "history_seed": args.history_seed})
    print(json.dumps({"dataset": str(path), "snapshots": len(ds), "pmu_buses": ds.pmu_buses,
                      "worst_mismatch_pu": worst}))


def cmd_train(args):
    ds = datagen.read_dataset(args.dataset)
    grid = grid_of(ds)
    if grid.digest() != ds.grid_hash:
        raise DataError("grid stored in the dataset does not match its hash")
    arch = Architecture(hidden=args.hidden, heads=args.heads,
                        components=args.components or ds.components, extra_gcn=args.extra_gcn,
                        attention=not args.no_attention)
    out = out_dir(args.out)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      patience=args.patience, validation_fraction=args.val_fraction, seed=args.seed,
                      optimizer=args.optimizer, checkpoint_every=args.checkpoint_every,
                      checkpoint_dir=str(out) if args.checkpoint_every else None)
    tr, _ = split_indices(len(ds), cfg.validation_fraction, cfg.seed)
    model = init_model(ds, grid, arch, args.seed, train_idx=tr)

    def progress(epoch, tl, vl):
        log.info("epoch %d  train %.4e  val %.4e", epoch, tl, vl)

    model, report = fit(model, ds, cfg, progress)
    model.meta.update({
        "case_text": ds.case_text, "case_name": ds.case_name,
        "bddc": bddc.fit_stats(ds.measured[tr], ds.pmu_buses).to_dict(),
        "noise": ds.noise, "train_report": {"best_epoch": report.best_epoch,
                                            "best_val_loss": report.summary["best_val_loss"]},
    })
    ckpt = out / "model.ckpt"
    save_model(ckpt, model)
    rep_path = out / "train_report.json"
    rep_path.write_text(report.to_json())
    write_manifest(out, "train", args, [args.dataset], [ckpt, rep_path], {"seed": args.seed})
    print(json.dumps({"checkpoint": str(ckpt), "best_epoch": report.best_epoch,
                      "best_val_loss": report.summary["best_val_loss"], "parameters": model.parameter_count()}))


def cmd_estimate(args):
    est = StateEstimator.from_checkpoint(args.checkpoint, args.alpha)
    outages = [est.branch_index(o) for o in args.outage]
    if outages:
        est.adjacency(outages)          # raises IslandingError before any work
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(args.measurements) as fh, open(out_path, "w") as out:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {lineno}: {exc}") from None
            z, ok = est.parse_record(record)
            states, report, ms = est.estimate(z, ok, outages, screen=not args.no_screen)
            out.write(json.dumps({
                "snapshot": n, "bus": est.grid.bus_ids(), "vm_pu": states[:, 0].tolist(),
                "va_deg": np.degrees(states[:, 1]).tolist(), "time_ms": ms,
                "flagged": int(report.n_flagged) if report else 0,
            }) + "\n")
            n += 1
    print(json.dumps({"states": str(out_path), "snapshots": n}))


def _setup_from_args(args):
    train = datagen.read_dataset(args.train)
    test = datagen.read_dataset(args.test)
    grid = grid_of(train)
    if test.grid_hash != train.grid_hash:
        raise DataError("training and test datasets come from different grids")
    model = load_model(args.checkpoint) if args.checkpoint else None
    arch = model.arch if model else Architecture(components=train.components)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      patience=args.patience, seed=args.seed)
    return evaluation.StudySetup(grid, train, test, arch, cfg, model, args.seed, args.max_snapshots)


def cmd_study(args):
    setup = _setup_from_args(args)
    study_cfg = {"outages": args.outages, "alpha": args.alpha}
    if args.heads_list:
        study_cfg["heads"] = [int(k) for k in args.heads_list.split(",")]
    if args.pmu_sets:
        study_cfg["pmu_sets"] = [[int(b) for b in s.split(",")] for s in args.pmu_sets]
    study_cfg.update(args.study_config or {})
    result = evaluation.run_study(args.kind, setup, study_cfg)
    out = out_dir(args.out)
    paths = evaluation.write_report([result], out, plots=not args.no_plots)
    inputs = [args.train, args.test] + ([args.checkpoint] if args.checkpoint else [])
    write_manifest(out, "study", args, inputs, paths, {"seed": args.seed})
    for row in result["rows"]:
        print(json.dumps(row, default=float))


def cmd_certify(args):
    model = load_model(args.checkpoint)
    ds = datagen.read_dataset(args.dataset)
    if ds.grid_hash != model.grid_hash:
        raise DataError("dataset and checkpoint come from different grids")
    grid = grid_of(ds)
    snaps = range(min(args.snapshots, len(ds)))
    rows = stability.sweep_contingencies(model, grid, ds, args.k, snaps, args.cap, args.seed)
    out = out_dir(args.out)
    csv_path, json_path = out / "certificates.csv", out / "certificates.json"
    stability.write_certificates(rows, csv_path, json_path)
    write_manifest(out, "certify", args, [args.checkpoint, args.dataset], [csv_path, json_path],
                   {"seed": args.seed})
    violations = [r for r in rows if not r.holds]
    print(json.dumps({"certificates": len(rows), "violations": len(violations), "table": str(csv_path)}))
    if violations:
        for r in violations:
            print(json.dumps(r.row()), file=sys.stderr)
        raise ContractViolation(f"{len(violations)} certificate(s) violated")


def cmd_inspect(args):
    path = Path(args.path)
    if path.is_dir():
        bad = verify_manifest(path)
        print(json.dumps({"manifest": str(path / MANIFEST), "hash_mismatches": bad}))
        if bad:
            raise ContractViolation("manifest hashes do not verify")
        return
    magic = path.read_bytes()[:8]
    if magic == datagen.DATASET_MAGIC:
        ds = datagen.read_dataset(path)
        info = {"type": "dataset", "snapshots": len(ds), "buses": ds.n_bus, "pmu_buses": ds.pmu_buses,
                "noise": ds.noise, "seed": ds.seed, "case": ds.case_name, "grid_hash": ds.grid_hash}
    else:
        model = load_model(path)
        observed = [int(i) for i in np.flatnonzero(model.mask)]
        if model.meta.get("case_text"):
            ids = parse_case(model.meta["case_text"], model.meta.get("case_name", "case")).bus_ids()
            observed = [int(ids[i]) for i in observed]
        info = {"type": "checkpoint", "architecture": asdict(model.arch), "parameters": model.parameter_count(),
                "layers": [l.kind for l in model.layers], "buses": int(model.adj.n),
                "pmu_buses": observed, "grid_hash": model.grid_hash,
                "train_report": model.meta.get("train_report")}
    print(json.dumps(info, indent=2, default=str))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _train_flags(p):
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="cgnnse", description="PMU-based state estimation with a mixture-aware GNN")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
        p.add_argument("--threads", type=int, default=None, help="worker count (default $CGNNSE_THREADS or 1)")
        p.set_defaults(func=func)
        return p

    p = command("datagen", cmd_datagen, "sample operating conditions, solve power flow, add PMU noise")
    p.add_argument("--case", required=True, help="case file path or bundled name (ieee14, ieee30, ieee118)")
    p.add_argument("--pmu", required=True, help="comma-separated bus ids or 'highest-voltage'")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--noise", default="gaussian:0.01", help="none | gaussian[:tve] | gmm")
    p.add_argument("--components", type=int, default=3, help="mixture components for the feature prior")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history-points", type=int, default=2000)
    p.add_argument("--history-seed", type=int, default=1)
    p.add_argument("--history-swing", type=float, default=0.2)
    p.add_argument("--history-jitter", type=float, default=0.03)
    p.add_argument("--independent-loads", action="store_true", help="sample loads without the rank correlation")
    p.add_argument("--out", required=True)

    p = command("train", cmd_train, "fit network and mixture parameters on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--hidden", type=int, default=50)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--extra-gcn", type=int, default=0)
    p.add_argument("--no-attention", action="store_true", help="replace MH-GAT by a GCN of equal width")
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--checkpoint-every", type=int, default=0)
    _train_flags(p)
    p.add_argument("--out", required=True)

    p = command("estimate", cmd_estimate, "screen PMU measurements and estimate all bus states")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--measurements", required=True, help="JSON lines with fields bus, vm_pu, va_deg")
    p.add_argument("--alpha", type=alpha_value, default=0.01, help="false-positive rate of the screen")
    p.add_argument("--outage", action="append", default=[], help="open branch FROM-TO (repeatable)")
    p.add_argument("--no-screen", action="store_true")
    p.add_argument("--out", required=True, help="output JSON-lines file")

    p = command("study", cmd_study, "run one of the evaluation studies")
    p.add_argument("kind", choices=evaluation.STUDY_KINDS)
    p.add_argument("--train", required=True, help="training dataset")
    p.add_argument("--test", required=True, help="held-out dataset")
    p.add_argument("--checkpoint", help="trained base model (trained on the fly when omitted)")
    p.add_argument("--outages", type=int, default=5)
    p.add_argument("--alpha", type=alpha_value, default=0.01)
    p.add_argument("--heads-list", help="head counts for head_sweep, e.g. 1,2,4")
    p.add_argument("--pmu-sets", nargs="*", help="PMU sets for pmu_set_sweep, e.g. 4,9,13 1,2,6")
    p.add_argument("--max-snapshots", type=int, default=200)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--study-config", type=json.loads, default=None, help="extra study options as JSON")
    _train_flags(p)
    p.add_argument("--out", required=True)

    p = command("certify", cmd_certify, "topology-perturbation bound for every N-k contingency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="snapshots whose loads and errors are reused")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--cap", type=int, default=50)
    p.add_argument("--snapshots", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("inspect", cmd_inspect, "summarize a dataset or checkpoint, or verify a run directory")
    p.add_argument("path")
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(overrides) - known
        if unknown:
            parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, IsADirectoryError, CaseFormatError, TopologyError, DataError, ContainerError,
            SchemaError, bddc.StatsError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PowerFlowError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
