"""Operator command surface.

Subcommands: decompose, profile, correlate, trace, synth, stats,
validate, man. Every command accepts ``--config`` (a JSON file whose keys
match the long option names) with command-line overrides, echoes the
fully resolved configuration into each output's provenance sidecar, and
is byte-reproducible under a fixed seed.

Exit codes: 0 success, 2 parse/format/usage error, 3 numeric or
convergence error, 4 capability error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, batch, pipeline, solver, synthetic
from .core import JointPmf
from .errors import (
    CapabilityError,
    DomainError,
    FormatError,
    InfeasibilityError,
    NumericError,
    PidkitError,
)

EXIT_OK = 0
EXIT_FORMAT = 2
EXIT_NUMERIC = 3
EXIT_CAPABILITY = 4

OUTPUT_DIR_ENV = "PIDKIT_OUT"


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUTPUT_DIR_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError("config file must hold a JSON object")
    return data


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> None:
    """Config-file values fill any option still at its parser default."""
    overrides = _load_config_file(getattr(args, "config", None))
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise FormatError(f"config key {key!r} is not an option of this command")
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


def _resolved_config(args) -> dict:
    skip = {"func", "config"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        if isinstance(value, Path):
            value = str(value)
        out[key] = value
    return out


def _provenance(args, inputs: dict[str, str]) -> dict:
    return {"tool": f"pidkit {__version__}",
            "command": args.func.__name__.removeprefix("cmd_"),
            "config": _resolved_config(args),
            "inputs": inputs}


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# Input loading
# ---------------------------------------------------------------------------

def _load_joint(args) -> tuple[JointPmf, dict[str, str]]:
    if args.gate:
        spec = synthetic.GateSpec(gate=args.gate, flip_noise=args.noise, seed=args.seed)
        return synthetic.gate_joint(spec), {f"gate:{spec.gate}": f"noise={spec.flip_noise}"}
    path = Path(args.input)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        joint = JointPmf(np.asarray(data["table"], dtype=float))
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot load joint table {path}: {exc}") from exc
    return joint, {path.name: _file_digest(path)}


def _train_config(args, seed: int) -> batch.TrainConfig:
    return batch.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        sinkhorn_iters=args.sinkhorn_iters, seed=seed, embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim, tau=args.tau, target_mode=args.target_mode,
    )


def _atoms_payload(atoms: solver.PidAtoms, shares) -> dict:
    clamped = atoms.clamped()
    payload = {
        "atoms": {"R": atoms.r, "U1": atoms.u1, "U2": atoms.u2, "S": atoms.s},
        "atoms_clamped": {"R": clamped.r, "U1": clamped.u1,
                          "U2": clamped.u2, "S": clamped.s},
        "total_bits": atoms.total,
        "residuals": atoms.residuals or {},
    }
    payload["shares"] = None if shares is None else {
        "R": float(shares[0]), "U1": float(shares[1]),
        "U2": float(shares[2]), "S": float(shares[3])}
    return payload


def _shares_or_none(atoms):
    try:
        return analysis.pid_shares(atoms)
    except PidkitError:
        return None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    out_dir = _out_dir(args)
    report_path = out_dir / f"{args.name}.report.json"
    extra: dict = {}

    if args.estimator in ("exact", "oracle"):
        joint, inputs = _load_joint(args)
        if args.estimator == "exact":
            opts = solver.SolveOptions(max_iters=args.max_iters, tol=args.tol,
                                       step=args.step, seed=args.seed)
            atoms, result = solver.decompose_joint(joint, opts)
            if not result.converged:
                raise NumericError("solver did not converge within max_iters")
            extra = {"converged": result.converged, "iterations": result.iterations,
                     "objective_bits": float(result.objective_trace[-1])}
        else:
            atoms = synthetic.brute_force_pid(joint, grid_resolution=args.grid_resolution)
    elif args.estimator in ("batch", "discretized"):
        if not args.input:
            raise DomainError(f"estimator {args.estimator!r} needs --in records")
        records, manifest = pipeline.read_records(Path(args.input))
        inputs = {Path(args.input).name: manifest.digest()}
        if args.estimator == "discretized":
            atoms = synthetic.discretized_oracle_atoms(records, tau=args.tau)
        else:
            train_recs, test_recs = pipeline.split_dataset(
                records, pipeline.SplitSpec(seed=args.seed))
            pool = [pipeline.threshold_regularize(r.scores_mm, args.tau)
                    for r in records]
            marginal = pipeline.aggregate_marginal(pool)
            cfg = _train_config(args, args.seed)
            model = batch.train(train_recs, cfg, marginal_y=marginal)
            estimate = batch.estimate_atoms(model, test_recs)
            atoms = estimate.atoms
            extra = {
                "i_q_bits": estimate.i_q, "i_p_joint_bits": estimate.i_p_joint,
                "i_p_vision_bits": estimate.i_p_vision, "i_p_text_bits": estimate.i_p_text,
                "loss_trace": [float(v) for v in model.loss_trace],
                "sinkhorn_residual": estimate.sinkhorn_residual,
                "model_digest": model.digest(),
                "n_train": len(train_recs), "n_test": len(test_recs),
            }
            if args.save_model:
                batch.save_model(model, out_dir / args.save_model)
    else:
        raise DomainError(f"unknown estimator {args.estimator!r}")

    payload = _atoms_payload(atoms, _shares_or_none(atoms))
    payload["estimator"] = args.estimator
    payload.update(extra)
    payload["provenance"] = _provenance(args, inputs)
    _write_json(report_path, payload)
    print(f"wrote {report_path}")
    return EXIT_OK


def _profile_one(path: Path, args):
    records, manifest = pipeline.read_records(path)
    layers = {r.layer for r in records}
    checkpoints = {r.checkpoint for r in records}
    if len(layers) > 1 or len(checkpoints) > 1:
        raise FormatError(f"{path.name}: records disagree on layer/checkpoint tags")
    if args.estimator == "discretized":
        atoms = synthetic.discretized_oracle_atoms(records, tau=args.tau)
    elif args.estimator == "batch":
        train_recs, test_recs = pipeline.split_dataset(
            records, pipeline.SplitSpec(seed=args.seed))
        marginal = pipeline.aggregate_marginal(
            [pipeline.threshold_regularize(r.scores_mm, args.tau) for r in records])
        model = batch.train(train_recs, _train_config(args, args.seed), marginal_y=marginal)
        atoms = batch.estimate_atoms(model, test_recs).atoms
    else:
        raise DomainError(f"unknown estimator {args.estimator!r}")
    report = analysis.build_report(
        atoms, records, model=manifest.model, dataset=manifest.dataset,
        layer=layers.pop(), checkpoint=checkpoints.pop(),
        family=manifest.family, regime=manifest.regime)
    return report, manifest


def _profile_many(paths, args):
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(lambda p: _profile_one(p, args), paths))
    else:
        results = [_profile_one(p, args) for p in paths]
    return results


def _share_charts(reports):
    labels = [f"{r.model}:{r.dataset}" for r in reports]
    charts = []
    for idx, name in ((3, "share_S"), (2, "share_U2"), (0, "share_R"), (1, "share_U1")):
        ys = [None if r.shares is None else float(r.shares[idx]) for r in reports]
        charts.append({"name": name, "series": [{"name": name, "x": labels, "y": ys}]})
    return charts


def _bootstrap_chart(reports, n_boot, seed):
    """Dataset-level mean S and U2 shares with percentile bootstrap CIs."""
    by_dataset: dict[str, list] = {}
    for rep in reports:
        if rep.shares is not None:
            by_dataset.setdefault(rep.dataset, []).append(rep.shares)
    series = []
    for idx, name in ((3, "mean_share_S"), (2, "mean_share_U2")):
        xs, ys, los, his = [], [], [], []
        for dataset in sorted(by_dataset):
            values = [float(s[idx]) for s in by_dataset[dataset]]
            xs.append(dataset)
            ys.append(float(np.mean(values)))
            if len(values) >= 2:
                lo, hi = analysis.bootstrap_ci(values, n_boot=n_boot, seed=seed)
            else:
                lo = hi = ys[-1]
            los.append(lo)
            his.append(hi)
        series.append({"name": name, "x": xs, "y": ys,
                       "ci_low": los, "ci_high": his})
    return {"name": "dataset_mean_shares", "series": series}


def cmd_profile(args) -> int:
    paths = [Path(p) for p in args.input]
    results = _profile_many(paths, args)
    reports = [rep for rep, _ in results]
    inputs = {p.name: m.digest() for p, (_, m) in zip(paths, results)}
    provenance = _provenance(args, inputs)
    out_dir = _out_dir(args)
    csv_path = out_dir / f"{args.name}.profiles.csv"
    analysis.write_profile_csv(reports, csv_path, provenance)
    charts = _share_charts(reports)
    if args.bootstrap:
        charts.append(_bootstrap_chart(reports, args.bootstrap_resamples, args.seed))
    analysis.write_chart_bundle(charts, out_dir / f"{args.name}.charts.json", provenance)
    print(f"wrote {csv_path}")
    return EXIT_OK


def _read_csv(path: Path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise FormatError(f"{path}: empty table")
    header = lines[0].split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise FormatError(f"{path} line {lineno}: expected {len(header)} cells")
        rows.append(dict(zip(header, cells)))
    return rows


def cmd_correlate(args) -> int:
    rows = []
    inputs = {}
    for path in args.input:
        path = Path(path)
        inputs[path.name] = _file_digest(path)
        rows.extend(_read_csv(path))
    by_dataset: dict[str, list[dict]] = {}
    for row in rows:
        by_dataset.setdefault(row["dataset"], []).append(row)

    out_rows = []
    for dataset in sorted(by_dataset):
        subset = by_dataset[dataset]
        xs, ys = [], []
        for row in subset:
            if row[args.x] == "" or row[args.y] == "":
                continue
            xs.append(float(row[args.x]))
            ys.append(float(row[args.y]))
        result = analysis.spearman(xs, ys, mode=args.p_mode)
        out_rows.append({"dataset": dataset, "target": f"{args.x}~{args.y}",
                         "n": result.n, "rho": result.rho, "p_value": result.p_value})

    provenance = _provenance(args, inputs)
    out_dir = _out_dir(args)
    csv_path = out_dir / f"{args.name}.correlations.csv"
    analysis.write_correlations_csv(out_rows, csv_path, provenance)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_trace(args) -> int:
    paths = [Path(p) for p in args.input]
    results = _profile_many(paths, args)
    reports = [rep for rep, _ in results]
    inputs = {p.name: m.digest() for p, (_, m) in zip(paths, results)}
    rows = analysis.trace(reports)
    provenance = _provenance(args, inputs)
    out_dir = _out_dir(args)
    csv_path = out_dir / f"{args.name}.trace.csv"
    analysis.write_trace_csv(rows, csv_path, provenance)
    xs = [str(row["key"]) for row in rows]
    charts = [{"name": name, "series": [{
        "name": name, "x": xs,
        "y": [float(getattr(row["report"].atoms.clamped(), attr)) for row in rows]}]}
        for name, attr in (("R", "r"), ("U1", "u1"), ("U2", "u2"), ("S", "s"))]
    analysis.write_chart_bundle(charts, out_dir / f"{args.name}.charts.json", provenance)
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out_dir = _out_dir(args)
    if args.kind == "gate":
        spec = synthetic.GateSpec(gate=args.gate, flip_noise=args.noise,
                                  n_samples=args.n, seed=args.seed)
        records = synthetic.gate_records(spec)
        joint = synthetic.gate_joint(spec)
        joint_path = out_dir / f"{args.name}.joint.json"
        _write_json(joint_path, {"table": joint.table.tolist()})
    else:
        spec = synthetic.ContinuousSpec(structure=args.structure, dim=args.dim,
                                        cluster_separation=args.sep,
                                        n_samples=args.n, seed=args.seed)
        records = synthetic.gen_continuous(spec)
    records_path = out_dir / f"{args.name}.jsonl"
    manifest = pipeline.write_records(records, records_path)
    provenance = _provenance(args, {records_path.name: manifest.digest()})
    analysis.write_provenance(records_path, provenance)
    print(f"wrote {records_path} ({len(records)} records)")
    return EXIT_OK


def cmd_stats(args) -> int:
    records, manifest = pipeline.read_records(Path(args.input))
    stats = pipeline.compute_modality_stats(records, args.modality)
    out_dir = _out_dir(args)
    path = out_dir / f"{args.name}.stats.json"
    path.write_text(stats.to_json() + "\n", encoding="utf-8", newline="\n")
    analysis.write_provenance(path, _provenance(args, {Path(args.input).name: manifest.digest()}))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    problems = pipeline.validate_records(Path(args.input))
    if problems:
        for problem in problems:
            print(problem, file=sys.stderr)
        return EXIT_FORMAT
    print(f"{args.input}: valid")
    return EXIT_OK


def cmd_man(args) -> int:
    parser = build_parser()
    print(render_manual(parser))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub, *, seed=True, out=True):
    sub.add_argument("--config", help="JSON config file; command-line flags override it")
    if out:
        sub.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or .)")
    if seed:
        sub.add_argument("--seed", type=int, default=0, help="seed for every stochastic path")


def _add_batch_opts(sub):
    sub.add_argument("--tau", type=float, default=pipeline.DEFAULT_TAU,
                     help="confidence threshold for score regularization")
    sub.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    sub.add_argument("--epochs", type=int, default=8)
    sub.add_argument("--batch-size", type=int, default=256)
    sub.add_argument("--sinkhorn-iters", type=int, default=100)
    sub.add_argument("--embed-dim", type=int, default=32)
    sub.add_argument("--hidden-dim", type=int, default=32)
    sub.add_argument("--target-mode", choices=batch.TARGET_MODES, default="soft",
                     help="how batch marginal targets are formed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pidkit",
        description="Partial information decomposition toolkit for multimodal probe data.")
    parser.add_argument("--version", action="version", version=f"pidkit {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("decompose", help="compute PID atoms for one input")
    p.add_argument("--in", dest="input", help="joint-table .json or records .jsonl")
    p.add_argument("--gate", choices=[g.lower() for g in synthetic.GATES],
                   help="use a built-in gate joint instead of --in")
    p.add_argument("--noise", type=float, default=0.0, help="gate label-flip noise")
    p.add_argument("--estimator", choices=["exact", "oracle", "batch", "discretized"],
                   default="exact")
    p.add_argument("--name", default="decompose", help="output file stem")
    p.add_argument("--max-iters", type=int, default=10000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--grid-resolution", type=int, default=50)
    p.add_argument("--save-model", help="also save the trained coupling model")
    _add_batch_opts(p)
    _add_common(p)
    p.set_defaults(func=cmd_decompose)

    p = commands.add_parser("profile", help="per-file information spectra")
    p.add_argument("--in", dest="input", nargs="+", required=True)
    p.add_argument("--estimator", choices=["batch", "discretized"], default="batch")
    p.add_argument("--name", default="profile")
    p.add_argument("--threads", type=int, default=1, help="cap on worker parallelism")
    p.add_argument("--bootstrap", action="store_true",
                   help="add dataset-level mean-share chart with bootstrap CIs")
    p.add_argument("--bootstrap-resamples", type=int, default=10000)
    _add_batch_opts(p)
    _add_common(p)
    p.set_defaults(func=cmd_profile)

    p = commands.add_parser("correlate", help="rank correlations over a profile table")
    p.add_argument("--in", dest="input", nargs="+", required=True, help="profile CSVs")
    p.add_argument("--x", default="accuracy", help="first column name")
    p.add_argument("--y", default="share_S", help="second column name")
    p.add_argument("--p-mode", choices=["t", "permutation"], default="t")
    p.add_argument("--name", default="correlate")
    _add_common(p)
    p.set_defaults(func=cmd_correlate)

    p = commands.add_parser("trace", help="layer- or checkpoint-ordered spectra")
    p.add_argument("--in", dest="input", nargs="+", required=True,
                   help="record files, each uniformly tagged")
    p.add_argument("--estimator", choices=["batch", "discretized"], default="batch")
    p.add_argument("--name", default="trace")
    p.add_argument("--threads", type=int, default=1)
    _add_batch_opts(p)
    _add_common(p)
    p.set_defaults(func=cmd_trace)

    p = commands.add_parser("synth", help="generate synthetic record files")
    p.add_argument("--kind", choices=["gate", "continuous"], required=True)
    p.add_argument("--gate", choices=[g.lower() for g in synthetic.GATES], default="xor")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--structure", choices=["synergy", "redundancy", "unique1",
                                           "unique2", "independent"], default="synergy")
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--sep", type=float, default=6.0)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--name", default="synth")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("stats", help="modality noise statistics from records")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--modality", choices=["vision", "text"], required=True)
    p.add_argument("--name", default="modality")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_stats)

    p = commands.add_parser("validate", help="lint a wire-format record file")
    p.add_argument("--in", dest="input", required=True)
    _add_common(p, seed=False, out=False)
    p.set_defaults(func=cmd_validate)

    p = commands.add_parser("man", help="print the generated manual page")
    p.set_defaults(func=cmd_man)

    return parser


def render_manual(parser: argparse.ArgumentParser) -> str:
    """Manual page assembled from the parser definitions."""
    sections = [parser.format_help()]
    subactions = [a for a in parser._actions
                  if isinstance(a, argparse._SubParsersAction)]
    for action in subactions:
        for name, sub in action.choices.items():
            sections.append(f"\n{'=' * 70}\npidkit {name}\n{'=' * 70}\n"
                            + sub.format_help())
    sections.append(f"\nEnvironment:\n  {OUTPUT_DIR_ENV}  default output directory\n")
    return "\n".join(sections)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, matching the parse-error code
        return int(exc.code or 0)
    try:
        if hasattr(args, "config"):
            _apply_config(args, _subparser_defaults(parser, args.command))
        code = args.func(args)
    except (FormatError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NumericError, InfeasibilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    return code


def _subparser_defaults(parser: argparse.ArgumentParser, command: str) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            sub = action.choices[command]
            return {a.dest: a.default for a in sub._actions}
    return {}


if __name__ == "__main__":
    raise SystemExit(main())
