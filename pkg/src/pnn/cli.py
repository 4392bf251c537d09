"""Command-line entry point: ``pnn <subcommand> [flags]``.

Every subcommand resolves a configuration (defaults < ``--config`` JSON file <
flags), writes its artifacts into one run directory and leaves a
``manifest.json`` there echoing the resolved config and its hash. Without
``--out`` the run directory is ``runs/<subcommand>-<hash>``.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from pnn import __version__

log = logging.getLogger("pnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
API_KEY_ENV = "PNN_MATERIALS_API_KEY"


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------- config


def _section(cls, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**overrides)


def config_hash(cfg: dict) -> str:
    return hashlib.sha1(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:12]


def _load_config(path) -> dict:
    if not path:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    return doc


def _merge(file_cfg: dict, section: str, flags: dict) -> dict:
    out = dict(file_cfg.get(section, {}))
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _run_dir(args, resolved: dict) -> Path:
    out = Path(args.out) if args.out else Path("runs") / f"{args.command}-{config_hash(resolved)}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, resolved: dict, artifacts, extra=None) -> Path:
    doc = {"command": command, "version": __version__, "config": resolved,
           "config_hash": config_hash(resolved),
           "artifacts": sorted(str(Path(a).relative_to(out)) if Path(a).is_relative_to(out)
                               else str(a) for a in artifacts)}
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _executor(threads: int):
    n = (os.cpu_count() or 1) if threads == 0 else threads
    return ProcessPoolExecutor(max_workers=n) if n > 1 else None


# --------------------------------------------------------------------------- plot data


def emit_plot_data(report, out) -> list[Path]:
    """Write plot-ready CSVs for a report object; returns the written paths."""
    from pnn.evolve import GaResult, write_stats_csv
    from pnn.lab import ReversibilityReport, RolloutReport
    from pnn.melting import ParetoPoint, write_pareto_csv

    out = Path(out)
    if isinstance(report, RolloutReport):
        report.write_energy_csv(out)
    elif isinstance(report, ReversibilityReport):
        report.write_trace_csv(out)
    elif isinstance(report, GaResult):
        write_stats_csv(report.stats, out)
    elif isinstance(report, list) and all(isinstance(p, ParetoPoint) for p in report):
        write_pareto_csv(report, out)
    else:
        raise TypeError(f"no plot data defined for {type(report).__name__}")
    return [out]


# --------------------------------------------------------------------------- commands


def _sim_config(args, file_cfg):
    from pnn.dynamics import SimConfig

    flags = {"seed": args.seed, "dt_fine": args.dt_fine, "stride": args.stride,
             "total_steps": args.steps, "gamma": args.gamma,
             "energies": args.energies}
    return _section(SimConfig, _merge(file_cfg, "sim", flags))


def cmd_gen_data(args, file_cfg):
    from pnn.dynamics import LjPotential, generate_dataset, save_data_dir

    sim = _sim_config(args, file_cfg)
    resolved = {"sim": asdict(sim)}
    out = _run_dir(args, resolved)
    data = generate_dataset(LjPotential(), sim)
    written = save_data_dir(data, out)
    _write_manifest(out, args.command, resolved, written,
                    {"rows": {"train": len(data.train), "val": len(data.val),
                              "test": len(data.test)}, "dt": sim.dt})
    print(out)


def cmd_pretrain_force(args, file_cfg):
    from pnn.dynamics import LjPotential, load_data_dir
    from pnn.forcenet import PretrainConfig, lj_force_samples, pretrain_force_subnet

    pcfg = _section(PretrainConfig, _merge(file_cfg, "pretrain",
                                           {"epochs": args.epochs, "seed": args.seed}))
    lo, hi = args.lo, args.hi
    if args.data:
        # cover the visited range with a small margin
        data = load_data_dir(args.data)
        xs = [t.x for t in data.trajectories]
        lo = min(float(x.min()) for x in xs) * 0.95 if lo is None else lo
        hi = max(float(x.max()) for x in xs) * 1.05 if hi is None else hi
    lo = 1.0 if lo is None else lo
    hi = 3.0 if hi is None else hi
    resolved = {"pretrain": asdict(pcfg), "range": [lo, hi], "samples": args.samples}
    out = _run_dir(args, resolved)
    x, f = lj_force_samples(LjPotential(), lo, hi, args.samples)
    net = pretrain_force_subnet(x, f, pcfg)
    net.save(out / "force_subnet.json")
    _write_manifest(out, args.command, resolved, [out / "force_subnet.json"],
                    {"fit_rmse": net.fit_rmse})
    print(f"fit RMSE {net.fit_rmse:.3e} -> {out / 'force_subnet.json'}")


def cmd_baseline(args, file_cfg):
    from pnn.dynamics import load_data_dir
    from pnn.lab import FfnnConfig, train_baseline_ffnn

    flags = {"epochs": args.epochs, "seed": args.seed}
    if args.hidden:
        flags["hidden"] = tuple(args.hidden)
    fcfg = _section(FfnnConfig, _merge(file_cfg, "ffnn", flags))
    resolved = {"ffnn": asdict(fcfg), "data": str(args.data), "steps": args.rollout_steps}
    out = _run_dir(args, resolved)
    data = load_data_dir(args.data)
    rep = train_baseline_ffnn(data, fcfg, args.rollout_steps)
    (out / "baseline.json").write_text(json.dumps(rep.to_dict()))
    written = [out / "baseline.json"]
    written += emit_plot_data(rep.rollout, out / "energy.csv")
    written += emit_plot_data(rep.reversibility, out / "reversibility.csv")
    _write_manifest(out, args.command, resolved, written,
                    {"rmse": rep.rmse, "max_drift": rep.rollout.max_drift,
                     "return_error": [rep.reversibility.return_error_x,
                                      rep.reversibility.return_error_v]})
    print(json.dumps(rep.rmse))


def _load_force(path, data=None):
    from pnn.forcenet import ExactForce, ForceSubnet

    if path in (None, "exact"):
        return ExactForce(data.potential if data is not None else None)
    return ForceSubnet.load(path)


def _train_config(args, file_cfg):
    from pnn.network import TrainConfig

    flags = {"optimizer": getattr(args, "optimizer", None),
             "max_iter": getattr(args, "max_iter", None)}
    return _section(TrainConfig, _merge(file_cfg, "train", flags))


def cmd_evolve(args, file_cfg):
    from pnn.dynamics import load_data_dir
    from pnn.evolve import GaConfig, ObjectiveConfig, run_ga
    from pnn.network import DynamicsTopology, save_network

    ga = _section(GaConfig, _merge(file_cfg, "ga", {
        "population": args.pop, "generations": args.gens, "seed": args.seed,
        "snap_prob": args.snap_prob, "mutation_prob_per_gene": args.mutation}))
    obj = _section(ObjectiveConfig, _merge(file_cfg, "objective", {
        "p": args.parsimony, "error_source": args.error_source}))
    tcfg = _train_config(args, file_cfg)
    resolved = {"ga": asdict(ga), "objective": asdict(obj), "train": asdict(tcfg),
                "data": str(args.data), "force": str(args.force)}
    out = _run_dir(args, resolved)
    data = load_data_dir(args.data)
    force = _load_force(args.force, data)
    ex = _executor(args.threads)
    try:
        res = run_ga(ga, obj, data, DynamicsTopology(data.dt), force, tcfg, executor=ex)
    finally:
        if ex is not None:
            ex.shutdown()
    if not math.isfinite(res.best.objective):
        raise NumericError("every individual diverged")
    res.write(out)
    hof = out / "hof"
    hof.mkdir(exist_ok=True)
    fpath = None if args.force in (None, "exact") else str(Path(args.force).resolve())
    written = [out / "manifest.json", out / "stats.csv"]
    for i, ind in enumerate(res.hall_of_fame):
        p = hof / f"{i:02d}.json"
        save_network(ind.network, p, fpath)
        written.append(p)
    save_network(res.best.network, hof / "best.json", fpath)
    written.append(hof / "best.json")
    manifest = res.manifest()
    _write_manifest(out, args.command, resolved, written,
                    {"stats": manifest["stats"], "hall_of_fame": manifest["hall_of_fame"],
                     "evaluations": res.evaluations})
    b = res.best
    print(f"best objective {b.objective:.4f} complexity {b.complexity} test MSE {b.e_test:.3e}")


def cmd_eval(args, file_cfg):
    from pnn.dynamics import load_data_dir
    from pnn.lab import network_map, reversibility, rmse_report, rollout
    from pnn.network import load_network

    data = load_data_dir(args.data)
    force = _load_force(args.force, data) if args.force else None
    net = load_network(args.network, force, data.dt)
    if net.force is None:
        net.force = _load_force("exact", data)
    resolved = {"network": str(args.network), "data": str(args.data),
                "force": str(args.force), "steps": args.steps}
    out = _run_dir(args, resolved)
    step = network_map(net)
    traj = data.trajectories[-1]
    x0, v0 = float(traj.x[0]), float(traj.v[0])
    rmse = rmse_report(net.predict, {"train": data.train, "val": data.val, "test": data.test})
    roll = rollout(step, x0, v0, args.steps, data.potential)
    rev = reversibility(step, x0, v0, args.steps, keep_trace=True)
    written = emit_plot_data(roll, out / "energy.csv") + emit_plot_data(rev, out / "reversibility.csv")
    report = {"rmse": rmse, "max_drift": roll.max_drift, "diverged": roll.diverged or rev.diverged,
              "return_error_x": rev.return_error_x, "return_error_v": rev.return_error_v}
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    written.append(out / "eval.json")
    _write_manifest(out, args.command, resolved, written, report)
    print(json.dumps(report))
    if report["diverged"]:
        raise NumericError("rollout diverged")


def cmd_extract(args, file_cfg):
    from pnn.extract import equation_report, extract_symbolic
    from pnn.network import load_network

    net = load_network(args.genome, force=False)
    sym = extract_symbolic(net)
    rep = equation_report(sym, net.topology.dt, args.mass, args.gamma, args.tol)
    print(rep["equations"])
    print(f"template: {rep['template']} (max deviation {rep['max_deviation']:.3e})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "equations.json").write_text(json.dumps(rep, indent=2, ensure_ascii=False))
        _write_manifest(out, args.command, {"genome": str(args.genome), "mass": args.mass,
                                            "gamma": args.gamma, "tol": args.tol},
                        [out / "equations.json"])


def _materials(args):
    from pnn.melting import compute_features, ingest_csv, synthetic_records

    if args.materials:
        recs, rejected = ingest_csv(args.materials)
    elif args.synthetic:
        recs, rejected = synthetic_records(args.n_synthetic, args.seed or 0, args.synthetic,
                                           args.noise), []
    else:
        raise UsageError("give --materials CSV or --synthetic LAW")
    for r in rejected:
        log.warning("rejected row %s (%s): %s", r.row, r.name, r.reason)
    if not recs:
        raise ValueError("no valid materials")
    return [compute_features(r) for r in recs], rejected


def _melt_common(p):
    p.add_argument("--materials", help="materials CSV (GPa, Å^3, amu)")
    p.add_argument("--synthetic", choices=["A", "B", "C", "Lindemann", "constant"],
                   help="generate a synthetic corpus following a law instead")
    p.add_argument("--n-synthetic", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.01)


def cmd_melt_features(args, file_cfg):
    from pnn.melting import write_features_csv

    feats, rejected = _materials(args)
    resolved = {"materials": str(args.materials), "synthetic": args.synthetic}
    out = _run_dir(args, resolved)
    write_features_csv(feats, out / "features.csv")
    _write_manifest(out, args.command, resolved, [out / "features.csv"],
                    {"n_records": len(feats),
                     "rejected": [r.__dict__ for r in rejected]})
    print(f"{len(feats)} materials, {len(rejected)} rejected -> {out / 'features.csv'}")


def cmd_melt_evolve(args, file_cfg):
    from pnn.evolve import GaConfig
    from pnn.melting import (evaluate_published_law, evolve_melting_laws, lindemann_placement,
                             lindemann_point, melt_dataset, points_from_runs, fit_lindemann_constant)

    feats, rejected = _materials(args)
    ga = _section(GaConfig, _merge(file_cfg, "ga", {
        "population": args.pop, "generations": args.gens, "seed": args.seed}))
    tcfg = _train_config(args, file_cfg)
    p_values = args.p or file_cfg.get("p_values") or [0.1, 0.3, 1.0]
    resolved = {"ga": asdict(ga), "train": asdict(tcfg), "p_values": p_values,
                "materials": str(args.materials), "synthetic": args.synthetic,
                "split_seed": args.split_seed}
    out = _run_dir(args, resolved)
    data = melt_dataset(feats, args.split_seed)
    ex = _executor(args.threads)
    try:
        runs = evolve_melting_laws(data, ga, p_values, tcfg, executor=ex)
    finally:
        if ex is not None:
            ex.shutdown()
    laws = [{"p": r.p, "laws": [law.to_dict() for law in r.laws]} for r in runs]
    (out / "laws.json").write_text(json.dumps(laws, indent=2, default=_json_default))
    points = points_from_runs(runs)
    lind = lindemann_point(data, tcfg)
    placement = lindemann_placement(points, lind)
    written = [out / "laws.json"]
    written += emit_plot_data(points + [lind], out / "pareto.csv")
    C = fit_lindemann_constant(feats)
    _write_manifest(out, args.command, resolved, written,
                    {"lindemann": placement, "lindemann_C": C,
                     "best_laws": {str(r.p): r.best_law.describe() for r in runs},
                     "published_law_A_first": evaluate_published_law("A", feats[0])})
    for r in runs:
        print(f"p={r.p}: {r.best_law.describe()}")
    print(f"Lindemann form {'on' if placement['on_front'] else 'off'} the pareto front")


def cmd_melt_fetch(args, file_cfg):
    from pnn.melting import FetchConfig, fetch_materials, write_materials_csv

    key = os.environ.get(API_KEY_ENV)
    if not key:
        raise UsageError(f"set {API_KEY_ENV} to the materials-service credential")
    fcfg = _section(FetchConfig, _merge(file_cfg, "fetch", {"cache_dir": args.cache}))
    ids = list(args.ids or [])
    if args.ids_file:
        ids += [s.strip() for s in Path(args.ids_file).read_text().split() if s.strip()]
    if not ids:
        raise UsageError("no material ids given")
    resolved = {"endpoint": args.endpoint, "ids": ids, "fetch": asdict(fcfg)}
    out = _run_dir(args, resolved)
    recs, rejected = fetch_materials(args.endpoint, key, ids, fcfg)
    write_materials_csv(recs, out / "materials.csv")
    _write_manifest(out, args.command, resolved, [out / "materials.csv"],
                    {"fetched": len(recs), "rejected": [r.__dict__ for r in rejected]})
    for r in rejected:
        print(f"rejected {r.name}: {r.reason}", file=sys.stderr)
    print(f"{len(recs)} fetched, {len(rejected)} rejected")


def cmd_pareto(args, file_cfg):
    import csv

    from pnn.melting import ParetoPoint, pareto_front

    points = []
    for src in args.points:
        with Path(src).open(newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"genome_id", "complexity", "test_rmse"}
            if not need <= set(reader.fieldnames or []):
                raise ValueError(f"{src}: header must include {sorted(need)}")
            for row in reader:
                points.append(ParetoPoint(float(row["complexity"]), float(row["test_rmse"]),
                                          row["genome_id"]))
    resolved = {"points": [str(p) for p in args.points]}
    out = _run_dir(args, resolved)
    front, dominated = pareto_front(points)
    written = emit_plot_data(points, out / "pareto.csv")
    _write_manifest(out, args.command, resolved, written,
                    {"front": [p.genome_id for p in front], "n_dominated": len(dominated)})
    for p in front:
        print(f"{p.complexity:g}\t{p.test_rmse:.6g}\t{p.genome_id}")


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pnn", description="Parsimonious neural networks: integrators and "
                                             "melting laws")
    parser.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--out", help="run directory (default runs/<command>-<config hash>)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="worker processes, 0 = auto")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate LJ trajectory datasets")
    p.add_argument("--dt-fine", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--steps", type=int, help="fine steps per trajectory")
    p.add_argument("--gamma", type=float)
    p.add_argument("--energies", type=float, nargs="+", help="last one is the test energy")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-force", parents=[common], help="fit the frozen force sub-net")
    p.add_argument("--data", help="data dir whose trajectories set the sampling range")
    p.add_argument("--lo", type=float)
    p.add_argument("--hi", type=float)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretrain_force)

    p = sub.add_parser("baseline", parents=[common], help="fully-trainable FFNN baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--rollout-steps", type=int, default=1000)
    p.set_defaults(func=cmd_baseline)

    train_flags = _Parser(add_help=False)
    train_flags.add_argument("--optimizer", choices=["lbfgs", "adam"])
    train_flags.add_argument("--max-iter", type=int)

    p = sub.add_parser("evolve", parents=[common, train_flags], help="evolve dynamics PNNs")
    p.add_argument("--data", required=True)
    p.add_argument("--force", help="force sub-net JSON, or 'exact' for the analytic force")
    p.add_argument("--parsimony", type=float)
    p.add_argument("--pop", type=int)
    p.add_argument("--gens", type=int)
    p.add_argument("--mutation", type=float)
    p.add_argument("--snap-prob", type=float)
    p.add_argument("--error-source", choices=["test", "validation"])
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("eval", parents=[common], help="RMSE, rollout and reversibility")
    p.add_argument("--network", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--force")
    p.add_argument("--steps", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", parents=[common], help="closed-form update equations")
    p.add_argument("--genome", required=True, help="saved network JSON (e.g. hof/best.json)")
    p.add_argument("--mass", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--tol", type=float, default=0.01)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("melt-features", parents=[common], help="theta features of materials")
    _melt_common(p)
    p.set_defaults(func=cmd_melt_features)

    p = sub.add_parser("melt-evolve", parents=[common, train_flags], help="evolve melting laws")
    _melt_common(p)
    p.add_argument("--p", type=float, nargs="+", help="parsimony values, one GA run each")
    p.add_argument("--pop", type=int)
    p.add_argument("--gens", type=int)
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(func=cmd_melt_evolve)

    p = sub.add_parser("melt-fetch", parents=[common], help="query a materials REST service")
    p.add_argument("--endpoint", required=True)
    p.add_argument("--ids", nargs="+")
    p.add_argument("--ids-file")
    p.add_argument("--cache", help="on-disk cache directory")
    p.set_defaults(func=cmd_melt_fetch)

    p = sub.add_parser("pareto", parents=[common], help="pareto front of (complexity, rmse)")
    p.add_argument("--points", nargs="+", required=True,
                   help="CSV files with genome_id,complexity,test_rmse")
    p.set_defaults(func=cmd_pareto)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, _load_config(args.config))
    except UsageError as exc:
        print(f"pnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, OverflowError, RuntimeError) as exc:
        print(f"pnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"pnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
