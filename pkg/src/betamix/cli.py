"""Command-line interface: ``betamix <subcommand> ...``.

Every subcommand writes its outputs plus ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 computational or input failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .dmc import dmc_fraction, ecdf, identify_dmcs, map_dmrs
from .em import fit
from .errors import BetaMixError, CapabilityError, ConfigError
from .io import (RunManifest, export_density_grid, file_digest, fmt, load_csv, load_model,
                 read_table, save_model, write_csv, write_table)
from .model import FitConfig, ModelSpec, Variant
from .selection import aic_bic_icl, ari, param_count, select_models, uncertainty
from .simulate import STATES, SimConfig, simulate, true_thresholds
from .thresholds import ThresholdPair, infer_thresholds, label_kr_clusters

log = logging.getLogger("betamix")

MANIFEST = "manifest.json"


class Run:
    """Collects inputs, outputs and timings for one subcommand invocation."""

    def __init__(self, args, argv):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command=args.command, argv=list(argv), output_dir=str(self.out),
                                    cwd=os.getcwd(), backend=kernels.BACKEND)

    def input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"input file not found: {path}")
        self.manifest.inputs[str(path)] = file_digest(path)
        return path

    def output(self, name: str) -> Path:
        return self.out / name

    def finish(self, *names) -> None:
        for name in names:
            self.manifest.outputs[name] = file_digest(self.out / name)
        self.manifest.save(self.out / MANIFEST)


def _json_dump(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, run: Run) -> int:
    shapes = None
    if args.shapes:
        if len(args.shapes) != 2 * len(STATES):
            raise ConfigError(f"--shapes needs {2 * len(STATES)} numbers (alpha delta per state)")
        shapes = {s: (args.shapes[2 * i], args.shapes[2 * i + 1]) for i, s in enumerate(STATES)}
    kw = dict(C=args.n_sites, N=args.n_patients, R=args.n_samples, seed=args.seed)
    if shapes:
        kw["state_shapes"] = shapes
    if args.probs:
        kw["state_probs"] = tuple(args.probs)
    if args.joint_table:
        kw.update(joint_mode="explicit", joint_table=tuple(args.joint_table))
    config = SimConfig(**kw)
    data = simulate(config)
    run.manifest.seed = args.seed
    run.manifest.config = {"C": config.C, "N": config.N, "R": config.R, "state_probs": list(config.state_probs),
                           "state_shapes": {k: [v.alpha, v.delta] for k, v in config.state_shapes.items()},
                           "joint_mode": config.joint_mode, "joint_table": config.joint_table}

    matrix = data.matrix
    if args.with_positions:
        from .model import MethylationMatrix

        matrix = MethylationMatrix(matrix.values, matrix.cpg_ids, matrix.patient_labels, matrix.sample_labels,
                                   ["chr1"] * matrix.C, 100 * np.arange(1, matrix.C + 1))
    write_csv(matrix, run.output("data.csv"))
    samples = matrix.sample_labels
    names = config.state_names
    joint = data.joint_labels()
    rows = [[matrix.cpg_ids[c]] + [names[s] for s in data.states[c]] + [joint[c]] for c in range(matrix.C)]
    write_table(run.output("truth.csv"), ["cpg_id"] + [f"state_sample{s}" for s in samples] + ["joint_state"], rows)
    outputs = ["data.csv", "truth.csv"]
    try:
        t = true_thresholds(config)
        write_table(run.output("true_thresholds.csv"), ["t_lo", "t_hi"], [[t.t_lo, t.t_hi]])
        outputs.append("true_thresholds.csv")
    except BetaMixError as exc:
        log.info("no true thresholds: %s", exc)
    run.finish(*outputs)
    print(f"wrote {matrix.C} sites x {matrix.N} patients x {matrix.R} samples to {run.out}")
    return 0


def cmd_fit(args, run: Run) -> int:
    matrix = load_csv(run.input(args.data))
    if args.sample is not None:
        matrix = matrix.select_sample(args.sample)
    spec = ModelSpec(args.model, args.k, args.m)
    config = FitConfig(epsilon=args.epsilon, max_iterations=args.max_iter, seed=args.seed,
                       n_threads=args.threads, exact_mstep=args.exact_mstep)
    run.manifest.spec = {"variant": spec.variant.value, "K": spec.K, "M": spec.M}
    run.manifest.config = asdict(config)
    run.manifest.seed = args.seed
    fitted = fit(matrix, spec, config, timings=run.manifest.timings)

    save_model(fitted, run.output("model.json"), include_responsibilities=args.save_responsibilities)
    aic, bic, icl = aic_bic_icl(fitted)
    report = {
        "variant": fitted.spec.variant.value, "K": fitted.K, "N": fitted.N, "R": fitted.R,
        "n_sites": fitted.n_sites, "n_dropped": getattr(matrix, "n_dropped", 0), "n_clamped": matrix.n_clamped,
        "loglik": fitted.loglik, "Q": param_count(fitted.spec, fitted.N, fitted.R),
        "aic": aic, "bic": bic, "icl": icl,
        "converged": fitted.converged, "n_iterations": fitted.n_iterations,
        "ascent_violations": fitted.ascent_violations, "degenerate_events": fitted.degenerate_events,
        "tau": fitted.tau.tolist(), "means": fitted.shapes.means().tolist(),
        "alpha": fitted.shapes.alpha_free.tolist(), "delta": fitted.shapes.delta_free.tolist(),
    }
    _json_dump(run.output("report.json"), report)
    z = fitted.require_responsibilities()
    labels = fitted.hard_labels()
    unc = uncertainty(z)
    write_table(run.output("labels.csv"), ["cpg_id", "cluster", "uncertainty"],
                [[matrix.cpg_ids[c], int(labels[c]) + 1, float(unc[c])] for c in range(matrix.C)])
    run.finish("model.json", "report.json", "labels.csv")
    status = "converged" if fitted.converged else "stopped at max iterations"
    print(f"{fitted.spec.variant.value} K={fitted.K}: loglik {fmt(fitted.loglik)}, "
          f"{status} after {fitted.n_iterations} iterations")
    return 0


def cmd_thresholds(args, run: Run) -> int:
    fitted = load_model(run.input(args.model))
    pairs = infer_thresholds(fitted)
    sample = fitted.sample_labels[0] if fitted.sample_labels else ""
    rows = [[scope, sample, p.t_lo, p.t_hi] for scope, p in pairs.items()]
    write_table(run.output("thresholds.csv"), ["scope", "sample", "t_lo", "t_hi"], rows)
    run.finish("thresholds.csv")
    for scope, p in pairs.items():
        print(f"{scope}\t{fmt(p.t_lo)}\t{fmt(p.t_hi)}")
    return 0


def _read_threshold_files(paths, run: Run) -> dict:
    out = {}
    for path in paths or ():
        header, rows = read_table(run.input(path))
        try:
            i_scope, i_sample = header.index("scope"), header.index("sample")
            i_lo, i_hi = header.index("t_lo"), header.index("t_hi")
        except ValueError:
            raise ConfigError(f"{path}: expected columns scope,sample,t_lo,t_hi") from None
        for row in rows:
            if row[i_scope] == "global":
                out[row[i_sample]] = ThresholdPair(float(row[i_lo]), float(row[i_hi]), row[i_sample])
    return out


def _read_positions(path, run: Run):
    header, rows = read_table(run.input(path))
    try:
        i_id, i_chr, i_pos = header.index("cpg_id"), header.index("chromosome"), header.index("position")
    except ValueError:
        raise ConfigError(f"{path}: expected columns cpg_id, chromosome, position") from None
    return [(r[i_id], r[i_chr], int(r[i_pos])) for r in rows]


def cmd_dmc(args, run: Run) -> int:
    fitted = load_model(run.input(args.model))
    if fitted.spec.variant is not Variant.K_DOT_R:
        raise ConfigError("dmc needs a k.r model")
    if not fitted.has_responsibilities:
        raise CapabilityError("dmc needs per-site cluster assignments; refit with --save-responsibilities")
    thresholds = _read_threshold_files(args.thresholds, run)
    labels = label_kr_clusters(fitted, thresholds)
    is_dmc, cluster = identify_dmcs(fitted, labels)
    changing = np.array([len(set(row)) > 1 for row in labels])
    samples = list(fitted.sample_labels)
    write_table(run.output("cluster_states.csv"),
                ["cluster", "tau"] + [f"state_sample{s}" for s in samples] + ["state_changing"],
                [[k + 1, float(fitted.tau[k])] + list(labels[k]) + [int(changing[k])] for k in range(fitted.K)])
    ids = list(fitted.site_ids) if fitted.site_ids is not None else [str(i + 1) for i in range(fitted.n_sites)]
    write_table(run.output("dmc.csv"), ["cpg_id", "cluster", "is_dmc"],
                [[ids[c], int(cluster[c]) + 1, int(is_dmc[c])] for c in range(len(ids))])
    outputs = ["cluster_states.csv", "dmc.csv"]
    if args.positions:
        index = {cid: c for c, cid in enumerate(ids)}
        pos = [p for p in _read_positions(args.positions, run) if p[0] in index]
        if len(pos) != len(ids):
            raise ConfigError(f"positions file covers {len(pos)} of {len(ids)} fitted sites")
        order = [index[p[0]] for p in pos]
        regions = map_dmrs(is_dmc[order], [p[1] for p in pos], [p[2] for p in pos],
                           [p[0] for p in pos], args.min_run)
        write_table(run.output("dmr.csv"), ["chromosome", "start", "end", "n_sites", "cpg_ids"],
                    [[r.chromosome, r.start, r.end, r.site_count, ";".join(r.cpg_ids)] for r in regions])
        outputs.append("dmr.csv")
        print(f"{len(regions)} regions of >= {args.min_run} adjacent DMCs")
    frac = dmc_fraction(fitted, labels)
    _json_dump(run.output("dmc_summary.json"),
               {"dmc_fraction_tau": frac, "dmc_fraction_sites": float(is_dmc.mean()),
                "n_dmc": int(is_dmc.sum()), "n_sites": len(ids)})
    outputs.append("dmc_summary.json")
    run.finish(*outputs)
    print(f"DMC fraction (sum of tau over state-changing clusters): {fmt(frac)}")
    return 0


def cmd_select(args, run: Run) -> int:
    stems = [Path(p).stem for p in args.models]
    unique = len(set(stems)) == len(stems)
    models = {}
    for path, stem in zip(args.models, stems):
        name = stem if unique else str(Path(path).with_suffix(""))
        if name in models:
            raise ConfigError(f"model {path} given twice")
        models[name] = load_model(run.input(path))
    report = select_models(models)
    cols = ["model", "loglik", "Q", "aic", "bic", "icl"]
    write_table(run.output("selection.csv"), cols, [[row[c] for c in cols] for row in report.table()])
    run.finish("selection.csv")
    for crit, name in report.best_by.items():
        print(f"best by {crit}: {name}")
    return 0


def _read_labels(path, column, run: Run) -> dict:
    header, rows = read_table(run.input(path))
    if column is None:
        if len(header) < 2:
            raise ConfigError(f"{path}: need an id column and a label column")
        i = 1
    elif column in header:
        i = header.index(column)
    else:
        raise ConfigError(f"{path}: no column {column!r}; have {header}")
    return {r[0]: r[i] for r in rows}


def cmd_ari(args, run: Run) -> int:
    a = _read_labels(args.labels_a, args.column_a, run)
    b = _read_labels(args.labels_b, args.column_b, run)
    if a.keys() != b.keys():
        raise ConfigError(f"label files cover different sites ({len(a)} vs {len(b)}, "
                          f"{len(a.keys() & b.keys())} shared)")
    ids = list(a)
    value = ari([a[i] for i in ids], [b[i] for i in ids])
    _json_dump(run.output("ari.json"), {"ari": value, "n_sites": len(ids)})
    run.finish("ari.json")
    print(fmt(value))
    return 0


def cmd_ecdf(args, run: Run) -> int:
    header, rows = read_table(run.input(args.values))
    if args.subset:
        subset = {line.strip().split(",")[0] for line in run.input(args.subset).read_text().splitlines()}
        subset.discard("cpg_id")
        rows = [r for r in rows if r[0] in subset]
    if not rows:
        raise ConfigError("no sites selected")
    columns = args.columns or [h for h in header[1:] if h.lower() not in ("chromosome", "position")]
    out = []
    for col in columns:
        if col not in header:
            raise ConfigError(f"{args.values}: no column {col!r}")
        i = header.index(col)
        vals = []
        for r in rows:
            try:
                v = float(r[i])
            except ValueError:
                continue
            if not math.isnan(v):
                vals.append(v)
        out.extend([col, x, F] for x, F in ecdf(vals))
    write_table(run.output("ecdf.csv"), ["column", "x", "F"], out)
    run.finish("ecdf.csv")
    print(f"{len(rows)} sites, {len(columns)} columns")
    return 0


def cmd_density(args, run: Run) -> int:
    fitted = load_model(run.input(args.model))
    columns, data = export_density_grid(fitted, args.grid_size)
    write_table(run.output("density.csv"), columns, data.tolist())
    run.finish("density.csv")
    return 0


def cmd_rerun(args, run=None) -> int:
    manifest = RunManifest.load(args.manifest)
    cwd = manifest.cwd
    out = Path(args.out).resolve()
    here = os.getcwd()
    try:
        if cwd:
            os.chdir(cwd)
        code = main(list(manifest.argv) + ["--out", str(out)])
    finally:
        os.chdir(here)
    if code != 0:
        return code
    mismatched = [name for name, digest in manifest.outputs.items()
                  if not (out / name).exists() or file_digest(out / name) != digest]
    if mismatched:
        print(f"outputs differ from the manifest: {', '.join(mismatched)}", file=sys.stderr)
        return 1
    print(f"reproduced {len(manifest.outputs)} output files bit-exactly")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="betamix", description="Beta mixture models for DNA methylation data.")
    p.add_argument("--version", action="version", version=f"betamix {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("-o", "--out", default=".", help="output directory (default: current)")
        return sp

    sp = add("simulate", cmd_simulate, "generate a synthetic dataset with known states")
    sp.add_argument("--n-sites", type=int, default=20_000)
    sp.add_argument("--n-patients", type=int, default=4)
    sp.add_argument("--n-samples", type=int, default=2)
    sp.add_argument("--probs", type=float, nargs=3, metavar=("HYPO", "HEMI", "HYPER"))
    sp.add_argument("--shapes", type=float, nargs=6, metavar="X",
                    help="alpha delta for hypo, hemi, hyper (default 2 20 4 3 20 2)")
    sp.add_argument("--joint-table", type=float, nargs="+", metavar="P",
                    help="explicit joint state probabilities, first sample varies slowest")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--with-positions", action="store_true", help="add synthetic chromosome/position columns")

    sp = add("fit", cmd_fit, "fit a beta mixture model")
    sp.add_argument("data", help="beta-value CSV")
    sp.add_argument("--model", required=True, choices=[v.value for v in Variant])
    sp.add_argument("--k", type=int, default=None, help="clusters (default 3, or M**R for k.r)")
    sp.add_argument("--m", type=int, default=3, help="states per sample for k.r (default 3)")
    sp.add_argument("--epsilon", type=float, default=1e-5)
    sp.add_argument("--max-iter", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=None, help="worker threads (default $BETAMIX_THREADS or all)")
    sp.add_argument("--sample", default=None, help="fit one sample (label) of a multi-sample file")
    sp.add_argument("--exact-mstep", action="store_true", help="solve the exact digamma M-step by Newton")
    sp.add_argument("--save-responsibilities", action="store_true",
                    help="store per-site membership probabilities in the model file")

    sp = add("thresholds", cmd_thresholds, "methylation-state thresholds from a k.. or kn. model")
    sp.add_argument("model")

    sp = add("dmc", cmd_dmc, "differentially methylated sites and regions from a k.r model")
    sp.add_argument("model")
    sp.add_argument("--thresholds", nargs="+", default=None,
                    help="threshold CSVs from per-sample k.. fits (default 0.2/0.8)")
    sp.add_argument("--positions", default=None, help="CSV with cpg_id, chromosome, position")
    sp.add_argument("--min-run", type=int, default=3)

    sp = add("select", cmd_select, "compare models by AIC, BIC and ICL")
    sp.add_argument("models", nargs="+")

    sp = add("ari", cmd_ari, "adjusted Rand index of two label files")
    sp.add_argument("labels_a")
    sp.add_argument("labels_b")
    sp.add_argument("--column-a", default=None)
    sp.add_argument("--column-b", default=None)

    sp = add("ecdf", cmd_ecdf, "empirical CDF step points of values, optionally for a site subset")
    sp.add_argument("values")
    sp.add_argument("--subset", default=None, help="file of cpg_ids, one per line")
    sp.add_argument("--columns", nargs="+", default=None)

    sp = add("density", cmd_density, "weighted component densities on a grid, for plotting")
    sp.add_argument("model")
    sp.add_argument("--grid-size", type=int, default=512)

    sp = sub.add_parser("rerun", help="re-execute a run manifest and verify its outputs")
    sp.set_defaults(func=cmd_rerun)
    sp.add_argument("manifest")
    sp.add_argument("-o", "--out", required=True, help="directory for the reproduced outputs")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="betamix: %(levelname)s: %(message)s")
    try:
        if args.func is cmd_rerun:
            return cmd_rerun(args)
        sub_argv = [a for a in argv if a not in ("-v", "--verbose")]
        run = Run(args, sub_argv)
        t0 = time.perf_counter()
        code = args.func(args, run)
        log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
        return code
    except (BetaMixError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"betamix {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
