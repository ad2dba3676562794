"""Command-line front end.

Subcommands: group, fit, predict, simulate, evaluate, bench.  Progress goes
to stderr, machine-readable outputs to files; every run writes its resolved
configuration (seeds included) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import elastic_net as enet
from . import pipeline, simbench
from .data_model import (
    ExpressionMatrix,
    ParseError,
    ValidationError,
    load_matrix,
    standardize,
    write_matrix,
)
from .hcluster import rule_to_dict
from .simbench import design_from_dict

log = logging.getLogger("corgroup")


class CliError(Exception):
    """User-facing validation failure (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _default_threads() -> int:
    env = os.environ.get("CORGROUP_THREADS")
    if env:
        return int(env)
    return os.cpu_count() or 1


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return int(seed)
    generated = int(np.random.SeedSequence().generate_state(1)[0])
    log.info("no --seed given; generated seed %d (recorded in config)", generated)
    return generated


def _write_config(out_path: Path, config: dict) -> None:
    config_path = out_path.parent / (out_path.name + ".config.json")
    config_path.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _load_labels(path, x: ExpressionMatrix) -> np.ndarray:
    """Two-column CSV (cell_id,label) aligned to the expression cell order."""
    by_id: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise ValidationError("labels file needs columns cell_id,label")
        for row in reader:
            if not row:
                continue
            if len(row) < 2:
                raise ValidationError(f"labels row too short: {row!r}")
            if row[0] in by_id:
                raise ValidationError(f"duplicate cell id in labels: {row[0]!r}")
            try:
                by_id[row[0]] = float(row[1])
            except ValueError:
                raise ValidationError(f"non-numeric label for cell {row[0]!r}") from None
    missing = [c for c in x.cell_ids if c not in by_id]
    if missing:
        raise ValidationError(f"labels missing for cells: {', '.join(missing[:5])}")
    y = np.array([by_id[c] for c in x.cell_ids])
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValidationError("labels must be binary 0/1")
    return y


def _parse_grid(text: str):
    if text == "default":
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad grid: {text!r}") from None


def _write_probs(path, cell_ids, probs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cell_id", "prob"])
        for cid, q in zip(cell_ids, probs):
            writer.writerow([cid, repr(float(q))])


def build_parser() -> _Parser:
    parser = _Parser(prog="corgroup", description=__doc__)
    parser.add_argument("--version", action="version", version=f"corgroup {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes (default: available cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_group = sub.add_parser("group", help="grouping rule at a fixed threshold")
    p_group.add_argument("--input", required=True)
    p_group.add_argument("--orientation", default="genes-in-rows",
                         choices=["genes-in-rows", "genes-in-columns"])
    p_group.add_argument("--threshold", type=float, required=True)
    p_group.add_argument("--max-subset", type=int, default=1000)
    p_group.add_argument("--seed", type=int, default=None)
    p_group.add_argument("--out", required=True)

    p_fit = sub.add_parser("fit", help="full grouped pipeline")
    p_fit.add_argument("--input", required=True)
    p_fit.add_argument("--labels", required=True)
    p_fit.add_argument("--orientation", default="genes-in-rows",
                       choices=["genes-in-rows", "genes-in-columns"])
    p_fit.add_argument("--grid", default="default",
                       help="'default' or comma-separated thresholds")
    p_fit.add_argument("--folds", type=int, default=10)
    p_fit.add_argument("--alpha", type=float, default=0.5)
    p_fit.add_argument("--max-subset", type=int, default=1000)
    p_fit.add_argument("--tol", type=float, default=enet.DEFAULT_TOL,
                       help="coordinate-descent convergence tolerance")
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--out", required=True)

    p_pred = sub.add_parser("predict", help="predict new cells from a model")
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--input", required=True)
    p_pred.add_argument("--orientation", default="genes-in-rows",
                        choices=["genes-in-rows", "genes-in-columns"])
    p_pred.add_argument("--out", required=True)

    p_sim = sub.add_parser("simulate", help="synthetic data + jittered models")
    p_sim.add_argument("--design", required=True)
    p_sim.add_argument("--reps", type=int, default=100)
    p_sim.add_argument("--jitter-sd", type=float, default=0.1)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--out", required=True, help="output directory")

    p_eval = sub.add_parser("evaluate", help="metrics for saved fits vs truth")
    p_eval.add_argument("--truth", required=True, help="blueprint JSON")
    p_eval.add_argument("--expression", required=True)
    p_eval.add_argument("--orientation", default="genes-in-rows",
                        choices=["genes-in-rows", "genes-in-columns"])
    p_eval.add_argument("--fits", required=True, help="directory of model JSON files")
    p_eval.add_argument("--out", required=True)

    p_bench = sub.add_parser("bench", help="grouped vs ungrouped benchmark")
    p_bench.add_argument("--design", required=True)
    p_bench.add_argument("--reps", type=int, default=100)
    p_bench.add_argument("--jitter-sd", type=float, default=0.1)
    p_bench.add_argument("--grid", default="default")
    p_bench.add_argument("--folds", type=int, default=10)
    p_bench.add_argument("--alpha", type=float, default=0.5)
    p_bench.add_argument("--max-subset", type=int, default=1000)
    p_bench.add_argument("--tol", type=float, default=enet.DEFAULT_TOL,
                         help="coordinate-descent convergence tolerance")
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--out", required=True, help="results CSV path")
    return parser


def _cmd_group(args, threads) -> None:
    x = load_matrix(args.input, args.orientation)
    seed = _resolve_seed(args.seed)
    structure = pipeline.build_structure(x, seed=seed, max_subset=args.max_subset)
    from .hcluster import make_rule

    rule = make_rule(structure.partition, list(structure.dendrograms),
                     args.threshold, structure.std)
    out = Path(args.out)
    out.write_text(json.dumps(rule_to_dict(rule), indent=2) + "\n")
    _write_config(out, {
        "command": "group", "input": str(args.input), "threshold": args.threshold,
        "max_subset": args.max_subset, "seed": seed, "orientation": args.orientation,
    })
    log.info("wrote %s (%d groups)", out, rule.n_groups)


def _cmd_fit(args, threads) -> None:
    x = load_matrix(args.input, args.orientation)
    y = _load_labels(args.labels, x)
    seed = _resolve_seed(args.seed)
    grid = _parse_grid(args.grid)
    model = pipeline.fit_grouped(
        x, y, grid=grid, folds=args.folds, seed=seed, alpha=args.alpha,
        max_subset=args.max_subset, tol=args.tol, n_jobs=threads,
    )
    out = Path(args.out)
    out.write_text(json.dumps(pipeline.model_to_dict(model), indent=2) + "\n")
    _write_config(out, {
        "command": "fit", "input": str(args.input), "labels": str(args.labels),
        "grid": args.grid, "folds": args.folds, "alpha": args.alpha,
        "max_subset": args.max_subset, "tol": args.tol, "seed": seed,
        "orientation": args.orientation,
    })
    log.info("wrote %s (best threshold %g)", out, model.rule.threshold)


def _cmd_predict(args, threads) -> None:
    payload = json.loads(Path(args.model).read_text())
    model = pipeline.model_from_dict(payload)
    x = load_matrix(args.input, args.orientation)
    probs = pipeline.predict(model, x)
    out = Path(args.out)
    _write_probs(out, x.cell_ids, probs)
    _write_config(out, {
        "command": "predict", "model": str(args.model), "input": str(args.input),
        "orientation": args.orientation,
    })
    log.info("wrote %s", out)


def _cmd_simulate(args, threads) -> None:
    design = design_from_dict(json.loads(Path(args.design).read_text()))
    seed = _resolve_seed(args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = simbench.synth_expression(design)
    write_matrix(x, out_dir / "expression.csv")
    blueprint = simbench.blueprint_from_design(design)
    _write_blueprint(out_dir / "blueprint.json", blueprint, x)
    from .precluster import derive_seed

    for rep in range(args.reps):
        jittered = simbench.jitter(blueprint, args.jitter_sd, derive_seed(seed, 10, rep))
        y, q = simbench.simulate_phenotypes(x, jittered, derive_seed(seed, 11, rep, 0))
        with open(out_dir / f"phenotypes_{rep:03d}.csv", "w", newline="",
                  encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["cell_id", "label", "q_true"])
            for cid, yi, qi in zip(x.cell_ids, y, q):
                writer.writerow([cid, int(yi), repr(float(qi))])
        _write_blueprint(out_dir / f"model_{rep:03d}.json", jittered, x)
    _write_config(out_dir / "run", {
        "command": "simulate", "design": str(args.design), "reps": args.reps,
        "jitter_sd": args.jitter_sd, "seed": seed,
    })
    log.info("wrote %d replicates to %s", args.reps, out_dir)


def _write_blueprint(path, blueprint, x) -> None:
    Path(path).write_text(json.dumps({
        "intercept": blueprint.intercept,
        "min_cor": blueprint.min_cor,
        "source": blueprint.source,
        "beta": {g: float(b) for g, b in zip(x.gene_ids, blueprint.beta) if b != 0.0},
    }, indent=2) + "\n")


def _read_blueprint(path, gene_ids) -> simbench.BlueprintModel:
    payload = json.loads(Path(path).read_text())
    pos = {g: i for i, g in enumerate(gene_ids)}
    beta = np.zeros(len(gene_ids))
    for g, b in payload["beta"].items():
        if g not in pos:
            raise ValidationError(f"truth gene {g!r} absent from expression matrix")
        beta[pos[g]] = float(b)
    return simbench.BlueprintModel(
        beta=beta, intercept=float(payload["intercept"]),
        source=payload.get("source", "file"), min_cor=float(payload.get("min_cor", 0.9)),
    )


def _cmd_evaluate(args, threads) -> None:
    x = load_matrix(args.expression, args.orientation)
    truth = _read_blueprint(args.truth, x.gene_ids)
    _, q_true = simbench.simulate_phenotypes(x, truth, seed=0)
    fits_dir = Path(args.fits)
    rows = []
    for path in sorted(fits_dir.glob("*.json")):
        payload = json.loads(path.read_text())
        if "rule" in payload:
            model = pipeline.model_from_dict(payload)
            q_hat = pipeline.predict(model, x)
            selected = pipeline.expand_selection(model, gene_ids=x.gene_ids)
        else:
            f = enet.fit_from_dict(payload, list(x.gene_ids))
            q_hat = enet.predict_prob(f, x.values)
            selected = f.coefficients != 0.0
        rec = simbench.compute_metrics(truth.support, selected, q_true, q_hat,
                                       method=path.stem)
        rows.append(rec)
    out = Path(args.out)
    with out.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["fit", "mse", "precision", "recall", "f1"])
        for rec in rows:
            writer.writerow([rec.method, repr(rec.mse), repr(rec.precision),
                             repr(rec.recall), repr(rec.f1)])
    _write_config(out, {
        "command": "evaluate", "truth": str(args.truth),
        "expression": str(args.expression), "fits": str(args.fits),
    })
    log.info("wrote %s (%d fits)", out, len(rows))


def _cmd_bench(args, threads) -> None:
    design = design_from_dict(json.loads(Path(args.design).read_text()))
    seed = _resolve_seed(args.seed)
    grid = _parse_grid(args.grid)
    x = simbench.synth_expression(design)
    blueprint = simbench.blueprint_from_design(design)
    result = simbench.run_benchmark(
        x, blueprint, reps=args.reps, sd_fraction=args.jitter_sd, seed=seed,
        grid=grid, folds=args.folds, alpha=args.alpha,
        max_subset=args.max_subset, tol=args.tol, n_jobs=threads,
    )
    out = Path(args.out)
    simbench.write_results_csv(result.records, out)
    summary = {
        "wilcoxon_pvalues": result.pvalues,
        "redraws": result.redraws,
        "reps": args.reps,
    }
    (out.parent / (out.stem + "_summary.json")).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    _write_config(out, {
        "command": "bench", "design": str(args.design), "reps": args.reps,
        "jitter_sd": args.jitter_sd, "grid": args.grid, "folds": args.folds,
        "alpha": args.alpha, "max_subset": args.max_subset, "tol": args.tol,
        "seed": seed,
    })
    log.info("wrote %s; p-values %s", out, result.pvalues)


_COMMANDS = {
    "group": _cmd_group,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "simulate": _cmd_simulate,
    "evaluate": _cmd_evaluate,
    "bench": _cmd_bench,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    verbose = os.environ.get("CORGROUP_VERBOSE", "")
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            stream=sys.stderr,
            level=logging.DEBUG if (args.verbose or verbose) else logging.INFO,
            format="%(levelname)s %(message)s",
        )
        threads = args.threads if args.threads is not None else _default_threads()
        _COMMANDS[args.command](args, threads)
        return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, ValidationError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
