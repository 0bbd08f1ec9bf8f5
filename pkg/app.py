"""
Command-line entry point for M3GP experiments.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from m3gp.baselines import baseline_from_dict
from m3gp.config import config
from m3gp.dataset import load_csv, project, read_json, save_csv
from m3gp.exceptions import DataError, M3GPError, UsageError
from m3gp.expr import bundled_hyperfeatures, load_hyperfeatures
from m3gp.harness import (ExperimentSpec, analyze_dispersion, export_visualization, harvest_hyperfeatures,
                          load_datasets, load_spec, run_experiment, transfer_eval)
from m3gp.mdclass import MDModel, save_model
from m3gp.report import write_report
from m3gp.stats import ConfusionMatrix, kruskal_wallis, kruskal_wallis_exact
from m3gp.synthetic import write_scenes

logger = logging.getLogger(__name__)


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """Stream handler always, file handler when M3GP_LOG_FILE (or --log-file) is set."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    log_file = log_file or config.get('LOG_FILE')
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, (level or config.get('LOG_LEVEL')).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _tags_for(paths: List[str], tags: Optional[List[str]]) -> List[str]:
    if tags is None:
        return [Path(p).stem for p in paths]
    if len(tags) != len(paths):
        raise UsageError(f"{len(paths)} data files but {len(tags)} tags")
    return tags


def _hyperfeatures(path: Optional[str]):
    return load_hyperfeatures(path) if path else bundled_hyperfeatures()


def _load_model(path: str):
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise DataError(f"{path} does not hold a model")
    if payload.get("type", "md") == "md":
        return MDModel.from_dict(payload)
    return baseline_from_dict(payload)


def _load_all(paths: List[str], label_column: str):
    return [load_csv(p, label_column) for p in paths]


def replace_namespace(args, **changes):
    values = dict(vars(args))
    values.update(changes)
    return argparse.Namespace(**values)


def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    run_config = spec.run_config
    for name in ("generations", "population_size"):
        value = getattr(args, name, None)
        if value is not None:
            run_config = replace(run_config, **{name: value})
    changes = {"run_config": run_config}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        changes["runs"] = args.runs
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if getattr(args, "method", None):
        changes["methods"] = args.method
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return replace(spec, **changes).validate()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    tags = _tags_for(args.data, args.tags)
    payload = {
        "datasets": dict(zip(tags, args.data)),
        "combinations": [tags],
        "targets": tags,
        "methods": args.method or ["m3gp"],
        "output_dir": args.out,
    }
    if args.hyper:
        payload.update(feature_mode="hyper", hyper_source="file", hyper_path=args.hyper)
    if args.label_col:
        payload["label_column"] = args.label_col
    if args.training_size:
        payload["training_size"] = args.training_size
    spec = _apply_overrides(ExperimentSpec.from_dict(payload), replace_namespace(args, method=None, out=None))
    report = run_experiment(spec)
    write_report(report, spec.output_dir)
    for cell in report.cells:
        print(f"{cell.method}/{cell.features} {cell.combination} -> {cell.target}: "
              f"median {100 * cell.median:.2f}% over {len(cell.accuracies)} runs")
    return 0


def cmd_experiment(args) -> int:
    spec = _apply_overrides(load_spec(args.spec), args)
    report = run_experiment(spec)
    paths = write_report(report, spec.output_dir)
    print(paths["text"].read_text(encoding="utf-8"))
    return 0


def cmd_harvest(args) -> int:
    if args.spec:
        spec = load_spec(args.spec)
    elif args.data:
        tags = _tags_for(args.data, args.tags)
        spec = ExperimentSpec.from_dict({"datasets": dict(zip(tags, args.data)), "combinations": [tags]})
    else:
        raise UsageError("harvest needs --spec or --data")
    spec = _apply_overrides(spec, replace_namespace(args, method=None, out=None))
    if args.label_col:
        spec = replace(spec, label_column=args.label_col)
    if args.top_k:
        spec = replace(spec, top_k=args.top_k)
    hyperfeatures = harvest_hyperfeatures(spec, load_datasets(spec), args.out)
    for j, expr in enumerate(hyperfeatures):
        print(f"HF{j}: {expr}")
    return 0


def cmd_project(args) -> int:
    dataset = load_csv(args.data, args.label_col or config.get('LABEL_COLUMN'))
    projected = project(dataset, _hyperfeatures(args.hyper))
    save_csv(projected, args.out, args.label_col or config.get('LABEL_COLUMN'))
    print(f"Wrote {projected.n_rows} rows x {projected.arity} hyper-features to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    results = {}
    for dataset in _load_all(args.data, args.label_col or config.get('LABEL_COLUMN')):
        predictions = model.predict_dataset(dataset)
        matrix = ConfusionMatrix.from_predictions(dataset.labels, predictions)
        tag = dataset.provenance[0]
        results[tag] = {"accuracy": matrix.accuracy(), "recall": matrix.recalls(), **matrix.to_dict()}
        print(f"{tag}: accuracy {100 * matrix.accuracy():.2f}%")
        for cls, row in zip(matrix.classes, matrix.counts.tolist()):
            print(f"  {cls:>12}: {row}")
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(results, handle, indent=2, sort_keys=True)
            handle.write("\n")
    return 0


def cmd_transfer_eval(args) -> int:
    model = _load_model(args.model)
    if not isinstance(model, MDModel):
        raise UsageError("transfer-eval needs an MD model (m3gp champion or md)")
    target = load_csv(args.data, args.label_col or config.get('LABEL_COLUMN'))
    seed = args.seed if args.seed is not None else config.get('SEED')
    result = transfer_eval(model, target, args.fraction, seed)
    print(f"before: {100 * result.before:.2f}% (all rows), {100 * result.before_holdout:.2f}% (holdout)")
    print(f"after:  {100 * result.after:.2f}% (holdout of {result.holdout_rows} rows)")
    if args.out:
        save_model(result.model, args.out)
    return 0


def cmd_analyze(args) -> int:
    datasets = _load_all(args.data, args.label_col or config.get('LABEL_COLUMN'))
    result = analyze_dispersion(datasets, args.by, config.get('TUKEY_K'))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.summary.to_csv(out / "dispersion.csv", index=False, lineterminator="\n")
    result.overlaps.to_csv(out / "overlap.csv", index=False, lineterminator="\n")
    print(f"Wrote {len(result.summary)} group summaries and {len(result.overlaps)} overlaps to {out}")
    return 0


def cmd_export_viz(args) -> int:
    model = _load_model(args.model)
    if not isinstance(model, MDModel):
        raise UsageError("export-viz needs an MD model")
    frame = export_visualization(model, _load_all(args.data, args.label_col or config.get('LABEL_COLUMN')))
    frame.to_csv(args.out, index=False, lineterminator="\n")
    print(f"Wrote {len(frame)} rows to {args.out}")
    return 0


def _read_sample(path: str) -> List[float]:
    sample_path = Path(path)
    if not sample_path.is_file():
        raise DataError(f"missing file: {sample_path}")
    try:
        text_lines = sample_path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise DataError(f"{sample_path} is not UTF-8 text: {e}")
    values = []
    for number, line in enumerate(text_lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            values.append(float(text))
        except ValueError:
            raise DataError(f"non-numeric value {text!r} at line {number} of {sample_path}")
    return values


def cmd_stats_compare(args) -> int:
    samples = [_read_sample(p) for p in args.samples]
    alpha = args.alpha if args.alpha is not None else config.get('SIGNIFICANCE_LEVEL')
    verdict = kruskal_wallis_exact(samples, alpha) if args.exact else kruskal_wallis(samples, alpha)
    print(f"H = {verdict.statistic:.4f}, p = {verdict.p_value:.4g}, "
          f"{'significant' if verdict.significant else 'not significant'} at {alpha}")
    for path, med in zip(args.samples, verdict.medians):
        print(f"  median {med:.4f}  {path}")
    return 0


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else config.get('SEED')
    for tag, path in write_scenes(args.out, seed).items():
        print(f"{tag}: {path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(prog="m3gp", description="Multidimensional GP hyper-feature experiments")
    parser.add_argument("--log-level", help="Override M3GP_LOG_LEVEL")
    parser.add_argument("--log-file", help="Also log to this file")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)

    def common(p, seed=True, label=True):
        if seed:
            p.add_argument("--seed", type=int)
        if label:
            p.add_argument("--label-col")

    def evolution(p):
        p.add_argument("--runs", type=int)
        p.add_argument("--generations", type=int)
        p.add_argument("--population-size", dest="population_size", type=int)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="Train on one (pure or mixed) combination")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--tags", nargs="+")
    p.add_argument("--method", action="append", choices=["m3gp", "md", "dt", "rf"])
    p.add_argument("--hyper", help="Hyper-feature asset; trains on the projected data")
    p.add_argument("--training-size", type=int)
    p.add_argument("--out", default="results")
    common(p)
    evolution(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("experiment", help="Run a JSON experiment spec")
    p.add_argument("spec")
    p.add_argument("--method", action="append", choices=["m3gp", "md", "dt", "rf"])
    p.add_argument("--out")
    common(p, label=False)
    evolution(p)
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("harvest", help="Harvest the most impactful dimensions into an asset file")
    p.add_argument("--spec")
    p.add_argument("--data", nargs="+")
    p.add_argument("--tags", nargs="+")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--out", required=True)
    common(p)
    evolution(p)
    p.set_defaults(handler=cmd_harvest)

    p = sub.add_parser("project", help="Write the hyper-dataset of a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--hyper", help="Asset file (default: bundled hyper-features)")
    p.add_argument("--out", required=True)
    common(p, seed=False)
    p.set_defaults(handler=cmd_project)

    p = sub.add_parser("evaluate", help="Score a saved model on CSV files")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out")
    common(p, seed=False)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("transfer-eval", help="Score before and after recalibrating on a target image")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--out", help="Write the recalibrated model here")
    common(p)
    p.set_defaults(handler=cmd_transfer_eval)

    p = sub.add_parser("analyze", help="Feature dispersion per group after Tukey filtering")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--by", nargs="+", choices=["class", "provenance"], default=["provenance", "class"])
    p.add_argument("--out", required=True)
    common(p, seed=False)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("export-viz", help="Projected coordinates and centroids as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    common(p, seed=False)
    p.set_defaults(handler=cmd_export_viz)

    p = sub.add_parser("stats-compare", help="Kruskal-Wallis test on files of numbers")
    p.add_argument("samples", nargs="+")
    p.add_argument("--alpha", type=float)
    p.add_argument("--exact", action="store_true", help="Permutation p-value (small samples)")
    p.set_defaults(handler=cmd_stats_compare)

    p = sub.add_parser("synth", help="Write synthetic B/C/M scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_synth)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level, args.log_file)
        if not getattr(args, "handler", None):
            raise UsageError("no command given; see --help")
        config.print_config_status()
        return args.handler(args)
    except UsageError as e:
        logger.error(f"Usage error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (M3GPError, np.linalg.LinAlgError) as e:
        logger.error(f"Data error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == '__main__':
    sys.exit(main())
