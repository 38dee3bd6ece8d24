#!/usr/bin/env python3
"""
Fusion lab command line: datagen, train, eval, sample, reconstruct, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 acceptance-threshold failure.
"""
import argparse
import glob
import logging
import os
import shutil
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv

import results_db
from acceptance_check import AcceptanceChecker
from checkpoints import load_checkpoint, model_kind
from config import TrainConfig, config_help_text, resolve_config, write_resolved_config
from dataset_generator import SPLITS, DatasetGenerator
from errors import AcceptanceFailure, ConfigError, FusionLabError, ReportError
from evaluator import (ARCHITECTURES, K_VALUES, EvalReport, aggregate_runs, collect_grid_samples,
                       load_samples_npz, results_table, table_to_csv, table_to_markdown)
from grid_renderer import figure_rows, render_grid, save_grid
from trainer import (ABLATION_STUDIES, SAMPLES_NAME, ablation_cells, ablation_cell_dir, ablation_label,
                     arch_dirname, eval_dataset, evaluate_checkpoint, find_checkpoints, manifest_paths,
                     run_ablation, run_experiment, write_aggregate, ArchitectureResult)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

RUN_HISTORY_LIMIT = 50


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)


def show_progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


def load_config(args) -> TrainConfig:
    extra = {'seed': args.seed}
    if args.limit is not None and args.command in ('train', 'eval', 'ablate'):
        extra.update({'train_limit': args.limit, 'eval_limit': args.limit})
    cfg = resolve_config(args.config, args.set or [], extra)
    write_resolved_config(cfg, args.out)
    return cfg


def write_text(path: str, text: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path


def write_table(rows: List[List[str]], stem: str) -> None:
    write_text(stem + '.csv', table_to_csv(rows))
    write_text(stem + '.md', table_to_markdown(rows))


# --- subcommands -----------------------------------------------------------

def cmd_datagen(args) -> int:
    cfg = load_config(args)
    raw_root = cfg.resolved_raw_root()
    if not os.path.isdir(raw_root):
        raise ConfigError(f"Raw dataset directory does not exist: {raw_root}")
    data_dir = cfg.resolved_data_dir(args.out)
    generator = DatasetGenerator(cfg.dataset, raw_root, cfg.seed, cfg.mask_config(), cfg.occlusion_config())
    splits = [args.split] if args.split else list(SPLITS)
    for split in splits:
        path = generator.generate(split, os.path.join(data_dir, split), args.limit, workers=cfg.workers)
        print(f"✅ {cfg.dataset}/{split}: {path}")
    if generator.skipped:
        logger.warning(f"⚠️ {generator.skipped} items were skipped during generation")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    results = run_experiment(cfg, args.out, evaluate=not args.no_eval, show_progress=show_progress(args))
    aggregates = {arch: r.aggregate for arch, r in results.items() if r.aggregate is not None}
    if aggregates:
        print(table_to_markdown(results_table(aggregates, with_std=cfg.runs > 1)))
    for arch, result in results.items():
        for failure in result.failures:
            print(f"❌ {arch} {failure}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    _, _, eval_manifest = manifest_paths(cfg, args.out)
    paths = args.checkpoint or find_checkpoints(os.path.join(args.out, 'runs'))
    if not paths:
        raise ReportError(f"No checkpoints given and none found under {os.path.join(args.out, 'runs')}")
    test_set = eval_dataset(cfg, eval_manifest)

    per_arch: Dict[str, ArchitectureResult] = {}
    for path in paths:
        report = evaluate_checkpoint(path, cfg, test_set)
        per_arch.setdefault(report.architecture, ArchitectureResult(report.architecture)).reports.append(report)
        per_arch[report.architecture].checkpoints.append(path)

    for result in per_arch.values():
        result.aggregate, result.best = aggregate_runs(result.reports)
        write_aggregate(result, os.path.join(args.out, 'reports'))
    print(table_to_markdown(results_table({a: r.aggregate for a, r in per_arch.items()}, with_std=True)))
    return 0


def _grid_inputs(args, cfg: TrainConfig, reconstruct: bool) -> int:
    _, _, eval_manifest = manifest_paths(cfg, args.out)
    test_set = eval_dataset(cfg, eval_manifest)
    model, state = load_checkpoint(args.checkpoint, cfg.device)
    architecture = model_kind(model)
    k_values = [args.k] if args.k is not None else list(K_VALUES)
    folder = 'reconstructions' if reconstruct else 'samples'
    for k in k_values:
        grid = collect_grid_samples(model, test_set, cfg.grid_items, args.n_samples or cfg.grid_samples, k,
                                    device=cfg.device, seed=state.get('seed', cfg.seed), reconstruct=reconstruct)
        rows, labels = figure_rows(grid['inputs'], grid['targets'], {architecture: grid['samples']})
        path = os.path.join(args.out, folder, f"{arch_dirname(architecture)}_k{k}.png")
        save_grid(render_grid(rows, labels), path)
        print(f"✅ {path}")
    return 0


def cmd_sample(args) -> int:
    return _grid_inputs(args, load_config(args), reconstruct=False)


def cmd_reconstruct(args) -> int:
    return _grid_inputs(args, load_config(args), reconstruct=True)


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    modes = args.modes.split(',') if args.modes else None
    variants = args.variants.split(',') if args.variants else None
    reports = run_ablation(cfg, args.out, args.study, train=args.train, modes=modes, variants=variants,
                           show_progress=show_progress(args))
    if not reports:
        raise FusionLabError(f"no {args.study} ablation cell produced a report")

    cells = ablation_cells(args.study, modes, variants)
    order = [ablation_label(args.study, m, v) for m, v in cells]
    first = 'Posterior' if args.study == 'posterior' else 'Prior aggregation'
    rows = results_table(reports, with_std=cfg.runs > 1, order=order, first_column=first)
    stem = os.path.join(args.out, 'ablation', args.study)
    write_table(rows, stem)

    # one figure comparing the cells at the largest context count
    samples, grid = {}, None
    for mode, variant in cells:
        path = os.path.join(ablation_cell_dir(args.out, mode, variant), 'runs', 'fusionvae', 'run0', SAMPLES_NAME)
        if os.path.exists(path):
            grid = load_samples_npz(path)
            samples[ablation_label(args.study, mode, variant)] = grid[max(grid)]['samples']
    if samples:
        k = max(grid)
        rows_img, labels = figure_rows(grid[k]['inputs'], grid[k]['targets'], samples)
        save_grid(render_grid(rows_img, labels), stem + f"_k{k}.png")
    print(table_to_markdown(rows))
    return 0


def _read_report(path: str) -> EvalReport:
    with open(path, encoding='utf-8') as f:
        return EvalReport.from_json(f.read())


def _cell(value: Optional[float]) -> str:
    return '-' if value is None else f"{value:.4f}"


def run_history_rows(input_dir: str, dataset: str) -> Optional[List[List[str]]]:
    """Recorded runs of a dataset from the run index, newest first; None when there is no index"""
    has_sqlite = os.path.exists(os.path.join(input_dir, results_db.DB_FILENAME))
    if not has_sqlite and not os.environ.get('FVLAB_DATABASE_URL'):
        return None
    results_db.init_database(fallback_dir=input_dir)
    history = results_db.get_run_history(dataset, limit=RUN_HISTORY_LIMIT)
    if not history:
        return None
    rows = [['Architecture', 'Run', 'Seed', 'Status', 'NLL avg', 'MSE-min avg']]
    for run in history:
        avg = run['metrics'].get('avg', {})
        rows.append([run['architecture'], str(run['run_idx']), str(run['seed']), run['status'],
                     _cell(avg.get('nll_bpd')), _cell(avg.get('mse_min'))])
    return rows


def cmd_report(args) -> int:
    input_dir = args.input or args.out
    reports_dir = os.path.join(input_dir, 'reports')
    aggregates, best = {}, {}
    for arch in ARCHITECTURES:
        name = arch_dirname(arch)
        path = os.path.join(reports_dir, f"{name}.json")
        if os.path.exists(path):
            aggregates[arch] = _read_report(path)
            best_path = os.path.join(reports_dir, f"{name}_best.json")
            best[arch] = _read_report(best_path) if os.path.exists(best_path) else aggregates[arch]
    if not aggregates:
        raise ReportError(f"No evaluation reports under {reports_dir}")
    datasets = {r.dataset for r in aggregates.values()}
    if len(datasets) > 1:
        raise ReportError(f"Reports mix datasets: {sorted(datasets)}")

    grids = {}
    for arch in aggregates:
        found = sorted(glob.glob(os.path.join(input_dir, 'runs', arch_dirname(arch), 'run*', SAMPLES_NAME)))
        if found:
            grids[arch] = load_samples_npz(found[0])
    history = run_history_rows(input_dir, datasets.pop())

    # the bundle is assembled aside and swapped in whole
    bundle = os.path.join(args.out, 'report')
    staging = bundle + '.tmp'
    shutil.rmtree(staging, ignore_errors=True)
    write_table(results_table(aggregates, with_std=True), os.path.join(staging, 'table_mean_std'))
    write_table(results_table(best), os.path.join(staging, 'table_best_run'))
    if history:
        write_table(history, os.path.join(staging, 'run_history'))
    if grids:
        reference = next(iter(grids.values()))
        for k in sorted(reference):
            samples = {arch: g[k]['samples'] for arch, g in grids.items() if k in g}
            rows, labels = figure_rows(reference[k]['inputs'], reference[k]['targets'], samples)
            save_grid(render_grid(rows, labels), os.path.join(staging, f"grid_k{k}.png"))
    if os.path.isdir(bundle):
        shutil.rmtree(bundle)
    os.replace(staging, bundle)
    print(table_to_markdown(results_table(aggregates, with_std=True)))

    if args.check_acceptance:
        checker = AcceptanceChecker(reports_dir, seed=args.seed or 0)
        if not checker.run_all_tests():
            raise AcceptanceFailure(f"acceptance checks failed: {', '.join(checker.failures)}")
    return 0


COMMANDS = {
    'datagen': (cmd_datagen, "Generate a fusion dataset with fixed corruptions"),
    'train': (cmd_train, "Train (and evaluate) the configured architectures"),
    'eval': (cmd_eval, "Evaluate checkpoints: NLL in BPD and MSE-min per context count"),
    'sample': (cmd_sample, "Write sample grids from the conditional prior"),
    'reconstruct': (cmd_reconstruct, "Write reconstructions with the target given as input"),
    'ablate': (cmd_ablate, "Posterior or prior-aggregation ablation grid"),
    'report': (cmd_report, "Tables and figures from evaluation outputs"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="Flat KEY=value config file")
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help="Override a config key (repeatable)")
    common.add_argument('--out', default=os.environ.get('FVLAB_OUT', 'outputs'), help="Output directory")
    common.add_argument('--seed', type=int, default=None, help="Master seed (overrides the config)")
    common.add_argument('--limit', type=int, default=None, help="Use only the first N samples")
    common.add_argument('-v', '--verbose', action='store_true', help="Debug logging")
    common.add_argument('--quiet', action='store_true', help="Warnings only, no progress bars")

    parser = argparse.ArgumentParser(prog='fvlab', description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest='command', required=True)
    subparsers = {}
    for name, (_, help_text) in COMMANDS.items():
        subparsers[name] = sub.add_parser(name, parents=[common], help=help_text, description=help_text,
                                          epilog=config_help_text(),
                                          formatter_class=argparse.RawDescriptionHelpFormatter)

    subparsers['datagen'].add_argument('--split', choices=SPLITS, help="Generate one split only")
    subparsers['train'].add_argument('--no-eval', action='store_true', help="Skip evaluation after training")
    subparsers['eval'].add_argument('--checkpoint', nargs='+', help="Checkpoints (default: all under <out>/runs)")
    for name in ('sample', 'reconstruct'):
        subparsers[name].add_argument('--checkpoint', required=True, help="Checkpoint to draw from")
        subparsers[name].add_argument('--k', type=int, choices=K_VALUES, help="Context count (default: all)")
        subparsers[name].add_argument('--n-samples', type=int, default=None, help="Samples per row")
    subparsers['ablate'].add_argument('--study', choices=list(ABLATION_STUDIES), required=True)
    subparsers['ablate'].add_argument('--train', action='store_true', help="Train the cells instead of loading them")
    subparsers['ablate'].add_argument('--modes', help="Comma-separated prior modes to keep")
    subparsers['ablate'].add_argument('--variants', help="Comma-separated posterior variants to keep")
    subparsers['report'].add_argument('--in', dest='input', help="Directory with reports/ and runs/ (default: --out)")
    subparsers['report'].add_argument('--check-acceptance', action='store_true',
                                      help="Run the acceptance checks; exit 4 on failure")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except FusionLabError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return e.exit_code
    except Exception:
        logger.exception(f"❌ {args.command} failed with an unexpected error")
        return 3


if __name__ == "__main__":
    sys.exit(main())
