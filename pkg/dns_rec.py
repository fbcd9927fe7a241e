# dns_rec.py
"""
Command-line entry point for the FLOPs-constrained architecture search of
sequential recommenders.

    python dns_rec.py run-all --config configs/toy_markov.conf --out runs/toy
    python dns_rec.py sweep-lambda 0.01,0.1,1.0 --config configs/toy_markov.conf --set sweep_seeds=3
"""
import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd

from artifacts import (
    append_results_ledger,
    atomic_write_text,
    load_checkpoint,
    load_descriptor,
    save_checkpoint,
    validate_compact_checkpoint,
    validate_supernet_checkpoint,
    write_descriptor,
    write_frame,
    write_json,
    write_manifest,
)
from compact_model import CompactModel, build_compact_model, retrain
from data_loader import dataset_statistics, leave_one_out_split, load_interactions, save_id_map, dataset_from_frame
from errors import CheckpointError, ConfigError, DivergenceError, DnsRecError
from flops_model import build_flops_table
from model_layers import make_mask_spec
from ranking_metrics import evaluate_model, popularity_baseline
from run_config import (
    RngStreams,
    content_hash,
    file_hash,
    format_config,
    resolve_config,
    supernet_config_from,
    synthetic_seed,
    train_config_from,
    with_overrides,
)
from search_engine import ArchChoice, search
from summary_generator import analyze_run, analyze_sweep
from supernet_controllers import Supernet, make_masks
from sweep_visualizations import plot_sweep, write_sweep_chart
from synthetic_data import generate_markov_interactions, write_interactions
from tensor_core import parameter, set_default_dtype

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

DESCRIPTOR_FILE = 'architecture.json'
SUPERNET_CHECKPOINT = 'supernet.ckpt'
COMPACT_DESCRIPTOR = 'compact.json'
COMPACT_CHECKPOINT = 'compact.ckpt'
LEDGER_FILE = 'results_ledger.csv'

DEFAULT_SWEEPS = {
    'sweep-lambda': ('lambda_', 'lambda', (0.01, 0.1, 1.0)),
    'sweep-gate-depth': ('gate_layers', 'gate layers', (0, 1, 2, 3, 4)),
    'sweep-learning-rate': ('learning_rate', 'learning rate', (0.0001, 0.0005, 0.001, 0.003, 0.005, 0.01)),
}
INTEGER_SWEEPS = {'gate_layers'}


def configure_logging(level):
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT, force=True)


def prepare_output_dir(cfg):
    """Create the run directory and echo the resolved config into it."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / 'resolved_config.conf', format_config(cfg))
    return out


def load_dataset(cfg):
    """Interactions from ``data_path`` or the synthetic generator.

    Returns tuple: (dataset, data sha256, synthetic frame or None)
    """
    if cfg.synthetic:
        frame = generate_markov_interactions(cfg.synthetic_users, cfg.synthetic_items, cfg.synthetic_min_len,
                                             cfg.synthetic_max_len, synthetic_seed(cfg.seed))
        data_hash = content_hash(frame.to_csv(sep='\t', header=False, index=False))
        return dataset_from_frame(frame), data_hash, frame
    if not cfg.data_path:
        raise ConfigError("'data_path' is required unless 'synthetic' is true")
    if not Path(cfg.data_path).exists():
        raise ConfigError(f"'data_path' does not exist: {cfg.data_path}")
    return load_interactions(cfg.data_path, cfg.data_format), file_hash(cfg.data_path), None


def run_id_for(cfg, data_hash):
    return content_hash(format_config(cfg), data_hash)[:16]


def _input_path(configured):
    return Path(configured) if configured else None


# ---------- STAGES ----------------------------------------------------------


def stage_prepare(cfg, out, ds, frame=None):
    split = leave_one_out_split(ds)
    save_id_map(ds, out / 'id_map.json')
    if frame is not None:
        write_interactions(frame, out / 'interactions.tsv')
    stats = dataset_statistics(ds)
    stats.update({'validation_examples': len(split.val_targets), 'test_examples': len(split.test_targets)})
    write_json(out / 'dataset_stats.json', stats)
    logger.info(f"Prepared {stats['users']} users, {stats['items']} items, {stats['interactions']} interactions")
    return split


def stage_search(cfg, out, ds, split):
    scfg = supernet_config_from(cfg, ds.num_items)
    result = search(scfg, split, train_config_from(cfg), RngStreams.from_seed(cfg.seed))
    descriptor = result.choice.to_descriptor(scfg, cfg.seed)
    write_descriptor(out / DESCRIPTOR_FILE, descriptor)
    write_frame(out / 'iteration_log.csv', result.log_frame())
    write_frame(out / 'search_epochs.csv', pd.DataFrame(result.epoch_history))
    write_frame(out / 'flops_table.csv', result.flops_table.to_frame())
    save_checkpoint(out / SUPERNET_CHECKPOINT, result.supernet.all_tensors())
    return descriptor


def _check_descriptor_matches(cfg, descriptor, num_items, gate_layers):
    expected = {
        'hidden_size': cfg.hidden_size,
        'inner_size': cfg.inner_size,
        'num_layers': cfg.num_layers,
        'num_heads': cfg.num_heads,
        'num_candidates': len(cfg.gamma_hidden),
        'max_seq_len': cfg.max_seq_len,
        'num_items': num_items,
        'gate_layers': gate_layers,
    }
    for key, value in expected.items():
        if descriptor[key] != value:
            raise CheckpointError(f"descriptor {key}={descriptor[key]} does not match the run ({value})")


def load_supernet(cfg, descriptor, tensors):
    scfg = supernet_config_from(cfg, descriptor['num_items'])
    weights = {name: parameter(array, name=name) for name, array in tensors.items() if not name.startswith('arch.')}
    arch = {name: parameter(array, name=name) for name, array in tensors.items() if name.startswith('arch.')}
    return Supernet(scfg, make_masks(scfg), weights, arch)


def stage_retrain(cfg, out, ds, split, descriptor_path=None, checkpoint_path=None):
    descriptor_path = descriptor_path or out / DESCRIPTOR_FILE
    checkpoint_path = checkpoint_path or out / SUPERNET_CHECKPOINT
    descriptor = load_descriptor(descriptor_path)
    tensors = load_checkpoint(checkpoint_path)
    _check_descriptor_matches(cfg, descriptor, ds.num_items, cfg.gate_layers)
    validate_supernet_checkpoint(descriptor, tensors)

    net = load_supernet(cfg, descriptor, tensors)
    choice = ArchChoice.from_descriptor(descriptor)
    streams = RngStreams.from_seed(cfg.seed)
    gate_layers = cfg.effective_retrain_gate_layers
    model = build_compact_model(net, choice, gate_layers=gate_layers, rng=streams.init)
    result = retrain(model, split, train_config_from(cfg), streams)

    compact = dict(descriptor, gate_layers=gate_layers, parameter_count=result.model.parameter_count())
    write_descriptor(out / COMPACT_DESCRIPTOR, compact)
    save_checkpoint(out / COMPACT_CHECKPOINT, result.model.params)
    write_frame(out / 'retrain_log.csv', pd.DataFrame(result.epoch_history, columns=['epoch', 'loss', 'val_recall']))
    write_json(out / 'metrics_val.json', {'initial': result.initial_val.to_dict(), 'best': result.best_val.to_dict()})
    write_json(out / 'metrics_test.json', result.test.to_dict())
    return result


def load_compact_model(cfg, descriptor, tensors):
    mask = make_mask_spec(descriptor['gamma'], descriptor['gamma_prime'], descriptor['hidden_size'],
                          descriptor['inner_size'], descriptor['num_heads'])
    choice = ArchChoice.from_descriptor(descriptor)
    if (mask.d_eff, mask.D_eff) != (choice.d_eff, choice.D_eff):
        raise CheckpointError("descriptor widths do not match its pruning intensities")
    scfg = supernet_config_from(cfg, descriptor['num_items'])
    params = {name: parameter(array, name=name) for name, array in tensors.items()}
    return CompactModel(choice, mask, params, scfg.block_settings(descriptor['gate_layers']), descriptor['max_seq_len'])


def stage_evaluate(cfg, out, ds, split, run_id, descriptor_path=None, checkpoint_path=None):
    descriptor_path = descriptor_path or out / COMPACT_DESCRIPTOR
    checkpoint_path = checkpoint_path or out / COMPACT_CHECKPOINT
    descriptor = load_descriptor(descriptor_path)
    tensors = load_checkpoint(checkpoint_path)
    _check_descriptor_matches(cfg, descriptor, ds.num_items, cfg.effective_retrain_gate_layers)
    validate_compact_checkpoint(descriptor, tensors, descriptor['gate_layers'])
    model = load_compact_model(cfg, descriptor, tensors)

    k = cfg.top_k
    report = evaluate_model(model, split, k, 'test', cfg.max_seq_len, cfg.retrain_batch_size, cfg.exclude_history)
    baseline = evaluate_model(popularity_baseline(split), split, k, 'test', cfg.max_seq_len,
                              cfg.retrain_batch_size, cfg.exclude_history)
    reports = {'model': report.to_dict(), 'popularity': baseline.to_dict()}
    write_json(out / 'metrics_report.json', reports)
    rows = [
        {'run_id': run_id, 'model': name, 'split': 'test', 'k': k, 'recall_at_k': r.recall_at_k,
         'mrr_at_k': r.mrr_at_k, 'ndcg_at_k': r.ndcg_at_k, 'count': r.count,
         'flops': descriptor['flops'] if name == 'dns_rec' else 0, 'seed': cfg.seed}
        for name, r in (('dns_rec', report), ('popularity', baseline))
    ]
    append_results_ledger(out / LEDGER_FILE, rows)
    atomic_write_text(out / 'run_summary.txt', analyze_run(report, baseline, ds.num_items, descriptor['flops']))
    print(json.dumps(reports, indent=2, sort_keys=True))
    return report, baseline, descriptor


# ---------- COMMANDS ----------------------------------------------------------


def _start(cfg):
    started = time.time()
    out = prepare_output_dir(cfg)
    ds, data_hash, frame = load_dataset(cfg)
    return started, out, ds, data_hash, frame


def _finish(cfg, out, command, data_hash, started):
    config_hash = content_hash(format_config(cfg))
    write_manifest(out, command, cfg.seed, run_id_for(cfg, data_hash), config_hash, data_hash, started)


def cmd_prepare_data(cfg, args):
    started, out, ds, data_hash, frame = _start(cfg)
    stage_prepare(cfg, out, ds, frame)
    _finish(cfg, out, 'prepare-data', data_hash, started)
    return 0


def cmd_search(cfg, args):
    started, out, ds, data_hash, _ = _start(cfg)
    descriptor = stage_search(cfg, out, ds, leave_one_out_split(ds))
    print(json.dumps(descriptor, indent=2, sort_keys=True))
    _finish(cfg, out, 'search', data_hash, started)
    return 0


def cmd_retrain(cfg, args):
    started, out, ds, data_hash, _ = _start(cfg)
    result = stage_retrain(cfg, out, ds, leave_one_out_split(ds),
                           _input_path(cfg.descriptor_path), _input_path(cfg.checkpoint_path))
    print(result.test.to_json())
    _finish(cfg, out, 'retrain', data_hash, started)
    return 0


def cmd_evaluate(cfg, args):
    started, out, ds, data_hash, _ = _start(cfg)
    stage_evaluate(cfg, out, ds, leave_one_out_split(ds), run_id_for(cfg, data_hash),
                   _input_path(cfg.descriptor_path), _input_path(cfg.checkpoint_path))
    _finish(cfg, out, 'evaluate', data_hash, started)
    return 0


def cmd_flops_report(cfg, args):
    started = time.time()
    out = prepare_output_dir(cfg)
    # The vocabulary size does not enter the FLOPs count.
    table = build_flops_table(supernet_config_from(cfg, num_items=1))
    frame = table.to_frame()
    write_frame(out / 'flops_table.csv', frame)
    print(frame.to_csv(index=False), end='')
    _finish(cfg, out, 'flops-report', '', started)
    return 0


def run_all(cfg):
    """Prepare, search, retrain and evaluate in one run directory. Returns a summary row."""
    started, out, ds, data_hash, frame = _start(cfg)
    split = stage_prepare(cfg, out, ds, frame)
    stage_search(cfg, out, ds, split)
    retrained = stage_retrain(cfg, out, ds, split)
    report, baseline, descriptor = stage_evaluate(cfg, out, ds, split, run_id_for(cfg, data_hash))
    _finish(cfg, out, 'run-all', data_hash, started)
    return {
        'seed': cfg.seed,
        'candidate_index': descriptor['candidate_index'],
        'gamma': descriptor['gamma'],
        'gamma_prime': descriptor['gamma_prime'],
        'layers': descriptor['layers'],
        'flops': descriptor['flops'],
        'parameter_count': descriptor['parameter_count'],
        'val_recall': retrained.best_val.recall_at_k,
        'test_recall': report.recall_at_k,
        'test_mrr': report.mrr_at_k,
        'test_ndcg': report.ndcg_at_k,
        'popularity_recall': baseline.recall_at_k,
    }


def cmd_run_all(cfg, args):
    run_all(cfg)
    return 0


def _sweep_point(point):
    cfg, setting = point
    configure_logging(cfg.log_level)
    set_default_dtype(cfg.precision)
    row = run_all(cfg)
    row['setting'] = setting
    return row


def sweep_values_for(command, cfg, raw_values):
    field_name, _, defaults = DEFAULT_SWEEPS[command]
    if raw_values:
        try:
            values = tuple(float(v) for v in raw_values.split(',') if v.strip())
        except ValueError:
            raise ConfigError(f"sweep values must be a comma-separated list of numbers, got '{raw_values}'") from None
    else:
        values = cfg.sweep_values or defaults
    if field_name in INTEGER_SWEEPS:
        if any(v != int(v) for v in values):
            raise ConfigError(f"{command} takes integer values, got {values}")
        values = tuple(int(v) for v in values)
    if not values:
        raise ConfigError(f"{command} needs at least one value")
    return values


def run_sweep(cfg, command, raw_values=None):
    """One run-all per (value, seed) in disjoint directories, then a CSV, a chart and a text summary."""
    field_name, label, _ = DEFAULT_SWEEPS[command]
    values = sweep_values_for(command, cfg, raw_values)
    root = prepare_output_dir(cfg)
    started = time.time()
    points = []
    for value in values:
        for offset in range(cfg.sweep_seeds):
            seed = cfg.seed + offset
            point_dir = root / f'{label.replace(" ", "_")}={value}' / f'seed={seed}'
            point_cfg = with_overrides(cfg, **{field_name: value, 'seed': seed, 'out_dir': str(point_dir)})
            points.append((point_cfg, value))

    if cfg.parallel:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_sweep_point, points))
    else:
        rows = [_sweep_point(point) for point in points]

    results = pd.DataFrame(rows)
    if field_name == 'gate_layers':
        # Cost of one fixed architecture (first candidate, full depth) per gate depth.
        base = supernet_config_from(cfg, num_items=1)
        results['fixed_arch_flops'] = [
            build_flops_table(base, gate_layers=int(v)).path_flops(0, cfg.num_layers) for v in results['setting']
        ]
    results = results[['setting'] + [c for c in results.columns if c != 'setting']]
    write_frame(root / 'sweep_results.csv', results)
    write_sweep_chart(plot_sweep(results, 'setting', label, k=cfg.top_k), root / 'sweep_chart.html')
    summary = analyze_sweep(results, 'setting', label, k=cfg.top_k)
    atomic_write_text(root / 'sweep_summary.txt', summary)
    print(summary, end='')
    _finish(cfg, root, command, '', started)
    return results


def cmd_sweep(cfg, args):
    run_sweep(cfg, args.command, args.values)
    return 0


COMMANDS = {
    'prepare-data': (cmd_prepare_data, "Load interactions, build the leave-one-out split and write statistics"),
    'search': (cmd_search, "Run the bilevel architecture search and write descriptor, log and checkpoint"),
    'retrain': (cmd_retrain, "Rebuild the selected architecture from a search checkpoint and retrain it"),
    'evaluate': (cmd_evaluate, "Evaluate a retrained model and the popularity baseline on the test targets"),
    'flops-report': (cmd_flops_report, "Write the per-candidate, per-layer FLOPs table as CSV"),
    'run-all': (cmd_run_all, "prepare-data, search, retrain and evaluate in one run directory"),
    'sweep-lambda': (cmd_sweep, "Repeat run-all across resource-penalty weights"),
    'sweep-gate-depth': (cmd_sweep, "Repeat run-all across data-aware gate depths"),
    'sweep-learning-rate': (cmd_sweep, "Repeat run-all across learning rates"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="flat 'key = value' config file")
    common.add_argument('--out', help="output directory (config key out_dir)")
    common.add_argument('--seed', type=int, help="master seed for every random stream")
    common.add_argument('--lambda', dest='lambda_', type=float, help="weight of the resource penalty")
    common.add_argument('--data', help="interaction file (config key data_path)")
    common.add_argument('--descriptor', help="architecture descriptor to read (config key descriptor_path)")
    common.add_argument('--checkpoint', help="checkpoint to read (config key checkpoint_path)")
    common.add_argument('--log-level', help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help="override any config key; repeatable")

    parser = argparse.ArgumentParser(
        prog='dns_rec',
        description="Differentiable, FLOPs-constrained architecture search for sequential recommendation.",
    )
    subparsers = parser.add_subparsers(dest='command', required=True, metavar='command')
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text, description=help_text)
        if name.startswith('sweep-'):
            sub.add_argument('values', nargs='?', help="comma-separated values (default: sweep_values or built-in)")
    return parser


def config_from_args(args):
    overrides = {}
    for item in args.set:
        if '=' not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got '{item}'")
        key, value = item.split('=', 1)
        overrides[key.strip()] = value.strip()
    flags = {
        'out_dir': args.out,
        'seed': args.seed,
        'lambda': args.lambda_,
        'data_path': args.data,
        'descriptor_path': args.descriptor,
        'checkpoint_path': args.checkpoint,
        'log_level': args.log_level,
    }
    overrides.update({key: value for key, value in flags.items() if value is not None})
    return resolve_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        cfg = config_from_args(args)
        configure_logging(cfg.log_level)
        set_default_dtype(cfg.precision)
        handler = COMMANDS[args.command][0]
        return handler(cfg, args)
    except DivergenceError as e:
        if cfg is not None:
            write_json(Path(cfg.out_dir) / 'divergence_dump.json', e.state)
        print(f"error: {str(e)}", file=sys.stderr)
        return 1
    except DnsRecError as e:
        print(f"error: {str(e)}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception(f"Unexpected error: {str(e)}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
