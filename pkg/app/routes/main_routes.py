import argparse
import glob
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from functools import partial

import pandas as pd

from app.services.bcd_service import solve_bcd
from app.services.ckm_service import (
    VARIANT_ALIASES, build_ckm, evaluate_ckm, load_ckm, mse_reduction, resolve_variant, save_ckm,
    timing_metrics, train_ckm,
)
from app.services.dataset_service import (
    concat, denormalize, generate_dataset, normalize, read_csv, split, write_csv,
)
from app.services.geometry_service import (
    load_environment, rasterize_heights, sample_environment, save_environment,
)
from app.services.mdp_service import CkmOracle, LosOracle, TruthOracle, UavMdp, run_episode
from app.services.ppo_service import (
    RandomPolicy, evaluate_policy, evaluate_random, load_policy, policy_controller, save_policy, train_ppo,
)
from app.services.report_service import (
    compare_methods, learning_curve_svg, pairplot_svg, radar_svg, radar_table, trajectories_svg,
)
from app.services.wgan_service import generate_samples, quality_report, save_generator, train_wgan
from app.utils.errors import ConfigError, NonFiniteError, PipelineError
from app.utils.file_utils import ensure_parent, read_json, require_input, write_json
from app.utils.init_utils import initialize_ml_dependencies, stage_seed
from config.config import CHECKPOINT_EXTENSIONS, PIPELINE_OUTPUT_DIR
from config.run_config import (
    format_error_response, format_success_response, load_run_config, save_run_config,
)

logger = logging.getLogger(__name__)


def arg(*flags, **kwargs):
    return flags, kwargs


class CommandBlueprint:
    """Registry of pipeline subcommands, dispatched through one argparse parser."""

    def __init__(self, name, description=None):
        self.name = name
        self.description = description
        self.commands = {}

    def route(self, command, help=None, arguments=()):
        def decorator(handler):
            self.commands[command] = (handler, help, tuple(arguments))
            return handler
        return decorator

    def parser(self):
        parser = argparse.ArgumentParser(prog=self.name, description=self.description)
        sub = parser.add_subparsers(dest='command', required=True)
        for command, (_, help_text, arguments) in self.commands.items():
            p = sub.add_parser(command, help=help_text)
            p.add_argument('--config', default=None, help='JSON run config (defaults overridable)')
            p.add_argument('--seed', type=int, default=None, help='global seed override')
            p.add_argument('--out', default=None, help='output directory')
            for flags, kwargs in arguments:
                p.add_argument(*flags, **kwargs)
        return parser

    def run(self, argv=None):
        """Parse argv, run one stage and return the process exit code."""
        try:
            args = self.parser().parse_args(argv)
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else 2

        handler = self.commands[args.command][0]
        try:
            cfg = load_run_config(args.config, seed=args.seed, output_dir=args.out)
            initialize_ml_dependencies(cfg.seed)
            artifacts = Artifacts(cfg.output_dir or PIPELINE_OUTPUT_DIR)
            logger.info(f"Running {args.command} (seed={cfg.seed}, out={artifacts.root})")
            result = handler(cfg, artifacts, args)
            print(json.dumps(format_success_response(result), indent=2, sort_keys=True))
            return 0
        except PipelineError as e:
            logger.error(f"{args.command} failed [{e.code}]: {e.message}")
            print(json.dumps(format_error_response(e.message, e.code)), file=sys.stderr)
            return 1
        except Exception as e:
            logger.error(f"Unexpected error in {args.command}: {str(e)}", exc_info=True)
            print(json.dumps(format_error_response(str(e), PipelineError.code)), file=sys.stderr)
            return 1


class Artifacts:
    """Fixed file layout under the output directory. Paths are resolved only; writers call output()."""

    def __init__(self, root):
        self.root = root

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @staticmethod
    def output(path):
        return ensure_parent(path)

    @property
    def config(self):
        return self.path('config.json')

    @property
    def environment(self):
        return self.path('environment.json')

    def data(self, name):
        return self.path('data', f'{name}.csv')

    def model(self, tag, suffix='.pt'):
        return self.path('models', f'{tag}{suffix}')

    def policy_dir(self, name):
        return self.path('policies', name)

    def trace(self, name):
        return self.path('traces', f'{name}.csv')

    def report(self, name):
        return self.path('report', name)


main = CommandBlueprint('uav-ckm', 'CKM construction and UAV trajectory planning pipeline')


def load_scene(artifacts, cfg):
    env, grid = load_environment(require_input(artifacts.environment, {'json'}))
    if grid is None:
        grid = rasterize_heights(env, *cfg.environment.grid_cells)
    return env, grid


def make_oracle(spec, env, cfg, seed=0):
    """'los' | 'truth' | 'ckm:<checkpoint>' -> channel oracle."""
    if spec == 'los':
        return LosOracle(cfg.channel)
    if spec == 'truth':
        return TruthOracle(env, cfg.channel, seed)
    if spec.startswith('ckm:'):
        return CkmOracle(load_ckm(require_input(spec[4:], CHECKPOINT_EXTENSIONS)))
    raise ConfigError(f"unknown oracle '{spec}', expected los, truth or ckm:<checkpoint>")


def mdp_factory(env, cfg):
    return partial(UavMdp, env, cfg.episode, cfg.link)


def write_trace(traj, artifacts, name):
    path = artifacts.output(artifacts.trace(name))
    traj.to_frame().to_csv(path, index=False, float_format='%.17g')
    summary_path = write_json(traj.summary(), artifacts.path('traces', f'{name}_summary.json'))
    return path, summary_path


@main.route('gen-env', help='sample a scene and its height raster')
def gen_env(cfg, artifacts, args):
    env = sample_environment(stage_seed(cfg.seed, 'gen-env'), cfg.environment)
    grid = rasterize_heights(env, *cfg.environment.grid_cells)
    save_environment(env, artifacts.output(artifacts.environment), grid)
    save_run_config(cfg, artifacts.output(artifacts.config))
    return {'environment': artifacts.environment, 'config': artifacts.config}


@main.route('gen-data', help='simulate channel measurements and split them', arguments=[
    arg('--rows', type=int, default=None, help='number of real rows (overrides dataset.n_real)'),
])
def gen_data(cfg, artifacts, args):
    env, _ = load_scene(artifacts, cfg)
    n = args.rows or cfg.dataset.n_real
    seed = stage_seed(cfg.seed, 'gen-data')
    raw = generate_dataset(env, cfg.channel, n, seed)
    train_raw, val_raw = split(raw, cfg.dataset.train_fraction, seed)
    train, stats = normalize(train_raw)
    val, _ = normalize(val_raw, stats)
    return {
        'real': write_csv(raw, artifacts.output(artifacts.data('real'))),
        'train': write_csv(train, artifacts.output(artifacts.data('train'))),
        'val': write_csv(val, artifacts.output(artifacts.data('val'))),
        'rows': {'real': len(raw), 'train': len(train), 'val': len(val)},
    }


@main.route('augment', help='train the WGAN and write synthetic rows')
def augment(cfg, artifacts, args):
    train = read_csv(require_input(artifacts.data('train'), {'csv'}))
    wgan_cfg = replace(cfg.wgan, seed=stage_seed(cfg.seed, 'augment'))
    generator, history = train_wgan(train, wgan_cfg)
    n = int(round(cfg.dataset.augment_ratio * len(train)))
    synth_raw, shortfall = generate_samples(generator, n, train.stats, stage_seed(cfg.seed, 'augment', 1), wgan_cfg)
    synth, _ = normalize(synth_raw, train.stats)

    history_path = artifacts.output(artifacts.path('data', 'wgan_history.csv'))
    pd.DataFrame(history).to_csv(history_path, index=False, float_format='%.17g')
    report = quality_report(denormalize(train), synth_raw, train.stats)
    report['shortfall'] = shortfall
    return {
        'synthetic': write_csv(synth, artifacts.output(artifacts.data('synthetic'))),
        'augmented_train': write_csv(concat(train, synth), artifacts.output(artifacts.data('augmented_train'))),
        'generator': save_generator(generator, artifacts.output(artifacts.model('generator')), wgan_cfg),
        'history': history_path,
        'quality': write_json(report, artifacts.path('data', 'wgan_quality.json')),
        'shortfall': shortfall,
    }


@main.route('train-ckm', help='train a CKM variant', arguments=[
    arg('--variant', default='kd', help='plain | kf | kd'),
    arg('--augmented', action='store_true', help='train on real plus synthetic rows'),
    arg('--tag', default=None, help='model name (default <variant>[-aug])'),
])
def train_ckm_command(cfg, artifacts, args):
    variant = resolve_variant(args.variant)
    short = {v: k for k, v in VARIANT_ALIASES.items()}
    tag = args.tag or f"{short[variant]}{'-aug' if args.augmented else ''}"
    train = read_csv(require_input(artifacts.data('augmented_train' if args.augmented else 'train'), {'csv'}))
    val = read_csv(require_input(artifacts.data('val'), {'csv'}))
    env, grid = load_scene(artifacts, cfg)

    model = build_ckm(variant, cfg.ckm_arch, cfg.channel, train.stats, grid, env.h_min,
                      seed=stage_seed(cfg.seed, 'train-ckm'))
    train_cfg = replace(cfg.ckm_train, seed=stage_seed(cfg.seed, 'train-ckm', 1))
    started = time.perf_counter()
    model, history = train_ckm(model, train, val, train_cfg)
    elapsed = time.perf_counter() - started

    metrics = {
        'model': tag,
        'variant': variant,
        'augmented': bool(args.augmented),
        'train_rows': len(train),
        **evaluate_ckm(model, val),
        **timing_metrics(model, val, elapsed),
    }
    require_finite(metrics, tag)
    history_path = artifacts.output(artifacts.model(tag, '_history.csv'))
    pd.DataFrame(history).to_csv(history_path, index=False, float_format='%.17g')
    return {
        'checkpoint': save_ckm(model, artifacts.output(artifacts.model(tag))),
        'history': history_path,
        'metrics': write_json(metrics, artifacts.model(tag, '_metrics.json')),
        'val_mse_db2': metrics['mse'],
    }


@main.route('eval-ckm', help='evaluate a CKM checkpoint on a normalized dataset', arguments=[
    arg('--model', required=True, help='CKM checkpoint'),
    arg('--data', default=None, help='normalized CSV (default: validation split)'),
])
def eval_ckm(cfg, artifacts, args):
    model = load_ckm(require_input(args.model, CHECKPOINT_EXTENSIONS))
    data = read_csv(require_input(args.data or artifacts.data('val'), {'csv'}))
    metrics = {**evaluate_ckm(model, data), **timing_metrics(model, data, 0.0)}
    metrics.pop('train_seconds')
    require_finite(metrics, args.model)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    return {'metrics': write_json(metrics, artifacts.model(stem, '_eval.json')), **metrics}


@main.route('train-ppo', help='train a PPO planner against a channel oracle', arguments=[
    arg('--oracle', default='los', help='los | truth | ckm:<checkpoint>'),
    arg('--name', default=None, help='policy name (default: oracle kind)'),
])
def train_ppo_command(cfg, artifacts, args):
    env, _ = load_scene(artifacts, cfg)
    seed = stage_seed(cfg.seed, 'train-ppo')
    oracle = make_oracle(args.oracle, env, cfg, seed)
    name = args.name or args.oracle.split(':')[0]
    factory = mdp_factory(env, cfg)

    result = train_ppo(factory, oracle, replace(cfg.ppo, seed=seed))
    folder = artifacts.policy_dir(name)
    checkpoint = save_policy(result.policy, result.value, artifacts.output(os.path.join(folder, 'policy.pt')),
                             metadata={'oracle': args.oracle})
    curve_path = os.path.join(folder, 'learning_curve.csv')
    pd.DataFrame(result.curve).to_csv(curve_path, index=False, float_format='%.17g')

    eval_oracle = make_oracle(cfg.compare.eval_oracle, env, cfg)
    eval_seed = stage_seed(cfg.seed, 'eval')
    evaluation = evaluate_policy(result.policy, factory, eval_oracle, cfg.compare.n_seeds, eval_seed)
    baseline = evaluate_random(factory, eval_oracle, cfg.compare.n_seeds, eval_seed)
    evaluation['random_baseline'] = {k: v for k, v in baseline.items() if k != 'episodes'}
    return {
        'policy': checkpoint,
        'learning_curve': curve_path,
        'evaluation': write_json(evaluation, os.path.join(folder, 'evaluation.json')),
        'success_rate': evaluation['success_rate'],
        'mean_flight_time': evaluation['mean_flight_time'],
    }


def bcd_planner(env, cfg, variant, oracle):
    def plan(seed):
        traj = solve_bcd(env, replace(cfg.bcd, seed=seed, variant=variant), cfg.link, cfg.channel, cfg.episode,
                         eval_oracle=oracle)
        episode = cfg.episode if variant == 'fixed-start' else replace(cfg.episode, start=tuple(traj.start))
        return traj, episode, cfg.link
    return plan


def controller_planner(env, cfg, oracle, make_controller):
    def plan(seed):
        mdp = UavMdp(env, cfg.episode, cfg.link, oracle)
        return run_episode(mdp, make_controller(mdp, seed), seed=seed), cfg.episode, cfg.link
    return plan


@main.route('plan', help='plan one trajectory and write its trace', arguments=[
    arg('--method', choices=('bcd', 'ppo', 'random'), default='bcd'),
    arg('--loose', action='store_true', help='BCD with a free start point'),
    arg('--policy', default=None, help='PPO checkpoint (default: policies/los/policy.pt)'),
    arg('--oracle', default=None, help='scoring oracle (default: compare.eval_oracle)'),
])
def plan(cfg, artifacts, args):
    env, _ = load_scene(artifacts, cfg)
    seed = stage_seed(cfg.seed, 'plan')
    oracle = make_oracle(args.oracle or cfg.compare.eval_oracle, env, cfg, seed)
    if args.method == 'bcd':
        variant = 'loose-start' if args.loose else 'fixed-start'
        label = 'bcd-loose' if args.loose else 'bcd'
        traj, _, _ = bcd_planner(env, cfg, variant, oracle)(seed)
    elif args.method == 'ppo':
        policy, _, _ = load_policy(require_input(
            args.policy or os.path.join(artifacts.policy_dir('los'), 'policy.pt'), CHECKPOINT_EXTENSIONS
        ))
        label = 'ppo'
        traj, _, _ = controller_planner(env, cfg, oracle, lambda m, s: policy_controller(policy, True, s))(seed)
    else:
        label = 'random'
        traj, _, _ = controller_planner(
            env, cfg, oracle, lambda m, s: RandomPolicy(m.action_low, m.action_high, s)
        )(seed)
    trace, summary = write_trace(traj, artifacts, label)
    return {'trace': trace, 'summary': summary, **traj.summary()}


@main.route('compare', help='score every planner over n seeds', arguments=[
    arg('--los-policy', default=None, help='PPO checkpoint trained on the LoS model'),
    arg('--ckm-policy', default=None, help='PPO checkpoint trained on the KD-CKM'),
])
def compare(cfg, artifacts, args):
    env, _ = load_scene(artifacts, cfg)
    oracle = make_oracle(cfg.compare.eval_oracle, env, cfg)
    los_policy, _, _ = load_policy(require_input(
        args.los_policy or os.path.join(artifacts.policy_dir('los'), 'policy.pt'), CHECKPOINT_EXTENSIONS
    ))
    ckm_policy, _, _ = load_policy(require_input(
        args.ckm_policy or os.path.join(artifacts.policy_dir('ckm'), 'policy.pt'), CHECKPOINT_EXTENSIONS
    ))
    planners = {
        'los-BCD': bcd_planner(env, cfg, 'fixed-start', oracle),
        'los-BCD-loose': bcd_planner(env, cfg, 'loose-start', oracle),
        'los-PPO': controller_planner(env, cfg, oracle, lambda m, s: policy_controller(los_policy, True, s)),
        'KDCKM-PPO': controller_planner(env, cfg, oracle, lambda m, s: policy_controller(ckm_policy, True, s)),
        'random': controller_planner(env, cfg, oracle, lambda m, s: RandomPolicy(m.action_low, m.action_high, s)),
    }
    table, rows, first = compare_methods(
        planners, cfg.compare.n_seeds, lambda i: stage_seed(cfg.seed, 'compare', i)
    )
    table_path = artifacts.output(artifacts.path('comparison.csv'))
    table.to_csv(table_path, index=False, float_format='%.17g')
    runs_path = artifacts.output(artifacts.path('comparison_runs.csv'))
    pd.DataFrame(rows).to_csv(runs_path, index=False, float_format='%.17g')
    traces = {method: write_trace(traj, artifacts, f'compare_{method}')[0] for method, traj in first.items()}
    return {'comparison': table_path, 'runs': runs_path, 'traces': traces,
            'table': table.to_dict(orient='records')}


def require_finite(metrics, source):
    """Fail the stage if any numeric metric is NaN or infinite."""
    bad = sorted(
        k for k, v in metrics.items()
        if isinstance(v, (int, float)) and not isinstance(v, bool) and not math.isfinite(v)
    )
    if bad:
        raise NonFiniteError(f"non-finite metrics {bad} in {source}")
    return metrics


def ckm_radar_rows(metric_files):
    """One radar row per trained CKM; '-aug' models get their MSE reduction against the same-variant base."""
    metrics = {}
    for path in metric_files:
        m = require_finite(read_json(path), path)
        metrics[m['model']] = m
    rows = []
    for tag, m in sorted(metrics.items()):
        base = metrics.get(tag[:-4]) if tag.endswith('-aug') else None
        rows.append({
            'model': tag,
            'mse': m['mse'],
            'mape': m['mape'],
            'train_seconds': m['train_seconds'],
            'infer_seconds_per_1k': m['infer_seconds_per_1k'],
            'param_count': m['param_count'],
            'mse_reduction': mse_reduction(base['mse'], m['mse']) if base else 0.0,
        })
    return rows


@main.route('report', help='aggregate metrics into tables and SVG figures')
def report(cfg, artifacts, args):
    written = {}
    metric_files = sorted(glob.glob(os.path.join(artifacts.root, 'models', '*_metrics.json')))
    if metric_files:
        table = radar_table(ckm_radar_rows(metric_files))
        table_path = artifacts.output(artifacts.report('radar.csv'))
        table.to_csv(table_path, index=False, float_format='%.17g')
        written['radar'] = radar_svg(table, artifacts.report('radar.svg'))
        written['radar_table'] = table_path

    train_path = artifacts.data('train')
    synth_path = artifacts.data('synthetic')
    if os.path.exists(train_path) and os.path.exists(synth_path):
        written['pairplot'] = pairplot_svg(
            denormalize(read_csv(train_path)), denormalize(read_csv(synth_path)),
            artifacts.output(artifacts.report('pairplot.svg')),
        )

    for curve_path in sorted(glob.glob(os.path.join(artifacts.root, 'policies', '*', 'learning_curve.csv'))):
        name = os.path.basename(os.path.dirname(curve_path))
        curve = pd.read_csv(curve_path).to_dict(orient='records')
        svg_path = artifacts.output(artifacts.report(f'learning_curve_{name}.svg'))
        written[f'learning_curve_{name}'] = learning_curve_svg(curve, svg_path)

    trace_files = sorted(glob.glob(os.path.join(artifacts.root, 'traces', 'compare_*.csv')))
    if trace_files and os.path.exists(artifacts.environment):
        env, _ = load_scene(artifacts, cfg)
        traces = {os.path.basename(p)[len('compare_'):-4]: pd.read_csv(p) for p in trace_files}
        svg_path = artifacts.output(artifacts.report('trajectories.svg'))
        written['trajectories'] = trajectories_svg(traces, env, svg_path, cfg.episode.dt)

    if not written:
        logger.warning(f"Nothing to report under {artifacts.root}")
    return written
