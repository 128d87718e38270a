#!/usr/bin/env python3
"""
Bounded Leray Lab - command line runner.

Each subcommand reads a flat key=value config (defaults, then --config file,
then flags, then --set overrides), writes CSV tables, SVG plots and a JSON
manifest to --out, and exits non-zero when an in-run check fails.
"""

from __future__ import annotations

import argparse
import fcntl
import json
import logging
import math
import os
import platform
import sys
import time
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
matplotlib.rcParams['svg.hashsalt'] = 'llab'
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import PIL  # noqa: E402
import scipy  # noqa: E402
from werkzeug.utils import secure_filename  # noqa: E402

import besov  # noqa: E402
import flows  # noqa: E402
import leray  # noqa: E402
import sph  # noqa: E402
import spectral_core as sc  # noqa: E402

logger = logging.getLogger('llab')

# ============ Configuration ============

COMMANDS = ('decay', 'counterexample', 'flow', 'mhd', 'probe', 'besov')
CONFIG_NAME = 'run.cfg'
MANIFEST_NAME = 'manifest.json'
FAILURES_NAME = 'failures.json'
HISTORY_NAME = 'history.json'
LOCK_NAME = '.run.lock'

DEFAULT_CONFIG = {
    'grid': '',
    'label': '',
    'seed': 20240601,
    'lambda_start': 1.0,
    'lambda_factor': 2.0,
    'lambda_count': 4,
    'mode': 'weak',
    # decay
    'target': 'sign',
    'indices': '0,0,1',
    'theta_scale': 0.0,
    'images': -1,
    'backend': 'spectral',
    'kmax': 2.0,
    # counterexample
    'M_min': 2,
    'M_max': 3,
    'eps': 0.1,
    'R': 4.0,
    'sigma': '-1',
    # flow / mhd
    'system': 'euler',
    'init': 'taylor_green',
    'profile': 'sin2',
    'nu': 0.0,
    'T': 1.0,
    'dt': 0.01,
    'cadence': 10,
    'dealias': True,
    'pressure_split': '1,0',
    'export': False,
    # probe
    'symbol': 'riesz12',
    'seed_width': 0.0,
    # besov
    'p': 'inf',
    'r': '1',
    's': '0,0.5,1',
    'homogeneous': True,
    # output
    'png': False,
}

COMMAND_DEFAULTS = {
    'decay': {'grid': '1x1048576x16384', 'lambda_start': 8.0, 'lambda_count': 8},
    'counterexample': {'grid': '1x2097152x1048576', 'lambda_start': 64.0, 'lambda_count': 8},
    'flow': {'grid': '2x256x8pi', 'lambda_start': 0.25, 'lambda_count': 4},
    'mhd': {'grid': '2x128x8pi', 'init': 'alfven', 'system': 'elsasser', 'T': 0.5,
            'lambda_start': 0.25, 'lambda_count': 4},
    'probe': {'grid': '2x2048x32', 'lambda_start': 1.0, 'lambda_count': 5},
    'besov': {'grid': '2x256x64', 'target': 'gaussian'},
}

TRUE_WORDS = ('1', 'true', 'yes', 'on')


class ConfigError(sc.LabError):
    pass


def _coerce(key, value):
    if key not in DEFAULT_CONFIG:
        raise ConfigError(f'Unknown config key {key!r}')
    kind = type(DEFAULT_CONFIG[key])
    if not isinstance(value, str):
        return kind(value)
    value = value.strip()
    try:
        if kind is bool:
            return value.lower() in TRUE_WORDS
        return kind(value)
    except ValueError as e:
        raise ConfigError(f'{key}={value!r} is not a valid {kind.__name__}') from e


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment."""
    config = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'Line {number}: expected key=value, got {raw!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        config[key] = _coerce(key, value)
    return config


def load_config(command: str, path=None, overrides=None) -> dict:
    """Defaults, then the command's defaults, then the file, then the overrides."""
    loaded = {}
    if path is not None:
        loaded = parse_config_text(Path(path).read_text())
    overrides = {k: _coerce(k, v) for k, v in (overrides or {}).items()}
    config = {**DEFAULT_CONFIG, **COMMAND_DEFAULTS.get(command, {}), **loaded, **overrides}
    if not config['label']:
        config['label'] = command
    return config


def format_config(config: dict) -> str:
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, bool):
            value = 'true' if value else 'false'
        elif isinstance(value, float):
            value = sc.format_float(value)
        lines.append(f'{key} = {value}')
    return '\n'.join(lines) + '\n'


def save_config(path, config: dict):
    Path(path).write_text(format_config(config))


def _floats(text: str) -> list:
    return [float(v) for v in str(text).split(',') if v.strip()]


def _index(value: str) -> float:
    return math.inf if str(value).strip().lower() in ('inf', 'infinity') else float(value)


# ============ Output helpers ============

@contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock on the output directory; refuses to wait for another run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        lock_fd = open(out_dir / LOCK_NAME, 'w')
        fcntl.flock(lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
    except (IOError, OSError):
        raise ConfigError(f'Another run is writing to {out_dir}')
    try:
        yield
    finally:
        try:
            fcntl.flock(lock_fd, fcntl.LOCK_UN)
            lock_fd.close()
        except Exception:
            pass


def check(name: str, passed: bool, detail: str = '') -> dict:
    return {'check': name, 'passed': bool(passed), 'detail': detail}


def render_plot(csv_path: Path, x_col: str, y_cols, title: str, png=False, loglog=True) -> list:
    """Plot columns of a CSV written by this run; the figure only shows what the CSV holds."""
    comments, header, rows = sc.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [float(r[header.index(x_col)]) for r in rows]
    for col in y_cols:
        y = [abs(float(r[header.index(col)])) for r in rows]
        ax.plot(x, y, marker='o', label=col)
    if loglog:
        ax.set_xscale('log')
        ax.set_yscale('log')
    ax.set_xlabel(x_col)
    ax.set_title(title)
    ax.legend()
    ax.grid(True, which='both', alpha=0.3)
    paths = [csv_path.with_suffix('.svg')]
    fig.savefig(paths[0], format='svg', metadata={'Date': None})
    if png:
        paths.append(csv_path.with_suffix('.png'))
        fig.savefig(paths[1], format='png', dpi=120)
    plt.close(fig)
    return paths


def _prefix(config: dict) -> str:
    return secure_filename(config['label']) or 'run'


def _ladder(config: dict) -> tuple:
    return leray.geometric_ladder(config['lambda_start'], config['lambda_factor'], config['lambda_count'])


def write_decay(out_dir, config, name, report: leray.DecayReport, extra_comments=()) -> list:
    path = out_dir / f'{_prefix(config)}_{name}.csv'
    sc.write_csv(path, ['lambda', 'value'], report.rows(), list(extra_comments) + report.comments())
    return [path] + render_plot(path, 'lambda', ['value'], f'{report.quantity} ({report.mode})',
                                png=config['png'])


# ============ Targets ============

def build_target(name: str, grid: sc.GridSpec, config: dict) -> sc.Field:
    """Named scalar test fields, or field:<path> for a stored binary field."""
    if name.startswith('field:'):
        return sc.read_field(name[len('field:'):])
    if name == 'sign':
        return sc.field_from_function(grid, lambda *c: np.sign(c[0]))
    if name == 'gaussian':
        return sc.field_from_function(grid, lambda *c: np.exp(-0.5 * sum(x ** 2 for x in c)))
    if name == 'sin':
        return sc.field_from_function(grid, lambda *c: np.sin(c[0]))
    if name == 'constant':
        return sc.constant_field(grid, 1.0)
    if name == 'random':
        return sc.random_smooth_field(grid, 'scalar', config['seed'], config['kmax'])
    if name == 'annuli':
        spec = sph.CounterexampleSpec(config['M_min'], config['M_max'], config['eps'], config['R'], grid.d)
        return sph.build_annuli_counterexample(spec, grid)
    raise ConfigError(f'Unknown target {name!r}')


def _flow_initial(name: str, grid: sc.GridSpec) -> tuple:
    """(u0, b0) for the named initial data; b0 is None for pure velocity data."""
    d = grid.d
    zero = [np.zeros(grid.shape)] * d

    if name == 'poiseuille':
        return sc.constant_field(grid, np.zeros(d), 'vector'), None
    if name == 'shear':
        return sc.field_from_function(grid, lambda *c: [np.sin(c[1])] + zero[1:], 'vector'), None
    if name == 'taylor_green':
        if d == 2:
            return sc.field_from_function(grid, lambda x, y: [
                np.sin(x) * np.cos(y) + 0.1 * np.sin(2.0 * y), -np.cos(x) * np.sin(y)], 'vector'), None
        return sc.field_from_function(grid, lambda x, y, z: [
            np.sin(x) * np.cos(y) * np.cos(z), -np.cos(x) * np.sin(y) * np.cos(z), 0.0 * z], 'vector'), None
    if name == 'alfven':
        u0 = sc.field_from_function(grid, lambda *c: [0.0 * c[0], np.sin(c[0])] + zero[2:], 'vector')
        return u0, sc.constant_field(grid, np.zeros(d), 'vector')
    if name == 'orszag_tang' and d == 2:
        u0 = sc.field_from_function(grid, lambda x, y: [-np.sin(y), np.sin(x)], 'vector')
        b0 = sc.field_from_function(grid, lambda x, y: [-np.sin(y), np.sin(2.0 * x)], 'vector')
        return u0, b0
    raise ConfigError(f'Unknown initial data {name!r} for d = {d}')


# ============ Subcommands ============

def run_decay(config: dict, out_dir: Path) -> dict:
    grid = sc.parse_grid(config['grid'])
    ladder = _ladder(config)
    target, mode = config['target'], config['mode']
    checks, outputs = [], []

    if target == 'gamma':
        indices = tuple(int(i) for i in config['indices'].split(','))
        kernel = leray.assemble_gamma(grid, *indices,
                                      theta_scale=config['theta_scale'] or None,
                                      images=None if config['images'] < 0 else config['images'])
        report = leray.gamma_lowfreq_decay(kernel, ladder)
        outputs += write_decay(out_dir, config, 'decay', report, [f'l1_norm={kernel.l1_norm!r}'])
        if grid.d >= 3:
            checks.append(check('gamma_slope', -1.15 <= report.slope <= -0.85, f'slope {report.slope:.4f}'))
        else:
            checks.append(check('gamma_log_correction', report.log_correction_bounded,
                                f'log ratio {report.log_ratio:.4f}, slope {report.slope:.4f}'))
        return {'outputs': outputs, 'checks': checks}

    if target == 'pdiv':
        f = sc.random_smooth_field(grid, 'tensor', config['seed'], config['kmax'])
        report = leray.pdiv_sph_certificate(f, ladder, backend=config['backend'], mode=mode)
        verdict = sph.classify_sph(report)
        outputs += write_decay(out_dir, config, 'decay', report, [f'verdict={verdict.verdict}'])
        checks.append(check('pdiv_in_sph', report.vanished or report.slope <= -0.8,
                            f'slope {report.slope:.4f}, verdict {verdict.verdict}'))
        return {'outputs': outputs, 'checks': checks}

    field = build_target(target, grid, config)
    report = sph.lowpass_trace(field, ladder, mode=mode, quantity=target)
    verdict = sph.classify_sph(report)
    outputs += write_decay(out_dir, config, 'decay', report, [f'verdict={verdict.verdict}'])
    if target == 'sign' and mode == 'weak':
        checks.append(check('sign_weak_slope', -1.15 <= report.slope <= -0.85, f'slope {report.slope:.4f}'))
        checks.append(check('sign_weak_member', verdict.verdict == 'member', verdict.verdict))
    elif target == 'sign':
        checks.append(check('sign_strong_non_member', verdict.verdict == 'non_member', verdict.verdict))
    elif target == 'constant':
        checks.append(check('constant_non_member', verdict.verdict == 'non_member', verdict.verdict))
    return {'outputs': outputs, 'checks': checks}


def run_counterexample(config: dict, out_dir: Path) -> dict:
    grid = sc.parse_grid(config['grid'])
    spec = sph.CounterexampleSpec(config['M_min'], config['M_max'], config['eps'], config['R'], grid.d)
    field = sph.build_annuli_counterexample(spec, grid)
    partition = sc.build_partition(grid)
    checks, outputs, rows = [], [], []
    signs = (1, -1) if config['sigma'] == 'both' else (int(config['sigma']),)

    for sigma in signs:
        try:
            result = sph.counterexample_oscillation(field, spec, sigma, partition=partition)
        except sph.EmptyLambdaWindowError as e:
            checks.append(check(f'oscillation_sigma{sigma:+d}', False, str(e)[:500]))
            continue
        rows += [(sigma, result.M, lam, dev) for lam, dev in result.rows()]
        checks.append(check(f'oscillation_sigma{sigma:+d}', result.within_bound,
                            f'M={result.M} lam={result.best_lambda:.6g} deviation={result.best_deviation:.4g} '
                            f'A={result.A:g}'))
    path = out_dir / f'{_prefix(config)}_oscillation.csv'
    outputs.append(sc.write_csv(path, ['sigma', 'M', 'lambda', 'deviation'], rows,
                                [f'eps={spec.eps!r}', f'R={spec.R!r}']))

    report = sph.lowpass_trace(field, _ladder(config), mode=config['mode'], partition=partition,
                               quantity='annuli')
    verdict = sph.classify_sph(report)
    outputs += write_decay(out_dir, config, 'trace', report, [f'verdict={verdict.verdict}'])
    checks.append(check('annuli_not_member', verdict.verdict != 'member', verdict.verdict))
    return {'outputs': outputs, 'checks': checks}


def _write_drift(out_dir, config, name, drift, extra=()) -> Path:
    path = out_dir / f'{_prefix(config)}_{name}.csv'
    return sc.write_csv(path, ['t', 'verdict', 'zero_mode_displacement', 'terminal_value'],
                        drift.rows(), [f'verdict={drift.verdict}', f'variable={drift.variable}', *extra])


def _run_poiseuille(config: dict, grid: sc.GridSpec, out_dir: Path) -> dict:
    driven, projected = flows.poiseuille_pair(grid, config['profile'], config['T'], config['dt'],
                                              config['cadence'], config['dealias'])
    ladder = _ladder(config)
    outputs, checks = [], []
    for name, run in (('driven', driven), ('projected', projected)):
        drift = flows.drift_detector(run, ladder, mode=config['mode'])
        outputs.append(_write_drift(out_dir, config, f'{name}_drift', drift))
        path = out_dir / f'{_prefix(config)}_{name}_energy.csv'
        outputs.append(sc.write_csv(path, run.header(), run.rows(), [f'profile={config["profile"]}']))
        expected = 'violated' if name == 'driven' and config['profile'] != 'zero' else 'condition_ii_holds'
        checks.append(check(f'{name}_drift', drift.verdict == expected, f'{drift.verdict}, expected {expected}'))

    f_end = flows.PROFILES[config['profile']][0](driven.final.t)
    gap = np.ravel(driven.snapshots[-1].fields['u'].mean()) - np.ravel(projected.snapshots[-1].fields['u'].mean())
    expected_gap = f_end * np.eye(grid.d)[0]
    checks.append(check('zero_mode_gap', np.allclose(gap, expected_gap, atol=1e-10),
                        f'{gap.tolist()} vs f(T) e_1 = {expected_gap.tolist()}'))
    return {'outputs': outputs, 'checks': checks}


def run_flow(config: dict, out_dir: Path) -> dict:
    grid = sc.parse_grid(config['grid'])
    if config['init'] == 'poiseuille':
        return _run_poiseuille(config, grid, out_dir)
    system = config['system']
    if system not in ('euler', 'euler_drive', 'ns', 'ns_drive'):
        raise ConfigError(f'flow runs euler, euler_drive, ns or ns_drive, not {system!r}')
    u0, _ = _flow_initial(config['init'], grid)
    state = flows.make_flow_state(u0, nu=config['nu'], dealias=config['dealias'])
    kwargs = {}
    if system.endswith('_drive'):
        kwargs['drive'] = flows.poiseuille_drive(grid.d, config['profile'])
    n_steps = max(1, int(round(config['T'] / config['dt'])))
    trajectory = flows.run_trajectory(state, flows.STEPPERS[system], n_steps, config['dt'],
                                      config['cadence'], label=config['label'], **kwargs)
    drift = flows.drift_detector(trajectory, _ladder(config), mode=config['mode'])

    outputs = [_write_drift(out_dir, config, 'drift', drift, [f'system={system}'])]
    path = out_dir / f'{_prefix(config)}_energy.csv'
    outputs.append(sc.write_csv(path, trajectory.header(), trajectory.rows()))
    outputs += render_plot(path, 't', ['energy'], f'{system} energy', png=config['png'], loglog=False)
    if config['export']:
        outputs += flows.export_trajectory(trajectory, out_dir / 'snapshots')

    driven = 'drive' in kwargs and config['profile'] != 'zero'
    expected = 'violated' if driven else 'condition_ii_holds'
    energies = [s.energy for s in trajectory.snapshots]
    checks = [check('drift_verdict', drift.verdict == expected, f'{drift.verdict}, expected {expected}'),
              check('divergence', trajectory.final.max_divergence <= flows.DIVERGENCE_TOLERANCE,
                    f'{trajectory.final.max_divergence:.3e}')]
    if system == 'euler':
        drift_share = abs(energies[-1] - energies[0]) / max(energies[0], 1e-300)
        checks.append(check('energy_conserved', drift_share < 1e-6, f'relative drift {drift_share:.3e}'))
    elif system == 'ns' and config['nu'] > 0:
        checks.append(check('energy_non_increasing', all(b <= a * (1 + 1e-12) for a, b in
                                                         zip(energies, energies[1:])), ''))
    return {'outputs': outputs, 'checks': checks}


def run_mhd(config: dict, out_dir: Path) -> dict:
    grid = sc.parse_grid(config['grid'])
    u0, b0 = _flow_initial(config['init'], grid)
    if b0 is None:
        b0 = sc.constant_field(grid, np.zeros(grid.d), 'vector')
    n_steps = max(1, int(round(config['T'] / config['dt'])))
    split_vector = np.zeros(grid.d)
    given = _floats(config['pressure_split'])
    split_vector[:len(given)] = given[:grid.d]
    split = flows.constant_drive(split_vector, 'elsasser_pressure_split')

    els = flows.make_flow_state(u0, b0, dealias=config['dealias'], elsasser=True)
    mhd = flows.make_flow_state(u0, b0, nu=config['nu'], dealias=config['dealias'])
    stepper = flows.STEPPERS['mhd_nonresistive' if config['system'] == 'mhd_nonresistive' else 'mhd']
    els_run = flows.run_trajectory(els, flows.step_elsasser, n_steps, config['dt'], config['cadence'],
                                   label=f'{config["label"]}_elsasser', pressure_split=split)
    mhd_run = flows.run_trajectory(mhd, stepper, n_steps, config['dt'], config['cadence'],
                                   label=f'{config["label"]}_mhd')

    rows = []
    for a, b in zip(els_run.snapshots, mhd_run.snapshots):
        du = (a.fields['u'] - b.fields['u']).sup(window=False)
        db = (a.fields['b'] - b.fields['b']).sup(window=False)
        b_mean = np.ravel(a.fields['b'].mean())
        rows.append((a.t, du, db, *b_mean))
    path = out_dir / f'{_prefix(config)}_elsasser_vs_mhd.csv'
    outputs = [sc.write_csv(path, ['t', 'u_difference', 'b_difference'] +
                            [f'b{j}_mean' for j in range(grid.d)], rows,
                            [f'pressure_split={config["pressure_split"]}', f'system={config["system"]}'])]
    residual = flows.magnetic_residual(els_run.final, split)
    drift = flows.drift_detector(els_run, _ladder(config), mode=config['mode'], variable='b')

    checks = [check('residual_zero_mode', np.allclose(residual.zero_mode, 0.5 * split_vector, atol=1e-10),
                    f'{residual.zero_mode.tolist()} vs c/2 = {(0.5 * split_vector).tolist()}')]
    if not split_vector.any() and config['system'] != 'mhd_nonresistive':
        worst = max(max(r[1], r[2]) for r in rows)
        checks.append(check('elsasser_equals_mhd', worst <= 1e-8, f'max difference {worst:.3e}'))
        checks.append(check('b_drift', drift.verdict == 'condition_ii_holds', drift.verdict))
    elif split_vector.any():
        expected = 0.5 * els_run.final.t * split_vector
        got = np.ravel(els_run.snapshots[-1].fields['b'].mean())
        checks.append(check('b_mean_growth', np.allclose(got, expected, atol=1e-8),
                            f'{got.tolist()} vs {expected.tolist()}'))
        checks.append(check('b_drift', drift.verdict == 'violated', drift.verdict))
    return {'outputs': outputs, 'checks': checks}


def run_probe(config: dict, out_dir: Path) -> dict:
    grid = sc.parse_grid(config['grid'])
    symbols = {'riesz12': sc.riesz_symbol(0, 1), 'identity': sc.constant_symbol(1.0)}
    if config['symbol'] not in symbols:
        raise ConfigError(f'Unknown symbol {config["symbol"]!r}')
    ts = _ladder(config)
    width = config['seed_width'] or None
    partition = sc.build_partition(grid)
    probe = sph.l1_unboundedness_probe(symbols[config['symbol']], ts, grid, width, partition)
    control = sph.l1_unboundedness_probe(symbols['identity'], ts, grid, width, partition)

    path = out_dir / f'{_prefix(config)}_probe.csv'
    rows = [(t, v, c) for t, v, c in zip(ts, probe.values, control.values)]
    outputs = [sc.write_csv(path, ['t', 'value', 'control'], rows,
                            [f'symbol={probe.symbol}', f'growth_ratio={probe.growth_ratio!r}'])]
    outputs += render_plot(path, 't', ['value', 'control'], f'L1 growth of {probe.symbol}', png=config['png'])
    bound = 1.0 + partition.psi_l1
    checks = [check('control_bounded', max(control.values) <= bound,
                    f'max {max(control.values):.4f} <= {bound:.4f}')]
    if config['symbol'] != 'identity':
        checks.append(check('growth', probe.growth_ratio > 2.0, f'ratio {probe.growth_ratio:.4f}'))
    return {'outputs': outputs, 'checks': checks}


def run_besov(config: dict, out_dir: Path) -> dict:
    grid = sc.parse_grid(config['grid'])
    field = build_target(config['target'], grid, config)
    reports = besov.besov_profile(field, _index(config['p']), _index(config['r']), _floats(config['s']),
                                  homogeneous=config['homogeneous'])
    outputs = []
    path = out_dir / f'{_prefix(config)}_besov.csv'
    rows = [(r.params.s, r.total, str(r.truncated), str(r.zero_mode_excluded)) for r in reports]
    outputs.append(sc.write_csv(path, ['s', 'norm', 'truncated', 'zero_mode_excluded'], rows,
                                [f'target={config["target"]}', f'p={config["p"]}', f'r={config["r"]}']))
    path = out_dir / f'{_prefix(config)}_blocks.csv'
    outputs.append(sc.write_csv(path, ['m', 'block_norm'], [(m, n) for m, n in
                                                            zip(reports[0].blocks, reports[0].block_norms)],
                                reports[0].comments()))
    checks = [check('finite_norms', all(math.isfinite(r.total) for r in reports), '')]
    return {'outputs': outputs, 'checks': checks}


RUNNERS = {
    'decay': run_decay,
    'counterexample': run_counterexample,
    'flow': run_flow,
    'mhd': run_mhd,
    'probe': run_probe,
    'besov': run_besov,
}


# ============ Manifest ============

def versions() -> dict:
    return {'python': platform.python_version(), 'numpy': np.__version__, 'scipy': scipy.__version__,
            'matplotlib': matplotlib.__version__, 'pillow': PIL.__version__}


def load_history(out_dir: Path) -> list:
    path = out_dir / HISTORY_NAME
    if path.exists():
        with open(path, 'r') as f:
            return json.load(f)
    return []


def save_history(out_dir: Path, history: list):
    with open(out_dir / HISTORY_NAME, 'w') as f:
        json.dump(history, f, indent=2)


def execute(command: str, config: dict, out_dir: Path) -> dict:
    """Run one subcommand under the output lock and write config, manifest and failures."""
    start_time = datetime.now()
    started = time.perf_counter()
    with output_lock(out_dir):
        save_config(out_dir / CONFIG_NAME, config)
        try:
            result = RUNNERS[command](config, out_dir)
            failures = [c for c in result['checks'] if not c['passed']]
            error = None
        except (sc.LabError, OSError) as e:
            logger.error('%s failed: %s', command, e)
            result = {'outputs': [], 'checks': []}
            error = str(e)[:500]
            failures = [{'check': 'run', 'passed': False, 'detail': error}]

        duration = time.perf_counter() - started
        manifest = {
            'command': command,
            'config': config,
            'versions': versions(),
            'started': start_time.isoformat(),
            'wall_seconds': round(duration, 3),
            'outputs': [str(Path(p).relative_to(out_dir)) for p in result['outputs']],
            'checks': result['checks'],
            'success': not failures,
        }
        if error:
            manifest['error'] = error
        with open(out_dir / MANIFEST_NAME, 'w') as f:
            json.dump(manifest, f, indent=2)
        failures_path = out_dir / FAILURES_NAME
        if failures:
            with open(failures_path, 'w') as f:
                json.dump(failures, f, indent=2)
        elif failures_path.exists():
            failures_path.unlink()

        history = load_history(out_dir)
        history.append({
            'timestamp': start_time.isoformat(),
            'command': command,
            'result': 'success' if not failures else 'error',
            'duration_seconds': round(duration, 1),
        })
        save_history(out_dir, history)
    return manifest


# ============ Main ============

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='llab', description='Bounded Leray Lab runs')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', type=Path, help='key=value config file (a previous run.cfg works)')
    parser.add_argument('--out', type=Path, default=Path('out'), help='output directory')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--grid', help="grid as 'dxNxL', e.g. 2x256x8pi")
    parser.add_argument('--lambda', dest='ladder', help='ladder as start:factor:count')
    parser.add_argument('--mode', choices=sph.MODES)
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
    return parser


def overrides_from_args(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.grid:
        overrides['grid'] = args.grid
    if args.mode:
        overrides['mode'] = args.mode
    if args.ladder:
        try:
            start, factor, count = args.ladder.split(':')
        except ValueError as e:
            raise ConfigError(f'--lambda must look like start:factor:count, got {args.ladder!r}') from e
        overrides.update(lambda_start=start, lambda_factor=factor, lambda_count=count)
    for item in args.overrides:
        if '=' not in item:
            raise ConfigError(f'--set expects KEY=VALUE, got {item!r}')
        key, value = item.split('=', 1)
        overrides[key.strip()] = value
    return overrides


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get('LLAB_LOG_LEVEL', 'INFO').upper(),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.command, args.config, overrides_from_args(args))
    except (ConfigError, OSError) as e:
        print(f'config error: {e}', file=sys.stderr)
        return 2

    print("=" * 50)
    print(f"Bounded Leray Lab: {args.command} on {config['grid']}")
    print("=" * 50)
    try:
        manifest = execute(args.command, config, args.out)
    except ConfigError as e:
        print(f'error: {e}', file=sys.stderr)
        return 2
    for item in manifest['checks']:
        print(f"  [{'ok' if item['passed'] else 'FAIL'}] {item['check']}: {item['detail']}")
    if 'error' in manifest:
        print(f"  [FAIL] run: {manifest['error']}")
        return 2
    return 0 if manifest['success'] else 1


if __name__ == '__main__':
    sys.exit(main())
