"""
Pseudo-spectral steppers for the projected and pressure-driven systems.

States carry unitary spectra; the zero mode is the only place a spatially
constant drive g(t) can enter, so projected runs keep it fixed while driven
runs move it.  Time stepping is classical RK4, with an integrating factor
for the viscous term.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image
from werkzeug.utils import secure_filename

from leray import divergence_hat, pdiv_hat, project_hat
from sph import classify_sph, lowpass_trace
from spectral_core import (
    Field, GridSpec, LabError, NonFiniteFieldError, fft_ortho, ifft_ortho, smooth_step,
    smooth_step_derivatives, spectrum_of, write_csv, write_field, zero_mode_scale,
)

logger = logging.getLogger(__name__)

# ============ Configuration ============

CFL_SAFETY = 0.5
DIVERGENCE_TOLERANCE = 1e-10
SNAPSHOT_CADENCE = 10
DRIFT_ZERO_MODE_SHARE = 1e-8
THUMBNAIL_SIZE = (256, 256)
DRIVE_TARGETS = ('momentum', 'elsasser_pressure_split')


class FlowError(LabError):
    pass


class CFLViolationError(FlowError):
    pass


class NonFiniteStateError(FlowError):
    pass


class DivergenceError(FlowError):
    pass


class TrajectoryError(FlowError):
    pass


class MissingInitialSnapshotError(TrajectoryError):
    pass


# ============ Drives ============

@dataclass(frozen=True)
class DriveSpec:
    """Spatially constant forcing g(t), a vector of length d."""
    name: str
    g: Callable
    target: str = 'momentum'

    def __post_init__(self):
        if self.target not in DRIVE_TARGETS:
            raise FlowError(f'Drive target must be one of {DRIVE_TARGETS}, got {self.target!r}')

    def at(self, t: float, d: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.g(t), dtype=float), (d,)).copy()


def _bump(t):
    # 0 outside [0.1, 0.7], 1 on [0.3, 0.5]
    rise, fall = (t - 0.1) / 0.2, (t - 0.5) / 0.2
    return float(smooth_step(rise) * (1.0 - smooth_step(fall)))


def _bump_prime(t):
    rise, fall = (t - 0.1) / 0.2, (t - 0.5) / 0.2
    s_rise, d_rise = smooth_step(rise), smooth_step_derivatives(rise)[1]
    s_fall, d_fall = smooth_step(fall), smooth_step_derivatives(fall)[1]
    return float((d_rise * (1.0 - s_fall) - s_rise * d_fall) / 0.2)


PROFILES = {
    'sin2': (lambda t: math.sin(t) ** 2, lambda t: math.sin(2.0 * t)),
    'bump': (_bump, _bump_prime),
    'zero': (lambda t: 0.0, lambda t: 0.0),
}


def zero_drive(d: int) -> DriveSpec:
    return DriveSpec('zero', lambda t: np.zeros(d))


def constant_drive(vector, target='momentum') -> DriveSpec:
    vector = np.asarray(vector, dtype=float)
    return DriveSpec('constant', lambda t: vector, target)


def poiseuille_drive(d: int, profile='sin2') -> DriveSpec:
    """g(t) = -f'(t) e_1, which drives u(t) = f(t) e_1 from rest."""
    if profile not in PROFILES:
        raise FlowError(f'Unknown profile {profile!r}')
    f_prime = PROFILES[profile][1]
    e1 = np.eye(d)[0]
    return DriveSpec(f'poiseuille_{profile}', lambda t: -f_prime(t) * e1)


# ============ State ============

@dataclass(frozen=True)
class SpectralOps:
    grid: GridSpec
    k2: np.ndarray
    mask: np.ndarray
    zero_scale: float


@lru_cache(maxsize=8)
def spectral_ops(grid: GridSpec) -> SpectralOps:
    kmax = float(np.abs(grid.wavenumbers).max())
    mask = np.ones(grid.shape, dtype=bool)
    for k in grid.xi:
        mask = mask & (np.abs(k) < 2.0 / 3.0 * kmax)
    return SpectralOps(grid, grid.xi_norm ** 2, mask, zero_mode_scale(grid))


ZERO = Ellipsis


@dataclass(frozen=True, eq=False)
class FlowState:
    """Spectra of the evolved variables: 'u' (and 'b'), or the Elsasser pair 'alpha', 'beta'."""
    grid: GridSpec
    t: float
    spectra: dict
    nu: float = 0.0
    dealias: bool = True
    max_divergence: float = 0.0

    @property
    def elsasser(self) -> bool:
        return 'alpha' in self.spectra

    def _hat(self, name):
        if name in self.spectra:
            return self.spectra[name]
        if self.elsasser and name == 'u':
            return 0.5 * (self.spectra['alpha'] + self.spectra['beta'])
        if self.elsasser and name == 'b':
            return 0.5 * (self.spectra['alpha'] - self.spectra['beta'])
        return None

    def field(self, name) -> Field | None:
        hat = self._hat(name)
        if hat is None:
            return None
        return Field(self.grid, 'vector', ifft_ortho(hat, self.grid.d), spectrum=hat)

    @property
    def u(self) -> Field:
        return self.field('u')

    @property
    def b(self) -> Field | None:
        return self.field('b')

    @property
    def variables(self) -> tuple:
        return ('u', 'b') if ('b' in self.spectra or self.elsasser) else ('u',)

    def energy(self) -> float:
        """Box-averaged 0.5 (|u|^2 + |b|^2), by Parseval."""
        total = sum(np.sum(np.abs(self._hat(n)) ** 2) for n in self.variables)
        return float(0.5 * total / self.grid.n_nodes)


def make_flow_state(u: Field, b: Field | None = None, nu=0.0, dealias=True, t=0.0,
                    elsasser=False) -> FlowState:
    if u.rank != 'vector' or (b is not None and (b.rank != 'vector' or b.grid != u.grid)):
        raise FlowError('Flow states hold vector fields on one grid')
    if nu < 0:
        raise FlowError(f'Viscosity must be >= 0, got {nu}')
    try:
        u_hat = spectrum_of(u)
        b_hat = None if b is None else spectrum_of(b)
    except NonFiniteFieldError as e:
        raise NonFiniteStateError(str(e)) from e
    if elsasser:
        b_hat = np.zeros_like(u_hat) if b_hat is None else b_hat
        spectra = {'alpha': u_hat + b_hat, 'beta': u_hat - b_hat}
    else:
        spectra = {'u': np.array(u_hat)}
        if b_hat is not None:
            spectra['b'] = np.array(b_hat)
    return FlowState(u.grid, float(t), spectra, float(nu), bool(dealias))


def elsasser_from(u: Field, b: Field) -> tuple:
    """(alpha, beta) = (u + b, u - b)."""
    return u + b, u - b


def elsasser_to(alpha: Field, beta: Field) -> tuple:
    """(u, b) = ((alpha + beta) / 2, (alpha - beta) / 2)."""
    return 0.5 * (alpha + beta), 0.5 * (alpha - beta)


def galilean_shift(state: FlowState, velocity, elapsed: float) -> FlowState:
    """Boost a velocity state: u(x - V t) + V."""
    grid = state.grid
    velocity = np.asarray(velocity, dtype=float)
    phase = np.exp(-1j * sum(k * v for k, v in zip(grid.xi, velocity)) * elapsed)
    u_hat = np.array(state.spectra['u'] * phase)
    u_hat[(ZERO,) + (0,) * grid.d] += velocity * spectral_ops(grid).zero_scale
    spectra = dict(state.spectra, u=u_hat)
    if 'b' in spectra:
        spectra['b'] = np.array(spectra['b'] * phase)
    return FlowState(grid, state.t, spectra, state.nu, state.dealias, state.max_divergence)


# ============ Right-hand sides ============

def _outer_hat(a_hat, b_hat, ops: SpectralOps, dealias: bool) -> np.ndarray:
    """Spectrum of (a (x) b)_kj = a_k b_j."""
    d = ops.grid.d
    if dealias:
        a_hat, b_hat = a_hat * ops.mask, b_hat * ops.mask
    a, b = ifft_ortho(a_hat, d), ifft_ortho(b_hat, d)
    out = fft_ortho(np.einsum('k...,j...->kj...', a, b), d)
    if dealias:
        out *= ops.mask
    return out


def _add_drive(rhs, drive, t, ops):
    if drive is not None:
        if drive.target != 'momentum':
            raise FlowError(f'{drive.name} is a {drive.target} drive, not a momentum forcing')
        rhs[(ZERO,) + (0,) * ops.grid.d] -= drive.at(t, ops.grid.d) * ops.zero_scale
    return rhs


def _euler_rhs(ops, dealias, drive=None):
    def rhs(y, t):
        u = y['u']
        return {'u': _add_drive(-pdiv_hat(_outer_hat(u, u, ops, dealias), ops.grid), drive, t, ops)}
    return rhs


def _mhd_rhs(ops, dealias, drive=None):
    def rhs(y, t):
        u, b = y['u'], y['b']
        grid = ops.grid
        stress = _outer_hat(u, u, ops, dealias) - _outer_hat(b, b, ops, dealias)
        induction = _outer_hat(u, b, ops, dealias) - _outer_hat(b, u, ops, dealias)
        return {'u': _add_drive(-pdiv_hat(stress, grid), drive, t, ops),
                'b': -divergence_hat(induction, grid)}
    return rhs


def _elsasser_rhs(ops, dealias, pressure_split=None):
    def rhs(y, t):
        alpha, beta = y['alpha'], y['beta']
        grid = ops.grid
        d_alpha = -pdiv_hat(_outer_hat(beta, alpha, ops, dealias), grid)
        d_beta = -pdiv_hat(_outer_hat(alpha, beta, ops, dealias), grid)
        if pressure_split is not None:
            if pressure_split.target != 'elsasser_pressure_split':
                raise FlowError(f'{pressure_split.name} is a {pressure_split.target} drive, not a pressure split')
            half = 0.5 * pressure_split.at(t, grid.d) * ops.zero_scale
            d_alpha[(ZERO,) + (0,) * grid.d] += half
            d_beta[(ZERO,) + (0,) * grid.d] -= half
        return {'alpha': d_alpha, 'beta': d_beta}
    return rhs


# ============ Stepping ============

def _sup_velocity(state: FlowState) -> float:
    return max(float(np.sqrt(np.sum(ifft_ortho(hat, state.grid.d) ** 2, axis=0)).max())
               for hat in state.spectra.values())


def check_cfl(state: FlowState, dt: float):
    vmax = _sup_velocity(state)
    if vmax > 0 and abs(dt) > CFL_SAFETY * state.grid.h / vmax:
        raise CFLViolationError(f'|dt| = {abs(dt):g} exceeds {CFL_SAFETY} h / |u|_inf = '
                                f'{CFL_SAFETY * state.grid.h / vmax:g} at t = {state.t:g}')


def _divergence_sup(hat, grid) -> float:
    div = sum(1j * grid.xi[k] * hat[k] for k in range(grid.d))
    return float(np.abs(ifft_ortho(np.broadcast_to(div, grid.shape), grid.d)).max())


def _rk4(state: FlowState, dt: float, rhs, viscous=('u',), projected=('u', 'alpha', 'beta')):
    """One integrating-factor RK4 step; reduces to classical RK4 when nu = 0."""
    check_cfl(state, dt)
    ops = spectral_ops(state.grid)
    y0, t = state.spectra, state.t
    e_full, e_half = {}, {}
    for name in y0:
        if state.nu > 0 and name in viscous:
            e_full[name] = np.exp(-state.nu * ops.k2 * dt)
            e_half[name] = np.exp(-0.5 * state.nu * ops.k2 * dt)
        else:
            e_full[name] = e_half[name] = 1.0

    k1 = rhs(y0, t)
    k2 = rhs({n: e_half[n] * (y0[n] + 0.5 * dt * k1[n]) for n in y0}, t + 0.5 * dt)
    k3 = rhs({n: e_half[n] * y0[n] + 0.5 * dt * k2[n] for n in y0}, t + 0.5 * dt)
    k4 = rhs({n: e_full[n] * y0[n] + dt * e_half[n] * k3[n] for n in y0}, t + dt)
    new = {n: e_full[n] * y0[n] + dt / 6.0 * (e_full[n] * k1[n] + 2.0 * e_half[n] * (k2[n] + k3[n])
                                               + k4[n])
           for n in y0}

    max_div = 0.0
    for name, hat in new.items():
        if not np.all(np.isfinite(hat)):
            raise NonFiniteStateError(f'{name} became non-finite at t = {t + dt:g}')
        if name in projected:
            new[name] = hat = project_hat(hat, state.grid)
        div = _divergence_sup(hat, state.grid)
        if name in projected and div > DIVERGENCE_TOLERANCE:
            raise DivergenceError(f'div {name} = {div:.3e} after projection at t = {t + dt:g}')
        max_div = max(max_div, div)
    return FlowState(state.grid, t + dt, new, state.nu, state.dealias,
                     max(state.max_divergence, max_div))


def _require(state: FlowState, *names):
    missing = [n for n in names if n not in state.spectra]
    if missing:
        raise FlowError(f'State lacks {missing}; it holds {sorted(state.spectra)}')


def step_projected_euler(state: FlowState, dt: float) -> FlowState:
    """u_t = -PD(u (x) u)."""
    _require(state, 'u')
    ops = spectral_ops(state.grid)
    return _rk4(replace_nu(state, 0.0), dt, _euler_rhs(ops, state.dealias))


def step_euler_with_drive(state: FlowState, dt: float, drive: DriveSpec) -> FlowState:
    """u_t = -PD(u (x) u) - g(t)."""
    _require(state, 'u')
    ops = spectral_ops(state.grid)
    return _rk4(replace_nu(state, 0.0), dt, _euler_rhs(ops, state.dealias, drive))


def step_projected_ns(state: FlowState, dt: float, nu=None, drive: DriveSpec | None = None) -> FlowState:
    """u_t = -PD(u (x) u) + nu Laplace u (- g(t) when driven)."""
    _require(state, 'u')
    ops = spectral_ops(state.grid)
    state = replace_nu(state, state.nu if nu is None else nu)
    return _rk4(state, dt, _euler_rhs(ops, state.dealias, drive))


def step_ns_with_drive(state: FlowState, dt: float, drive: DriveSpec, nu=None) -> FlowState:
    return step_projected_ns(state, dt, nu, drive)


def step_elsasser(state: FlowState, dt: float, pressure_split: DriveSpec | None = None) -> FlowState:
    """alpha_t = -PD(beta (x) alpha) + c/2, beta_t = -PD(alpha (x) beta) - c/2."""
    _require(state, 'alpha', 'beta')
    ops = spectral_ops(state.grid)
    return _rk4(replace_nu(state, 0.0), dt, _elsasser_rhs(ops, state.dealias, pressure_split))


def step_projected_mhd(state: FlowState, dt: float) -> FlowState:
    """u_t = -PD(u (x) u - b (x) b), b_t = -D(u (x) b - b (x) u)."""
    _require(state, 'u', 'b')
    ops = spectral_ops(state.grid)
    return _rk4(replace_nu(state, 0.0), dt, _mhd_rhs(ops, state.dealias))


def step_nonresistive_mhd(state: FlowState, dt: float, nu=None, drive: DriveSpec | None = None) -> FlowState:
    """Projected MHD with viscosity on u only and an optional drive."""
    _require(state, 'u', 'b')
    ops = spectral_ops(state.grid)
    state = replace_nu(state, state.nu if nu is None else nu)
    return _rk4(state, dt, _mhd_rhs(ops, state.dealias, drive), viscous=('u',))


def replace_nu(state: FlowState, nu: float) -> FlowState:
    if nu < 0:
        raise FlowError(f'Viscosity must be >= 0, got {nu}')
    if nu == state.nu:
        return state
    return FlowState(state.grid, state.t, state.spectra, float(nu), state.dealias, state.max_divergence)


STEPPERS = {
    'euler': step_projected_euler,
    'euler_drive': step_euler_with_drive,
    'ns': step_projected_ns,
    'ns_drive': step_ns_with_drive,
    'elsasser': step_elsasser,
    'mhd': step_projected_mhd,
    'mhd_nonresistive': step_nonresistive_mhd,
}


# ============ Trajectories ============

@dataclass(frozen=True)
class Snapshot:
    t: float
    fields: dict
    energy: float
    max_divergence: float


def _snapshot(state: FlowState) -> Snapshot:
    fields = {name: state.field(name) for name in state.variables}
    return Snapshot(state.t, fields, state.energy(), state.max_divergence)


@dataclass(frozen=True)
class Trajectory:
    grid: GridSpec
    snapshots: tuple
    final: FlowState
    label: str = 'run'

    @property
    def times(self) -> tuple:
        return tuple(s.t for s in self.snapshots)

    def rows(self):
        rows = []
        for i, snap in enumerate(self.snapshots):
            means = np.ravel(snap.fields['u'].mean())
            rows.append((i, snap.t, snap.energy, snap.max_divergence, *means))
        return rows

    def header(self):
        return ['index', 't', 'energy', 'max_divergence'] + [f'u{j}_mean' for j in range(self.grid.d)]


def run_trajectory(state: FlowState, stepper, n_steps: int, dt: float, cadence=SNAPSHOT_CADENCE,
                   label='run', **kwargs) -> Trajectory:
    """Advance n_steps; snapshots at t = 0, every cadence steps, and at the end."""
    if n_steps < 1 or cadence < 1:
        raise TrajectoryError('Need at least one step and a positive snapshot cadence')
    snapshots = [_snapshot(state)]
    for step in range(1, n_steps + 1):
        state = stepper(state, dt, **kwargs)
        if step % cadence == 0 or step == n_steps:
            snapshots.append(_snapshot(state))
    logger.info('%s: %d steps to t = %.6g, energy %.6g -> %.6g, max div %.2e', label, n_steps,
                state.t, snapshots[0].energy, snapshots[-1].energy, state.max_divergence)
    return Trajectory(state.grid, tuple(snapshots), state, label)


def poiseuille_pair(grid: GridSpec, profile='sin2', T=1.0, dt=0.01, cadence=SNAPSHOT_CADENCE,
                    dealias=True) -> tuple:
    """(driven, projected) runs from u0 = 0: Euler with g = -f'(t) e_1, and the projected system."""
    n_steps = max(1, int(round(T / dt)))
    rest = make_flow_state(Field(grid, 'vector', np.zeros((grid.d,) + grid.shape)), dealias=dealias)
    driven = run_trajectory(rest, step_euler_with_drive, n_steps, dt, cadence,
                            label=f'poiseuille_{profile}_driven', drive=poiseuille_drive(grid.d, profile))
    projected = run_trajectory(rest, step_projected_euler, n_steps, dt, cadence,
                               label=f'poiseuille_{profile}_projected')
    return driven, projected


# ============ Drift detection ============

@dataclass(frozen=True)
class DriftReport:
    verdict: str
    variable: str
    times: tuple
    verdicts: tuple
    displacements: tuple
    traces: tuple = field(default=(), repr=False)

    @property
    def violated(self) -> bool:
        return self.verdict == 'violated'

    def rows(self):
        terminal = [tr.values[-1] for tr in self.traces]
        return list(zip(self.times, self.verdicts, self.displacements, terminal))


def drift_detector(trajectory: Trajectory, ladder, mode='weak', variable='u') -> DriftReport:
    """Classify u(t) - u(0) per snapshot; violated iff some difference leaves S'_h or the zero mode moves.

    Without a violation, any inconclusive snapshot makes the whole report inconclusive.
    """
    snapshots = trajectory.snapshots
    if len(snapshots) < 3:
        raise TrajectoryError(f'Drift detection needs at least 3 snapshots, got {len(snapshots)}')
    if snapshots[0].t != 0.0:
        raise MissingInitialSnapshotError(f'First snapshot is at t = {snapshots[0].t:g}, not 0')
    base = snapshots[0].fields.get(variable)
    if base is None:
        raise TrajectoryError(f'Trajectory holds no {variable!r} snapshots')
    scale = base.sup(window=False)
    threshold = DRIFT_ZERO_MODE_SHARE * scale

    times, verdicts, displacements, traces = [], [], [], []
    for snap in snapshots[1:]:
        diff = snap.fields[variable] - base
        trace = lowpass_trace(diff, ladder, mode=mode, reference=max(scale, diff.sup(window=False)),
                              quantity=f'{variable}(t)-{variable}(0)')
        times.append(snap.t)
        verdicts.append(classify_sph(trace).verdict)
        displacements.append(float(np.linalg.norm(np.ravel(diff.mean()))))
        traces.append(trace)
    violated = any(v == 'non_member' for v in verdicts) or any(x > threshold for x in displacements)
    if violated:
        verdict = 'violated'
    elif 'inconclusive' in verdicts:
        verdict = 'inconclusive'
    else:
        verdict = 'condition_ii_holds'
    return DriftReport(verdict, variable, tuple(times),
                       tuple(verdicts), tuple(displacements), tuple(traces))


def recover_drive(trajectory: Trajectory) -> list:
    """Estimate g between snapshots from the zero-mode motion: g = -d(mean u)/dt."""
    out = []
    for a, b in zip(trajectory.snapshots, trajectory.snapshots[1:]):
        rate = (np.ravel(b.fields['u'].mean()) - np.ravel(a.fields['u'].mean())) / (b.t - a.t)
        out.append((0.5 * (a.t + b.t), -rate))
    return out


# ============ Residual checks ============

@dataclass(frozen=True)
class MagneticResidual:
    zero_mode: np.ndarray
    sup: float


def magnetic_residual(state: FlowState, pressure_split: DriveSpec | None = None) -> MagneticResidual:
    """b_t of the Elsasser system minus the classical induction law -D(u (x) b - b (x) u)."""
    _require(state, 'alpha', 'beta')
    ops = spectral_ops(state.grid)
    rates = _elsasser_rhs(ops, state.dealias, pressure_split)(state.spectra, state.t)
    u_hat, b_hat = state._hat('u'), state._hat('b')
    induction = _outer_hat(u_hat, b_hat, ops, state.dealias) - _outer_hat(b_hat, u_hat, ops, state.dealias)
    residual = 0.5 * (rates['alpha'] - rates['beta']) + divergence_hat(induction, state.grid)
    samples = ifft_ortho(residual, state.grid.d)
    zero = residual[(ZERO,) + (0,) * state.grid.d] / ops.zero_scale
    return MagneticResidual(np.real(zero), float(np.sqrt(np.sum(samples ** 2, axis=0)).max()))


def drive_gauge_residual(u: Field, vector) -> float:
    """sup |PD(f (x) u)| for a constant vector f; zero exactly when f . grad u is a gradient."""
    grid = u.grid
    vector = np.asarray(vector, dtype=float)
    u_hat = spectrum_of(u)
    f_hat = np.einsum('k,j...->kj...', vector, u_hat)
    image = ifft_ortho(pdiv_hat(f_hat, grid), grid.d)
    return float(np.sqrt(np.sum(image ** 2, axis=0)).max())


# ============ Export ============

def vorticity_image(u: Field) -> Image.Image:
    """Grayscale thumbnail of d_1 u_2 - d_2 u_1 for a 2D velocity."""
    if u.grid.d != 2:
        raise FlowError('Vorticity thumbnails are only drawn for d = 2')
    hat = spectrum_of(u)
    omega = ifft_ortho(1j * u.grid.xi[0] * hat[1] - 1j * u.grid.xi[1] * hat[0], 2)
    span = float(np.abs(omega).max())
    scaled = 127.5 * (1.0 + omega / span) if span > 0 else np.full(omega.shape, 127.5)
    img = Image.fromarray(np.clip(scaled, 0, 255).astype(np.uint8).T[::-1])
    img.thumbnail(THUMBNAIL_SIZE, Image.Resampling.LANCZOS)
    return img


def export_trajectory(trajectory: Trajectory, out_dir, thumbnails=True) -> list:
    """Binary snapshots, a CSV summary and (2D only) vorticity PNG thumbnails."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = secure_filename(trajectory.label) or 'run'
    written = []
    for i, snap in enumerate(trajectory.snapshots):
        for name, fld in snap.fields.items():
            written.append(write_field(out_dir / f'{prefix}_{i:04d}_{name}.llab', fld))
        if thumbnails and trajectory.grid.d == 2:
            path = out_dir / f'{prefix}_{i:04d}_vorticity.png'
            vorticity_image(snap.fields['u']).save(path, 'PNG')
            written.append(path)
    written.append(write_csv(out_dir / f'{prefix}_trajectory.csv', trajectory.header(),
                             trajectory.rows(), comments=[f'grid={trajectory.grid.describe()}']))
    return written
