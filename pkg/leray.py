"""
Leray projection and the PD operator on the sampled box.

PD(f) = P div(f) has two backends: the plain spectral multiplier, and the
kernel split Delta_{-1} div f + Gamma * f + (Id - Delta_{-1}) PD f whose
low-frequency part is a convolution with the assembled kernels Gamma_jkl.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import j0

from spectral_core import (
    Field, GridError, LabError, apply_multiplier, build_partition, field_from_spectrum,
    gradient_part_symbol, kernel_from_spectrum, kernel_spectrum, leray_symbol, lp_norm,
    map_sweep, safe_square, smooth_step, smooth_step_derivatives, spectrum_of,
)

logger = logging.getLogger(__name__)

# ============ Configuration ============

# image shells summed when periodizing the far field of Gamma
DEFAULT_IMAGES = {2: 4, 3: 1}
QUADRATURE_NODES = 1024
RADIAL_CHUNK = 2048
SINGULAR_TRANSFORMS = ('radial', 'sampled')
BACKENDS = ('spectral', 'pakpark')

MIN_LADDER_POINTS = 4
LOG_RATIO_BOUND = 3.0
CONFIDENCE_WIDTH = 2.0
# the sampled far field d^3((1 - theta) E) aliases unless the cutoff spans this many cells
MIN_THETA_CELLS = 8


class KernelError(LabError):
    pass


class DecayLadderError(LabError):
    pass


# ============ Fundamental solution ============

def newton_radial(r, d: int, order=0) -> np.ndarray:
    """E and its radial derivatives for -Laplace E = delta (C(3) = 1/4pi, C(2) = -1/2pi)."""
    r = np.asarray(r, dtype=float)
    if d == 3:
        c = 1.0 / (4.0 * math.pi)
        return [c / r, -c / r ** 2, 2.0 * c / r ** 3, -6.0 * c / r ** 4][order]
    if d == 2:
        c = 1.0 / (2.0 * math.pi)
        if order == 0:
            return -c * np.log(r)
        return [None, -c / r, c / r ** 2, -2.0 * c / r ** 3][order]
    raise GridError(f'Fundamental solution is only defined for d = 2, 3, got {d}')


def _box_antiderivative(corner, d: int) -> float:
    if d == 3:
        x, y, z = corner
        r = math.sqrt(x * x + y * y + z * z)
        return (y * z * math.log(x + r) + x * z * math.log(y + r) + x * y * math.log(z + r)
                - 0.5 * x * x * math.atan(y * z / (x * r))
                - 0.5 * y * y * math.atan(x * z / (y * r))
                - 0.5 * z * z * math.atan(x * y / (z * r)))
    x, y = corner
    r = math.hypot(x, y)
    return (x * y * math.log(r) - 1.5 * x * y
            + 0.5 * x * x * math.atan(y / x) + 0.5 * y * y * math.atan(x / y))


def cell_average(center, h: float, d: int) -> float:
    """Exact average of E over the cell of side h centred at center."""
    total = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=d):
        corner = [c + s * 0.5 * h for c, s in zip(center, signs)]
        total += math.prod(signs) * _box_antiderivative(corner, d)
    if d == 3:
        return total / (4.0 * math.pi * h ** 3)
    return -total / (2.0 * math.pi * h ** 2)


def fundamental_solution(grid, rho=None) -> Field:
    """Samples of E; nodes with |x| < rho (default 2h) hold the cell average instead."""
    d = grid.d
    if d not in (2, 3):
        raise GridError(f'Fundamental solution needs d = 2 or 3, got {d}')
    rho = 2.0 * grid.h if rho is None else float(rho)
    r = grid.radius
    with np.errstate(divide='ignore'):
        samples = np.where(r > 0, newton_radial(np.where(r > 0, r, 1.0), d), 0.0)
    reach = int(math.ceil(rho / grid.h))
    origin = grid.origin_index
    for offset in itertools.product(range(-reach, reach + 1), repeat=d):
        center = [o * grid.h for o in offset]
        if math.hypot(*center) >= rho:
            continue
        samples[tuple(o + c for o, c in zip(origin, offset))] = cell_average(center, grid.h, d)
    return Field(grid, 'scalar', samples, provenance=(f'cell_average_rho={rho!r}',))


# ============ Gamma kernels ============

def theta_profile(r, scale: float) -> np.ndarray:
    """Radial cutoff: 1 on r <= scale, 0 on r >= 2 scale, C-infinity in between."""
    return 1.0 - smooth_step((np.asarray(r) - scale) / scale)


def _far_coefficients(coords, scale: float, d: int):
    """Radial coefficients b, c of d_j d_k d_l ((1 - theta) E) = b (delta x + ...) + c x_j x_k x_l."""
    r = np.sqrt(sum(c ** 2 for c in coords))
    active = r > 0.5 * scale
    rs = np.where(active, r, scale)
    w0, w1, w2, w3 = smooth_step_derivatives((rs - scale) / scale)
    w1, w2, w3 = w1 / scale, w2 / scale ** 2, w3 / scale ** 3
    e0, e1, e2, e3 = (newton_radial(rs, d, order) for order in range(4))
    f1 = w1 * e0 + w0 * e1
    f2 = w2 * e0 + 2.0 * w1 * e1 + w0 * e2
    f3 = w3 * e0 + 3.0 * w2 * e1 + 3.0 * w1 * e2 + w0 * e3
    b = np.where(active, f2 / rs ** 2 - f1 / rs ** 3, 0.0)
    c = np.where(active, f3 / rs ** 3 - 3.0 * f2 / rs ** 4 + 3.0 * f1 / rs ** 5, 0.0)
    return b, c


def _third_derivative(coords, b, c, j: int, k: int, l: int) -> np.ndarray:
    value = c * coords[j] * coords[k] * coords[l]
    if j == k:
        value = value + b * coords[l]
    if j == l:
        value = value + b * coords[k]
    if k == l:
        value = value + b * coords[j]
    return value


def _periodized_far_fields(grid, scale, images, triples) -> dict:
    """Far part of every requested kernel, summed over the image shells |n|_inf <= images."""
    totals = {t: np.zeros(grid.shape) for t in triples}
    for shift in itertools.product(range(-images, images + 1), repeat=grid.d):
        coords = tuple(np.broadcast_to(c + 2.0 * grid.L * n, grid.shape)
                       for c, n in zip(grid.coords, shift))
        b, c = _far_coefficients(coords, scale, grid.d)
        for triple in triples:
            totals[triple] += _third_derivative(coords, b, c, *triple)
    return totals


def _near_field_transform(radii, scale: float, d: int, nodes=QUADRATURE_NODES) -> np.ndarray:
    """Radial Fourier transform of theta E at the given |xi| values."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = np.concatenate([0.5 * scale * (x + 1.0), scale + 0.5 * scale * (x + 1.0)])
    weights = np.concatenate([0.5 * scale * w, 0.5 * scale * w]) * theta_profile(r, scale)
    if d == 3:
        weights = weights * r
    else:
        weights = -weights * r * np.log(r)
    out = np.empty(len(radii))
    for start in range(0, len(radii), RADIAL_CHUNK):
        chunk = np.asarray(radii[start:start + RADIAL_CHUNK])[:, None] * r[None, :]
        basis = np.sinc(chunk / math.pi) if d == 3 else j0(chunk)
        out[start:start + RADIAL_CHUNK] = basis @ weights
    return out


def _near_field_spectrum(grid, scale, partition, singular_transform) -> np.ndarray:
    """Fourier transform of theta E where chi does not vanish."""
    if singular_transform == 'radial':
        mask = grid.xi_norm < partition.outer
        radii, inverse = np.unique(grid.xi_norm[mask], return_inverse=True)
        out = np.zeros(grid.shape)
        out[mask] = _near_field_transform(radii, scale, grid.d)[inverse]
        return out
    theta_e = fundamental_solution(grid).samples * theta_profile(grid.radius, scale)
    return kernel_spectrum(theta_e, grid)


def gamma_reference_spectrum(grid, j, k, l, partition=None) -> np.ndarray:
    """Closed-form symbol -i chi(xi) xi_j xi_k xi_l / |xi|^2 of Gamma_jkl."""
    partition = partition or build_partition(grid)
    xi = grid.xi
    out = -1j * partition.chi(grid.xi_norm) * xi[j] * xi[k] * xi[l] / safe_square(grid.xi_norm)
    return np.broadcast_to(out, grid.shape).copy()


@dataclass(frozen=True, eq=False)
class LerayKernel:
    """Sampled Gamma_jkl with its continuous-normalized spectrum."""
    grid: object
    indices: tuple
    samples: np.ndarray
    spectrum: np.ndarray
    theta_scale: float
    images: int
    singular_transform: str

    @property
    def l1_norm(self) -> float:
        return float(np.sum(np.abs(self.samples)) * self.grid.cell_volume)

    def field(self) -> Field:
        return Field(self.grid, 'scalar', self.samples)


def _kernel_setup(grid, triples, theta_scale, images, singular_transform):
    d = grid.d
    if d not in (2, 3):
        raise GridError(f'Gamma kernels need d = 2 or 3, got {d}')
    for triple in triples:
        if len(triple) != 3 or any(not 0 <= i < d for i in triple):
            raise KernelError(f'Kernel indices {triple} out of range for d = {d}')
    if singular_transform not in SINGULAR_TRANSFORMS:
        raise KernelError(f'Unknown singular transform {singular_transform!r}')
    scale = grid.window / 2.0 if theta_scale is None else float(theta_scale)
    if 2.0 * scale > grid.window:
        raise KernelError(f'Cutoff support 2*{scale:g} reaches past the window {grid.window:g}')
    if scale < MIN_THETA_CELLS * grid.h:
        raise KernelError(f'Cutoff scale {scale:g} spans fewer than {MIN_THETA_CELLS} cells '
                          f'of h = {grid.h:g}')
    images = DEFAULT_IMAGES[d] if images is None else int(images)
    if images < 0:
        raise KernelError(f'Image shell count must be >= 0, got {images}')
    return scale, images


def _assemble(grid, triples, theta_scale, partition, images, singular_transform) -> dict:
    """psi * d^3((1 - theta) E) + d^3 psi * (theta E) for each triple."""
    scale, images = _kernel_setup(grid, triples, theta_scale, images, singular_transform)
    partition = partition or build_partition(grid)
    chi = partition.chi(grid.xi_norm)
    far = _periodized_far_fields(grid, scale, images, triples)
    near = chi * _near_field_spectrum(grid, scale, partition, singular_transform)

    kernels = {}
    for j, k, l in triples:
        derivative = (1j * grid.xi[j]) * (1j * grid.xi[k]) * (1j * grid.xi[l])
        spectrum = chi * kernel_spectrum(far[(j, k, l)], grid) + derivative * near
        samples = kernel_from_spectrum(spectrum, grid)
        kernels[(j, k, l)] = LerayKernel(grid, (j, k, l), samples, spectrum, scale, images,
                                         singular_transform)
    logger.debug('assembled %d Gamma kernels on %s (scale %g, %d image shells, %s)',
                 len(triples), grid.describe(), scale, images, singular_transform)
    return kernels


def assemble_gamma(grid, j, k, l, theta_scale=None, partition=None, images=None,
                   singular_transform='radial') -> LerayKernel:
    """Assemble Gamma_jkl = psi * d^3((1 - theta) E) + d^3 psi * (theta E)."""
    return _assemble(grid, [(j, k, l)], theta_scale, partition, images, singular_transform)[(j, k, l)]


@dataclass
class GammaBank:
    """All Gamma_jkl on one grid; permutations of (j, k, l) share one kernel."""
    grid: object
    theta_scale: float
    kernels: dict = field(default_factory=dict)

    def get(self, j, k, l) -> LerayKernel:
        return self.kernels[tuple(sorted((j, k, l)))]


def assemble_gamma_bank(grid, theta_scale=None, partition=None, images=None,
                        singular_transform='radial') -> GammaBank:
    triples = list(itertools.combinations_with_replacement(range(grid.d), 3))
    kernels = _assemble(grid, triples, theta_scale, partition, images, singular_transform)
    return GammaBank(grid, kernels[triples[0]].theta_scale, kernels)


# ============ Decay reports ============

@dataclass(frozen=True)
class DecayReport:
    """Low-frequency trace over a lambda ladder with its log-log fit."""
    quantity: str
    mode: str
    lambdas: tuple
    values: tuple
    slope: float
    slope_stderr: float
    intercept: float
    log_ratio: float
    window: float
    floor: float = 0.0
    truncated: bool = False
    pairings: tuple = ()
    zero_mode: tuple = ()

    @property
    def vanished(self) -> bool:
        return all(v <= self.floor for v in self.values)

    @property
    def log_correction_bounded(self) -> bool:
        return bool(self.log_ratio < LOG_RATIO_BOUND)

    @property
    def slope_band(self) -> tuple:
        return (self.slope - CONFIDENCE_WIDTH * self.slope_stderr,
                self.slope + CONFIDENCE_WIDTH * self.slope_stderr)

    def rows(self):
        return list(zip(self.lambdas, self.values))

    def comments(self):
        return [f'quantity={self.quantity}', f'mode={self.mode}', f'slope={self.slope!r}',
                f'slope_stderr={self.slope_stderr!r}', f'intercept={self.intercept!r}',
                f'log_ratio={self.log_ratio!r}', f'window={self.window!r}',
                f'truncated={self.truncated}', f'vanished={self.vanished}']


def validate_ladder(ladder, grid, cap=None) -> tuple:
    """Strictly increasing, at least four points, all below cap (default L/8)."""
    ladder = tuple(float(v) for v in ladder)
    cap = grid.L / 8.0 if cap is None else cap
    if len(ladder) < MIN_LADDER_POINTS:
        raise DecayLadderError(f'Ladder needs at least {MIN_LADDER_POINTS} points, got {len(ladder)}')
    if ladder[0] <= 0 or any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise DecayLadderError('Ladder must be positive and strictly increasing')
    if ladder[-1] > cap * (1.0 + 1e-12):
        raise DecayLadderError(f'Ladder top {ladder[-1]:g} exceeds {cap:g}')
    return ladder


def geometric_ladder(start: float, factor: float, count: int) -> tuple:
    return tuple(start * factor ** i for i in range(count))


def make_decay_report(quantity, mode, lambdas, values, window, floor=0.0, truncated=False,
                      pairings=(), zero_mode=()) -> DecayReport:
    """Fit log(value) against log(lambda); the two largest lambda are dropped when truncated."""
    lambdas = tuple(float(v) for v in lambdas)
    values = tuple(float(v) for v in values)
    fit_l, fit_v = lambdas, values
    if truncated and len(lambdas) >= MIN_LADDER_POINTS + 2:
        fit_l, fit_v = lambdas[:-2], values[:-2]
    if all(v <= floor for v in values):
        slope = stderr = intercept = math.nan
    else:
        clipped = np.maximum(np.asarray(fit_v), max(floor, 1e-300))
        fit = stats.linregress(np.log(fit_l), np.log(clipped))
        slope, stderr, intercept = float(fit.slope), float(fit.stderr), float(fit.intercept)

    ratios = [lam * v / math.log(lam) for lam, v in zip(lambdas, values) if lam > 1.0 and v > floor]
    log_ratio = max(ratios) / min(ratios) if len(ratios) >= 2 else math.nan
    return DecayReport(quantity, mode, lambdas, values, slope, stderr, intercept, log_ratio,
                       float(window), float(floor), bool(truncated), tuple(pairings), tuple(zero_mode))


def gamma_lowfreq_decay(kernel: LerayKernel, ladder, partition=None) -> DecayReport:
    """Box L^1 norm of chi(lam D) Gamma_jkl along the ladder."""
    grid = kernel.grid
    ladder = validate_ladder(ladder, grid)
    partition = partition or build_partition(grid)

    def l1_at(lam):
        samples = kernel_from_spectrum(partition.lowpass_symbol(lam) * kernel.spectrum, grid)
        return float(np.sum(np.abs(samples)) * grid.cell_volume)

    values = map_sweep(l1_at, ladder)
    name = 'Gamma_' + ''.join(str(i) for i in kernel.indices)
    return make_decay_report(name, 'box_l1', ladder, values, grid.L)


# ============ Projection and PD ============

def tensor_product(u: Field, v: Field) -> Field:
    """(u (x) v)_kj = u_k v_j."""
    if u.rank != 'vector' or v.rank != 'vector' or u.grid != v.grid:
        raise LabError('Tensor product needs two vector fields on one grid')
    return Field(u.grid, 'tensor', np.einsum('k...,j...->kj...', u.samples, v.samples))


def leray_project(u: Field, zero_mode_policy='identity') -> Field:
    """P u; by default the zero mode is kept and the result is flagged."""
    if u.rank != 'vector':
        raise LabError(f'Leray projection needs a vector field, got {u.rank}')
    out = apply_multiplier(u, leray_symbol(u.grid.d).with_policy(zero_mode_policy))
    if zero_mode_policy == 'identity':
        out = Field(out.grid, out.rank, out.samples, out.spectrum,
                    out.provenance + ('leray_zero_mode_kept',))
    return out


def leray_complement(u: Field) -> Field:
    """(Id - P) u, the gradient part."""
    if u.rank != 'vector':
        raise LabError(f'Leray projection needs a vector field, got {u.rank}')
    return apply_multiplier(u, gradient_part_symbol(u.grid.d))


def divergence_hat(f_hat: np.ndarray, grid) -> np.ndarray:
    """Spectrum of D(f)_j = d_k f_kj."""
    return np.stack([sum(1j * grid.xi[k] * f_hat[k, j] for k in range(grid.d))
                     for j in range(grid.d)])


def project_hat(v_hat: np.ndarray, grid) -> np.ndarray:
    """Leray projection of a vector spectrum; the zero mode is left untouched."""
    dot = sum(grid.xi[k] * v_hat[k] for k in range(grid.d)) / safe_square(grid.xi_norm)
    return np.stack([v_hat[j] - grid.xi[j] * dot for j in range(grid.d)])


def pdiv_hat(f_hat: np.ndarray, grid) -> np.ndarray:
    out = project_hat(divergence_hat(f_hat, grid), grid)
    out[(Ellipsis,) + (0,) * grid.d] = 0.0
    return out


def divergence(u: Field) -> Field:
    """Scalar divergence of a vector field."""
    spectrum = spectrum_of(u)
    div_hat = sum(1j * u.grid.xi[k] * spectrum[k] for k in range(u.grid.d))
    return field_from_spectrum(u.grid, np.broadcast_to(div_hat, u.grid.shape), 'scalar')


def divergence_sup(u: Field, window=False) -> float:
    return lp_norm(divergence(u).samples, u.grid, math.inf, window=window)


def tensor_divergence(f: Field) -> Field:
    """D(f) without projection."""
    if f.rank != 'tensor':
        raise LabError(f'D needs a tensor field, got {f.rank}')
    return field_from_spectrum(f.grid, divergence_hat(spectrum_of(f), f.grid), 'vector')


def _pakpark_hat(f_hat, grid, bank: GammaBank, partition) -> np.ndarray:
    d = grid.d
    chi = partition.chi(grid.xi_norm)
    low = chi * divergence_hat(f_hat, grid)
    for j in range(d):
        for k in range(d):
            for l in range(d):
                low[j] += bank.get(j, k, l).spectrum * f_hat[k, l]
    out = low + (1.0 - chi) * pdiv_hat(f_hat, grid)
    out[(Ellipsis,) + (0,) * d] = 0.0
    return out


def pdiv(f: Field, backend='spectral', bank: GammaBank | None = None, partition=None) -> Field:
    """PD(f) = P div f of a tensor field; the result has zero mean."""
    if f.rank != 'tensor':
        raise LabError(f'PD needs a tensor field, got {f.rank}')
    if backend not in BACKENDS:
        raise LabError(f'Unknown PD backend {backend!r}')
    grid = f.grid
    f_hat = spectrum_of(f)
    if backend == 'spectral':
        return field_from_spectrum(grid, pdiv_hat(f_hat, grid), 'vector', f.provenance)
    partition = partition or build_partition(grid)
    if bank is None:
        bank = assemble_gamma_bank(grid, partition=partition)
    if bank.grid != grid:
        raise KernelError(f'Kernels were assembled on {bank.grid.describe()}, field lives on '
                          f'{grid.describe()}')
    return field_from_spectrum(grid, _pakpark_hat(f_hat, grid, bank, partition), 'vector',
                               f.provenance + ('pakpark',))


def pdiv_sph_certificate(f: Field, ladder, backend='spectral', mode='weak', bank=None,
                         partition=None) -> DecayReport:
    """Low-frequency trace of PD(f), certifying membership in S'_h."""
    from sph import lowpass_trace

    image = pdiv(f, backend=backend, bank=bank, partition=partition)
    scale = max(f.sup(window=False), 1e-300)
    return lowpass_trace(image, ladder, mode=mode, partition=partition, reference=scale,
                         quantity=f'PD[{backend}]')
