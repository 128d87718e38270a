#!/usr/bin/env python3
"""
Bounded Leray Lab - sampled-field substrate.

Grids on the box [-L, L)^d, unitary Fourier transforms, Fourier multipliers
and the Littlewood-Paley machinery (chi, phi, psi, dyadic blocks) that every
other module of the lab is written against.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft
from scipy.special import expit

logger = logging.getLogger(__name__)

# ============ Configuration ============

MAX_GRID_NODES = int(os.environ.get('LLAB_MAX_NODES', str(2 ** 25)))
FFT_WORKERS = int(os.environ.get('LLAB_FFT_WORKERS', '1'))
SWEEP_WORKERS = int(os.environ.get('LLAB_SWEEP_WORKERS', '1'))

FIELD_MAGIC = b'LLAB'
FIELD_FORMAT_VERSION = 1
RANK_CODES = {'scalar': 0, 'vector': 1, 'tensor': 2}
ZERO_MODE_POLICIES = ('zero', 'identity', 'passthrough')

# chi = 1 on |xi| <= CHI_INNER, chi = 0 on |xi| >= CHI_OUTER
CHI_INNER = 1.1
CHI_OUTER = 1.9
WINDOW_FRACTION = 0.25
SUPPORT_TOLERANCE = 1e-10


# ============ Errors ============

class LabError(ValueError):
    """Base class for the errors raised by the lab's operations."""


class GridError(LabError):
    pass


class NonFiniteFieldError(LabError):
    pass


class SymbolError(LabError):
    pass


class BlockRangeError(LabError):
    pass


class SpectralSupportError(LabError):
    pass


class FieldFormatError(LabError):
    pass


# ============ Grids ============

@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on [-L, L)^d; only |x| <= window is trusted by diagnostics."""
    d: int
    L: float
    N: int
    window: float

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def dxi(self) -> float:
        return math.pi / self.L

    @property
    def nyquist(self) -> float:
        return math.pi / self.h

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.N ** self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def origin_index(self) -> tuple:
        return (self.N // 2,) * self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.N)

    @cached_property
    def coords(self) -> tuple:
        return tuple(np.meshgrid(*([self.axis] * self.d), indexing='ij', sparse=True))

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(sum(c ** 2 for c in self.coords)) * np.ones(self.shape)

    @cached_property
    def window_mask(self) -> np.ndarray:
        return self.radius <= self.window

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * scipy.fft.fftfreq(self.N, d=self.h)

    @cached_property
    def xi(self) -> tuple:
        return tuple(np.meshgrid(*([self.wavenumbers] * self.d), indexing='ij', sparse=True))

    @cached_property
    def xi_norm(self) -> np.ndarray:
        return np.sqrt(sum(k ** 2 for k in self.xi)) * np.ones(self.shape)

    @cached_property
    def xi_max(self) -> float:
        return float(self.xi_norm.max())

    def describe(self) -> str:
        return f'{self.d}x{self.N}x{self.L:g}'


def make_grid(d, L, N, window=None) -> GridSpec:
    """Build the grid for [-L, L)^d with N points per axis."""
    if d not in (1, 2, 3):
        raise GridError(f'Dimension must be 1, 2 or 3, got {d}')
    if not isinstance(N, (int, np.integer)) or N < 16 or N & (N - 1):
        raise GridError(f'Points per axis must be a power of two >= 16, got {N}')
    if not L > 0:
        raise GridError(f'Half width must be positive, got {L}')
    if int(N) ** d > MAX_GRID_NODES:
        raise GridError(f'{int(N) ** d} nodes exceed the memory budget of {MAX_GRID_NODES}')
    max_window = float(L) * WINDOW_FRACTION
    window = max_window if window is None else float(window)
    if not 0 < window <= max_window:
        raise GridError(f'Window radius must lie in (0, L/4], got {window}')
    return GridSpec(d=int(d), L=float(L), N=int(N), window=window)


def parse_grid(text: str) -> GridSpec:
    """Parse the 'dxNxL' form used on the command line, e.g. '2x256x64' or '2x256x8pi'."""
    try:
        d, n, length = text.lower().strip().split('x')
        if length.endswith('pi'):
            length = float(length[:-2] or 1.0) * math.pi
        return make_grid(int(d), float(length), int(n))
    except ValueError as e:
        if isinstance(e, GridError):
            raise
        raise GridError(f"Grid must look like 'dxNxL', got {text!r}") from e


# ============ Fields ============

def _component_shape(rank: str, d: int) -> tuple:
    if rank == 'scalar':
        return ()
    if rank == 'vector':
        return (d,)
    if rank == 'tensor':
        return (d, d)
    raise GridError(f'Unknown rank {rank!r}')


def _frozen(array, dtype) -> np.ndarray:
    view = np.ascontiguousarray(array, dtype=dtype).view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class Field:
    """Real samples of a scalar, vector or tensor field, with an optional cached spectrum."""
    grid: GridSpec
    rank: str
    samples: np.ndarray
    spectrum: np.ndarray | None = None
    provenance: tuple = ()

    def __post_init__(self):
        expected = _component_shape(self.rank, self.grid.d) + self.grid.shape
        if np.shape(self.samples) != expected:
            raise GridError(f'{self.rank} field on {self.grid.describe()} needs shape {expected}, '
                            f'got {np.shape(self.samples)}')
        object.__setattr__(self, 'samples', _frozen(self.samples, np.float64))
        if self.spectrum is not None:
            object.__setattr__(self, 'spectrum', _frozen(self.spectrum, np.complex128))

    @property
    def component_shape(self) -> tuple:
        return _component_shape(self.rank, self.grid.d)

    def magnitude(self) -> np.ndarray:
        """Pointwise Euclidean norm over the components."""
        if self.rank == 'scalar':
            return np.abs(self.samples)
        flat = self.samples.reshape((-1,) + self.grid.shape)
        return np.sqrt(np.sum(flat ** 2, axis=0))

    def mean(self):
        """Box average per component, i.e. the zero Fourier mode."""
        axes = tuple(range(-self.grid.d, 0))
        return self.samples.mean(axis=axes)

    def sup(self, window=True) -> float:
        return lp_norm(self.magnitude(), self.grid, math.inf, window=window)

    def with_samples(self, samples, provenance=None) -> 'Field':
        return Field(self.grid, self.rank, samples,
                     provenance=self.provenance if provenance is None else provenance)

    def _check_compatible(self, other):
        if not isinstance(other, Field) or other.grid != self.grid or other.rank != self.rank:
            raise GridError('Fields must share grid and rank')

    def __add__(self, other):
        self._check_compatible(other)
        return self.with_samples(self.samples + other.samples)

    def __sub__(self, other):
        self._check_compatible(other)
        return self.with_samples(self.samples - other.samples)

    def __mul__(self, scalar):
        return self.with_samples(self.samples * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_samples(-self.samples)


def make_field(grid: GridSpec, samples, rank=None) -> Field:
    """Wrap samples in a Field, inferring the rank from their shape."""
    samples = np.asarray(samples, dtype=np.float64)
    if rank is None:
        extra = samples.ndim - grid.d
        rank = {0: 'scalar', 1: 'vector', 2: 'tensor'}.get(extra)
        if rank is None:
            raise GridError(f'Cannot infer rank from shape {samples.shape}')
    return Field(grid, rank, samples)


def field_from_function(grid: GridSpec, fn: Callable, rank='scalar') -> Field:
    """Sample fn(*coords) on the grid; vector/tensor fns return a sequence of components."""
    values = fn(*grid.coords)
    shape = _component_shape(rank, grid.d) + grid.shape
    samples = np.empty(shape)
    if rank == 'scalar':
        samples[...] = np.broadcast_to(values, grid.shape)
    else:
        for idx in np.ndindex(*shape[:-grid.d]):
            component = values
            for i in idx:
                component = component[i]
            samples[idx] = np.broadcast_to(component, grid.shape)
    return Field(grid, rank, samples)


def random_smooth_field(grid: GridSpec, rank='scalar', seed=0, kmax=4.0, mean_zero=True) -> Field:
    """Seeded band-limited field (|xi| <= kmax) scaled to unit sup norm."""
    rng = np.random.default_rng(seed)
    shape = _component_shape(rank, grid.d) + grid.shape
    spectrum = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    spectrum *= grid.xi_norm <= kmax
    if mean_zero:
        spectrum[(Ellipsis,) + (0,) * grid.d] = 0.0
    samples = ifft_ortho(spectrum, grid.d)
    peak = float(np.abs(samples).max())
    if peak == 0:
        raise GridError(f'No grid frequency lies within |xi| <= {kmax}')
    return Field(grid, rank, samples / peak)


def constant_field(grid: GridSpec, value=1.0, rank='scalar') -> Field:
    shape = _component_shape(rank, grid.d)
    value = np.broadcast_to(np.asarray(value, dtype=float), shape)
    samples = np.broadcast_to(value.reshape(shape + (1,) * grid.d), shape + grid.shape).copy()
    return Field(grid, rank, samples)


# ============ Quadrature ============

def lp_norm(values, grid: GridSpec, p, window=True) -> float:
    """Midpoint-quadrature L^p norm over the trusted window (or the whole box)."""
    values = np.asarray(values)
    if values.ndim > grid.d:
        values = np.sqrt(np.sum(np.abs(values.reshape((-1,) + grid.shape)) ** 2, axis=0))
    mag = np.abs(values)
    if window:
        mag = mag[grid.window_mask]
    if mag.size == 0:
        return 0.0
    if p == math.inf:
        return float(mag.max())
    if p < 1:
        raise LabError(f'Integrability index must be >= 1, got {p}')
    return float((np.sum(mag ** p) * grid.cell_volume) ** (1.0 / p))


def window_pairing(values, weight, grid: GridSpec) -> float:
    """Quadrature of values * weight over the window."""
    mask = grid.window_mask
    return float(np.sum(np.asarray(values)[mask] * np.asarray(weight)[mask]) * grid.cell_volume)


# ============ Transforms ============

def _axes(d: int) -> tuple:
    return tuple(range(-d, 0))


def fft_ortho(samples, d: int) -> np.ndarray:
    return scipy.fft.fftn(samples, axes=_axes(d), norm='ortho', workers=FFT_WORKERS)


def ifft_ortho(spectrum, d: int) -> np.ndarray:
    return scipy.fft.ifftn(spectrum, axes=_axes(d), norm='ortho', workers=FFT_WORKERS).real


def zero_mode_scale(grid: GridSpec) -> float:
    """Factor between a box average and its unitary zero-mode coefficient."""
    return math.sqrt(grid.n_nodes)


def transform(field: Field) -> Field:
    """Attach the unitary spectrum; a field that already carries one is returned as is."""
    if field.spectrum is not None:
        return field
    if not np.all(np.isfinite(field.samples)):
        raise NonFiniteFieldError('Field samples contain NaN or Inf')
    return replace(field, spectrum=fft_ortho(field.samples, field.grid.d))


def field_from_spectrum(grid: GridSpec, spectrum, rank: str, provenance=()) -> Field:
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    return Field(grid, rank, ifft_ortho(spectrum, grid.d), spectrum=spectrum, provenance=provenance)


def inverse_transform(field: Field) -> Field:
    """Resynthesize samples from the cached spectrum."""
    if field.spectrum is None:
        raise LabError('Field has no spectrum to invert')
    return field_from_spectrum(field.grid, field.spectrum, field.rank, field.provenance)


def spectrum_of(field: Field) -> np.ndarray:
    return transform(field).spectrum


def kernel_spectrum(samples, grid: GridSpec) -> np.ndarray:
    """Continuous-normalized transform of a kernel whose origin sits at the grid's x = 0 node."""
    shifted = scipy.fft.ifftshift(samples, axes=_axes(grid.d))
    return scipy.fft.fftn(shifted, axes=_axes(grid.d), workers=FFT_WORKERS) * grid.cell_volume


def kernel_from_spectrum(spectrum, grid: GridSpec) -> np.ndarray:
    """Inverse of kernel_spectrum: samples with the origin at the x = 0 node."""
    values = scipy.fft.ifftn(spectrum, axes=_axes(grid.d), workers=FFT_WORKERS).real / grid.cell_volume
    return scipy.fft.fftshift(values, axes=_axes(grid.d))


# ============ Multipliers ============

def safe_square(xi_norm) -> np.ndarray:
    sq = np.asarray(xi_norm) ** 2
    return np.where(sq == 0, 1.0, sq)


@dataclass(frozen=True)
class MultiplierSymbol:
    """Symbol sigma(xi) of the Fourier multiplier sigma(D).

    rule(xi, xi_norm) receives the wavevector components (sparse, broadcastable)
    and |xi|; matrix symbols return an array of shape (d, d, ...).
    """
    name: str
    rule: Callable
    degree: int | None = None
    zero_mode_policy: str = 'zero'
    matrix: bool = False

    def __post_init__(self):
        if self.zero_mode_policy not in ZERO_MODE_POLICIES:
            raise SymbolError(f'Unknown zero-mode policy {self.zero_mode_policy!r}')

    def evaluate(self, grid: GridSpec, dilation=1.0) -> np.ndarray:
        xi = tuple(k * dilation for k in grid.xi)
        norm = grid.xi_norm * dilation
        with np.errstate(divide='ignore', invalid='ignore'):
            values = np.asarray(self.rule(xi, norm))
        shape = ((grid.d, grid.d) if self.matrix else ()) + grid.shape
        values = np.broadcast_to(values, shape)
        nonzero = grid.xi_norm > 0
        if np.isnan(values[..., nonzero]).any():
            raise SymbolError(f'Symbol {self.name} is NaN at a nonzero grid frequency')
        return values

    def with_policy(self, policy: str) -> 'MultiplierSymbol':
        return replace(self, zero_mode_policy=policy)


def homogeneity_defect(symbol: MultiplierSymbol, grid: GridSpec) -> float:
    """max |sigma(2 xi) - 2^deg sigma(xi)| over nonzero grid xi, relative to max |sigma|."""
    if symbol.degree is None:
        raise SymbolError(f'Symbol {symbol.name} has no homogeneity degree')
    base = symbol.evaluate(grid)
    doubled = symbol.evaluate(grid, dilation=2.0)
    nonzero = grid.xi_norm > 0
    diff = np.abs(doubled - 2.0 ** symbol.degree * base)[..., nonzero]
    scale = max(1.0, float(np.abs(doubled[..., nonzero]).max()))
    return float(diff.max()) / scale


def derivative_symbol(j: int) -> MultiplierSymbol:
    return MultiplierSymbol(f'd{j}', lambda xi, n: 1j * xi[j], degree=1)


def constant_symbol(value=1.0) -> MultiplierSymbol:
    return MultiplierSymbol(f'const{value:g}', lambda xi, n: value + 0 * n, degree=0,
                            zero_mode_policy='identity')


def riesz_symbol(j: int, k: int) -> MultiplierSymbol:
    """xi_j xi_k / |xi|^2, the (j, k) entry of the gradient part of the Leray symbol."""
    return MultiplierSymbol(f'riesz{j}{k}', lambda xi, n: xi[j] * xi[k] / safe_square(n), degree=0)


def laplacian_symbol() -> MultiplierSymbol:
    return MultiplierSymbol('laplacian', lambda xi, n: -n ** 2, degree=2)


def leray_symbol(d: int) -> MultiplierSymbol:
    """Id - xi xi^T / |xi|^2 at xi != 0."""
    def rule(xi, n):
        sq = safe_square(n)
        out = np.empty((d, d) + np.shape(n))
        for a in range(d):
            for b in range(d):
                out[a, b] = (1.0 if a == b else 0.0) - xi[a] * xi[b] / sq
        return out
    return MultiplierSymbol('leray', rule, degree=0, zero_mode_policy='identity', matrix=True)


def gradient_part_symbol(d: int) -> MultiplierSymbol:
    """xi xi^T / |xi|^2, the complement Id - P of the Leray projector."""
    leray = leray_symbol(d)
    eye = np.eye(d).reshape((d, d) + (1,) * d)
    return MultiplierSymbol('leray_complement', lambda xi, n: eye - leray.rule(xi, n),
                            degree=0, zero_mode_policy='zero', matrix=True)


def _apply_values(spectrum, values, symbol: MultiplierSymbol, rank: str) -> np.ndarray:
    if symbol.matrix:
        if rank != 'vector':
            raise SymbolError(f'Matrix symbol {symbol.name} needs a vector field, got {rank}')
        return np.einsum('ij...,j...->i...', values, spectrum)
    return values * spectrum


def apply_multiplier(field: Field, symbol: MultiplierSymbol) -> Field:
    """sigma(D) field; the zero mode follows the symbol's zero_mode_policy."""
    spectrum = spectrum_of(field)
    values = symbol.evaluate(field.grid)
    out = _apply_values(spectrum, values, symbol, field.rank)
    zero = (Ellipsis,) + (0,) * field.grid.d
    if symbol.zero_mode_policy == 'zero':
        out[zero] = 0.0
    else:
        out[zero] = spectrum[zero]
    provenance = field.provenance
    if symbol.zero_mode_policy == 'passthrough':
        provenance = provenance + (f'zero_mode_passthrough:{symbol.name}',)
    return field_from_spectrum(field.grid, out, field.rank, provenance)


# ============ Littlewood-Paley ============

def smooth_step(t) -> np.ndarray:
    """C-infinity step from the exp(-1/t) bump: 0 for t <= 0, 1 for t >= 1."""
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    tt = np.where(inside, t, 0.5)
    g = 1.0 / (1.0 - tt) - 1.0 / tt
    return np.where(inside, expit(g), np.where(t >= 1, 1.0, 0.0))


def smooth_step_derivatives(t):
    """smooth_step and its first three derivatives, evaluated analytically."""
    t = np.asarray(t, dtype=float)
    # outside (0.01, 0.99) the derivatives are below 1e-30
    inside = (t > 0.01) & (t < 0.99)
    tt = np.where(inside, t, 0.5)
    g = 1.0 / (1.0 - tt) - 1.0 / tt
    g1 = 1.0 / (1.0 - tt) ** 2 + 1.0 / tt ** 2
    g2 = 2.0 / (1.0 - tt) ** 3 - 2.0 / tt ** 3
    g3 = 6.0 / (1.0 - tt) ** 4 + 6.0 / tt ** 4
    s = expit(g)
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    s3 = s1 * (1.0 - 6.0 * s + 6.0 * s ** 2)
    d1 = np.where(inside, s1 * g1, 0.0)
    d2 = np.where(inside, s2 * g1 ** 2 + s1 * g2, 0.0)
    d3 = np.where(inside, s3 * g1 ** 3 + 3.0 * s2 * g1 * g2 + s1 * g3, 0.0)
    return smooth_step(t), d1, d2, d3


@dataclass(frozen=True)
class DyadicPartition:
    """chi, phi(xi) = chi(xi/2) - chi(xi) and the block range the grid can represent."""
    grid: GridSpec
    inner: float
    outer: float
    m_min: int
    m_max: int

    def chi(self, r) -> np.ndarray:
        return 1.0 - smooth_step((np.asarray(r) - self.inner) / (self.outer - self.inner))

    def phi(self, r) -> np.ndarray:
        r = np.asarray(r)
        return self.chi(r / 2.0) - self.chi(r)

    def block_symbol(self, m: int, homogeneous: bool) -> np.ndarray:
        if not homogeneous and m == -1:
            return self.chi(self.grid.xi_norm)
        return self.phi(self.grid.xi_norm * 2.0 ** (-m))

    def lowpass_symbol(self, lam: float) -> np.ndarray:
        """chi(lam xi) on the grid."""
        return self.chi(self.grid.xi_norm * lam)

    def block_range(self, homogeneous: bool) -> range:
        return range(self.m_min if homogeneous else -1, self.m_max + 1)

    def check_block(self, m: int, homogeneous: bool):
        if m not in self.block_range(homogeneous):
            kind = 'homogeneous' if homogeneous else 'non-homogeneous'
            raise BlockRangeError(f'{kind} block {m} outside representable range '
                                  f'{self.block_range(homogeneous)}')

    @cached_property
    def psi(self) -> Field:
        """Kernel of Delta_{-1} = chi(D), sampled with its origin at x = 0."""
        return Field(self.grid, 'scalar', kernel_from_spectrum(self.chi(self.grid.xi_norm), self.grid))

    @cached_property
    def psi_l1(self) -> float:
        return float(np.sum(np.abs(self.psi.samples)) * self.grid.cell_volume)


@lru_cache(maxsize=32)
def build_partition(grid: GridSpec, inner=CHI_INNER, outer=CHI_OUTER) -> DyadicPartition:
    """Dyadic partition for the grid; homogeneous blocks cover every nonzero grid frequency."""
    if not 0 < inner < outer <= 2.0:
        raise GridError(f'Need 0 < inner < outer <= 2, got ({inner}, {outer})')
    if outer > 2.0 * inner:
        raise GridError('Annuli of non-adjacent blocks would overlap')
    probe = DyadicPartition(grid, inner, outer, 0, 0)

    m_min = math.floor(math.log2(grid.dxi / outer))
    while probe.chi(grid.dxi * 2.0 ** (-m_min)) != 0.0:
        m_min -= 1
    m_max = math.ceil(math.log2(grid.xi_max / inner)) - 1
    while probe.chi(grid.xi_max * 2.0 ** (-m_max - 1)) != 1.0:
        m_max += 1
    if m_max < m_min + 3:
        raise GridError(f'Grid {grid.describe()} too coarse for four dyadic blocks')
    logger.debug('partition on %s: blocks %d..%d', grid.describe(), m_min, m_max)
    return DyadicPartition(grid, float(inner), float(outer), m_min, m_max)


def dyadic_block(field: Field, m: int, homogeneous=False, partition=None) -> Field:
    """Delta_m (or the homogeneous block when homogeneous=True) applied to field."""
    partition = partition or build_partition(field.grid)
    partition.check_block(m, homogeneous)
    spectrum = spectrum_of(field) * partition.block_symbol(m, homogeneous)
    return field_from_spectrum(field.grid, spectrum, field.rank, field.provenance)


def littlewood_paley_sum(field: Field, homogeneous=False, partition=None) -> Field:
    """Sum of every representable block, block by block."""
    partition = partition or build_partition(field.grid)
    field = transform(field)
    total = np.zeros(field.component_shape + field.grid.shape)
    for m in partition.block_range(homogeneous):
        total += dyadic_block(field, m, homogeneous, partition).samples
    return field.with_samples(total)


def lowpass(field: Field, lam: float, partition=None) -> Field:
    """chi(lam D) field."""
    partition = partition or build_partition(field.grid)
    spectrum = spectrum_of(field) * partition.lowpass_symbol(lam)
    return field_from_spectrum(field.grid, spectrum, field.rank, field.provenance)


# ============ Bernstein and multiplier bounds ============

@dataclass(frozen=True)
class BernsteinReport:
    k: int
    p: float
    q: float
    lam: float
    support: tuple
    ball_ratio: float
    annulus_ratio: float | None = None
    annulus_inverse: float | None = None


def _support_mask(grid: GridSpec, lam: float, support: Sequence) -> np.ndarray:
    kind = support[0]
    if kind == 'ball':
        return grid.xi_norm <= lam * support[1]
    if kind == 'annulus':
        return (grid.xi_norm >= lam * support[1]) & (grid.xi_norm <= lam * support[2])
    raise LabError(f"Support must be ('ball', R) or ('annulus', r, R), got {support!r}")


def gradient_magnitude(field: Field, k: int) -> np.ndarray:
    """Pointwise |nabla^k u| over every ordered k-tuple of derivatives and component."""
    spectrum = spectrum_of(field)
    total = np.zeros(field.grid.shape)
    for combo in itertools.product(range(field.grid.d), repeat=k):
        factor = np.ones(field.grid.shape, dtype=complex)
        for j in combo:
            factor = factor * (1j * field.grid.xi[j])
        values = ifft_ortho(spectrum * factor, field.grid.d)
        total += np.sum(values.reshape((-1,) + field.grid.shape) ** 2, axis=0)
    return np.sqrt(total)


def bernstein_check(field: Field, k: int, p, q, lam: float, support) -> BernsteinReport:
    """Measured Bernstein ratios for a field spectrally supported in a ball or annulus."""
    grid = field.grid
    mask = _support_mask(grid, lam, support)
    power = np.abs(spectrum_of(field)) ** 2
    power = power.reshape((-1,) + grid.shape).sum(axis=0)
    total = float(power.sum())
    outside = float(power[~mask].sum())
    if total > 0 and outside > SUPPORT_TOLERANCE * total:
        raise SpectralSupportError(f'{outside / total:.3e} of the spectral mass lies outside {support}')

    norm_p = lp_norm(field.samples, grid, p)
    if norm_p == 0:
        raise LabError('Bernstein ratios need a field with nonzero norm')
    grad = gradient_magnitude(field, k)
    inv_p = 0.0 if p == math.inf else 1.0 / p
    inv_q = 0.0 if q == math.inf else 1.0 / q
    ball = lp_norm(grad, grid, q) / (lam ** (k + grid.d * (inv_p - inv_q)) * norm_p)
    if support[0] != 'annulus':
        return BernsteinReport(k, p, q, lam, tuple(support), ball)
    ratio = lp_norm(grad, grid, p) / (lam ** k * norm_p)
    inverse = math.inf if ratio == 0 else 1.0 / ratio
    return BernsteinReport(k, p, q, lam, tuple(support), ball, ratio, inverse)


@dataclass(frozen=True)
class BlockBoundReport:
    m: int
    ratio: float | None
    numerator: float
    denominator: float

    @property
    def skipped(self) -> bool:
        return self.ratio is None


def multiplier_block_bound(field: Field, symbol: MultiplierSymbol, m: int, p=math.inf,
                           partition=None) -> BlockBoundReport:
    """||Delta_m sigma(D) f||_p / (2^(m deg) ||Delta_m f||_p) for a homogeneous symbol."""
    if symbol.degree is None:
        raise SymbolError(f'Symbol {symbol.name} is not homogeneous')
    partition = partition or build_partition(field.grid)
    field = transform(field)
    block = dyadic_block(field, m, homogeneous=True, partition=partition)
    image = dyadic_block(apply_multiplier(field, symbol), m, homogeneous=True, partition=partition)
    num = lp_norm(image.samples, field.grid, p)
    den = lp_norm(block.samples, field.grid, p)
    floor = 1e-14 * max(lp_norm(field.samples, field.grid, p), 1e-300)
    if den <= floor:
        logger.debug('block %d of %s skipped: empty denominator', m, symbol.name)
        return BlockBoundReport(m, None, num, den)
    return BlockBoundReport(m, num / (2.0 ** (m * symbol.degree) * den), num, den)


def multiplier_block_sweep(field: Field, symbol: MultiplierSymbol, blocks: Iterable[int],
                           p=math.inf, partition=None) -> list:
    partition = partition or build_partition(field.grid)
    field = transform(field)
    return map_sweep(lambda m: multiplier_block_bound(field, symbol, m, p, partition), blocks)


# ============ Sweeps ============

def map_sweep(fn: Callable, items: Iterable) -> list:
    """Ordered map, spread over SWEEP_WORKERS threads when configured."""
    items = list(items)
    if SWEEP_WORKERS <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=SWEEP_WORKERS) as pool:
        return list(pool.map(fn, items))


# ============ Serialization ============

def write_field(path, field: Field) -> Path:
    """Flat binary: magic, version, d, N per axis, L, rank, then little-endian f64 samples."""
    path = Path(path)
    grid = field.grid
    header = struct.pack('<4sII', FIELD_MAGIC, FIELD_FORMAT_VERSION, grid.d)
    header += struct.pack(f'<{grid.d}I', *grid.shape)
    header += struct.pack('<dI', grid.L, RANK_CODES[field.rank])
    with open(path, 'wb') as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(field.samples, dtype='<f8').tobytes(order='C'))
    return path


def read_field(path) -> Field:
    data = Path(path).read_bytes()
    try:
        magic, version, d = struct.unpack_from('<4sII', data, 0)
        if magic != FIELD_MAGIC:
            raise FieldFormatError(f'Bad magic {magic!r}')
        if version != FIELD_FORMAT_VERSION:
            raise FieldFormatError(f'Unsupported field format version {version}')
        offset = 12
        shape = struct.unpack_from(f'<{d}I', data, offset)
        offset += 4 * d
        length, rank_code = struct.unpack_from('<dI', data, offset)
        offset += 12
    except struct.error as e:
        raise FieldFormatError(f'Truncated field header in {path}') from e
    if len(set(shape)) != 1:
        raise FieldFormatError(f'Anisotropic grids are not supported: {shape}')
    ranks = {code: name for name, code in RANK_CODES.items()}
    if rank_code not in ranks:
        raise FieldFormatError(f'Unknown rank code {rank_code}')
    grid = make_grid(d, length, shape[0])
    rank = ranks[rank_code]
    full = _component_shape(rank, d) + grid.shape
    samples = np.frombuffer(data, dtype='<f8', offset=offset)
    if samples.size != int(np.prod(full)):
        raise FieldFormatError(f'Expected {int(np.prod(full))} samples, found {samples.size}')
    return Field(grid, rank, samples.reshape(full).astype(np.float64))


def format_float(value) -> str:
    return format(float(value), '.17g')


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence], comments=()) -> Path:
    """RFC-4180 CSV; floats printed with 17 significant digits, comments as leading '#' lines."""
    path = Path(path)
    with open(path, 'w', newline='') as fh:
        for line in comments:
            fh.write(f'# {line}\r\n')
        writer = csv.writer(fh, lineterminator='\r\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> tuple:
    """Read back a CSV written by write_csv: (comments, header, rows as strings)."""
    comments, lines = [], []
    with open(path, newline='') as fh:
        for line in fh:
            if line.startswith('# '):
                comments.append(line[2:].rstrip('\r\n'))
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    return comments, header, [row for row in reader]
