"""
Membership diagnostics for S'_h, the tempered distributions whose low-pass
chi(lam D) f vanishes as lam grows.

Traces are measured in the weak topology (pairings against a fixed Gaussian
family) or the strong one (sup over the window); the annuli counterexample
and the L^1 growth probe live here too.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from leray import DecayReport, DecayLadderError, make_decay_report, validate_ladder
from spectral_core import (
    Field, GridError, LabError, MultiplierSymbol, SymbolError, build_partition, field_from_spectrum,
    field_from_function, lowpass, map_sweep, spectrum_of, transform, window_pairing,
)

logger = logging.getLogger(__name__)

# ============ Configuration ============

MODES = ('weak', 'strong')
DUAL_COUNT = 5
DUAL_SCALE = 1.0
VANISH_FLOOR = 1e-12
MEMBER_SLOPE = -0.3
MEMBER_TERMINAL_SHARE = 0.05
NON_MEMBER_TERMINAL_SHARE = 0.5
TRUNCATION_MASS = 0.05
OSCILLATION_CONSTANT = 5.0


class EmptyLambdaWindowError(LabError):
    pass


# ============ Low-pass traces ============

@lru_cache(maxsize=16)
def dual_family(grid, scale=DUAL_SCALE, count=DUAL_COUNT) -> tuple:
    """Gaussians of width scale along the diagonal, each with unit L^1 mass on the window."""
    offsets = [(i - (count - 1) / 2.0) * scale / math.sqrt(grid.d) for i in range(count)]
    reach = abs(offsets[0]) * math.sqrt(grid.d) + 4.0 * scale
    if reach > grid.window:
        raise GridError(f'Test functions of scale {scale:g} do not fit the window {grid.window:g}')
    family = []
    for offset in offsets:
        sq = sum((c - offset) ** 2 for c in grid.coords)
        values = np.exp(-sq / (2.0 * scale ** 2)) * np.ones(grid.shape)
        values /= window_pairing(values, np.ones(grid.shape), grid)
        values.flags.writeable = False
        family.append(values)
    return tuple(family)


@lru_cache(maxsize=16)
def kernel_mass_radius(partition, eps: float) -> float:
    """Smallest grid radius A with ||1_{|y| >= A} psi||_1 <= eps."""
    grid = partition.grid
    radius = grid.radius.ravel()
    mass = np.abs(partition.psi.samples).ravel() * grid.cell_volume
    order = np.argsort(radius, kind='stable')
    r_sorted, m_sorted = radius[order], mass[order]
    tail = np.cumsum(m_sorted[::-1])[::-1]
    group_start = np.r_[True, r_sorted[1:] != r_sorted[:-1]]
    candidates = (tail <= eps) & group_start
    if not candidates.any():
        if tail[-1] > eps:
            raise GridError(f'psi keeps more than {eps:g} of its mass at the box edge')
        return float(r_sorted[-1])
    return float(r_sorted[np.argmax(candidates)])


def lowpass_trace(field_: Field, ladder, mode='weak', partition=None, reference=None,
                  quantity=None, scale=DUAL_SCALE) -> DecayReport:
    """chi(lam D) f along the ladder, paired (weak) or in sup norm (strong) on the window."""
    if mode not in MODES:
        raise LabError(f'Unknown topology {mode!r}')
    grid = field_.grid
    ladder = validate_ladder(ladder, grid)
    partition = partition or build_partition(grid)
    field_ = transform(field_)
    family = dual_family(grid, scale) if mode == 'weak' else ()
    components = field_.samples.reshape((-1,) + grid.shape).shape[0]

    def measure(lam):
        values = lowpass(field_, lam, partition).samples.reshape((components,) + grid.shape)
        if mode == 'strong':
            return float(np.sqrt(np.sum(values ** 2, axis=0))[grid.window_mask].max()), ()
        pairs = tuple(window_pairing(values[c], phi, grid) for c in range(components) for phi in family)
        return max(abs(p) for p in pairs), pairs

    measured = map_sweep(measure, ladder)
    reference = field_.sup(window=False) if reference is None else reference
    floor = VANISH_FLOOR * max(reference, 1e-300)
    truncated = kernel_mass_radius(partition, TRUNCATION_MASS) * ladder[-1] > grid.L - grid.window
    if truncated:
        logger.warning('lam = %g spreads chi(lam D) past the box margin', ladder[-1])
    zero_mode = tuple(np.ravel(field_.mean()).tolist())
    return make_decay_report(quantity or f'{field_.rank} trace', mode, ladder, [m[0] for m in measured],
                             grid.window, floor=floor, truncated=truncated,
                             pairings=tuple(m[1] for m in measured), zero_mode=zero_mode)


@dataclass(frozen=True)
class ShClassification:
    verdict: str
    mode: str
    evidence: dict = field(default_factory=dict)
    accumulation: tuple = ()


def classify_sph(report: DecayReport) -> ShClassification:
    """member / non_member / inconclusive from a trace."""
    values = report.values
    initial, terminal = values[0], values[-1]
    share = terminal / initial if initial > 0 else math.inf
    evidence = {'slope': report.slope, 'slope_band': report.slope_band, 'terminal_share': share,
                'floor': report.floor, 'truncated': report.truncated}
    if report.vanished:
        verdict = 'member'
    elif terminal > NON_MEMBER_TERMINAL_SHARE * initial:
        verdict = 'non_member'
    elif report.slope < MEMBER_SLOPE and terminal < MEMBER_TERMINAL_SHARE * initial:
        verdict = 'member'
    else:
        verdict = 'inconclusive'
    return ShClassification(verdict, report.mode, evidence, report.zero_mode)


# ============ Counterexample ============

@dataclass(frozen=True)
class CounterexampleSpec:
    """Annuli C_m = {2^(m^2) <= |x| < 2^((m+1)^2)} carrying the sign (-1)^m."""
    M_min: int = 2
    M_max: int = 3
    eps: float = 0.1
    R: float = 4.0
    d: int = 1

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise LabError(f'eps must lie in (0, 1), got {self.eps}')
        if not 1 <= self.M_min <= self.M_max:
            raise LabError(f'Need 1 <= M_min <= M_max, got {self.M_min}, {self.M_max}')

    @property
    def outer_radius(self) -> float:
        return 2.0 ** ((self.M_max + 1) ** 2)

    def lambda_window(self, M: int, A: float) -> tuple:
        lo = 2.0 ** (M * M) / self.eps ** (1.0 / self.d)
        hi = (2.0 ** ((M + 1) ** 2) - self.R) / A
        return lo, hi


def build_annuli_counterexample(spec: CounterexampleSpec, grid) -> Field:
    """f = (-1)^m on C_m for m = 0..M_max+1 (the last annulus clipped by the box), 0 on |x| < 1."""
    if grid.d != spec.d:
        raise GridError(f'Counterexample is set up for d = {spec.d}, grid has d = {grid.d}')
    if spec.outer_radius > grid.L / 2.0:
        raise GridError(f'Box half width {grid.L:g} must be at least 2 * {spec.outer_radius:g}')

    def profile(*coords):
        r = np.sqrt(sum(c ** 2 for c in coords))
        out = np.zeros(np.shape(r))
        for m in range(spec.M_max + 2):
            ring = (r >= 2.0 ** (m * m)) & (r < 2.0 ** ((m + 1) ** 2))
            out[ring] = (-1.0) ** m
        return out

    return field_from_function(grid, profile)


@dataclass(frozen=True)
class OscillationReport:
    sigma: int
    M: int
    A: float
    window: tuple
    lambdas: tuple
    deviations: tuple
    best_lambda: float
    best_deviation: float
    eps: float

    @property
    def within_bound(self) -> bool:
        return self.best_deviation <= OSCILLATION_CONSTANT * self.eps

    def rows(self):
        return list(zip(self.lambdas, self.deviations))


def _pick_level(spec: CounterexampleSpec, sigma: int, A: float) -> int:
    for M in range(spec.M_min, spec.M_max + 1):
        lo, hi = spec.lambda_window(M, A)
        if (-1) ** M == sigma and lo <= hi:
            return M
    raise EmptyLambdaWindowError(f'No level in [{spec.M_min}, {spec.M_max}] with sign {sigma} '
                                 f'has a nonempty lambda window (A = {A:g})')


def counterexample_oscillation(field_: Field, spec: CounterexampleSpec, sigma: int, M=None,
                               partition=None, probes=9) -> OscillationReport:
    """Best lam in the level-M window and the sup deviation of chi(lam D) f from sigma on |x| <= R."""
    if sigma not in (-1, 1):
        raise LabError(f'sigma must be +1 or -1, got {sigma}')
    grid = field_.grid
    partition = partition or build_partition(grid)
    A = kernel_mass_radius(partition, spec.eps)
    if M is None:
        M = _pick_level(spec, sigma, A)
    elif (-1) ** M != sigma:
        raise LabError(f'Level {M} carries sign {(-1) ** M}, not {sigma}')
    lo, hi = spec.lambda_window(M, A)
    if lo > hi:
        raise EmptyLambdaWindowError(f'Level {M} window [{lo:g}, {hi:g}] is empty (A = {A:g})')
    hi = min(hi, grid.L / 8.0)
    if lo > hi:
        raise GridError(f'Level {M} window starts at {lo:g}, past L/8 = {grid.L / 8.0:g}')

    field_ = transform(field_)
    near = grid.radius <= spec.R
    lambdas = tuple(np.geomspace(lo, hi, probes)) if hi > lo else (lo,)

    def deviation(lam):
        values = lowpass(field_, lam, partition).samples
        return float(np.abs(values[near] - sigma).max())

    deviations = tuple(map_sweep(deviation, lambdas))
    best = int(np.argmin(deviations))
    logger.info('level %d: best lam %.6g, deviation %.3g (A = %g)', M, lambdas[best], deviations[best], A)
    return OscillationReport(sigma, M, A, (lo, hi), tuple(float(v) for v in lambdas), deviations,
                             float(lambdas[best]), deviations[best], spec.eps)


# ============ L^1 growth probe ============

@dataclass(frozen=True)
class GrowthReport:
    symbol: str
    ts: tuple
    values: tuple

    @property
    def growth_ratio(self) -> float:
        return self.values[-1] / self.values[0] if self.values[0] > 0 else math.inf

    @property
    def monotone(self) -> bool:
        return all(b > a for a, b in zip(self.values, self.values[1:]))

    def rows(self):
        return list(zip(self.ts, self.values))


def l1_unboundedness_probe(symbol: MultiplierSymbol, ladder_t, grid, seed_width=None,
                           partition=None) -> GrowthReport:
    """||(Id - chi(D)) sigma(D) f_t||_1 / ||f_t||_1 for the concentrating dilates f_t(x) = f(t x)."""
    if symbol.matrix:
        raise SymbolError('The growth probe takes a scalar symbol')
    ts = tuple(float(t) for t in ladder_t)
    if len(ts) < 3 or ts[0] <= 0 or any(b <= a for a, b in zip(ts, ts[1:])):
        raise DecayLadderError('Dilation ladder must hold at least three increasing positive values')
    width = grid.window / 4.0 if seed_width is None else float(seed_width)
    if 3.0 * width / ts[0] > grid.window:
        raise DecayLadderError(f'Seed of width {width / ts[0]:g} does not fit the window')
    if width / ts[-1] < 3.0 * grid.h:
        raise DecayLadderError(f'Seed of width {width / ts[-1]:g} is not resolved by h = {grid.h:g}')
    partition = partition or build_partition(grid)
    highpass = (1.0 - partition.chi(grid.xi_norm)) * symbol.evaluate(grid)
    highpass[(0,) * grid.d] = 0.0

    def value(t):
        seed = field_from_function(grid, lambda *c: np.exp(-t * t * sum(x ** 2 for x in c)
                                                           / (2.0 * width ** 2)))
        image = field_from_spectrum(grid, spectrum_of(seed) * highpass, 'scalar')
        return (np.sum(np.abs(image.samples)[grid.window_mask])
                / np.sum(np.abs(seed.samples)[grid.window_mask]))

    values = tuple(float(v) for v in map_sweep(value, ts))
    return GrowthReport(symbol.name, ts, values)
