"""
Besov norms built on the dyadic blocks of spectral_core.

Block contributions are kept alongside the aggregate so reports can be
written out and re-aggregated; the homogeneous variant records when the
field's zero mode had to be left out.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from spectral_core import (
    Field, LabError, build_partition, dyadic_block, littlewood_paley_sum, lp_norm, map_sweep,
    transform,
)

logger = logging.getLogger(__name__)

# Share of the aggregate carried by the two finest blocks above which the norm is flagged
TRUNCATION_SHARE = 0.01
ZERO_MODE_TOLERANCE = 1e-14


class BesovParamError(LabError):
    pass


@dataclass(frozen=True)
class BesovParams:
    s: float
    p: float
    r: float
    homogeneous: bool = True

    def __post_init__(self):
        for name in ('p', 'r'):
            value = getattr(self, name)
            if not value >= 1:
                raise BesovParamError(f'{name} must lie in [1, inf], got {value}')

    def supercritical(self, d: int) -> bool:
        critical = 0.0 if self.p == math.inf else d / self.p
        return self.s < critical or (self.s == critical and self.r == 1)

    def label(self) -> str:
        dot = 'B' if not self.homogeneous else 'Bdot'
        return f'{dot}^{self.s:g}_{self.p:g},{self.r:g}'


def aggregate(values, r) -> float:
    """l^r norm of a finite sequence."""
    values = np.abs(np.asarray(values, dtype=float))
    if values.size == 0:
        return 0.0
    if r == math.inf:
        return float(values.max())
    return float(np.sum(values ** r) ** (1.0 / r))


@dataclass(frozen=True)
class BesovNormReport:
    params: BesovParams
    blocks: tuple
    block_norms: tuple
    weighted: tuple
    total: float
    truncated: bool
    zero_mode_excluded: bool

    def rows(self):
        return [(m, n, w) for m, n, w in zip(self.blocks, self.block_norms, self.weighted)]

    def comments(self):
        return [f'norm={self.params.label()}', f'total={self.total!r}',
                f'truncated={self.truncated}', f'zero_mode_excluded={self.zero_mode_excluded}']


def block_weight(m: int, s: float, homogeneous: bool) -> float:
    # the non-homogeneous low block chi(D) carries weight 1
    if not homogeneous and m == -1:
        return 1.0
    return 2.0 ** (m * s)


def besov_norm(field: Field, params: BesovParams, partition=None) -> BesovNormReport:
    """Block-by-block Besov norm over the window."""
    field = transform(field)
    grid = field.grid
    partition = partition or build_partition(grid)
    blocks = list(partition.block_range(params.homogeneous))

    def block_norm(m):
        return lp_norm(dyadic_block(field, m, params.homogeneous, partition).samples, grid, params.p)

    norms = map_sweep(block_norm, blocks)
    weighted = [block_weight(m, params.s, params.homogeneous) * n for m, n in zip(blocks, norms)]
    total = aggregate(weighted, params.r)
    truncated = bool(total > 0 and aggregate(weighted[-2:], params.r) > TRUNCATION_SHARE * total)

    zero_mode_excluded = False
    if params.homogeneous:
        scale = max(field.sup(window=False), 1e-300)
        zero_mode_excluded = bool(np.any(np.abs(field.mean()) > ZERO_MODE_TOLERANCE * scale))
    if truncated:
        logger.info('%s of a %s field is carried by the finest blocks', params.label(), field.rank)
    return BesovNormReport(params, tuple(blocks), tuple(norms), tuple(weighted), total,
                           truncated, zero_mode_excluded)


def besov_profile(field: Field, p, r, s_values, homogeneous=True, partition=None) -> list:
    """Norm reports for a range of regularity indices; block norms are shared."""
    partition = partition or build_partition(field.grid)
    base = besov_norm(field, BesovParams(0.0, p, r, homogeneous), partition)
    reports = []
    for s in s_values:
        params = BesovParams(float(s), p, r, homogeneous)
        weighted = [block_weight(m, params.s, homogeneous) * n
                    for m, n in zip(base.blocks, base.block_norms)]
        total = aggregate(weighted, r)
        truncated = bool(total > 0 and aggregate(weighted[-2:], r) > TRUNCATION_SHARE * total)
        reports.append(BesovNormReport(params, base.blocks, base.block_norms, tuple(weighted),
                                       total, truncated, base.zero_mode_excluded))
    return reports


@dataclass(frozen=True)
class ReconstructionReport:
    reconstructed: Field
    residual: Field
    polynomial_part: np.ndarray

    @property
    def residual_sup(self) -> float:
        return self.residual.sup(window=False)


def homogeneous_reconstruct(field: Field, partition=None) -> ReconstructionReport:
    """Sum of the homogeneous blocks; what is left over is the zero mode."""
    reconstructed = littlewood_paley_sum(field, homogeneous=True, partition=partition)
    residual = field - reconstructed
    return ReconstructionReport(reconstructed, residual, np.asarray(field.mean()))


def embedding_ratio(field: Field, p=math.inf, partition=None) -> float:
    """||u - mean||_inf over the critical norm Bdot^{d/p}_{p,1}; bounded by the embedding."""
    d = field.grid.d
    s = 0.0 if p == math.inf else d / p
    report = besov_norm(field, BesovParams(s, p, 1.0, True), partition)
    centered = field.samples - np.reshape(field.mean(), field.component_shape + (1,) * d)
    sup = lp_norm(centered, field.grid, math.inf)
    if report.total == 0:
        return 0.0 if sup == 0 else math.inf
    return sup / report.total
