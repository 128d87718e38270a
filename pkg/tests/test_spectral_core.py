"""Tests for grids, transforms, multipliers, the dyadic partition and field I/O."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent))
import spectral_core as sc
from tests.conftest import flipped


def shell(grid, freq):
    """cos(freq x_1): one frequency pair at |xi| = freq."""
    return sc.field_from_function(grid, lambda *c: np.cos(freq * c[0]))


# ============ Grids ============

class TestGrids:
    """Tests for make_grid and parse_grid."""

    def test_spacing_and_frequency_step(self):
        """(1, 2^20, 2^21) has h = 1 and dxi = pi / L."""
        grid = sc.make_grid(1, 2 ** 20, 2 ** 21)
        assert grid.h == 1.0
        assert grid.dxi == pytest.approx(math.pi / 2 ** 20)

    def test_default_window_is_quarter_box(self):
        """The trusted window defaults to L/4."""
        grid = sc.make_grid(2, 64.0, 128)
        assert grid.window == 16.0
        assert grid.window_mask[grid.origin_index]

    def test_origin_node(self):
        """x = 0 is a grid node at index N/2."""
        grid = sc.make_grid(2, 8.0, 64)
        assert grid.axis[grid.N // 2] == 0.0

    @pytest.mark.parametrize('d,L,N', [(4, 8.0, 16), (2, 8.0, 12), (2, 8.0, 8), (2, -1.0, 64)])
    def test_rejects_bad_shapes(self, d, L, N):
        """Unsupported dimension, non power of two, N < 16 and L <= 0 are rejected."""
        with pytest.raises(sc.GridError):
            sc.make_grid(d, L, N)

    def test_rejects_window_past_quarter(self):
        """A window beyond L/4 is rejected."""
        with pytest.raises(sc.GridError):
            sc.make_grid(2, 64.0, 128, window=20.0)

    def test_memory_budget(self):
        """512^3 nodes exceed the default node budget."""
        with pytest.raises(sc.GridError, match='memory budget'):
            sc.make_grid(3, 16.0, 512)

    def test_parse_grid_with_pi(self):
        """'2x256x8pi' is [-8pi, 8pi)^2 with N = 256."""
        grid = sc.parse_grid('2x256x8pi')
        assert grid.d == 2 and grid.N == 256
        assert grid.L == pytest.approx(8 * math.pi)

    def test_parse_grid_rejects_garbage(self):
        """Malformed grid text raises GridError."""
        with pytest.raises(sc.GridError):
            sc.parse_grid('bad')


# ============ Fields and transforms ============

class TestTransforms:
    """Tests for the unitary transform and Field invariants."""

    def test_constant_has_only_zero_mode(self, grid2d):
        """The spectrum of 1 is sqrt(N^d) at xi = 0 and nothing else."""
        spec = sc.spectrum_of(sc.constant_field(grid2d))
        assert spec[0, 0] == pytest.approx(math.sqrt(grid2d.n_nodes))
        rest = np.abs(spec).copy()
        rest[0, 0] = 0.0
        assert rest.max() < 1e-10

    def test_sine_has_two_modes(self, grid2d):
        """sin(x_1) on a box of half width 4pi occupies exactly two frequencies."""
        spec = np.abs(sc.spectrum_of(sc.field_from_function(grid2d, lambda x, y: np.sin(x))))
        assert np.count_nonzero(spec > 1e-9 * spec.max()) == 2

    def test_roundtrip(self, random_vector):
        """Synthesis of the spectrum reproduces the samples."""
        back = sc.inverse_transform(sc.transform(random_vector))
        assert np.abs(back.samples - random_vector.samples).max() < 1e-12

    def test_hermitian_symmetry(self, grid2d):
        """Real fields have u_hat(-xi) = conj(u_hat(xi))."""
        spec = sc.spectrum_of(sc.random_smooth_field(grid2d, seed=3))
        mirrored = np.conj(np.roll(np.flip(spec, axis=(0, 1)), 1, axis=(0, 1)))
        assert np.abs(spec - mirrored).max() < 1e-12

    def test_transform_is_cached(self, grid2d):
        """A field that already carries a spectrum is returned unchanged."""
        once = sc.transform(sc.random_smooth_field(grid2d, seed=2))
        assert sc.transform(once) is once

    def test_nan_rejected(self, grid2d):
        """NaN samples raise NonFiniteFieldError on transform."""
        samples = np.zeros(grid2d.shape)
        samples[3, 4] = np.nan
        with pytest.raises(sc.NonFiniteFieldError):
            sc.transform(sc.Field(grid2d, 'scalar', samples))

    def test_samples_are_read_only(self, grid2d):
        """Field arrays cannot be written through."""
        f = sc.constant_field(grid2d)
        with pytest.raises(ValueError):
            f.samples[0, 0] = 2.0

    def test_shape_mismatch(self, grid2d):
        """A vector field needs a leading axis of length d."""
        with pytest.raises(sc.GridError):
            sc.Field(grid2d, 'vector', np.zeros(grid2d.shape))

    def test_arithmetic_needs_matching_fields(self, grid2d, small_grid):
        """Fields on different grids cannot be added."""
        with pytest.raises(sc.GridError):
            sc.constant_field(grid2d) + sc.constant_field(small_grid)


# ============ Multipliers ============

class TestMultipliers:
    """Tests for MultiplierSymbol and apply_multiplier."""

    def test_derivative_kills_constant(self, grid2d):
        """d_1 of a constant is zero."""
        out = sc.apply_multiplier(sc.constant_field(grid2d, 3.0), sc.derivative_symbol(0))
        assert out.sup(window=False) < 1e-12

    def test_leray_kills_gradient(self, grid2d):
        """P annihilates grad(sin x cos 2y)."""
        grad = sc.field_from_function(grid2d, lambda x, y: [
            np.cos(x) * np.cos(2 * y), -2 * np.sin(x) * np.sin(2 * y)], 'vector')
        out = sc.apply_multiplier(grad, sc.leray_symbol(2))
        assert out.sup(window=False) < 1e-11

    def test_composition(self, grid2d):
        """R_12 R_12 agrees with the multiplier of the squared symbol."""
        f = sc.random_smooth_field(grid2d, seed=5, kmax=20.0)
        riesz = sc.riesz_symbol(0, 1)
        squared = sc.MultiplierSymbol('riesz12sq', lambda xi, n: (xi[0] * xi[1] / sc.safe_square(n)) ** 2,
                                      degree=0)
        twice = sc.apply_multiplier(sc.apply_multiplier(f, riesz), riesz)
        once = sc.apply_multiplier(f, squared)
        assert np.abs(twice.samples - once.samples).max() < 1e-12

    @pytest.mark.parametrize('symbol', [sc.riesz_symbol(0, 1), sc.leray_symbol(2), sc.derivative_symbol(1),
                                        sc.laplacian_symbol()], ids=lambda s: s.name)
    def test_homogeneity(self, grid2d, symbol):
        """sigma(2 xi) = 2^deg sigma(xi) at nonzero grid frequencies."""
        assert sc.homogeneity_defect(symbol, grid2d) < 1e-12

    def test_nan_symbol_rejected(self, grid2d):
        """A symbol that is NaN off the origin raises SymbolError."""
        bad = sc.MultiplierSymbol('bad', lambda xi, n: xi[0] / (n - n))
        with pytest.raises(sc.SymbolError):
            bad.evaluate(grid2d)

    def test_zero_policy_removes_mean(self, grid2d):
        """The 'zero' policy leaves a mean-zero image."""
        f = sc.random_smooth_field(grid2d, seed=4, mean_zero=False)
        out = sc.apply_multiplier(f, sc.riesz_symbol(0, 0))
        assert abs(out.mean()) < 1e-14

    def test_passthrough_is_flagged(self, grid2d):
        """'passthrough' keeps the zero mode and records it in the provenance."""
        f = sc.constant_field(grid2d, 2.0)
        out = sc.apply_multiplier(f, sc.riesz_symbol(0, 0).with_policy('passthrough'))
        assert out.mean() == pytest.approx(2.0)
        assert 'zero_mode_passthrough:riesz00' in out.provenance

    def test_unknown_policy(self):
        """Unknown zero-mode policies are rejected at construction."""
        with pytest.raises(sc.SymbolError):
            sc.riesz_symbol(0, 1).with_policy('mirror')

    def test_matrix_symbol_needs_vector(self, grid2d):
        """A matrix symbol cannot act on a scalar field."""
        with pytest.raises(sc.SymbolError):
            sc.apply_multiplier(sc.constant_field(grid2d), sc.leray_symbol(2))


# ============ Dyadic partition ============

class TestPartition:
    """Tests for chi, phi and the representable block range."""

    def test_chi_profile(self, grid2d):
        """chi is 1 on |xi| <= 1.1, 0 on |xi| >= 2, and non-increasing."""
        part = sc.build_partition(grid2d)
        assert np.all(part.chi(np.linspace(0.0, 1.1, 50)) == 1.0)
        assert np.all(part.chi(np.linspace(2.0, 5.0, 50)) == 0.0)
        assert np.all(np.diff(part.chi(np.linspace(0.0, 2.0, 2001))) <= 0.0)

    def test_telescoping(self, grid2d):
        """chi + sum_{m <= M} phi(2^-m .) = chi(2^-(M+1) .)."""
        part = sc.build_partition(grid2d)
        total = part.chi(grid2d.xi_norm)
        for M in range(0, part.m_max + 1):
            total = total + part.block_symbol(M, False)
            assert np.abs(total - part.chi(grid2d.xi_norm * 2.0 ** (-M - 1))).max() < 1e-14

    def test_homogeneous_sum_is_one(self, grid2d):
        """Homogeneous blocks sum to 1 at every nonzero grid frequency."""
        part = sc.build_partition(grid2d)
        total = sum(part.block_symbol(m, True) for m in part.block_range(True))
        nonzero = grid2d.xi_norm > 0
        assert np.abs(total[nonzero] - 1.0).max() < 1e-12

    def test_psi_unit_mass_and_even(self, grid2d):
        """psi integrates to chi(0) = 1 and is even."""
        psi = sc.build_partition(grid2d).psi.samples
        assert np.sum(psi) * grid2d.cell_volume == pytest.approx(1.0, abs=1e-10)
        assert np.abs(psi - flipped(psi, 2)).max() < 1e-12 * np.abs(psi).max()

    def test_too_coarse_grid(self):
        """A grid with too few frequencies for four blocks is rejected."""
        coarse = sc.GridSpec(1, 8 * math.pi, 8, 2 * math.pi)
        with pytest.raises(sc.GridError, match='too coarse'):
            sc.build_partition(coarse)

    @pytest.mark.parametrize('inner,outer', [(1.0, 2.5), (0.5, 1.5), (1.5, 1.2)])
    def test_bad_profile_parameters(self, grid2d, inner, outer):
        """Transition radii must satisfy 0 < inner < outer <= min(2, 2 inner)."""
        with pytest.raises(sc.GridError):
            sc.build_partition(grid2d, inner, outer)


# ============ Blocks ============

class TestBlocks:
    """Tests for dyadic_block, littlewood_paley_sum and lowpass."""

    def test_low_block_of_constant(self, grid2d):
        """Delta_{-1} 1 = 1."""
        out = sc.dyadic_block(sc.constant_field(grid2d), -1)
        assert np.abs(out.samples - 1.0).max() < 1e-12

    @pytest.mark.parametrize('m', [0, 1, 2])
    def test_single_shell_lands_in_one_block(self, grid2d, m):
        """cos(2^(m+1) x_1) sits on the plateau of block m and nowhere else."""
        f = shell(grid2d, 2.0 ** (m + 1))
        part = sc.build_partition(grid2d)
        for k in part.block_range(True):
            block = sc.dyadic_block(f, k, True, part)
            expected = f.samples if k == m else 0.0
            assert np.abs(block.samples - expected).max() < 1e-12

    def test_reconstruction(self, grid2d):
        """The non-homogeneous blocks sum back to the field."""
        f = sc.random_smooth_field(grid2d, seed=7, kmax=40.0, mean_zero=False)
        total = sc.littlewood_paley_sum(f)
        assert np.abs(total.samples - f.samples).max() < 1e-11

    def test_out_of_range(self, grid2d):
        """Blocks outside the representable range raise BlockRangeError."""
        f = sc.constant_field(grid2d)
        part = sc.build_partition(grid2d)
        with pytest.raises(sc.BlockRangeError):
            sc.dyadic_block(f, part.m_max + 1)
        with pytest.raises(sc.BlockRangeError):
            sc.dyadic_block(f, -2)
        with pytest.raises(sc.BlockRangeError):
            sc.dyadic_block(f, part.m_min - 1, homogeneous=True)

    def test_almost_orthogonality(self, random_vector):
        """Blocks two apart do not interact."""
        part = sc.build_partition(random_vector.grid)
        for m in range(part.m_min, part.m_max - 1):
            inner = sc.dyadic_block(random_vector, m + 2, True, part)
            both = sc.dyadic_block(inner, m, True, part)
            assert both.sup(window=False) < 1e-12

    def test_blocks_commute_with_multipliers(self, grid2d):
        """Delta_m R_12 = R_12 Delta_m."""
        f = sc.random_smooth_field(grid2d, seed=8, kmax=40.0)
        riesz = sc.riesz_symbol(0, 1)
        for m in (0, 2, 4):
            a = sc.dyadic_block(sc.apply_multiplier(f, riesz), m, True)
            b = sc.apply_multiplier(sc.dyadic_block(f, m, True), riesz)
            assert np.abs(a.samples - b.samples).max() < 1e-14

    def test_lowpass_removes_unit_frequency(self, grid2d):
        """chi(2 D) sin(x_1) = 0."""
        f = sc.field_from_function(grid2d, lambda x, y: np.sin(x))
        assert sc.lowpass(f, 2.0).sup(window=False) < 1e-14


# ============ Bernstein ============

class TestBernstein:
    """Tests for bernstein_check."""

    def test_constant_has_zero_gradient(self, grid2d):
        """A constant field has ball ratio 0."""
        report = sc.bernstein_check(sc.constant_field(grid2d), 1, math.inf, math.inf, 1.0, ('ball', 2.0))
        assert report.ball_ratio == pytest.approx(0.0, abs=1e-12)
        assert report.annulus_ratio is None

    @pytest.mark.parametrize('m', [0, 1, 2])
    def test_annulus_ratio_of_shell(self, grid2d, m):
        """cos(2^(m+1) x_1) in the annulus of radius 2^m has ||grad u|| = 2 lam ||u||."""
        report = sc.bernstein_check(shell(grid2d, 2.0 ** (m + 1)), 1, math.inf, math.inf, 2.0 ** m,
                                    ('annulus', 1.0, 4.0))
        assert report.annulus_ratio == pytest.approx(2.0, rel=1e-9)
        assert report.annulus_inverse == pytest.approx(0.5, rel=1e-9)

    def test_ball_ratio_is_stable(self):
        """Band-limited random fields keep ||grad u|| / (lam ||u||) of order one across lam."""
        grid = sc.make_grid(2, 16 * math.pi, 512)
        ratios = []
        for lam in (1.0, 2.0, 4.0, 8.0):
            f = sc.random_smooth_field(grid, seed=11, kmax=lam)
            ratios.append(sc.bernstein_check(f, 1, math.inf, math.inf, lam, ('ball', 1.0)).ball_ratio)
        assert max(ratios) < 2.5
        assert max(ratios) / min(ratios) < 2.0

    def test_support_violation(self, grid2d):
        """Spectral mass outside the declared ball raises SpectralSupportError."""
        with pytest.raises(sc.SpectralSupportError):
            sc.bernstein_check(shell(grid2d, 8.0), 1, math.inf, math.inf, 1.0, ('ball', 1.0))

    def test_unknown_support(self, grid2d):
        """Only balls and annuli are understood."""
        with pytest.raises(sc.LabError):
            sc.bernstein_check(shell(grid2d, 2.0), 1, math.inf, math.inf, 1.0, ('cube', 1.0))


# ============ Multiplier block bounds ============

class TestMultiplierBounds:
    """Tests for multiplier_block_bound and multiplier_block_sweep."""

    @pytest.mark.parametrize('m', [0, 1, 2, 3])
    def test_derivative_on_shell(self, grid2d, m):
        """d_1 on a shell at 1.5 * 2^m gives a ratio in [0.5, 2]."""
        report = sc.multiplier_block_bound(shell(grid2d, 1.5 * 2.0 ** m), sc.derivative_symbol(0), m)
        assert 0.5 <= report.ratio <= 2.0

    def test_identity_symbol(self, random_vector):
        """sigma = 1 has ratio exactly 1."""
        report = sc.multiplier_block_bound(random_vector, sc.constant_symbol(1.0), 1)
        assert report.ratio == pytest.approx(1.0, abs=1e-14)

    def test_leray_ratios_are_stable(self, random_vector):
        """P has comparable block ratios across blocks."""
        reports = sc.multiplier_block_sweep(random_vector, sc.leray_symbol(2), range(0, 5))
        ratios = [r.ratio for r in reports]
        assert all(0 < r < 2.0 for r in ratios)
        assert max(ratios) / min(ratios) < 2.0

    def test_empty_block_is_skipped(self, grid2d):
        """A block with nothing in it is reported as skipped."""
        report = sc.multiplier_block_bound(shell(grid2d, 2.0), sc.riesz_symbol(0, 0), 3)
        assert report.skipped

    def test_inhomogeneous_symbol_rejected(self, grid2d):
        """Symbols without a degree have no block bound."""
        symbol = sc.MultiplierSymbol('bump', lambda xi, n: np.exp(-n ** 2))
        with pytest.raises(sc.SymbolError):
            sc.multiplier_block_bound(shell(grid2d, 2.0), symbol, 0)


# ============ Serialization ============

class TestSerialization:
    """Tests for the binary field format and the CSV writer."""

    def test_field_roundtrip(self, tmp_path, random_vector):
        """write_field / read_field preserve grid, rank and samples."""
        path = sc.write_field(tmp_path / 'u.llab', random_vector)
        back = sc.read_field(path)
        assert back.grid == random_vector.grid
        assert back.rank == 'vector'
        assert np.array_equal(back.samples, random_vector.samples)

    def test_bad_magic(self, tmp_path, grid2d):
        """Files that do not start with the magic are rejected."""
        path = sc.write_field(tmp_path / 'f.llab', sc.constant_field(grid2d))
        data = bytearray(path.read_bytes())
        data[:4] = b'XXXX'
        path.write_bytes(bytes(data))
        with pytest.raises(sc.FieldFormatError):
            sc.read_field(path)

    def test_truncated(self, tmp_path, grid2d):
        """Missing samples or a cut header are format errors."""
        path = sc.write_field(tmp_path / 'f.llab', sc.constant_field(grid2d))
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(sc.FieldFormatError):
            sc.read_field(path)
        path.write_bytes(data[:10])
        with pytest.raises(sc.FieldFormatError):
            sc.read_field(path)

    def test_csv_format(self, tmp_path):
        """Comments lead, lines end in CRLF and floats carry 17 significant digits."""
        path = sc.write_csv(tmp_path / 'x.csv', ['lambda', 'value'], [(1.0, 0.1), (2.0, 1 / 3)],
                            comments=['slope=-1'])
        raw = path.read_bytes()
        assert raw.startswith(b'# slope=-1\r\n')
        assert b'0.10000000000000001' in raw
        comments, header, rows = sc.read_csv(path)
        assert comments == ['slope=-1']
        assert header == ['lambda', 'value']
        assert float(rows[1][1]) == 1 / 3


# ============ Properties ============

class TestProperties:
    """Property tests over seeded random fields."""

    @settings(max_examples=10, deadline=None)
    @given(a=st.integers(0, 10 ** 6), b=st.integers(0, 10 ** 6), c=st.floats(-3.0, 3.0))
    def test_blocks_are_linear(self, a, b, c):
        """Delta_m (f + c g) = Delta_m f + c Delta_m g."""
        grid = sc.make_grid(2, 4 * math.pi, 64)
        f = sc.random_smooth_field(grid, seed=a, kmax=6.0)
        g = sc.random_smooth_field(grid, seed=b, kmax=6.0)
        for m in (-1, 0, 2):
            lhs = sc.dyadic_block(f + c * g, m)
            rhs = sc.dyadic_block(f, m) + c * sc.dyadic_block(g, m)
            assert np.abs(lhs.samples - rhs.samples).max() < 1e-12

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_zero_policy_mean_free(self, seed):
        """Homogeneous multipliers with the 'zero' policy return mean-zero fields."""
        grid = sc.make_grid(2, 4 * math.pi, 64)
        f = sc.random_smooth_field(grid, seed=seed, mean_zero=False)
        for symbol in (sc.riesz_symbol(0, 1), sc.riesz_symbol(1, 1), sc.derivative_symbol(0)):
            assert abs(sc.apply_multiplier(f, symbol).mean()) < 1e-14
