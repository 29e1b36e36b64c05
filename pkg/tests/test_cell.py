"""Cell operator, corrector solves, and effective-matrix identities."""

import numpy as np
import pytest

from nlhomog.cell import (
    assemble_cell_operator,
    check_solvability,
    compute_theta,
    estimate_contraction,
    first_order_rhs,
    grid_norm,
    second_order_rhs,
    solve_cell_problem,
    solve_corrector1,
    solve_corrector2,
    theta_dirichlet_form,
)
from nlhomog.errors import ResolutionError, SolvabilityError
from nlhomog.model import (
    KernelSpec,
    Medium,
    PeriodicField,
    TorusGrid,
    fold_kernel,
    kernel_moments,
)


def make_fields(n, mu_fn, lam_fn=None, dim=1):
    grid = TorusGrid(dim=dim, n=n)
    mu = PeriodicField.from_function(grid, mu_fn, role="mu")
    lam_fn = lam_fn or (lambda *xs: np.ones_like(xs[0]))
    lam = PeriodicField.from_function(grid, lam_fn, role="lambda")
    return grid, lam, mu


def sin_mu(x):
    return 1.0 + 0.5 * np.sin(2.0 * np.pi * x)


# ---------------------------------------------------------------------------
# operator assembly


def test_operator_annihilates_constants():
    grid, _, mu = make_fields(48, lambda x: np.ones_like(x))
    folded = fold_kernel(KernelSpec.compact_bump(0.25, dim=1), grid)
    op = assemble_cell_operator(folded, mu)
    row_sums = op.a_matrix @ np.ones(grid.size)
    assert np.max(np.abs(row_sums)) < 1e-12
    # matrix-free path annihilates constants exactly
    assert np.max(np.abs(op.apply(np.ones(grid.shape)))) == 0.0


def test_operator_matches_brute_force_assembly():
    n = 8
    grid, _, mu = make_fields(n, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.4, dim=1), grid)
    op = assemble_cell_operator(folded, mu)
    # hand-rolled double loop
    k_oracle = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            k_oracle[i, j] = folded.values[(i - j) % n] * mu.values[j] * grid.weight
    a_oracle = k_oracle - np.diag(k_oracle.sum(axis=1))
    assert np.max(np.abs(op.k_matrix - k_oracle)) < 1e-14
    assert np.max(np.abs(op.a_matrix - a_oracle)) < 1e-14
    # dense and FFT application agree
    phi = np.sin(2 * np.pi * grid.axis_nodes()) ** 2
    assert np.allclose(op.a_matrix @ phi, op.apply(phi), atol=1e-13)


def test_operator_flat_ahat_closed_form():
    grid, _, mu = make_fields(64, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(1.0, dim=1), grid)
    op = assemble_cell_operator(folded, mu)
    phi = np.cos(2 * np.pi * grid.axis_nodes())
    got = op.apply(phi)
    expect = (mu.values * phi).mean() - mu.values.mean() * phi
    assert np.max(np.abs(got - expect)) < 1e-7


def test_operator_2d_matches_brute_force():
    n = 6
    grid = TorusGrid(dim=2, n=n)
    mu = PeriodicField.from_function(grid, lambda x1, x2: 1 + 0.3 * np.cos(2 * np.pi * x2), role="mu")
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=2), grid)
    op = assemble_cell_operator(folded, mu)
    pts = grid.points()
    k_oracle = np.zeros((n * n, n * n))
    muf = mu.values.reshape(-1)
    for i in range(n * n):
        for j in range(n * n):
            diff = np.floor((pts[i] - pts[j]) * n + 0.5) / n  # exact node difference
            idx = tuple((np.round(diff * n).astype(int)) % n)
            k_oracle[i, j] = folded.values[idx] * muf[j] * grid.weight
    assert np.max(np.abs(op.k_matrix - k_oracle)) < 1e-13


def test_left_kernel_is_mu():
    grid, _, mu = make_fields(32, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid)
    op = assemble_cell_operator(folded, mu)
    lhs = mu.values @ op.a_matrix
    denom = np.linalg.norm(mu.values) * np.linalg.norm(op.a_matrix)
    assert np.linalg.norm(lhs) / denom < 1e-8


def test_k_norm_bound():
    grid, lam, mu = make_fields(32, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid)
    op = assemble_cell_operator(folded, mu)
    alpha2 = mu.values.max()
    a1 = kernel_moments(KernelSpec.gaussian(0.3, dim=1)).a1
    assert np.linalg.norm(op.k_matrix, 2) <= alpha2 * a1 * (1 + 1e-8)


def test_fredholm_split_positive_diagonal():
    grid, _, mu = make_fields(32, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid)
    op = assemble_cell_operator(folded, mu)
    a1 = kernel_moments(KernelSpec.gaussian(0.3, dim=1)).a1
    g0 = 0.5 * a1 * (1 - 1e-7)
    g2 = 1.5 * a1 * (1 + 1e-7)
    assert np.all(op.g_diag >= g0) and np.all(op.g_diag <= g2)


def test_dense_assembly_memory_cap():
    grid = TorusGrid(dim=2, n=128)
    mu = PeriodicField(grid=grid, values=np.ones(grid.shape), role="mu")
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=2), grid)
    op = assemble_cell_operator(folded, mu)
    with pytest.raises(ResolutionError):
        op.k_matrix


# ---------------------------------------------------------------------------
# first-order right-hand side and solvability


def test_first_order_rhs_constant_mu_vanishes():
    grid, _, mu = make_fields(64, lambda x: np.full_like(x, 0.8))
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    f = first_order_rhs(folded, mu)
    assert np.max(np.abs(f.values)) < 1e-10


def _line_quadrature_rhs(kern, xs, window):
    from scipy.integrate import quad

    return np.array(
        [
            quad(
                lambda q: float(kern(x - q)) * sin_mu(q) * (x - q),
                x - window,
                x + window,
                epsabs=1e-13,
                limit=200,
            )[0]
            for x in xs
        ]
    )


@pytest.mark.parametrize(
    "kern,n,window,tol",
    [
        # gaussian convolutions are spectrally exact at n=128
        (KernelSpec.gaussian(0.3, dim=1), 128, 3.0, 1e-9),
        # the bump's grid convolution carries ~1e-8 rectangle-rule error at
        # n=128 (root-exponential Fourier tail); it meets 1e-9 from n=256
        (KernelSpec.compact_bump(0.25, dim=1), 128, 0.25, 1e-7),
        (KernelSpec.compact_bump(0.25, dim=1), 256, 0.25, 1e-9),
    ],
)
def test_first_order_rhs_matches_line_quadrature_oracle(kern, n, window, tol):
    # independent oracle: adaptive line quadrature of a(x-q) mu(q) (x-q)
    # over the kernel range; also validates the first-moment fold convention
    grid, _, mu = make_fields(n, sin_mu)
    folded = fold_kernel(kern, grid, with_moments=True)
    f = first_order_rhs(folded, mu)
    oracle = _line_quadrature_rhs(kern, grid.axis_nodes(), window)
    assert np.max(np.abs(f.values[:, 0] - oracle)) < tol


def test_first_order_rhs_orthogonal_to_mu():
    grid, _, mu = make_fields(96, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    f = first_order_rhs(folded, mu)
    res = check_solvability(f, mu)
    assert np.max(res) < 1e-9


def test_check_solvability_flags_unsolvable_rhs():
    grid, _, mu = make_fields(32, lambda x: np.ones_like(x))
    rhs = PeriodicField(grid=grid, values=np.ones(32))
    assert check_solvability(rhs, mu) == pytest.approx(1.0)


def test_randomized_smooth_mu_solvability():
    rng = np.random.default_rng(42)
    kern = KernelSpec.gaussian(0.3, dim=1)
    grid = TorusGrid(dim=1, n=96)
    folded = fold_kernel(kern, grid, with_moments=True)
    x = grid.axis_nodes()
    for _ in range(10):
        coeffs = rng.normal(scale=0.15, size=(3, 2))
        vals = np.ones_like(x)
        for m, (c, s) in enumerate(coeffs, start=1):
            vals = vals + c * np.cos(2 * np.pi * m * x) + s * np.sin(2 * np.pi * m * x)
        assert vals.min() > 0
        mu = PeriodicField(grid=grid, values=vals, role="mu")
        f = first_order_rhs(folded, mu)
        res = check_solvability(f, mu)
        bound = 1e-9 * grid_norm(grid, f.values[:, 0]) * grid_norm(grid, mu.values)
        assert np.max(res) < max(bound, 1e-13)


# ---------------------------------------------------------------------------
# corrector solves


def test_corrector1_zero_for_constant_mu():
    grid, lam, mu = make_fields(64, lambda x: np.full_like(x, 0.9))
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    f = first_order_rhs(folded, mu)
    kappa, info = solve_corrector1(op, f)
    assert np.max(np.abs(kappa.values)) < 1e-10


def test_corrector1_backends_agree():
    grid, lam, mu = make_fields(256, sin_mu)
    folded = fold_kernel(KernelSpec.compact_bump(0.25, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    f = first_order_rhs(folded, mu)
    k_direct, _ = solve_corrector1(op, f, backend="direct")
    k_defl, info = solve_corrector1(op, f, backend="deflated")
    assert np.max(np.abs(k_direct.values - k_defl.values)) < 1e-8
    assert info["contraction_estimate"] < 1.0
    assert abs(k_direct.values[:, 0].mean()) < 1e-12


def test_corrector1_grid_refinement_consistency():
    def solve_at(n):
        grid, lam, mu = make_fields(n, sin_mu)
        folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
        op = assemble_cell_operator(folded, mu)
        kappa, _ = solve_corrector1(op, first_order_rhs(folded, mu), backend="deflated")
        return kappa

    coarse = solve_at(256)
    fine = solve_at(512)
    diff = np.max(np.abs(coarse.values[:, 0] - fine.values[::2, 0]))
    h = 1.0 / 256
    assert diff < 10.0 * h**2


def test_corrector1_shift_invariance_and_scaling():
    grid, lam, mu = make_fields(64, sin_mu)
    kern = KernelSpec.gaussian(0.3, dim=1)
    folded = fold_kernel(kern, grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    f = first_order_rhs(folded, mu)
    kappa, _ = solve_corrector1(op, f)
    shifted = op.apply(kappa.values[:, 0] + 3.7)
    assert np.max(np.abs(shifted - op.apply(kappa.values[:, 0]))) < 1e-12
    # kernel scaling: s * a leaves kappa1 unchanged and scales theta by s
    s = 2.5
    kern_s = KernelSpec.gaussian(0.3, dim=1, scale=s)
    folded_s = fold_kernel(kern_s, grid, with_moments=True)
    op_s = assemble_cell_operator(folded_s, mu)
    kappa_s, _ = solve_corrector1(op_s, first_order_rhs(folded_s, mu))
    assert np.max(np.abs(kappa_s.values - kappa.values)) < 1e-9
    th, _ = compute_theta(kappa, folded, lam, mu)
    th_s, _ = compute_theta(kappa_s, folded_s, lam, mu)
    assert np.allclose(th_s, s * th, rtol=1e-10)


def test_solvability_gate_raises():
    grid, lam, mu = make_fields(32, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    bad = PeriodicField(grid=grid, values=np.ones(32))
    with pytest.raises(SolvabilityError):
        solve_corrector1(op, bad)


def test_deflated_iterates_stay_in_invariant_subspace():
    grid, lam, mu = make_fields(64, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    wt = mu.values * op.q_values
    f = first_order_rhs(folded, mu)
    kappa, _ = solve_corrector1(op, f, backend="deflated")
    # the solution (before mean removal its projected version) pairs to zero
    # against the weight up to rounding
    centered = kappa.values[:, 0] - np.sum(wt * kappa.values[:, 0]) / wt.sum()
    functional = abs(np.sum(wt * op.apply_markov(centered)) * grid.weight)
    assert functional < 1e-9 * grid_norm(grid, centered)


def test_markov_operator_row_sums_one():
    grid, lam, mu = make_fields(48, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    ones = np.ones(grid.shape)
    assert np.max(np.abs(op.apply_markov(ones) - 1.0)) < 1e-10


def test_contraction_estimate_below_one():
    grid, lam, mu = make_fields(64, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    rho = estimate_contraction(op)
    assert 0.0 <= rho < 1.0


# ---------------------------------------------------------------------------
# effective matrix


def test_theta_constant_coefficients_closed_form():
    lam0, mu0 = 2.0, 3.0
    grid, lam, mu = make_fields(
        128, lambda x: np.full_like(x, mu0), lam_fn=lambda x: np.full_like(x, lam0)
    )
    folded = fold_kernel(KernelSpec.gaussian(1.0, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    kappa, _ = solve_corrector1(op, first_order_rhs(folded, mu))
    theta, theta_tilde = compute_theta(kappa, folded, lam, mu)
    assert abs(theta[0, 0] - 0.5 * lam0 * mu0 * 1.0) < 1e-8
    assert abs(theta_tilde[0, 0] - 0.5 * mu0**2) < 1e-8


def test_theta_unit_coefficients():
    grid, lam, mu = make_fields(128, lambda x: np.ones_like(x))
    folded = fold_kernel(KernelSpec.gaussian(1.0, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    kappa, _ = solve_corrector1(op, first_order_rhs(folded, mu))
    theta, _ = compute_theta(kappa, folded, lam, mu)
    assert abs(theta[0, 0] - 0.5) < 1e-8


def test_dirichlet_form_constant_coefficients():
    lam0, mu0 = 2.0, 3.0
    grid, lam, mu = make_fields(
        128, lambda x: np.full_like(x, mu0), lam_fn=lambda x: np.full_like(x, lam0)
    )
    folded = fold_kernel(KernelSpec.gaussian(1.0, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    kappa, _ = solve_corrector1(op, first_order_rhs(folded, mu))
    theta_sym = theta_dirichlet_form(kappa, folded, mu, lam)
    assert abs(theta_sym[0, 0] - 0.5 * lam0 * mu0) < 1e-8


def test_cross_formula_identity_sinusoidal(sin_cell_128):
    sol = sin_cell_128
    sym = 0.5 * (sol.theta + sol.theta.T)
    rel = np.linalg.norm(sym - sol.theta_sym_dirichlet) / np.linalg.norm(sol.theta_sym_dirichlet)
    assert rel < 1e-8


def test_theta_2d_positive_definite(sin_medium_2d):
    sol = solve_cell_problem(sin_medium_2d, n=32, with_kappa2=False)
    assert sol.pd_margin > 0.0
    sym = 0.5 * (sol.theta + sol.theta.T)
    rel = np.linalg.norm(sym - sol.theta_sym_dirichlet) / np.linalg.norm(sol.theta_sym_dirichlet)
    assert rel < 1e-8


def test_dirichlet_form_is_psd_as_assembled():
    grid, lam, mu = make_fields(48, sin_mu)
    folded = fold_kernel(KernelSpec.gaussian(0.3, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    kappa, _ = solve_corrector1(op, first_order_rhs(folded, mu))
    theta_sym = theta_dirichlet_form(kappa, folded, mu, lam)
    assert np.linalg.eigvalsh(0.5 * (theta_sym + theta_sym.T)).min() > -1e-10


def test_swap_symmetry_identities():
    # even fold: bilinear form symmetric under mu <-> lam; odd fold: antisymmetric
    grid = TorusGrid(dim=1, n=32)
    folded = fold_kernel(KernelSpec.gaussian(0.35, dim=1), grid, with_moments=True)
    lam_v = 1.0 + 0.4 * np.cos(2 * np.pi * grid.axis_nodes())
    mu_v = 1.0 + 0.5 * np.sin(2 * np.pi * grid.axis_nodes())
    w = grid.weight**2

    def form(kern_vals, u, v):
        n = grid.n
        mat = kern_vals[(np.arange(n)[:, None] - np.arange(n)[None, :]) % n]
        return float(u @ mat @ v) * w

    even_lm = form(folded.values, lam_v, mu_v)
    even_ml = form(folded.values, mu_v, lam_v)
    assert abs(even_lm - even_ml) < 1e-12 * abs(even_lm)
    odd_lm = form(folded.first_moment[:, 0], lam_v, mu_v)
    odd_ml = form(folded.first_moment[:, 0], mu_v, lam_v)
    assert abs(odd_lm + odd_ml) < 1e-12 * max(abs(odd_lm), 1e-30)


# ---------------------------------------------------------------------------
# second corrector


def test_second_order_rhs_constant_coefficients_vanishes():
    lam0, mu0 = 2.0, 3.0
    grid, lam, mu = make_fields(
        64, lambda x: np.full_like(x, mu0), lam_fn=lambda x: np.full_like(x, lam0)
    )
    folded = fold_kernel(KernelSpec.gaussian(1.0, dim=1), grid, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    kappa1, _ = solve_corrector1(op, first_order_rhs(folded, mu))
    theta, _ = compute_theta(kappa1, folded, lam, mu)
    rhs = second_order_rhs(theta, kappa1, lam, mu, folded)
    assert np.max(np.abs(rhs.values)) < 1e-8
    kappa2, _ = solve_corrector2(op, rhs)
    assert np.max(np.abs(kappa2.values)) < 1e-8


def test_second_order_rhs_solvability(sin_cell_128):
    sol = sin_cell_128
    assert np.max(np.asarray(sol.diagnostics["kappa2_solvability"])) < 1e-8


def test_corrector2_residual_and_mean(sin_cell_128):
    sol = sin_cell_128
    assert max(sol.diagnostics["kappa2_residuals"]) < 1e-9
    assert abs(sol.kappa2.values[..., 0, 0].mean()) < 1e-12


def test_corrector2_backends_agree():
    medium = Medium(kernel=KernelSpec.gaussian(0.3, dim=1), lam=lambda x: np.ones_like(x), mu=sin_mu)
    sol_direct = solve_cell_problem(medium, n=96, backend="direct")
    sol_defl = solve_cell_problem(medium, n=96, backend="deflated")
    assert np.max(np.abs(sol_direct.kappa2.values - sol_defl.kappa2.values)) < 1e-8
    assert np.max(np.abs(sol_direct.kappa1.values - sol_defl.kappa1.values)) < 1e-8


# ---------------------------------------------------------------------------
# pipeline


def test_solve_cell_problem_diagnostics(sin_cell_128):
    sol = sin_cell_128
    d = sol.diagnostics
    assert d["backend"] == "direct"
    assert d["pd_margin"] > 0
    assert d["theta_cross_formula_reldiff"] < 1e-8
    assert max(d["kappa1_residuals"]) < 1e-9
    assert abs(sol.kappa1.values[:, 0].mean()) < 1e-12


def test_cell_solution_json_roundtrip(sin_cell_128):
    import json

    doc = json.loads(sin_cell_128.to_json(include_fields=True))
    assert doc["schema_version"] == 1
    assert np.allclose(np.array(doc["theta"]), sin_cell_128.theta)
    assert np.allclose(np.array(doc["kappa1"]), sin_cell_128.kappa1.values)


def test_nullspace_diagnostic_reports_gap(sin_medium_1d):
    sol = solve_cell_problem(sin_medium_1d, n=48, with_kappa2=False, nullspace_diagnostic=True)
    s_min, s_next = sol.diagnostics["smallest_singular_values"]
    assert s_min < 1e-12  # the constant null vector
    assert s_next > 1e-3  # and nothing else near the kernel
