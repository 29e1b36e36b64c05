"""Scaling-limit studies for the rescaled nonlocal operator on a truncated box.

The rescaled operator

    (L_eps u)(x) = eps^(-d-2) lam(x/eps) integral a((x-y)/eps) mu(y/eps)
                   (u(y) - u(x)) dy

is discretized on a uniform box [-R, R)^d with rectangle quadrature.  Jumps
leaving the box are dropped and the diagonal compensates, so row sums stay
exactly zero and the operator remains symmetric and negative semidefinite
in the weighted inner product with weight nu = mu/lam evaluated at x/eps.
The limit operator theta : grad grad is handled spectrally on the
periodized box (legitimate because the data decay at the boundary).

Studies assert monotone decrease of the comparison errors over a
decreasing eps list; no convergence rate is claimed.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import expm_multiply

from .cell import CellSolution, solve_cell_problem
from .errors import ResolutionError, SolverBreakdownError, TruncationError
from .model import Medium

__all__ = [
    "SampleGrid",
    "DiscreteNonlocalOperator",
    "StudyResult",
    "grid_for_epsilon",
    "assemble_leps",
    "solve_resolvent_eps",
    "solve_limit_resolvent",
    "spectral_gradient",
    "spectral_hessian",
    "corrector_expansion",
    "main_lemma_residual",
    "resolvent_convergence_study",
    "semigroup_study",
    "default_source",
]

ROW_CHUNK_ENTRIES = 2**23  # assembly buffer cap, 64 MiB of float64


@dataclass(frozen=True)
class SampleGrid:
    """Uniform grid on the box [-R, R)^d, m points per axis."""

    dim: int
    half_width: float
    num_points: int

    def __post_init__(self):
        if self.num_points < 8:
            raise ValueError("need at least 8 points per axis")

    @property
    def delta(self) -> float:
        return 2.0 * self.half_width / self.num_points

    @property
    def size(self) -> int:
        return self.num_points**self.dim

    @property
    def shape(self) -> tuple:
        return (self.num_points,) * self.dim

    def axis_nodes(self) -> np.ndarray:
        return -self.half_width + self.delta * np.arange(self.num_points)

    def mesh(self) -> tuple:
        axes = [self.axis_nodes()] * self.dim
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def points(self) -> np.ndarray:
        return np.stack(self.mesh(), axis=-1).reshape(-1, self.dim)

    def wavenumbers(self) -> list[np.ndarray]:
        k = 2.0 * np.pi * np.fft.fftfreq(self.num_points, d=self.delta)
        return [k] * self.dim

    def norm(self, values: np.ndarray) -> float:
        """Discrete L2 norm, Delta^(d/2)-scaled."""
        return float(np.sqrt(np.sum(np.abs(values) ** 2) * self.delta**self.dim))


def grid_for_epsilon(
    dim: int, half_width: float, eps: float, points_per_period: int = 8
) -> SampleGrid:
    """Smallest even grid satisfying Delta <= eps / points_per_period."""
    m = int(np.ceil(2.0 * half_width * points_per_period / eps))
    m += m % 2
    return SampleGrid(dim=dim, half_width=half_width, num_points=m)


@dataclass
class DiscreteNonlocalOperator:
    """Dense truncated-box discretization of the rescaled operator.

    `apply` shifts out the value at the first node before the matvec;
    the shift is invisible analytically (the operator kills constants)
    and makes the discrete action annihilate constant vectors exactly,
    not just to the ulp-level residual left in the matrix rows.
    """

    grid: SampleGrid
    eps: float
    matrix: np.ndarray
    nu: np.ndarray  # nu(x/eps) per node, flat

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ (u - u.reshape(-1)[0])

    def weighted_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.nu * u * u) * self.grid.delta**self.grid.dim))

    def row_sum_residual(self) -> float:
        """Roundoff left in the matrix rows; the applied operator is exact."""
        return float(np.max(np.abs(self.matrix.sum(axis=1))))

    def weighted_asymmetry(self) -> float:
        d = self.nu[:, None] * self.matrix
        return float(np.max(np.abs(d - d.T)))

    def weighted_quadratic(self, u: np.ndarray) -> float:
        """<L u, u> in the nu-weighted inner product; <= 0 up to rounding."""
        return float(np.sum(self.nu * self.apply(u) * u) * self.grid.delta**self.grid.dim)


def _zero_row_sums(matrix: np.ndarray, passes: int = 8) -> None:
    # push the diagonal until np.sum over rows reads exactly zero
    idx = np.diag_indices_from(matrix)
    for _ in range(passes):
        residual = matrix.sum(axis=1)
        if not residual.any():
            return
        matrix[idx] -= residual


def assemble_leps(
    grid: SampleGrid,
    eps: float,
    medium: Medium,
    points_per_period: int = 8,
    tail_bound: float = 1e-8,
) -> DiscreteNonlocalOperator:
    """Assemble the truncated-box operator at scale eps.

    Preconditions: Delta <= eps / points_per_period, and the kernel's mass
    beyond the box diameter (in jump units) below `tail_bound`.
    """
    if grid.delta > eps / points_per_period * (1.0 + 1e-12):
        raise ResolutionError(
            f"grid spacing {grid.delta:g} exceeds eps/{points_per_period} = {eps / points_per_period:g}"
        )
    reach = 2.0 * grid.half_width / eps
    tail = medium.kernel.tail_mass(reach)
    if tail > tail_bound:
        raise TruncationError(
            f"kernel mass {tail:.2e} beyond the box (reach {reach:g} jump units)",
            achieved=tail,
        )
    d = grid.dim
    pts = grid.points()
    frac = pts / eps
    lam_v = medium.lam_at(frac)
    mu_v = medium.mu_at(frac)
    nu_v = mu_v / lam_v
    scale = eps ** (-(d + 2)) * grid.delta**d
    m = grid.num_points
    # kernel values on the difference lattice (2m-1 points per axis)
    diff_axis = grid.delta * np.arange(-(m - 1), m)
    if d == 1:
        table = medium.kernel(diff_axis / eps)
        gather = (np.arange(m)[:, None] - np.arange(m)[None, :]) + (m - 1)
        w = table[gather]
    else:
        mesh = np.meshgrid(*([diff_axis] * d), indexing="ij")
        table = medium.kernel(np.stack(mesh, axis=-1) / eps)
        w = np.empty((grid.size, grid.size))
        rows = np.stack(np.unravel_index(np.arange(grid.size), grid.shape), axis=0)
        chunk = max(1, ROW_CHUNK_ENTRIES // grid.size)
        for start in range(0, grid.size, chunk):
            stop = min(start + chunk, grid.size)
            offs = tuple(
                rows[k, start:stop, None] - rows[k, None, :] + (m - 1) for k in range(d)
            )
            w[start:stop] = table[offs]
    w *= scale * lam_v[:, None] * mu_v[None, :]
    _zero_row_sums(w)
    return DiscreteNonlocalOperator(grid=grid, eps=eps, matrix=w, nu=nu_v)


# ---------------------------------------------------------------------------
# resolvent solves


def solve_resolvent_eps(
    op: DiscreteNonlocalOperator, shift: float, f: np.ndarray
) -> np.ndarray:
    """Solve (L_eps - shift) u = f; shift > 0."""
    if shift <= 0:
        raise ValueError("spectral shift must be positive")
    f_flat = f.reshape(-1)
    mat = op.matrix - shift * np.eye(op.grid.size)
    u = np.linalg.solve(mat, f_flat)
    res = op.grid.norm(mat @ u - f_flat)
    nf = op.grid.norm(f_flat)
    if nf > 0 and res > 1e-10 * nf:
        raise SolverBreakdownError(f"resolvent solve residual {res:.3e} exceeds 1e-10 ||f||")
    return u.reshape(op.grid.shape)


def _symbol(theta: np.ndarray, grid: SampleGrid) -> np.ndarray:
    ks = np.meshgrid(*grid.wavenumbers(), indexing="ij")
    sym = np.zeros(grid.shape)
    for i in range(grid.dim):
        for j in range(grid.dim):
            sym = sym + theta[i, j] * ks[i] * ks[j]
    return sym


def _check_boundary_decay(f: np.ndarray, grid: SampleGrid, tol: float = 1e-10):
    top = np.max(np.abs(f))
    if top == 0.0 or np.max(f) - np.min(f) <= tol * top:
        return  # zero or constant sources are exactly periodic
    edge = 0.0
    for ax in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[ax] = 0
        edge = max(edge, float(np.max(np.abs(f[tuple(sl)]))))
    if edge > tol * top:
        raise ResolutionError(
            f"source does not decay at the box boundary (edge/interior = {edge / top:.2e})"
        )


def solve_limit_resolvent(
    theta: np.ndarray, shift: float, f: np.ndarray, grid: SampleGrid
) -> np.ndarray:
    """Solve theta : grad grad u - shift u = f spectrally on the periodized box."""
    if shift <= 0:
        raise ValueError("spectral shift must be positive")
    _check_boundary_decay(f, grid)
    denom = -_symbol(theta, grid) - shift
    u = np.real(np.fft.ifftn(np.fft.fftn(f) / denom))
    # residual through the spectral derivatives (sign/symbol consistency)
    hess = spectral_hessian(u, grid)
    res = np.einsum("ij,...ij->...", theta, hess) - shift * u - f
    nf = grid.norm(f)
    if nf > 0 and grid.norm(res) > 1e-8 * nf:
        raise SolverBreakdownError("limit resolvent residual exceeds 1e-8 ||f||")
    return u


def spectral_gradient(values: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Gradient by Fourier differentiation, shape grid.shape + (d,)."""
    ks = np.meshgrid(*grid.wavenumbers(), indexing="ij")
    fhat = np.fft.fftn(values)
    out = np.empty(grid.shape + (grid.dim,))
    for i in range(grid.dim):
        out[..., i] = np.real(np.fft.ifftn(1j * ks[i] * fhat))
    return out


def spectral_hessian(values: np.ndarray, grid: SampleGrid) -> np.ndarray:
    """Hessian by Fourier differentiation, shape grid.shape + (d, d)."""
    ks = np.meshgrid(*grid.wavenumbers(), indexing="ij")
    fhat = np.fft.fftn(values)
    out = np.empty(grid.shape + (grid.dim, grid.dim))
    for i in range(grid.dim):
        for j in range(i, grid.dim):
            block = np.real(np.fft.ifftn(-ks[i] * ks[j] * fhat))
            out[..., i, j] = block
            out[..., j, i] = block
    return out


# ---------------------------------------------------------------------------
# corrector expansion and the main-lemma residual


def corrector_expansion(
    u0: np.ndarray, cell: CellSolution, eps: float, grid: SampleGrid
) -> np.ndarray:
    """Two-scale approximation u0 + eps k1(x/eps).grad u0 + eps^2 k2(x/eps):hess u0.

    Corrector fields are sampled by periodic linear interpolation at
    x/eps mod 1; derivatives of u0 are spectral.
    """
    pts = grid.points() / eps
    grad = spectral_gradient(u0, grid).reshape(-1, grid.dim)
    k1 = cell.kappa1.interpolate(pts)
    v = u0.reshape(-1) + eps * np.sum(k1 * grad, axis=1)
    if cell.kappa2 is not None:
        hess = spectral_hessian(u0, grid).reshape(-1, grid.dim, grid.dim)
        k2 = cell.kappa2.interpolate(pts)
        v = v + eps**2 * np.einsum("nij,nij->n", k2, hess)
    return v.reshape(grid.shape)


def main_lemma_residual(
    op: DiscreteNonlocalOperator,
    v_eps: np.ndarray,
    theta: np.ndarray,
    u0: np.ndarray,
) -> float:
    """Discrete L2 norm of L_eps v_eps - theta : grad grad u0."""
    hess = spectral_hessian(u0, op.grid)
    target = np.einsum("ij,...ij->...", theta, hess)
    phi = op.apply(v_eps.reshape(-1)).reshape(op.grid.shape) - target
    return op.grid.norm(phi)


# ---------------------------------------------------------------------------
# studies


def default_source(*coords) -> np.ndarray:
    """Smooth, rapidly decaying test source exp(-|x|^2)."""
    r2 = sum(np.asarray(c) ** 2 for c in coords)
    return np.exp(-r2)


@dataclass
class StudyResult:
    """Per-epsilon error curves plus pass/fail verdicts for one study."""

    kind: str
    eps_list: list
    columns: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    runtimes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())

    def summary_dict(self) -> dict:
        return {
            "kind": self.kind,
            "eps_list": list(self.eps_list),
            "columns": {k: list(v) for k, v in self.columns.items()},
            "verdicts": {k: bool(v) for k, v in self.verdicts.items()},
            "meta": self.meta,
        }


def _strictly_decreasing(xs) -> bool:
    return all(b < a for a, b in zip(xs, xs[1:]))


def _ratio_rule(eps_list, errors, per_halving: float = 0.9) -> bool:
    # error ratio below per_halving^(log2 eps ratio) at every step
    for (e0, e1), (r0, r1) in zip(zip(eps_list, eps_list[1:]), zip(errors, errors[1:])):
        if r0 == 0.0:
            continue
        if r1 / r0 >= per_halving ** np.log2(e0 / e1):
            return False
    return True


def _run_points(worker, eps_list, threads):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, eps_list))
    return [worker(e) for e in eps_list]


def resolvent_convergence_study(
    medium: Medium,
    eps_list,
    shift: float = 1.0,
    half_width: float = 10.0,
    source: Callable = default_source,
    cell: CellSolution | None = None,
    cell_n: int = 256,
    points_per_period: int = 8,
    threads: int = 1,
) -> StudyResult:
    """Compare (L_eps - shift)^(-1) f with the limit resolvent over eps.

    Passes when the discrete L2 error decreases strictly with the 0.9-per-
    halving margin and the corrector-expansion residual decreases strictly.
    """
    eps_list = sorted(eps_list, reverse=True)
    if cell is None:
        cell = solve_cell_problem(medium, n=cell_n if medium.dim == 1 else 64)
    theta = cell.theta

    def point(eps):
        t0 = time.perf_counter()
        grid = grid_for_epsilon(medium.dim, half_width, eps, points_per_period)
        op = assemble_leps(grid, eps, medium, points_per_period)
        f = np.asarray(source(*grid.mesh()), dtype=float)
        u_eps = solve_resolvent_eps(op, shift, f)
        u0 = solve_limit_resolvent(theta, shift, f, grid)
        v = corrector_expansion(u0, cell, eps, grid)
        phi = main_lemma_residual(op, v, theta, u0)
        diff = u_eps - u0
        return {
            "error_l2": grid.norm(diff),
            "error_sup": float(np.max(np.abs(diff))),
            "phi_norm": phi,
            "runtime_s": time.perf_counter() - t0,
        }

    rows = _run_points(point, eps_list, threads)
    columns = {k: [r[k] for r in rows] for k in rows[0]}
    runtimes = columns.pop("runtime_s")
    errors = columns["error_l2"]
    verdicts = {
        "errors_strictly_decreasing": _strictly_decreasing(errors),
        "error_ratio_below_0.9_per_halving": _ratio_rule(eps_list, errors),
        "final_error_below_third_of_initial": errors[-1] < errors[0] / 3.0,
        "phi_strictly_decreasing": _strictly_decreasing(columns["phi_norm"]),
    }
    return StudyResult(
        kind="resolvent",
        eps_list=list(eps_list),
        columns=columns,
        verdicts=verdicts,
        meta={
            "shift": shift,
            "half_width": half_width,
            "points_per_period": points_per_period,
            "theta": theta.tolist(),
        },
        runtimes=runtimes,
    )


def heat_semigroup(theta: np.ndarray, f: np.ndarray, times, grid: SampleGrid) -> np.ndarray:
    """Limit evolution exp(t theta : grad grad) f, exact per Fourier mode."""
    sym = _symbol(theta, grid)
    fhat = np.fft.fftn(f)
    out = np.empty((len(times),) + grid.shape)
    for k, t in enumerate(times):
        out[k] = np.real(np.fft.ifftn(np.exp(-sym * t) * fhat))
    return out


def semigroup_study(
    medium: Medium,
    eps_list,
    times=(0.25, 0.5, 0.75, 1.0),
    half_width: float = 8.0,
    source: Callable = default_source,
    cell: CellSolution | None = None,
    cell_n: int = 256,
    points_per_period: int = 8,
    threads: int = 1,
    mass_tol: float = 1e-8,
) -> StudyResult:
    """Compare exp(t L_eps) f with the limit heat evolution, sup over t.

    The discrete semigroup action uses scaling-and-squaring (expm_multiply);
    the weighted mass <u(t), nu_eps> must stay constant to `mass_tol`.
    """
    eps_list = sorted(eps_list, reverse=True)
    times = sorted(times)
    if cell is None:
        cell = solve_cell_problem(medium, n=cell_n if medium.dim == 1 else 64, with_kappa2=False)
    theta = cell.theta

    def point(eps):
        t0 = time.perf_counter()
        grid = grid_for_epsilon(medium.dim, half_width, eps, points_per_period)
        op = assemble_leps(grid, eps, medium, points_per_period)
        f = np.asarray(source(*grid.mesh()), dtype=float)
        flat = f.reshape(-1)
        evol = expm_multiply(op.matrix, flat, start=times[0], stop=times[-1], num=len(times), endpoint=True)
        evol = evol.reshape((len(times),) + grid.shape)
        limit = heat_semigroup(theta, f, times, grid)
        sup_err = max(grid.norm(evol[k] - limit[k]) for k in range(len(times)))
        w = op.nu * grid.delta**grid.dim
        mass0 = float(np.sum(w * flat))
        drift = max(abs(float(np.sum(w * evol[k].reshape(-1))) - mass0) for k in range(len(times)))
        return {
            "sup_error": sup_err,
            "mass_drift_rel": drift / abs(mass0),
            "runtime_s": time.perf_counter() - t0,
        }

    rows = _run_points(point, eps_list, threads)
    columns = {k: [r[k] for r in rows] for k in rows[0]}
    runtimes = columns.pop("runtime_s")
    verdicts = {
        "sup_errors_decreasing": _strictly_decreasing(columns["sup_error"]),
        "weighted_mass_conserved": max(columns["mass_drift_rel"]) < mass_tol,
    }
    return StudyResult(
        kind="semigroup",
        eps_list=list(eps_list),
        columns=columns,
        verdicts=verdicts,
        meta={
            "times": list(times),
            "half_width": half_width,
            "points_per_period": points_per_period,
            "theta": theta.tolist(),
        },
        runtimes=runtimes,
    )
