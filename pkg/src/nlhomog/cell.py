"""Cell problems on the torus: correctors and the effective diffusion matrix.

The cell operator acts on periodic functions as

    (A phi)(x) = integral ahat(x - y) mu(y) (phi(y) - phi(x)) dy
               = (K phi)(x) - q(x) phi(x),

with K the folded-kernel integral operator and q the mass function.  The
constant function spans the kernel of A and mu spans the kernel of its
adjoint, so A phi = f is solvable iff <f, mu> = 0; solutions are fixed by
zero grid mean.  Two solver backends are provided:

* "direct": least squares on the mean-augmented dense system;
* "deflated": the second-kind form (P - E) phi = f / q with
  P phi = K phi / q, iterated as a Neumann series on the invariant
  subspace orthogonal to constants in the mu*q weight.

The effective matrix is assembled twice, from the solvability condition of
the second-order cell equation and from the associated Dirichlet form;
their symmetric parts must agree, which the acceptance suite enforces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    GridMismatchError,
    NonContractionError,
    ResolutionError,
    SolvabilityError,
    SolverBreakdownError,
)
from .model import (
    FoldedKernel,
    KernelSpec,
    Medium,
    PeriodicField,
    TorusGrid,
    fold_kernel,
    torus_convolve,
)

__all__ = [
    "CellOperator",
    "CellSolution",
    "DeflatedIterationState",
    "assemble_cell_operator",
    "first_order_rhs",
    "check_solvability",
    "solve_corrector1",
    "solve_corrector2",
    "compute_theta",
    "theta_dirichlet_form",
    "second_order_rhs",
    "solve_cell_problem",
    "estimate_contraction",
]

DENSE_ENTRY_CAP = 2**26  # dense assembly limit, ~0.5 GiB of float64


def grid_inner(grid: TorusGrid, u: np.ndarray, v: np.ndarray) -> float:
    """Quadrature inner product h^d sum(u v)."""
    return float(np.sum(u * v) * grid.weight)


def grid_norm(grid: TorusGrid, u: np.ndarray) -> float:
    return float(np.sqrt(np.sum(u * u) * grid.weight))


@dataclass
class CellOperator:
    """Discrete cell operator A = K - G on a torus grid.

    K_part[i, j] = ahat(x_i - x_j) mu(x_j) h^d and G is the diagonal of
    exact row sums of K, so A annihilates constants by construction and
    mu is a left null vector.  `apply` works matrix-free through FFT
    convolutions; the dense matrices materialize lazily for the direct
    backend and for brute-force diagnostics.
    """

    grid: TorusGrid
    folded: FoldedKernel
    mu: PeriodicField

    def __post_init__(self):
        if not (self.grid == self.folded.grid == self.mu.grid):
            raise GridMismatchError("operator pieces live on different grids")
        self.q_values = torus_convolve(self.grid, self.folded.values, self.mu.values)

    @cached_property
    def k_matrix(self) -> np.ndarray:
        n, d, size = self.grid.n, self.grid.dim, self.grid.size
        if size * size > DENSE_ENTRY_CAP:
            raise ResolutionError(
                f"dense cell operator needs {size}^2 entries, over the cap {DENSE_ENTRY_CAP}"
            )
        idx = np.arange(n)
        wrap = (idx[:, None] - idx[None, :]) % n
        if d == 1:
            kern = self.folded.values[wrap]
        else:
            # row-chunked gather over the block-circulant structure
            kern = np.empty((size, size))
            cols = np.stack(np.unravel_index(np.arange(size), self.grid.shape), axis=0)
            rows = np.stack(np.unravel_index(np.arange(size), self.grid.shape), axis=0)
            for r in range(size):
                offs = tuple((rows[k, r] - cols[k]) % n for k in range(d))
                kern[r] = self.folded.values[offs]
        return kern * (self.mu.values.reshape(-1) * self.grid.weight)[None, :]

    @cached_property
    def g_diag(self) -> np.ndarray:
        return self.k_matrix.sum(axis=1)

    @cached_property
    def a_matrix(self) -> np.ndarray:
        a = self.k_matrix.copy()
        a[np.diag_indices_from(a)] -= self.g_diag
        return a

    def apply_k(self, values: np.ndarray) -> np.ndarray:
        return torus_convolve(self.grid, self.folded.values, self.mu.values * values)

    def apply(self, values: np.ndarray) -> np.ndarray:
        """A phi for a scalar mesh field, via FFT."""
        return self.apply_k(values) - self.q_values * values

    def apply_markov(self, values: np.ndarray) -> np.ndarray:
        """P phi = (K phi) / q; row sums are one by construction."""
        return self.apply_k(values) / self.q_values


def assemble_cell_operator(folded: FoldedKernel, mu: PeriodicField) -> CellOperator:
    """Build the cell operator from a folded kernel and the coefficient mu."""
    return CellOperator(grid=folded.grid, folded=folded, mu=mu)


def first_order_rhs(folded: FoldedKernel, mu: PeriodicField) -> PeriodicField:
    """Right-hand side of the first corrector equation, one component per axis:

        f_i(x) = integral bhat_i(x - y) mu(y) dy
    """
    if folded.first_moment is None:
        raise ValueError("folded kernel lacks the first-moment fold")
    if folded.grid != mu.grid:
        raise GridMismatchError("folded kernel and mu on different grids")
    grid = folded.grid
    comps = [
        torus_convolve(grid, folded.first_moment[..., i], mu.values) for i in range(grid.dim)
    ]
    return PeriodicField(grid=grid, values=np.stack(comps, axis=-1), role="other")


def check_solvability(rhs: PeriodicField, mu: PeriodicField) -> np.ndarray:
    """|<rhs, mu>| per component; the caller compares against its tolerance."""
    if rhs.grid != mu.grid:
        raise GridMismatchError("rhs and mu on different grids")
    axes = tuple(range(rhs.grid.dim))
    prod = rhs.values * mu.values.reshape(mu.values.shape + (1,) * len(rhs.component_shape))
    return np.abs(prod.sum(axis=axes) * rhs.grid.weight)


# ---------------------------------------------------------------------------
# solvers


@dataclass
class DeflatedIterationState:
    """Bookkeeping for one deflated Neumann solve."""

    iterations: int = 0
    residual: float = np.inf
    contraction_estimate: float = np.nan
    projection_defect: float = 0.0
    history: list = field(default_factory=list)


def estimate_contraction(op: CellOperator, iters: int = 40, seed: int = 1905) -> float:
    """Power-iteration estimate of the spectral radius of P on the deflated
    subspace {psi : <mu q psi> = 0}."""
    rng = np.random.default_rng(seed)
    wt = op.mu.values * op.q_values
    denom = wt.sum()

    def project(v):
        return v - (np.sum(wt * v) / denom)

    v = project(rng.standard_normal(op.grid.shape))
    v /= grid_norm(op.grid, v)
    rho = np.nan
    for _ in range(iters):
        w = project(op.apply_markov(v))
        nw = grid_norm(op.grid, w)
        if nw == 0.0:
            return 0.0
        rho = nw
        v = w / nw
    return float(rho)


def _solve_direct(op: CellOperator, rhs_flat: np.ndarray) -> tuple[np.ndarray, dict]:
    size = op.grid.size
    aug = np.vstack([op.a_matrix, np.full((1, size), 1.0 / size)])
    b = np.concatenate([rhs_flat, [0.0]])
    x, _, rank, _ = np.linalg.lstsq(aug, b, rcond=None)
    if rank < size:
        raise SolverBreakdownError(f"augmented cell system is rank deficient ({rank} < {size})")
    return x, {"backend": "direct"}


def _solve_deflated(
    op: CellOperator,
    rhs_mesh: np.ndarray,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, DeflatedIterationState]:
    state = DeflatedIterationState()
    q = op.q_values
    wt = op.mu.values * q
    denom = wt.sum()

    def project(v):
        return v - (np.sum(wt * v) / denom)

    g = rhs_mesh / q
    state.projection_defect = abs(np.sum(wt * g) * op.grid.weight)
    g = project(g)
    norm_g = grid_norm(op.grid, g)
    if norm_g == 0.0:
        state.residual = 0.0
        return np.zeros(op.grid.shape), state
    kappa = -g
    prev_update = None
    for it in range(1, max_iter + 1):
        p_kappa = project(op.apply_markov(kappa))
        nxt = p_kappa - g
        update = grid_norm(op.grid, nxt - kappa)
        residual = grid_norm(op.grid, p_kappa - kappa - g) / norm_g
        if prev_update is not None and prev_update > 0.0:
            state.contraction_estimate = update / prev_update
        prev_update = update
        kappa = nxt
        state.iterations = it
        state.residual = residual
        if residual <= tol:
            return kappa, state
    raise NonContractionError(
        f"deflated iteration exceeded {max_iter} steps (residual {state.residual:.3e})",
        spectral_radius_estimate=state.contraction_estimate,
    )


def _solve_components(op, rhs: PeriodicField, backend, tol, max_iter, solvability_tol):
    grid = op.grid
    comp_shape = rhs.component_shape
    solv = check_solvability(rhs, op.mu)
    info = {
        "solvability_residuals": solv.tolist() if solv.ndim else float(solv),
        "solve_residuals": [],
        "backend": backend,
    }
    mu_norm = grid_norm(grid, op.mu.values)
    flat_comp = int(np.prod(comp_shape)) if comp_shape else 1
    rhs_stack = rhs.values.reshape(grid.shape + (flat_comp,))
    out = np.zeros_like(rhs_stack)
    deflated_states = []
    # right-hand sides at roundoff scale (e.g. constant coefficients) are zero
    zero_floor = 1e-13 * max(1.0, grid_norm(grid, op.q_values))
    for c in range(flat_comp):
        rc = rhs_stack[..., c]
        rc_norm = grid_norm(grid, rc)
        if rc_norm <= zero_floor:
            info["solve_residuals"].append(0.0)
            continue
        solv_c = solv.reshape(-1)[c] if comp_shape else float(solv)
        if solv_c > solvability_tol * rc_norm * mu_norm:
            raise SolvabilityError(
                f"component {c}: <rhs, mu> = {solv_c:.3e} exceeds "
                f"{solvability_tol:g} * ||rhs|| ||mu|| = {solvability_tol * rc_norm * mu_norm:.3e}"
            )
        if backend == "direct":
            x, _ = _solve_direct(op, rc.reshape(-1))
            kappa = x.reshape(grid.shape)
        elif backend == "deflated":
            kappa, st = _solve_deflated(op, rc, tol, max_iter)
            deflated_states.append(st)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        kappa = kappa - kappa.mean()
        res = grid_norm(grid, op.apply(kappa) - rc) / rc_norm
        if res > max(tol * 100.0, 1e-8):
            raise SolverBreakdownError(
                f"component {c}: solve residual {res:.3e} exceeds contract"
            )
        info["solve_residuals"].append(res)
        out[..., c] = kappa
    if deflated_states:
        info["iterations"] = max(st.iterations for st in deflated_states)
        info["contraction_estimate"] = max(
            st.contraction_estimate for st in deflated_states
        )
        info["projection_defect"] = max(st.projection_defect for st in deflated_states)
    return out.reshape(grid.shape + comp_shape), info


def _pick_backend(op: CellOperator, backend: str) -> str:
    if backend != "auto":
        return backend
    return "direct" if op.grid.size <= 1500 else "deflated"


def solve_corrector1(
    op: CellOperator,
    rhs: PeriodicField,
    backend: str = "auto",
    tol: float = 1e-10,
    max_iter: int = 10_000,
    solvability_tol: float = 1e-8,
):
    """Solve A kappa = rhs component-wise; returns (corrector field, info).

    Components are normalized to zero grid mean.  `backend` is "direct",
    "deflated", or "auto" (direct for small grids).
    """
    backend = _pick_backend(op, backend)
    values, info = _solve_components(op, rhs, backend, tol, max_iter, solvability_tol)
    return PeriodicField(grid=op.grid, values=values, role="corrector1"), info


def solve_corrector2(
    op: CellOperator,
    rhs: PeriodicField,
    backend: str = "auto",
    tol: float = 1e-10,
    max_iter: int = 10_000,
    solvability_tol: float = 1e-8,
):
    """Solve the second corrector system for the symmetrized right-hand side.

    Only the (i, j) components with i <= j are solved; the result is
    mirrored, matching the fact that only the symmetric part enters the
    two-scale expansion.
    """
    backend = _pick_backend(op, backend)
    d = op.grid.dim
    sym = 0.5 * (rhs.values + np.swapaxes(rhs.values, -1, -2))
    values = np.zeros_like(sym)
    infos = {"backend": backend, "solve_residuals": [], "solvability_residuals": []}
    for i in range(d):
        for j in range(i, d):
            comp = PeriodicField(grid=op.grid, values=sym[..., i, j], role="other")
            got, inf = _solve_components(op, comp, backend, tol, max_iter, solvability_tol)
            values[..., i, j] = got
            values[..., j, i] = got
            infos["solve_residuals"].append(inf["solve_residuals"][0])
            infos["solvability_residuals"].append(inf["solvability_residuals"])
    return PeriodicField(grid=op.grid, values=values, role="corrector2"), infos


# ---------------------------------------------------------------------------
# effective matrix


def _mean_nu(lam: PeriodicField, mu: PeriodicField) -> float:
    return float(np.sum(mu.values / lam.values) * lam.grid.weight)


def compute_theta(
    kappa1: PeriodicField,
    folded: FoldedKernel,
    lam: PeriodicField,
    mu: PeriodicField,
):
    """Effective matrix from the second-order solvability condition.

    Returns (theta, theta_tilde) with theta = theta_tilde / <mu/lambda>:

        theta_tilde_ij = 1/2 <mu, chat_ij * mu> - <mu, bhat_i * (mu kappa1_j)>

    where * is torus convolution.
    """
    grid = folded.grid
    if folded.second_moment is None or folded.first_moment is None:
        raise ValueError("folded kernel lacks moment folds")
    d = grid.dim
    w = grid.weight
    mu_v = mu.values
    theta_tilde = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            t1 = 0.5 * np.sum(mu_v * torus_convolve(grid, folded.second_moment[..., i, j], mu_v))
            t2 = np.sum(
                mu_v * torus_convolve(grid, folded.first_moment[..., i], mu_v * kappa1.values[..., j])
            )
            theta_tilde[i, j] = (t1 - t2) * w
    theta = theta_tilde / _mean_nu(lam, mu)
    return theta, theta_tilde


def theta_dirichlet_form(
    kappa1: PeriodicField,
    folded: FoldedKernel,
    mu: PeriodicField,
    lam: PeriodicField,
) -> np.ndarray:
    """Symmetric effective matrix from the quadratic (Dirichlet) form.

    Assembles I_ij = <<a mu mu [z + dkappa]_i [z + dkappa]_j>> through the
    same folds as compute_theta and returns I / (2 <mu/lambda>).  The
    assembled I is symmetric positive semidefinite by construction.
    """
    grid = folded.grid
    d = grid.dim
    w = grid.weight
    mu_v = mu.values
    k = kappa1.values
    conv = lambda kern, f: torus_convolve(grid, kern, f)
    mat = np.zeros((d, d))
    q = conv(folded.values, mu_v)
    for i in range(d):
        for j in range(i, d):
            t1 = np.sum(mu_v * conv(folded.second_moment[..., i, j], mu_v))
            t2 = (
                np.sum(mu_v * k[..., j] * conv(folded.first_moment[..., i], mu_v))
                - np.sum(mu_v * conv(folded.first_moment[..., i], mu_v * k[..., j]))
            )
            t2t = (
                np.sum(mu_v * k[..., i] * conv(folded.first_moment[..., j], mu_v))
                - np.sum(mu_v * conv(folded.first_moment[..., j], mu_v * k[..., i]))
            )
            t3 = (
                np.sum(mu_v * k[..., i] * k[..., j] * q)
                + np.sum(mu_v * conv(folded.values, mu_v * k[..., i] * k[..., j]))
                - np.sum(mu_v * k[..., i] * conv(folded.values, mu_v * k[..., j]))
                - np.sum(mu_v * k[..., j] * conv(folded.values, mu_v * k[..., i]))
            )
            mat[i, j] = mat[j, i] = (t1 + t2 + t2t + t3) * w
    return mat / (2.0 * _mean_nu(lam, mu))


def second_order_rhs(
    theta: np.ndarray,
    kappa1: PeriodicField,
    lam: PeriodicField,
    mu: PeriodicField,
    folded: FoldedKernel,
) -> PeriodicField:
    """Right-hand side of the second corrector equation, d^2 components:

        rhs_ij(x) = theta_ij / lambda(x) - 1/2 (chat_ij * mu)(x)
                    + (bhat_i * (mu kappa1_j))(x)

    Its mu-pairing vanishes by the definition of theta; a residual above
    tolerance signals an inconsistent theta.
    """
    grid = folded.grid
    d = grid.dim
    vals = np.zeros(grid.shape + (d, d))
    for i in range(d):
        for j in range(d):
            vals[..., i, j] = (
                theta[i, j] / lam.values
                - 0.5 * torus_convolve(grid, folded.second_moment[..., i, j], mu.values)
                + torus_convolve(grid, folded.first_moment[..., i], mu.values * kappa1.values[..., j])
            )
    return PeriodicField(grid=grid, values=vals, role="other")


# ---------------------------------------------------------------------------
# one-call pipeline


@dataclass
class CellSolution:
    """Correctors, effective matrix, and solve diagnostics for one problem."""

    grid: TorusGrid
    kappa1: PeriodicField
    theta: np.ndarray
    theta_tilde: np.ndarray
    theta_sym_dirichlet: np.ndarray
    kappa2: PeriodicField | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def pd_margin(self) -> float:
        """Smallest eigenvalue of the symmetric part of theta."""
        sym = 0.5 * (self.theta + self.theta.T)
        return float(np.linalg.eigvalsh(sym).min())

    def summary_dict(self) -> dict:
        out = {
            "dimension": self.grid.dim,
            "n": self.grid.n,
            "theta": self.theta.tolist(),
            "theta_tilde": self.theta_tilde.tolist(),
            "theta_sym_dirichlet": self.theta_sym_dirichlet.tolist(),
            "pd_margin": self.pd_margin,
            "diagnostics": self.diagnostics,
        }
        return out

    def to_json(self, include_fields: bool = False) -> str:
        doc = self.summary_dict()
        doc["schema_version"] = 1
        if include_fields:
            doc["kappa1"] = self.kappa1.values.tolist()
            if self.kappa2 is not None:
                doc["kappa2"] = self.kappa2.values.tolist()
        return json.dumps(doc, sort_keys=True, indent=2)


def solve_cell_problem(
    medium: Medium,
    n: int,
    backend: str = "auto",
    tail_tol: float = 1e-10,
    tol: float = 1e-10,
    with_kappa2: bool = True,
    nullspace_diagnostic: bool = False,
) -> CellSolution:
    """Full cell pipeline: fold, assemble, solve correctors, assemble theta."""
    grid = TorusGrid(dim=medium.dim, n=n)
    lam, mu = medium.fields(n)
    folded = fold_kernel(medium.kernel, grid, tail_tol=tail_tol, with_moments=True)
    op = assemble_cell_operator(folded, mu)
    rhs1 = first_order_rhs(folded, mu)
    kappa1, info1 = solve_corrector1(op, rhs1, backend=backend, tol=tol)
    theta, theta_tilde = compute_theta(kappa1, folded, lam, mu)
    theta_sym = theta_dirichlet_form(kappa1, folded, mu, lam)
    diagnostics = {
        "backend": info1["backend"],
        "k_max": folded.k_max,
        "tail_estimate": folded.tail_estimate,
        "kappa1_solvability": info1["solvability_residuals"],
        "kappa1_residuals": info1["solve_residuals"],
        "contraction_estimate": estimate_contraction(op)
        if info1["backend"] == "deflated"
        else None,
        "mean_nu": _mean_nu(lam, mu),
    }
    if info1["backend"] == "deflated":
        diagnostics["iterations"] = info1.get("iterations")
    kappa2 = None
    if with_kappa2:
        rhs2 = second_order_rhs(theta, kappa1, lam, mu, folded)
        kappa2, info2 = solve_corrector2(op, rhs2, backend=backend, tol=tol)
        diagnostics["kappa2_solvability"] = info2["solvability_residuals"]
        diagnostics["kappa2_residuals"] = info2["solve_residuals"]
    if nullspace_diagnostic and grid.size <= 2048:
        sv = np.linalg.svd(op.a_matrix, compute_uv=False)
        diagnostics["smallest_singular_values"] = [float(sv[-1]), float(sv[-2])]
    sol = CellSolution(
        grid=grid,
        kappa1=kappa1,
        theta=theta,
        theta_tilde=theta_tilde,
        theta_sym_dirichlet=theta_sym,
        kappa2=kappa2,
        diagnostics=diagnostics,
    )
    diagnostics["pd_margin"] = sol.pd_margin
    cross = np.linalg.norm(0.5 * (theta + theta.T) - theta_sym) / max(
        np.linalg.norm(theta_sym), 1e-300
    )
    diagnostics["theta_cross_formula_reldiff"] = float(cross)
    return sol
