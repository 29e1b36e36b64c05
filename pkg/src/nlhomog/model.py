"""Jump kernels, periodic coefficients, and torus folding.

Conventions used throughout the package:

* the periodicity cell is the unit torus [0,1)^d, discretized by a uniform
  grid of n points per axis with rectangle-rule quadrature (weight h^d,
  h = 1/n), which is also the trapezoid rule by periodicity;
* point sets with a component axis carry it last, so vector fields on a
  d-dimensional grid have shape (n,)*d + (d,);
* the folded kernel is ahat(w) = sum_k a(w+k) over the integer lattice,
  with first-moment fold bhat(w) = sum_k a(w+k)(w+k) and second-moment
  fold chat(w) = sum_k a(w+k)(w+k)x(w+k).  The weighted folds use the
  full displacement w+k, which is the convention that makes torus
  convolutions against periodic functions reproduce the corresponding
  whole-space integrals.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import (
    CoefficientBoundsError,
    GridMismatchError,
    MomentDivergenceError,
    TruncationError,
)

__all__ = [
    "TorusGrid",
    "KernelSpec",
    "KernelMoments",
    "PeriodicField",
    "FoldedKernel",
    "Medium",
    "kernel_moments",
    "moments_from_callable",
    "fold_kernel",
    "fold_moment_kernel",
    "fold_second_moment_kernel",
    "validate_coefficients",
    "mass_function",
    "torus_convolve",
    "wrap_unit",
]


def wrap_unit(x):
    """Wrap coordinates into [0, 1)."""
    return np.asarray(x) % 1.0


def _wrap_centered(x):
    # wrap into [-1/2, 1/2)
    return (np.asarray(x) + 0.5) % 1.0 - 0.5


@dataclass(frozen=True)
class TorusGrid:
    """Uniform tensor grid on the unit torus with n >= 4 points per axis."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        if self.n < 4:
            raise ValueError("need at least 4 grid points per axis")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def weight(self) -> float:
        """Quadrature weight per node, h^d."""
        return self.h**self.dim

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    def axis_nodes(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    def mesh(self) -> tuple:
        """Coordinate arrays of shape `self.shape`, ij indexing."""
        axes = [self.axis_nodes()] * self.dim
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def wrapped_mesh(self) -> np.ndarray:
        """Node coordinates wrapped to [-1/2, 1/2)^d, shape `shape + (d,)`."""
        return _wrap_centered(np.stack(self.mesh(), axis=-1))

    def points(self) -> np.ndarray:
        """Flat node list of shape (n^d, d)."""
        return np.stack(self.mesh(), axis=-1).reshape(-1, self.dim)


# ---------------------------------------------------------------------------
# kernels


@lru_cache(maxsize=None)
def _bump_ball_integral(dim: int) -> float:
    # integral of exp(-1/(1-|u|^2)) over the unit ball in R^dim
    from scipy.integrate import quad

    def profile(u):
        return 0.0 if u >= 1.0 else float(np.exp(-1.0 / (1.0 - u * u)))

    if dim == 1:
        return 2.0 * quad(profile, 0.0, 1.0)[0]
    # surface measure of the unit sphere in R^dim times radial integral
    from scipy.special import gamma

    surface = 2.0 * np.pi ** (dim / 2.0) / gamma(dim / 2.0)
    radial = quad(lambda u: u ** (dim - 1) * profile(u), 0.0, 1.0)[0]
    return surface * radial


@dataclass(frozen=True)
class KernelSpec:
    """Even, nonnegative jump kernel a(z) on R^d with finite second moment.

    Families: "gaussian" (normalized, standard deviation `sigma` per axis),
    "compact_bump" (smooth bump supported in |z| <= radius, normalized),
    and "tabulated" (two-column line samples, linear interpolation, zero
    extension; d = 1 only).  `scale` multiplies the kernel pointwise, so
    the total mass a1 equals `scale` for the built-in analytic families.
    All families decay at least like 1/(1+|z|)^{d+delta} with delta > 2,
    as the Markov-process module requires.
    """

    family: str
    dim: int = 1
    sigma: float | None = None
    radius: float | None = None
    table_z: tuple = None
    table_a: tuple = None
    scale: float = 1.0

    # -- constructors ------------------------------------------------------

    @staticmethod
    def gaussian(sigma: float, dim: int = 1, scale: float = 1.0) -> "KernelSpec":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return KernelSpec(family="gaussian", dim=dim, sigma=float(sigma), scale=float(scale))

    @staticmethod
    def compact_bump(radius: float, dim: int = 1, scale: float = 1.0) -> "KernelSpec":
        if radius <= 0:
            raise ValueError("radius must be positive")
        return KernelSpec(family="compact_bump", dim=dim, radius=float(radius), scale=float(scale))

    @staticmethod
    def tabulated(z, values, scale: float = 1.0, evenness_rtol: float = 1e-6) -> "KernelSpec":
        """Kernel from line samples (z, a(z)); z strictly increasing.

        Evenness is checked by sampling and the interpolant is symmetrized,
        a(z) <- (a(z) + a(-z))/2, so folds enjoy exact parity.
        """
        z = np.asarray(z, dtype=float)
        values = np.asarray(values, dtype=float)
        if z.ndim != 1 or z.shape != values.shape or z.size < 2:
            raise ValueError("need matching 1-d sample arrays with >= 2 points")
        if not np.all(np.diff(z) > 0):
            raise ValueError("sample abscissae must be strictly increasing")
        if np.any(values < 0):
            raise ValueError("kernel samples must be nonnegative")
        spec = KernelSpec(
            family="tabulated",
            dim=1,
            table_z=tuple(z.tolist()),
            table_a=tuple(values.tolist()),
            scale=float(scale),
        )
        probe = np.linspace(0.0, max(abs(z[0]), abs(z[-1])), 257)
        fwd = spec._interp_raw(probe)
        bwd = spec._interp_raw(-probe)
        top = max(values.max(), 1e-300)
        if np.max(np.abs(fwd - bwd)) > evenness_rtol * top:
            raise ValueError("tabulated kernel fails the evenness check")
        return spec

    # -- evaluation --------------------------------------------------------

    def _interp_raw(self, z):
        return np.interp(z, np.asarray(self.table_z), np.asarray(self.table_a), left=0.0, right=0.0)

    def _radii_sq(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.dim == 1:
            if z.ndim and z.shape[-1] == 1:
                z = z[..., 0]
            return z * z
        if z.shape[-1] != self.dim:
            raise ValueError(f"expected points with last axis {self.dim}")
        return np.sum(z * z, axis=-1)

    def __call__(self, z) -> np.ndarray:
        """Evaluate a(z); z has shape (..., d), or (...) when d == 1."""
        if self.family == "gaussian":
            r2 = self._radii_sq(z)
            norm = (2.0 * np.pi * self.sigma**2) ** (self.dim / 2.0)
            return self.scale * np.exp(-r2 / (2.0 * self.sigma**2)) / norm
        if self.family == "compact_bump":
            u2 = self._radii_sq(z) / self.radius**2
            out = np.zeros_like(u2)
            inside = u2 < 1.0
            with np.errstate(divide="ignore"):
                out[inside] = np.exp(-1.0 / (1.0 - u2[inside]))
            norm = _bump_ball_integral(self.dim) * self.radius**self.dim
            return self.scale * out / norm
        if self.family == "tabulated":
            z = np.asarray(z, dtype=float)
            if z.ndim and z.shape[-1] == 1 and z.ndim > 1:
                z = z[..., 0]
            # symmetrized interpolant: exact evenness
            return self.scale * 0.5 * (self._interp_raw(z) + self._interp_raw(-z))
        raise ValueError(f"unknown kernel family {self.family!r}")

    # -- geometry ----------------------------------------------------------

    def support_radius(self) -> float | None:
        """Radius outside which the kernel vanishes, or None (gaussian)."""
        if self.family == "compact_bump":
            return self.radius
        if self.family == "tabulated":
            return max(abs(self.table_z[0]), abs(self.table_z[-1]))
        return None

    def tail_mass(self, radius: float) -> float:
        """Upper bound on integral of a over {|z| > radius}, normalized by scale."""
        if self.family == "gaussian":
            from scipy.special import erfc

            if self.dim == 1:
                return self.scale * float(erfc(radius / (self.sigma * np.sqrt(2.0))))
            # d = 2: exact chi-square tail
            return self.scale * float(np.exp(-(radius**2) / (2.0 * self.sigma**2)))
        sup = self.support_radius()
        return 0.0 if radius >= sup else self.scale

    # -- sampling ----------------------------------------------------------

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` jumps from the normalized density a/a1, shape (size, d)."""
        if self.family == "gaussian":
            return self.sigma * rng.standard_normal((size, self.dim))
        if self.family == "compact_bump":
            u = _bump_radius_table(self.dim)
            radii = self.radius * np.interp(rng.random(size), u[0], u[1])
            if self.dim == 1:
                signs = np.where(rng.random(size) < 0.5, -1.0, 1.0)
                return (radii * signs)[:, None]
            theta = rng.random(size) * 2.0 * np.pi
            return radii[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        if self.family == "tabulated":
            grid, cdf = _tabulated_cdf(self.table_z, self.table_a)
            return np.interp(rng.random(size), cdf, grid)[:, None]
        raise ValueError(f"unknown kernel family {self.family!r}")


@lru_cache(maxsize=None)
def _bump_radius_table(dim: int, resolution: int = 8193):
    # inverse CDF table for the normalized radius in [0, 1]
    u = np.linspace(0.0, 1.0, resolution)
    with np.errstate(divide="ignore"):
        dens = np.where(u < 1.0, np.exp(-1.0 / (1.0 - u * u)), 0.0)
    dens = dens * u ** (dim - 1)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(u))])
    cdf /= cdf[-1]
    return cdf, u


@lru_cache(maxsize=None)
def _tabulated_cdf(table_z: tuple, table_a: tuple, refine: int = 16):
    z = np.asarray(table_z)
    a = np.asarray(table_a)
    grid = np.linspace(z[0], z[-1], refine * (z.size - 1) + 1)
    dens = np.interp(grid, z, a)
    dens = 0.5 * (dens + np.interp(-grid, z, a, left=0.0, right=0.0))
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    # make the CDF strictly increasing for inversion
    cdf = np.maximum.accumulate(cdf + np.arange(cdf.size) * 1e-300)
    return grid, cdf


# ---------------------------------------------------------------------------
# moments


@dataclass(frozen=True)
class KernelMoments:
    """Total mass a1, first moment vector, and second moment matrix."""

    a1: float
    m1: np.ndarray
    m2: np.ndarray


def moments_from_callable(
    func: Callable,
    dim: int,
    half_width: float,
    step: float,
    tol: float = 1e-10,
    max_doublings: int = 6,
) -> KernelMoments:
    """Moments of an even density by midpoint quadrature with box doubling.

    The box [-Z, Z]^d is doubled (with the step held fixed) until the
    moments are stable to `tol` relative; a non-integrable tail raises
    MomentDivergenceError.
    """
    prev = None
    width = half_width
    for _ in range(max_doublings + 1):
        cur = _box_moments(func, dim, width, step)
        if prev is not None:
            scale = max(abs(prev[0]), np.max(np.abs(prev[2])), 1e-300)
            drift = max(abs(cur[0] - prev[0]), np.max(np.abs(cur[2] - prev[2])))
            if drift <= tol * scale:
                return KernelMoments(a1=cur[0], m1=cur[1], m2=cur[2])
        prev = cur
        width *= 2.0
    raise MomentDivergenceError(
        f"moment quadrature did not stabilize to rtol={tol:g} after "
        f"{max_doublings} box doublings (half-width {width / 2.0:g})"
    )


def _box_moments(func, dim, half_width, step):
    npts = max(int(np.ceil(2.0 * half_width / step)), 8)
    axis = -half_width + (np.arange(npts) + 0.5) * (2.0 * half_width / npts)
    w = (2.0 * half_width / npts) ** dim
    if dim == 1:
        z = axis[:, None]
    else:
        z = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    vals = np.asarray(func(z if dim > 1 else z[:, 0]), dtype=float).reshape(-1)
    a1 = float(np.sum(vals) * w)
    m1 = (vals @ z) * w
    m2 = (z.T * vals) @ z * w
    return a1, m1, m2


def kernel_moments(kernel: KernelSpec, order: int = 2, tol: float = 1e-10) -> KernelMoments:
    """Mass a1 and moments up to `order` (<= 2) of a kernel.

    Analytic families go through midpoint quadrature with tail control;
    tabulated kernels use composite Simpson on the sample segments, which
    is exact for z^k times the piecewise-linear interpolant for k <= 2.
    """
    if order > 2:
        raise ValueError("moments implemented up to order 2")
    if kernel.family == "tabulated":
        return _tabulated_moments(kernel)
    if kernel.family == "gaussian":
        half_width, step = 12.0 * kernel.sigma, kernel.sigma / 8.0
    else:
        half_width, step = kernel.radius, kernel.radius / 256.0
    mom = moments_from_callable(kernel, kernel.dim, half_width, step, tol=tol)
    if mom.a1 <= 0:
        raise ValueError("kernel has nonpositive mass")
    return mom

def _tabulated_moments(kernel: KernelSpec) -> KernelMoments:
    z = np.asarray(kernel.table_z)
    lo, hi = min(z[0], -z[-1]), max(z[-1], -z[0])
    grid = np.union1d(np.union1d(z, -z), [lo, hi])
    mids = 0.5 * (grid[1:] + grid[:-1])
    width = np.diff(grid)
    out = []
    for k in range(3):
        f = lambda x: kernel(x) * x**k
        out.append(float(np.sum(width / 6.0 * (f(grid[:-1]) + 4.0 * f(mids) + f(grid[1:])))))
    return KernelMoments(a1=out[0], m1=np.array([out[1]]), m2=np.array([[out[2]]]))


# ---------------------------------------------------------------------------
# periodic fields


@dataclass(frozen=True)
class PeriodicField:
    """Function tabulated on a torus grid; values shape = grid.shape + components.

    Treated as immutable after construction.  Role tags follow the data
    model: lambda, mu, nu, corrector1, corrector2, folded_kernel, other.
    """

    grid: TorusGrid
    values: np.ndarray
    role: str = "other"

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.shape[: self.grid.dim] != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not start with grid shape {self.grid.shape}"
            )

    @staticmethod
    def from_function(grid: TorusGrid, fn: Callable, role: str = "other") -> "PeriodicField":
        """Sample fn(x1[, x2, ...]) at the grid nodes."""
        return PeriodicField(grid=grid, values=np.asarray(fn(*grid.mesh()), dtype=float), role=role)

    @property
    def component_shape(self) -> tuple:
        return self.values.shape[self.grid.dim :]

    def mean(self):
        """Grid average per component."""
        axes = tuple(range(self.grid.dim))
        return self.values.mean(axis=axes)

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        """Periodic multilinear interpolation at points of shape (..., d)."""
        pts = np.asarray(points, dtype=float)
        if self.grid.dim == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        frac = wrap_unit(pts) * self.grid.n
        base = np.floor(frac).astype(int) % self.grid.n
        w = frac - np.floor(frac)
        comp = self.component_shape
        out = np.zeros(pts.shape[:-1] + comp)
        for corner in itertools.product((0, 1), repeat=self.grid.dim):
            idx = tuple(
                (base[..., k] + corner[k]) % self.grid.n for k in range(self.grid.dim)
            )
            weight = np.ones(pts.shape[:-1])
            for k in range(self.grid.dim):
                weight = weight * (w[..., k] if corner[k] else 1.0 - w[..., k])
            out += weight.reshape(weight.shape + (1,) * len(comp)) * self.values[idx]
        return out


def validate_coefficients(lam: PeriodicField, mu: PeriodicField):
    """Observed (alpha1, alpha2) bounds of the coefficient pair; min must be > 0."""
    if lam.grid != mu.grid:
        raise GridMismatchError("lambda and mu tabulated on different grids")
    lo = float(min(lam.values.min(), mu.values.min()))
    hi = float(max(lam.values.max(), mu.values.max()))
    if lo <= 0.0:
        raise CoefficientBoundsError(f"coefficient minimum {lo:g} is not strictly positive")
    return lo, hi


# ---------------------------------------------------------------------------
# folding onto the torus


@dataclass(frozen=True)
class FoldedKernel:
    """Lattice folds of a kernel tabulated on a torus grid.

    `values` holds ahat; `first_moment` and `second_moment`, when present,
    hold bhat (shape + (d,)) and chat (shape + (d, d)).  `k_max` is the
    number of lattice shells summed and `tail_estimate` the bound on the
    dropped remainder.
    """

    grid: TorusGrid
    values: np.ndarray
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    k_max: int = 0
    tail_tol: float = 1e-10
    tail_estimate: float = 0.0
    mass_defect: float = 0.0

    @property
    def mass(self) -> float:
        """Grid quadrature of ahat; equals a1 up to tail_tol plus the grid
        quadrature error of the kernel (zero for gaussians at any sane n,
        resolution-limited for the compactly supported families)."""
        return float(np.sum(self.values) * self.grid.weight)


def _shell_offsets(dim, s):
    if s == 0:
        return [np.zeros(dim)]
    out = []
    for k in itertools.product(range(-s, s + 1), repeat=dim):
        if max(abs(c) for c in k) == s:
            out.append(np.array(k, dtype=float))
    return out


def _choose_k_max(kernel: KernelSpec, grid: TorusGrid, order: int, tail_tol: float, k_cap: int):
    sup = kernel.support_radius()
    if sup is not None:
        return int(np.ceil(sup + 0.5)), 0.0
    w = grid.wrapped_mesh()
    prev = None
    for s in range(1, k_cap + 1):
        shell = np.zeros(grid.shape)
        for k in _shell_offsets(grid.dim, s):
            z = w + k
            wt = np.linalg.norm(z, axis=-1) ** order if order else 1.0
            shell += kernel(z if grid.dim > 1 else z[..., 0]) * wt
        cur = float(shell.max())
        if cur == 0.0:
            return s, 0.0
        if prev is not None and cur < prev:
            ratio = cur / prev
            remainder = cur * ratio / (1.0 - ratio)
            if remainder < tail_tol:
                return s, remainder
        prev = cur
    raise TruncationError(
        f"lattice fold did not reach tail_tol={tail_tol:g} within {k_cap} shells",
        achieved=prev,
    )


def _fold(kernel: KernelSpec, grid: TorusGrid, orders, tail_tol: float, k_cap: int = 64):
    """Accumulate lattice folds for the requested weight orders.

    Summation runs over the symmetric offset box |k|_inf <= K with the
    strict window |z|_inf < K + 1/2 on the displacement z = w + k; the
    window makes the sampled displacement set exactly negation-symmetric
    at every node, so ahat is even and bhat odd to rounding.
    """
    if kernel.dim != grid.dim:
        raise GridMismatchError("kernel and grid dimensions differ")
    top = max(orders)
    k_max, tail = _choose_k_max(kernel, grid, top, tail_tol, k_cap)
    w = grid.wrapped_mesh()
    d = grid.dim
    acc = {}
    if 0 in orders:
        acc[0] = np.zeros(grid.shape)
    if 1 in orders:
        acc[1] = np.zeros(grid.shape + (d,))
    if 2 in orders:
        acc[2] = np.zeros(grid.shape + (d, d))
    cut = k_max + 0.5
    for k in itertools.product(range(-k_max, k_max + 1), repeat=d):
        z = w + np.array(k, dtype=float)
        a = kernel(z if d > 1 else z[..., 0])
        mask = np.all(np.abs(z) < cut, axis=-1)
        if not mask.all():
            a = np.where(mask, a, 0.0)
        if 0 in orders:
            acc[0] += a
        if 1 in orders:
            acc[1] += a[..., None] * z
        if 2 in orders:
            acc[2] += a[..., None, None] * (z[..., :, None] * z[..., None, :])
    return acc, k_max, tail


def fold_kernel(
    kernel: KernelSpec,
    grid: TorusGrid,
    tail_tol: float = 1e-10,
    with_moments: bool = False,
    k_cap: int = 64,
) -> FoldedKernel:
    """Fold a kernel onto the torus: ahat(w) = sum_k a(w+k).

    With `with_moments`, the first- and second-moment folds are attached
    as well (same truncation policy).  The fold conserves mass: the grid
    quadrature of ahat reproduces a1 up to tail_tol plus the kernel's own
    quadrature error (negligible for the smooth analytic families;
    interpolation-limited for tabulated kernels).
    """
    orders = (0, 1, 2) if with_moments else (0,)
    acc, k_max, tail = _fold(kernel, grid, orders, tail_tol, k_cap)
    a1 = kernel_moments(kernel, order=0).a1
    defect = abs(float(np.sum(acc[0]) * grid.weight) - a1)
    # the defect combines the lattice tail with the grid quadrature error;
    # anything beyond a percent of the mass means a broken setup
    if defect > 0.01 * max(a1, 1.0):
        raise TruncationError(
            f"folded mass deviates from a1={a1:.15g} by {defect:.3e}; grid far too coarse",
            achieved=defect,
        )
    return FoldedKernel(
        grid=grid,
        values=acc[0],
        first_moment=acc.get(1),
        second_moment=acc.get(2),
        k_max=k_max,
        tail_tol=tail_tol,
        tail_estimate=tail,
        mass_defect=defect,
    )


def fold_moment_kernel(kernel: KernelSpec, grid: TorusGrid, tail_tol: float = 1e-10) -> PeriodicField:
    """First-moment fold bhat(w) = sum_k a(w+k)(w+k); odd on the torus."""
    acc, _, _ = _fold(kernel, grid, (1,), tail_tol)
    return PeriodicField(grid=grid, values=acc[1], role="folded_kernel")


def fold_second_moment_kernel(kernel: KernelSpec, grid: TorusGrid, tail_tol: float = 1e-10) -> PeriodicField:
    """Second-moment fold chat(w) = sum_k a(w+k) (w+k)x(w+k); even on the torus."""
    acc, _, _ = _fold(kernel, grid, (2,), tail_tol)
    return PeriodicField(grid=grid, values=acc[2], role="folded_kernel")


# ---------------------------------------------------------------------------
# torus convolution


def torus_convolve(grid: TorusGrid, kernel_values: np.ndarray, field_values: np.ndarray) -> np.ndarray:
    """Circular convolution with quadrature weight:

        out[i] = h^d * sum_j kernel[(i-j) mod n] field[j]

    Both arrays are scalar fields of shape grid.shape.
    """
    if kernel_values.shape != grid.shape or field_values.shape != grid.shape:
        raise GridMismatchError("convolution operands must be scalar fields on the grid")
    kf = np.fft.rfftn(kernel_values)
    ff = np.fft.rfftn(field_values)
    axes = tuple(range(grid.dim))
    return np.fft.irfftn(kf * ff, s=grid.shape, axes=axes) * grid.weight


def mass_function(folded: FoldedKernel, mu: PeriodicField) -> PeriodicField:
    """q(x) = integral of ahat(x - y) mu(y) over the torus; strictly positive."""
    if folded.grid != mu.grid:
        raise GridMismatchError("folded kernel and mu tabulated on different grids")
    q = torus_convolve(folded.grid, folded.values, mu.values)
    if q.min() <= 0.0:
        raise CoefficientBoundsError("mass function is not strictly positive")
    return PeriodicField(grid=folded.grid, values=q, role="other")


# ---------------------------------------------------------------------------
# problem bundle


@dataclass(frozen=True)
class Medium:
    """A kernel together with callable periodic coefficients lambda and mu.

    Coefficient callables take per-axis coordinate arrays, fn(x1[, x2]),
    and are always evaluated at arguments wrapped into [0, 1)^d so that
    periodicity is exact in floating point.
    """

    kernel: KernelSpec
    lam: Callable
    mu: Callable

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def _eval(self, fn, points):
        pts = np.asarray(points, dtype=float)
        if self.dim == 1 and (pts.ndim == 0 or pts.shape[-1] != 1):
            pts = pts[..., None]
        frac = wrap_unit(pts)
        return np.asarray(fn(*(frac[..., k] for k in range(self.dim))), dtype=float)

    def lam_at(self, points) -> np.ndarray:
        return self._eval(self.lam, points)

    def mu_at(self, points) -> np.ndarray:
        return self._eval(self.mu, points)

    def fields(self, n: int):
        """Sample the coefficients onto an n-point torus grid."""
        grid = TorusGrid(dim=self.dim, n=n)
        lam = PeriodicField.from_function(grid, lambda *xs: self.lam(*xs) * np.ones(grid.shape), role="lambda")
        mu = PeriodicField.from_function(grid, lambda *xs: self.mu(*xs) * np.ones(grid.shape), role="mu")
        return lam, mu

    def bounds(self, probe_n: int = 4096, margin: float = 1e-6):
        """(alpha1, alpha2) estimated on a fine probe grid, inflated by `margin`."""
        n = probe_n if self.dim == 1 else 512
        lam, mu = self.fields(n)
        lo, hi = validate_coefficients(lam, mu)
        return lo * (1.0 - margin), hi * (1.0 + margin)
