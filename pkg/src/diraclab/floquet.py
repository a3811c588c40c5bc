"""Floquet analysis of the periodic background: monodromy, discriminant,
stability intervals, Floquet solutions and the periodic Weyl function."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import DegeneracyError
from .potential import PauliField, PiecewiseSlice, periodic_slice
from .transfer import cell_transfer, propagate_solution, SolutionTrace

# |D -+ 2| below this classifies a point as a band edge; operations needing
# the open stability strip reject such points (multipliers collide there).
EDGE_TOL = 1e-7


def monodromy(per: PauliField, z) -> np.ndarray:
    """Transfer matrix of one period [-1/2, 1/2]; columns are the solutions
    with data (1,0) and (0,1) at -1/2."""
    return cell_transfer(periodic_slice(per, -0.5, 0.5), z)


def discriminant(per: PauliField, z):
    """Trace of the monodromy; entire in z, real for real energies."""
    g0 = monodromy(per, z)
    return g0[..., 0, 0] + g0[..., 1, 1]


def multipliers(D):
    """Roots of rho^2 - D rho + 1 = 0 as (rho_plus, rho_minus).

    On stability intervals (|D| < 2 real) this is the unimodular conjugate
    pair with Im(rho_plus) >= 0; elsewhere the principal branch of the
    square root fixes the labels.
    """
    D = np.asarray(D)
    disc = np.asarray(4.0 - D.astype(complex) ** 2)
    root = np.sqrt(disc)
    rho_p = (D + 1j * root) / 2.0
    rho_m = (D - 1j * root) / 2.0
    return rho_p, rho_m


@dataclass(frozen=True)
class FloquetData:
    """Per-energy Floquet record for the periodic background."""

    z: complex
    g0: np.ndarray
    D: complex
    rho_plus: complex
    rho_minus: complex
    c_plus: complex
    c_minus: complex
    regime: str                 # band | gap | edge | strip

    @property
    def rho(self) -> complex:
        return self.rho_plus

    def decaying_multiplier(self) -> complex:
        """Multiplier with modulus < 1 (gap or nonreal z)."""
        return self.rho_plus if abs(self.rho_plus) < abs(self.rho_minus) else self.rho_minus

    def growing_multiplier(self) -> complex:
        return self.rho_minus if abs(self.rho_plus) < abs(self.rho_minus) else self.rho_plus


def _eigenvector_slope(g0: np.ndarray, rho: complex) -> complex:
    """Second component c of the eigenvector (1, c) of g0 for eigenvalue rho."""
    denom = g0[0, 1]
    if abs(denom) < 1e-14 * max(1.0, abs(rho)):
        raise DegeneracyError("u_D(1/2, z) vanishes: Dirichlet-eigenvalue degeneracy")
    return (rho - g0[0, 0]) / denom


def floquet_data(per: PauliField, z) -> FloquetData:
    """Monodromy eigendata at one energy, with regime classification."""
    zc = complex(z)
    g0 = monodromy(per, zc if zc.imag != 0.0 else zc.real)
    D = complex(g0[0, 0] + g0[1, 1])
    rho_p, rho_m = (complex(r) for r in multipliers(D))
    if zc.imag == 0.0:
        if abs(abs(D.real) - 2.0) < EDGE_TOL:
            regime = "edge"
        elif abs(D.real) < 2.0:
            regime = "band"
        else:
            regime = "gap"
    else:
        regime = "strip"
    if regime == "edge":
        c_p = c_m = complex("nan")
    else:
        c_p = _eigenvector_slope(np.asarray(g0, dtype=complex), rho_p)
        c_m = _eigenvector_slope(np.asarray(g0, dtype=complex), rho_m)
    return FloquetData(zc, np.asarray(g0), D, rho_p, rho_m, c_p, c_m, regime)


@dataclass(frozen=True)
class StabilityIntervalList:
    """Stability intervals (bands) of a scan window with gap complement."""

    window: tuple[float, float]
    bands: list[tuple[float, float]]
    gaps: list[tuple[float, float]] = field(default_factory=list)

    @property
    def edges(self) -> list[float]:
        out = sorted({e for b in self.bands for e in b})
        lo, hi = self.window
        return [e for e in out if lo + 1e-12 < e < hi - 1e-12]

    def in_band(self, E: float, margin: float = 0.0) -> bool:
        return any(lo + margin < E < hi - margin for lo, hi in self.bands)

    def containing_band(self, E: float) -> tuple[float, float]:
        for lo, hi in self.bands:
            if lo < E < hi:
                return lo, hi
        raise DegeneracyError(f"E = {E} is not inside a stability interval")


def _refine_edge(f, lo: float, hi: float) -> float | None:
    """Root of f in [lo, hi]: sign-change bracket or near-zero extremum."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi < 0.0:
        return float(brentq(f, lo, hi, xtol=1e-12, rtol=8.8e-16))
    # extremum touching zero (bands meeting at a point)
    res = minimize_scalar(lambda e: abs(f(e)), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    if abs(res.fun) < 1e-9:
        return float(res.x)
    return None


def stability_scan(per: PauliField, window: tuple[float, float],
                   resolution: float = 0.01) -> StabilityIntervalList:
    """Locate stability intervals via sign changes of |D| - 2.

    Roots of D = +-2 are bracketed on a grid of the given resolution and
    refined by bisection; touching bands (extrema of D grazing +-2) are
    caught by a bounded minimization of |D -+ 2|.
    """
    lo, hi = float(window[0]), float(window[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
        raise ValueError("degenerate scan window")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    n = max(8, int(np.ceil((hi - lo) / resolution)) + 1)
    grid = np.linspace(lo, hi, n)
    slc = periodic_slice(per, -0.5, 0.5)
    Dg = np.real(np.trace(cell_transfer(slc, grid), axis1=-2, axis2=-1))

    def D_of(E: float) -> float:
        g = cell_transfer(slc, float(E))
        return float(g[0, 0] + g[1, 1])

    edges: list[float] = []
    for sign in (+1.0, -1.0):
        f = lambda E: D_of(E) - 2.0 * sign
        fg = Dg - 2.0 * sign
        for i in range(n - 1):
            if fg[i] == 0.0 or fg[i] * fg[i + 1] < 0.0:
                root = _refine_edge(f, grid[i], grid[i + 1])
                if root is not None:
                    edges.append(root)
            elif 0 < i and abs(fg[i]) < abs(2.0 * resolution) and \
                    (fg[i] - fg[i - 1]) * (fg[i + 1] - fg[i]) < 0.0:
                root = _refine_edge(f, grid[i - 1], grid[i + 1])
                if root is not None:
                    edges.append(root)
    uniq: list[float] = []
    for e in sorted(edges):
        if not uniq or e - uniq[-1] > 1e-9:
            uniq.append(e)
    nodes = [lo] + uniq + [hi]
    bands, gaps = [], []
    for a, b in zip(nodes[:-1], nodes[1:]):
        if b - a < 1e-12:
            continue
        mid = 0.5 * (a + b)
        (bands if abs(D_of(mid)) < 2.0 else gaps).append((a, b))
    return StabilityIntervalList((lo, hi), bands, gaps)


@dataclass(frozen=True)
class FloquetPair:
    """Fundamental pair of Floquet solutions phi_plus / phi_minus."""

    data: FloquetData
    per: PauliField

    @property
    def v_plus(self) -> np.ndarray:
        return np.array([1.0, self.data.c_plus])

    @property
    def v_minus(self) -> np.ndarray:
        return np.array([1.0, self.data.c_minus])

    def value_at_half(self, branch: str = "+") -> np.ndarray:
        rho = self.data.rho_plus if branch == "+" else self.data.rho_minus
        v = self.v_plus if branch == "+" else self.v_minus
        return rho * v

    def value_at(self, branch: str, x: float) -> np.ndarray:
        """phi(x) from quasi-periodicity: phi(x + 1) = rho * phi(x)."""
        from .transfer import trace_values
        rho = self.data.rho_plus if branch == "+" else self.data.rho_minus
        v = self.v_plus if branch == "+" else self.v_minus
        n0 = int(np.floor(x + 0.5))
        t = x - n0                   # in [-1/2, 1/2)
        base = trace_values(periodic_slice(self.per, -0.5, 0.5), self.data.z,
                            -0.5, v, [t])[0]
        return (rho ** n0) * base

    def trace(self, branch: str, x0: float, x1: float, step: float = 0.02) -> SolutionTrace:
        """Exact trace over [x0, x1] anchored through quasi-periodicity."""
        anchor_val = self.value_at(branch, x0)
        slc = periodic_slice(self.per, x0, x1)
        return propagate_solution(slc, anchor_val, self.data.z, anchor=x0, step=step)


def floquet_solutions(per: PauliField, z) -> FloquetPair:
    """Floquet solution pair at z inside a stability strip.

    Raises DegeneracyError at band edges (multiplier collision) and at
    Dirichlet-eigenvalue degeneracies (u_D(1/2) = 0).
    """
    fd = floquet_data(per, z)
    if fd.regime == "edge" or min(abs(fd.D - 2.0), abs(fd.D + 2.0)) < EDGE_TOL:
        raise DegeneracyError(f"z = {z}: band-edge degeneracy (|D -+ 2| < {EDGE_TOL})")
    return FloquetPair(fd, per)


def weyl_m_periodic(per: PauliField, z: complex) -> complex:
    """Weyl-Titchmarsh m-function of the periodic operator at -1/2.

    Ratio of components of the monodromy eigenvector whose multiplier has
    modulus < 1 (the solution decaying on the right half line).  The free
    operator gives m = i for Im z > 0, which fixes the orientation used by
    the Kotani machinery.
    """
    zc = complex(z)
    if zc.imag <= 0.0:
        raise ValueError("weyl_m_periodic requires Im z > 0")
    fd = floquet_data(per, zc)
    mod_p, mod_m = abs(fd.rho_plus), abs(fd.rho_minus)
    if abs(mod_p - mod_m) <= 1e-12 * max(mod_p, mod_m):
        raise DegeneracyError("modulus tie of Floquet multipliers: z is effectively real")
    rho = fd.rho_plus if mod_p < mod_m else fd.rho_minus
    g0 = np.asarray(fd.g0, dtype=complex)
    # eigenvector from the better-conditioned row of (g0 - rho)v = 0
    if abs(g0[0, 1]) >= abs(rho - g0[1, 1]):
        c = (rho - g0[0, 0]) / g0[0, 1]
    else:
        c = g0[1, 0] / (rho - g0[1, 1])
    return complex(c)


def slice_m_halfline(slice_: PiecewiseSlice, z: complex, x0: float) -> complex:
    """m-function of a finite slice approximating the half line (x0, +inf).

    The right edge carries the Dirichlet-type datum (0, 1); backward
    propagation converges to the Weyl solution at rate exp(-2 Im z (x1-x0)).
    """
    from .transfer import trace_values
    if slice_.x1 <= x0:
        raise ValueError("slice must extend to the right of x0")
    val = trace_values(slice_, z, slice_.x1, np.array([0.0, 1.0]), [x0])[0]
    if val[0] == 0.0:
        raise DegeneracyError("Weyl ratio undefined: upper component vanished")
    return complex(val[1] / val[0])


def band_csv(per: PauliField, window: tuple[float, float], resolution: float,
             intervals: StabilityIntervalList) -> str:
    """(E, Re D, Im D, in_band) table over the scan grid."""
    lo, hi = window
    n = max(8, int(np.ceil((hi - lo) / resolution)) + 1)
    grid = np.linspace(lo, hi, n)
    slc = periodic_slice(per, -0.5, 0.5)
    D = np.trace(cell_transfer(slc, grid), axis1=-2, axis2=-1)
    lines = ["E,re_D,im_D,in_band"]
    for e, d in zip(grid, np.atleast_1d(D)):
        dc = complex(d)
        lines.append(f"{e!r},{dc.real!r},{dc.imag!r},{int(intervals.in_band(float(e)))}")
    return "\n".join(lines) + "\n"
