"""Scattering of a single perturbed cell against the periodic background,
the conjugated matrix triple driving the transfer-matrix group, the
projective growth probe and the critical-energy scan."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .errors import DegeneracyError
from .floquet import FloquetData, StabilityIntervalList, floquet_data, stability_scan, EDGE_TOL
from .potential import PauliField, SingleSitePotential, cell_slice
from .transfer import cell_transfer

B_ZERO_TOL = 1e-6      # |b| below this (with Re/Im confirmation) counts as a reflection zero
GROWTH_DELTA = 1e-3    # growth window threshold R(theta) > 1 + delta


@dataclass(frozen=True)
class ScatteringData:
    """Coefficients of the perturbed solution in the Floquet basis,
    u_+ = a phi_+ + b phi_- past the perturbed cell, with polar forms
    a = A e^{i alpha}, b = B e^{i beta}."""

    energy: float
    lam: float
    a: complex
    b: complex

    @property
    def A(self) -> float:
        return abs(self.a)

    @property
    def B(self) -> float:
        return abs(self.b)

    @property
    def alpha(self) -> float:
        return float(np.angle(self.a))

    @property
    def beta(self) -> float:
        return float(np.angle(self.b))

    def wronskian_residual(self) -> float:
        return abs(abs(self.a) ** 2 - abs(self.b) ** 2 - 1.0)


def perturbed_monodromy(per: PauliField, site: SingleSitePotential, lam: float, z) -> np.ndarray:
    """Transfer matrix of the cell carrying V_per + lam * u."""
    return cell_transfer(cell_slice(per, site, float(lam)), z)


def scattering_coefficients(per: PauliField, site: SingleSitePotential,
                            lam: float, energy: float,
                            fd: FloquetData | None = None) -> ScatteringData:
    """Solve [phi_+(1/2) phi_-(1/2)] (a, b)^t = u_+(1/2) at a band energy.

    u_+ starts as the Floquet solution phi_+ at -1/2 and crosses the
    perturbed cell; lam = 0 returns (a, b) = (1, 0) exactly.
    """
    fd = floquet_data(per, energy) if fd is None else fd
    if fd.regime != "band":
        raise DegeneracyError(f"E = {energy}: scattering requires an interior band energy "
                              f"(regime {fd.regime})")
    g1 = np.asarray(perturbed_monodromy(per, site, lam, energy), dtype=complex)
    v_p = np.array([1.0, fd.c_plus])
    v_m = np.array([1.0, fd.c_minus])
    basis = np.column_stack([fd.rho_plus * v_p, fd.rho_minus * v_m])
    det = basis[0, 0] * basis[1, 1] - basis[0, 1] * basis[1, 0]
    if abs(det) < 1e-12:
        raise DegeneracyError(f"E = {energy}: Floquet basis is singular "
                              "(band edge missed by tolerance)")
    rhs = g1 @ v_p
    ab = np.linalg.solve(basis, rhs)
    return ScatteringData(float(energy), float(lam), complex(ab[0]), complex(ab[1]))


@dataclass(frozen=True)
class FurstenbergTriple:
    """Real 2x2 matrices (C, g_tilde, s) with g1 = C g_tilde s C^{-1}."""

    C: np.ndarray
    g_tilde: np.ndarray
    s: np.ndarray

    def conjugated(self) -> np.ndarray:
        return self.C @ self.g_tilde @ self.s @ np.linalg.inv(self.C)


def furstenberg_matrices(sd: ScatteringData, fd: FloquetData) -> FurstenbergTriple:
    """Build the conjugating triple from scattering and Floquet data.

    C collapses the complex Floquet frame to a real one; g_tilde is the
    rotation by arg(rho); s combines A * rotation(alpha) with
    B * reflection(beta).  Degenerate C (Im c = 0) only occurs at band
    edges and is rejected.
    """
    if abs(sd.energy - fd.z.real) > 1e-9 or fd.z.imag != 0.0:
        raise ValueError("scattering and Floquet data must share the same real energy")
    c = fd.c_plus
    if abs(c.imag) < 1e-12:
        raise DegeneracyError(f"E = {sd.energy}: degenerate frame (Im c = 0, band edge)")
    rho = fd.rho_plus
    C = np.array([[1.0, 0.0], [c.real, c.imag]])
    g_tilde = np.array([[rho.real, rho.imag], [-rho.imag, rho.real]])
    apb, amb = sd.a + sd.b, sd.a - sd.b
    s = np.array([[apb.real, apb.imag], [-amb.imag, amb.real]])
    return FurstenbergTriple(C, g_tilde, s)


def r_theta_formula(sd: ScatteringData, theta) -> np.ndarray:
    """Closed form R(theta) = 1 + 2B(B + A cos(alpha + beta - 2 theta))."""
    theta = np.asarray(theta, dtype=float)
    return 1.0 + 2.0 * sd.B * (sd.B + sd.A * np.cos(sd.alpha + sd.beta - 2.0 * theta))


def r_theta_direct(sd: ScatteringData, fd: FloquetData, theta) -> np.ndarray:
    """||s v(theta)||^2 computed from the matrix s itself."""
    s = furstenberg_matrices(sd, fd).s
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    v = np.stack([np.cos(theta), np.sin(theta)])
    w = s @ v
    out = np.sum(w * w, axis=0)
    return out if out.size > 1 else float(out[0])


def growth_window(sd: ScatteringData, delta: float = GROWTH_DELTA) -> tuple[float, float]:
    """Largest subinterval of {theta in [0, pi): R(theta) > 1 + delta}.

    R has period pi; the superlevel set is an arc around
    theta* = (alpha + beta)/2 mod pi, of measure > pi/2 whenever B > 0.
    """
    if sd.B <= 0.0:
        raise DegeneracyError("growth window undefined: |b| = 0 (critical energy)")
    # cos(alpha + beta - 2 theta) > (delta / (2 B) - B) / A
    cos_min = (delta / (2.0 * sd.B) - sd.B) / sd.A
    if cos_min >= 1.0:
        raise DegeneracyError("growth window empty at this delta")
    half = 0.5 * np.arccos(max(cos_min, -1.0))
    center = 0.5 * (sd.alpha + sd.beta) % np.pi
    return center - half, center + half


def growth_measure(sd: ScatteringData) -> float:
    """Lebesgue measure of {theta in [0, pi): R(theta) > 1}."""
    if sd.B == 0.0:
        return 0.0
    cos_min = -sd.B / sd.A
    return float(np.arccos(max(min(cos_min, 1.0), -1.0)))


@dataclass(frozen=True)
class GrowthProbeResult:
    norms: np.ndarray              # after each application of s
    angles: np.ndarray             # visited projective angles in [0, pi)
    rotations_used: int


def projective_growth_probe(sd: ScatteringData, fd: FloquetData,
                            iterations: int = 64,
                            delta: float = GROWTH_DELTA,
                            max_rotations: int = 100000) -> GrowthProbeResult:
    """Norm-growth iteration witnessing non-compactness of the matrix group.

    Starting from a direction inside the growth window K: apply s while the
    current direction stays in K, otherwise rotate with g_tilde until it
    returns to K.  Rotations preserve the norm, so the recorded norm
    sequence (one entry per s application) is strictly increasing.
    """
    if sd.B <= 0.0:
        raise DegeneracyError("projective growth probe undefined: |b| = 0")
    lo, hi = growth_window(sd, delta)
    triple = furstenberg_matrices(sd, fd)
    s, rot = triple.s, triple.g_tilde

    def in_window(theta: float) -> bool:
        t = (theta - lo) % np.pi
        return t <= (hi - lo)

    theta0 = 0.5 * (lo + hi)
    v = np.array([np.cos(theta0), np.sin(theta0)])
    norms, angles = [], [theta0 % np.pi]
    rotations = 0
    while len(norms) < iterations:
        theta = float(np.arctan2(v[1], v[0])) % np.pi
        if in_window(theta):
            v = s @ v
            norms.append(float(np.hypot(v[0], v[1])))
        else:
            v = rot @ v
            rotations += 1
            if rotations > max_rotations:
                raise DegeneracyError("rotation angle too small to re-enter the "
                                      "growth window (band-edge proximity)")
        angles.append(float(np.arctan2(v[1], v[0])) % np.pi)
    return GrowthProbeResult(np.asarray(norms), np.asarray(angles), rotations)


def gap_coefficients(per: PauliField, site: SingleSitePotential, lam: float,
                     energy: float, fd: FloquetData | None = None
                     ) -> tuple[float, float, float, float]:
    """(a1, b1, a2, b2) at a real gap energy.

    The perturbed continuations of the decaying/growing Floquet solutions
    are decomposed back in that (real) basis; all four coefficients are
    real in a spectral gap.
    """
    fd = floquet_data(per, energy) if fd is None else fd
    if fd.regime != "gap":
        raise DegeneracyError(f"E = {energy}: gap coefficients need a gap energy "
                              f"(regime {fd.regime})")
    rho1, rho2 = fd.decaying_multiplier(), fd.growing_multiplier()
    g0 = np.asarray(fd.g0, dtype=float)
    g1 = np.asarray(perturbed_monodromy(per, site, lam, energy), dtype=float)

    def eigvec(rho: float) -> np.ndarray:
        if abs(g0[0, 1]) >= abs(rho - g0[1, 1]):
            return np.array([1.0, (rho - g0[0, 0]) / g0[0, 1]])
        return np.array([1.0, g0[1, 0] / (rho - g0[1, 1])])

    v1, v2 = eigvec(rho1.real), eigvec(rho2.real)
    basis12 = np.column_stack([rho1.real * v1, rho2.real * v2])
    a1, b1 = np.linalg.solve(basis12, g1 @ v1)
    basis21 = np.column_stack([rho2.real * v2, rho1.real * v1])
    a2, b2 = np.linalg.solve(basis21, g1 @ v2)
    return float(a1), float(b1), float(a2), float(b2)


@dataclass(frozen=True)
class CriticalSet:
    """Sorted critical energies with reason tags."""

    entries: list[tuple[float, str]] = field(default_factory=list)

    @property
    def energies(self) -> np.ndarray:
        return np.array([e for e, _ in self.entries])

    def clear_of(self, E: float, margin: float) -> bool:
        if not self.entries:
            return True
        return bool(np.min(np.abs(self.energies - E)) > margin)

    def to_json_obj(self) -> list[dict]:
        return [{"energy": e, "reason": r} for e, r in self.entries]


def _zero_scan(f, grid, tol: float, confirm=None) -> list[float]:
    """Roots of a real function from sign changes plus near-zero minima of |f|."""
    vals = np.array([f(e) for e in grid])
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        elif vals[i] * vals[i + 1] < 0.0:
            roots.append(float(brentq(f, grid[i], grid[i + 1], xtol=1e-12)))
    if confirm is not None:
        av = np.abs(vals)
        for i in range(1, len(grid) - 1):
            if av[i] < av[i - 1] and av[i] < av[i + 1] and av[i] < confirm:
                res = minimize_scalar(lambda e: abs(f(e)), bounds=(grid[i - 1], grid[i + 1]),
                                      method="bounded", options={"xatol": 1e-12})
                if abs(res.fun) < tol:
                    roots.append(float(res.x))
    return roots


def critical_set_scan(per: PauliField, site: SingleSitePotential,
                      support: tuple[float, float],
                      window: tuple[float, float], resolution: float = 0.01,
                      intervals: StabilityIntervalList | None = None) -> CriticalSet:
    """Locate the discrete set where the localization mechanism degenerates.

    Inside bands: zeros of the reflection coefficient b and of the
    discriminant D; in gaps: zeros of the four gap coefficients; band edges
    are always included.  The perturbation is normalized so the scan probes
    the coupling lam = max(support) - min(support) against the background
    shifted by min(support) * u.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    lo_s, hi_s = float(min(support)), float(max(support))
    if hi_s > lo_s:
        # normalize the extreme atoms to {0, 1}: lower atom absorbed into the
        # background, site rescaled by the support width
        from .potential import RandomModel, DisorderModel
        norm = RandomModel(per, site, DisorderModel(
            kind="atoms", atoms=np.array([lo_s, hi_s]))).normalized()
        per_n, site_n, lam_n = norm.per, norm.site, 1.0
    else:
        per_n, site_n, lam_n = per, site, 0.0    # degenerate law: no scattering
    intervals = stability_scan(per_n, window, resolution) if intervals is None else intervals
    entries: list[tuple[float, str]] = []
    for e in intervals.edges:
        entries.append((e, "band_edge"))
    margin = max(4.0 * resolution, 10.0 * EDGE_TOL)
    for (lo, hi) in intervals.bands:
        a, b = lo + margin, hi - margin
        if b - a < 2 * resolution:
            continue
        grid = np.linspace(a, b, max(8, int(np.ceil((b - a) / resolution)) + 1))
        fds = {float(e): floquet_data(per_n, float(e)) for e in grid}

        for root in _zero_scan(lambda E: floquet_data(per_n, float(E)).D.real, grid, 1e-9):
            entries.append((root, "D_zero"))
        if lam_n == 0.0:
            continue

        def b_abs(E: float) -> float:
            return scattering_coefficients(per_n, site_n, lam_n, float(E)).B

        bv = np.array([scattering_coefficients(per_n, site_n, lam_n, float(e), fds[float(e)]).b
                       for e in grid])
        for i in range(1, len(grid) - 1):
            trip = np.abs(bv[i - 1:i + 2])
            if trip[1] <= trip[0] and trip[1] <= trip[2] and trip[1] < 0.05:
                res = minimize_scalar(b_abs, bounds=(grid[i - 1], grid[i + 1]),
                                      method="bounded", options={"xatol": 1e-12})
                if res.fun < B_ZERO_TOL and _confirm_b_zero(bv[i - 1], bv[i + 1]):
                    entries.append((float(res.x), "b_zero"))
    if lam_n != 0.0:
        for (lo, hi) in intervals.gaps:
            a, b = lo + margin, hi - margin
            if b - a < 2 * resolution:
                continue
            grid = np.linspace(a, b, max(8, int(np.ceil((b - a) / resolution)) + 1))
            for idx in range(4):
                f = lambda E, k=idx: gap_coefficients(per_n, site_n, lam_n, float(E))[k]
                for root in _zero_scan(f, grid, 1e-9):
                    entries.append((root, "gap_coeff_zero"))
    dedup: list[tuple[float, str]] = []
    for e, r in sorted(entries):
        if not dedup or e - dedup[-1][0] > 1e-9 or r != dedup[-1][1]:
            dedup.append((e, r))
    return CriticalSet(dedup)


def _confirm_b_zero(b_left: complex, b_right: complex) -> bool:
    """A genuine zero of the analytic b flips the sign of Re b or Im b
    across the minimum (or both parts are already negligible)."""
    re_flip = b_left.real * b_right.real <= 0.0
    im_flip = b_left.imag * b_right.imag <= 0.0
    tiny = max(abs(b_left), abs(b_right)) < 1e-8
    return re_flip or im_flip or tiny


def scattering_csv(rows: list[ScatteringData]) -> str:
    lines = ["E,re_a,im_a,re_b,im_b,abs_b"]
    for sd in rows:
        lines.append(f"{sd.energy!r},{sd.a.real!r},{sd.a.imag!r},"
                     f"{sd.b.real!r},{sd.b.imag!r},{sd.B!r}")
    return "\n".join(lines) + "\n"
