"""Finite-volume operators with the boundary condition psi_up = 0 at both
box edges: phase-winding eigenvalue counts, eigenvalues and eigenfunctions,
resolvent kernels, box regularity and the Wegner / initial-scale probes.

The phase convention is psi = r (sin theta, cos theta), so the boundary
condition is theta = 0 mod pi; theta is unwrapped continuously along the
box (substeps keep each increment below pi/2) and is strictly increasing
in the energy, which turns counting into winding arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError
from .potential import (DisorderModel, DisorderRealization, PauliField, PiecewiseSlice,
                        RandomModel, SingleSitePotential, batched_box_slice, build_slice,
                        cell_index, sample_disorder_batch)
from .transfer import segment_propagator, trace_values

_PHASE_SNAP = 1e-9
_SAFETY = 1.2          # max phase increment per substep (< pi/2)


@dataclass(frozen=True)
class DirichletBox:
    """Interval [center - L/2, center + L/2] carrying a frozen potential slice."""

    center: float
    length: float
    slice_: PiecewiseSlice

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("box length must be positive")

    @property
    def left(self) -> float:
        return self.center - self.length / 2.0

    @property
    def right(self) -> float:
        return self.center + self.length / 2.0


def make_box(per: PauliField, site: SingleSitePotential,
             realization: DisorderRealization | None,
             center: float = 0.0, length: float = 1.0) -> DirichletBox:
    """Box over [center - L/2, center + L/2]; realization must cover it
    (pass None for the bare periodic operator)."""
    x0, x1 = center - length / 2.0, center + length / 2.0
    if realization is None:
        from .potential import periodic_slice
        slc = periodic_slice(per, x0, x1)
    else:
        slc = build_slice(per, realization, site, x0, x1)
    return DirichletBox(center, length, slc)


def right_edge_phase(slice_: PiecewiseSlice, energies, theta0: float = 0.0) -> np.ndarray:
    """Continuous boundary phase theta(x1; E) for the datum theta(x0) = theta0.

    Vectorized over an energy array and over a batched slice; the result has
    shape (n_energies, *batch).  Exact segment propagators are applied in
    substeps short enough that each angle increment is unambiguous.
    """
    E = np.atleast_1d(np.asarray(energies, dtype=float))
    scalar = np.ndim(energies) == 0
    batch = slice_.batch_shape
    Eb = E.reshape((E.size,) + (1,) * len(batch))
    shape = np.broadcast_shapes(Eb.shape, (1,) + batch)
    psi = np.zeros(shape + (2,))
    psi[..., 0] = np.sin(theta0)
    psi[..., 1] = np.cos(theta0)
    theta = np.full(shape, float(theta0))
    ang = np.arctan2(psi[..., 0], psi[..., 1])
    lens = slice_.lengths
    for k in range(slice_.n_segments):
        vam, vsc, vel = slice_.v_am[k], slice_.v_sc[k], slice_.v_el[k]
        b = Eb - vel + vsc
        c = Eb - vel - vsc
        bound = float(np.max(np.maximum(np.abs(b), np.abs(c)) + np.abs(vam)))
        nsub = max(1, int(np.ceil(lens[k] * bound / _SAFETY)))
        h = lens[k] / nsub
        M = segment_propagator(vam, vsc, vel, Eb, h)
        M = np.broadcast_to(M, shape + (2, 2))
        for _ in range(nsub):
            psi = (M @ psi[..., None])[..., 0]
            new_ang = np.arctan2(psi[..., 0], psi[..., 1])
            d = new_ang - ang
            d -= 2.0 * np.pi * np.round(d / (2.0 * np.pi))
            theta += d
            ang = new_ang
            psi /= np.sqrt(psi[..., 0] ** 2 + psi[..., 1] ** 2)[..., None]
    return theta[0] if scalar else theta


def _pi_floor(theta) -> np.ndarray:
    """floor(theta / pi) with snapping of near-exact multiples (so a window
    endpoint sitting on an eigenvalue is counted inclusively)."""
    q = np.asarray(theta) / np.pi
    r = np.round(q)
    snapped = np.where(np.abs(q - r) < _PHASE_SNAP, r, np.floor(q))
    return snapped.astype(np.int64)


def pruefer_count(box: DirichletBox, window: tuple[float, float]) -> int:
    """Number of box eigenvalues in (E1, E2] via the winding of the phase."""
    e1, e2 = float(window[0]), float(window[1])
    if e2 < e1:
        raise ValueError("window must satisfy E1 <= E2")
    th = right_edge_phase(box.slice_, np.array([e1, e2]))
    k = _pi_floor(th)
    return int(k[1] - k[0])


def dirichlet_eigenvalues(box: DirichletBox, window: tuple[float, float],
                          tol: float = 1e-12) -> np.ndarray:
    """Eigenvalues in (E1, E2], refined by bisection on the boundary phase.

    The phase is strictly increasing in E, so each winding index k between
    the window phases brackets exactly one eigenvalue.
    """
    e1, e2 = float(window[0]), float(window[1])
    th = right_edge_phase(box.slice_, np.array([e1, e2]))
    k1, k2 = _pi_floor(th)
    ks = np.arange(k1 + 1, k2 + 1, dtype=np.int64)
    if ks.size == 0:
        return np.array([])
    targets = ks * np.pi
    lo = np.full(ks.size, e1)
    hi = np.full(ks.size, e2)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        tm = right_edge_phase(box.slice_, mid)
        above = tm >= targets
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if float(np.max(hi - lo)) < tol:
            break
    return 0.5 * (lo + hi)


def _segment_l2(psi0: np.ndarray, vam: float, vsc: float, vel: float,
                energy: float, length: float) -> float:
    """Exact integral of |psi(t)|^2 over a constant segment, real energy.

    psi(t) = f0(t) psi0 + f1(t) A psi0 with A^2 = Delta I; all three products
    of the scalar factors integrate in closed form.
    """
    a, b, c = vam, energy - vel + vsc, energy - vel - vsc
    A = np.array([[-a, b], [-c, a]])
    delta = a * a - b * c
    q0 = float(psi0 @ psi0)
    q1 = float(psi0 @ (A @ psi0))
    q2 = float((A @ psi0) @ (A @ psi0))
    L = length
    if abs(delta) * L * L < 1e-8:
        i_cc = L + delta * L ** 3 / 3.0
        i_cs = L * L / 2.0 + delta * L ** 4 / 6.0
        i_ss = L ** 3 / 3.0 + 2.0 * delta * L ** 5 / 15.0
    else:
        mu = np.sqrt(complex(delta))
        sh = np.sinh(2.0 * mu * L) / (4.0 * mu)
        ch = (np.cosh(2.0 * mu * L) - 1.0) / (4.0 * mu * mu)
        i_cc = float((L / 2.0 + sh).real)
        i_cs = float(ch.real)
        i_ss = float(((sh - L / 2.0) / (mu * mu)).real)
    return i_cc * q0 + 2.0 * i_cs * q1 + i_ss * q2


def _l2_norm(slice_: PiecewiseSlice, energy: float, anchor: float, value: np.ndarray) -> float:
    """Exact L2 norm of the solution anchored at (anchor, value)."""
    total = 0.0
    start_vals = trace_values(slice_, energy, anchor, value, slice_.breakpoints[:-1])
    for k in range(slice_.n_segments):
        psi0 = np.real(start_vals[k])
        total += _segment_l2(psi0, float(slice_.v_am[k]), float(slice_.v_sc[k]),
                             float(slice_.v_el[k]), energy, float(slice_.lengths[k]))
    return float(np.sqrt(total))


@dataclass(frozen=True)
class EigenFunction:
    """Normalized eigenfunction trace with an exponential-decay fit."""

    eigenvalue: float
    positions: np.ndarray
    values: np.ndarray           # (N, 2), real
    center: float                # localization center (argmax |psi|)
    decay_rate: float            # fitted m in |psi| ~ exp(-m |x - center|)
    decay_residual: float        # RMS of the log-linear fit
    boundary_residual: float
    matching_residual: float

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values ** 2, axis=1))

    def to_csv(self) -> str:
        lines = ["x,abs_psi,psi_up,psi_down"]
        for x, v in zip(self.positions, self.values):
            lines.append(f"{x!r},{float(np.hypot(v[0], v[1]))!r},{v[0]!r},{v[1]!r}")
        return "\n".join(lines) + "\n"


def eigenfunction(box: DirichletBox, eigenvalue: float, step: float = 0.05,
                  margin_fraction: float = 0.10) -> EigenFunction:
    """Two-sided shooting eigenfunction, L2-normalized.

    Left and right sweeps both follow their locally dominant branch, so the
    matched trace is stable; the decay rate is a least-squares fit of
    log |psi| against the distance from the localization center, with
    ``margin_fraction`` of the box discarded at each edge.
    """
    slc = box.slice_
    a, b = box.left, box.right
    E = float(eigenvalue)
    pts = set(np.round(slc.breakpoints, 15))
    n = max(3, int(np.ceil(box.length / step)) + 1)
    pts.update(np.round(np.linspace(a, b, n), 15))
    xs = np.array(sorted(pts))
    left = np.real(trace_values(slc, E, a, np.array([0.0, 1.0]), xs))
    right = np.real(trace_values(slc, E, b, np.array([0.0, 1.0]), xs))
    im = int(np.argmax(np.sum(left ** 2, axis=1) *
                       (np.sum(right ** 2, axis=1) > 0)))
    # scale the right sweep onto the left one at the matching point
    num = float(right[im] @ left[im])
    den = float(right[im] @ right[im])
    if den == 0.0 or num == 0.0:
        raise DegeneracyError("two-sided matching failed: vanishing trace at the peak")
    scale = num / den
    vals = np.vstack([left[:im + 1], scale * right[im + 1:]])
    match_res = float(np.linalg.norm(left[im] - scale * right[im]) /
                      max(np.linalg.norm(left[im]), 1e-300))
    # exact norm: left piece + scaled right piece
    nl = _l2_norm(slc.restricted(a, xs[im]), E, a, np.array([0.0, 1.0])) if xs[im] > a else 0.0
    nr = _l2_norm(slc.restricted(xs[im], b), E, b, np.array([0.0, 1.0])) if xs[im] < b else 0.0
    total = float(np.sqrt(nl ** 2 + (scale * nr) ** 2))
    vals = vals / total
    norms = np.sqrt(np.sum(vals ** 2, axis=1))
    center = float(xs[np.argmax(norms)])
    margin = margin_fraction * box.length
    mask = (xs >= a + margin) & (xs <= b - margin) & (norms > 1e-280)
    d = np.abs(xs[mask] - center)
    y = np.log(norms[mask])
    if d.size >= 3 and np.ptp(d) > 0:
        coef = np.polyfit(d, y, 1)
        rate = -float(coef[0])
        resid = float(np.sqrt(np.mean((np.polyval(coef, d) - y) ** 2)))
    else:
        rate, resid = 0.0, float("inf")
    boundary_res = float(max(abs(vals[0, 0]), abs(vals[-1, 0])))
    return EigenFunction(E, xs, vals, center, rate, resid, boundary_res, match_res)


@dataclass(frozen=True)
class BoxGreen:
    """Resolvent kernel of a box at an off-spectrum energy.

    Built from the two boundary solutions u_plus (datum (0,1) at the right
    edge) and u_minus (datum (0,1) at the left edge); their Wronskian is
    constant and vanishes exactly on the spectrum.
    """

    box: DirichletBox
    energy: float
    wronskian: float

    def u_plus(self, xs) -> np.ndarray:
        return np.real(trace_values(self.box.slice_, self.energy, self.box.right,
                                     np.array([0.0, 1.0]), xs))

    def u_minus(self, xs) -> np.ndarray:
        return np.real(trace_values(self.box.slice_, self.energy, self.box.left,
                                     np.array([0.0, 1.0]), xs))

    def at(self, x: float, y: float) -> np.ndarray:
        if x >= y:
            up = self.u_plus([x])[0]
            um = self.u_minus([y])[0]
            return np.outer(up, um) / self.wronskian
        up = self.u_plus([y])[0]
        um = self.u_minus([x])[0]
        return np.outer(um, up) / self.wronskian


def green_kernel(box: DirichletBox, energy: float) -> BoxGreen:
    """Kernel evaluator; raises DegeneracyError when the Wronskian is
    negligible relative to the boundary-solution size (E on the spectrum)."""
    up_left = np.real(trace_values(box.slice_, float(energy), box.right,
                                   np.array([0.0, 1.0]), [box.left]))[0]
    W = float(up_left[0])           # u_+^up * 1 - 0 * u_+^down at the left edge
    scale = float(np.linalg.norm(up_left))
    if abs(W) < 1e-12 * max(scale, 1.0):
        raise DegeneracyError(f"E = {energy} is numerically on the box spectrum "
                              f"(relative Wronskian {abs(W) / max(scale, 1e-300):.2e})")
    return BoxGreen(box, float(energy), W)


@dataclass(frozen=True)
class RegularityResult:
    regular: bool
    schur_bound: float
    threshold: float
    decay_rate: float


def _strip_grids(box: DirichletBox, pts_per_unit: int = 9):
    L, x = box.length, box.center
    s_left = np.linspace(x - (L - 1) / 2.0, x - (L - 3) / 2.0, pts_per_unit)
    s_right = np.linspace(x + (L - 3) / 2.0, x + (L - 1) / 2.0, pts_per_unit)
    nt = max(17, int(np.ceil(L / 3.0 * 6)) + 1)
    t_mid = np.linspace(x - L / 6.0, x + L / 6.0, nt)
    return s_left, s_right, t_mid


def box_regularity(box: DirichletBox, energy: float, decay_rate: float) -> RegularityResult:
    """Schur-test bound of the boundary-to-middle-third resolvent block,
    compared against exp(-decay_rate * L / 2).

    The kernel is rank one on each side of the diagonal, so its pointwise
    operator norm is |u_a(s)| |u_b(t)| / |W|; the Schur bound is the
    geometric mean of the worst row and column integrals.
    """
    if box.length < 6.0:
        raise ValueError("box regularity needs length >= 6")
    G = green_kernel(box, energy)
    s_left, s_right, t_mid = _strip_grids(box)
    up_l = G.u_plus(s_right)       # right strip: x >= t -> u_plus(s) u_minus(t)
    um_l = G.u_minus(s_left)       # left strip:  x <  t -> u_minus(s) u_plus(t)
    up_t = G.u_plus(t_mid)
    um_t = G.u_minus(t_mid)
    absW = abs(G.wronskian)
    nrm = lambda v: np.sqrt(np.sum(v ** 2, axis=1))
    k_right = np.outer(nrm(up_l), nrm(um_t)) / absW     # (s_right, t)
    k_left = np.outer(nrm(um_l), nrm(up_t)) / absW      # (s_left, t)
    wt = np.gradient(t_mid)
    ws = np.gradient(s_left)
    row = max(float(np.max(k_right @ wt)), float(np.max(k_left @ wt)))
    col = float(np.max(ws @ k_left + ws @ k_right))
    bound = float(np.sqrt(row * col))
    threshold = float(np.exp(-decay_rate * box.length / 2.0))
    return RegularityResult(bound <= threshold, bound, threshold, decay_rate)


def _batched_phases(model: RandomModel, length: float, energies: np.ndarray,
                    realizations: int, seed: int, stream_offset: int = 0) -> np.ndarray:
    """(n_energies, R) boundary phases for boxes centered at 0."""
    x0, x1 = -length / 2.0, length / 2.0
    n_lo = cell_index(x0)
    n_hi = cell_index(np.nextafter(x1, x0))
    lam = sample_disorder_batch(model.law, (n_lo, n_hi), seed, realizations, stream_offset)
    slc = batched_box_slice(model.per, model.site, lam, x0, x1)
    return right_edge_phase(slc, energies)


def wegner_probe(model: RandomModel, energy: float, length: float, etas,
                 realizations: int = 500, seed: int = 0) -> np.ndarray:
    """Empirical P(dist(E, box spectrum) < eta) for each eta.

    dist < eta is equivalent to at least one eigenvalue in (E-eta, E+eta),
    decided by the phase winding over that window alone; all etas share the
    same realizations, so the event family is nested and the probabilities
    are monotone by construction.
    """
    if realizations < 2:
        raise ValueError("need at least 2 realizations")
    etas = np.atleast_1d(np.asarray(etas, dtype=float))
    if np.any(etas <= 0):
        raise ValueError("eta must be positive")
    Es = np.concatenate([energy - etas, energy + etas])
    th = _batched_phases(model, length, Es, realizations, seed)
    k = _pi_floor(th)
    K = etas.size
    counts = k[K:, :] - k[:K, :]
    return np.mean(counts > 0, axis=1)


def box_spectrum_distance(box: DirichletBox, energy: float, eta_max: float) -> float:
    """dist(E, spectrum) if below eta_max, else eta_max (bisected winding)."""
    lo, hi = 0.0, float(eta_max)
    if pruefer_count(box, (energy - hi, energy + hi)) == 0:
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if pruefer_count(box, (energy - mid, energy + mid)) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class H1Result:
    probability: float
    threshold: float             # L0^(-theta)
    passes: bool                 # probability > 1 - 1/841
    bounds: np.ndarray


def h1_probe(model: RandomModel, energy: float, L0: int, theta: float,
             realizations: int = 100, seed: int = 0) -> H1Result:
    """Fraction of realizations whose boundary-to-middle resolvent block is
    below L0^(-theta) (Schur bound), reported against the 1 - 1/841 mark."""
    if L0 % 6 != 0:
        raise ValueError("L0 must be a multiple of 6")
    x0, x1 = -L0 / 2.0, L0 / 2.0
    n_lo, n_hi = cell_index(x0), cell_index(np.nextafter(x1, x0))
    bounds = np.empty(realizations)
    for r in range(realizations):
        from .potential import sample_disorder
        real = sample_disorder(model.law, (n_lo, n_hi), seed, stream=r)
        box = make_box(model.per, model.site, real, 0.0, float(L0))
        try:
            res = box_regularity(box, energy, 0.0)
            bounds[r] = res.schur_bound
        except DegeneracyError:
            bounds[r] = np.inf
    threshold = float(L0) ** (-theta)
    prob = float(np.mean(bounds <= threshold))
    return H1Result(prob, threshold, prob > 1.0 - 1.0 / 841.0, bounds)


def _kernel_opnorm(G: BoxGreen, s_pts: np.ndarray, t_pts: np.ndarray) -> float:
    """Operator norm of the sampled kernel block chi(s) G chi(t) via the SVD
    of the weighted sample matrix."""
    up_s, um_s = G.u_plus(s_pts), G.u_minus(s_pts)
    up_t, um_t = G.u_plus(t_pts), G.u_minus(t_pts)
    ws = np.sqrt(np.gradient(s_pts)) if s_pts.size > 1 else np.array([1.0])
    wt = np.sqrt(np.gradient(t_pts)) if t_pts.size > 1 else np.array([1.0])
    K = np.zeros((2 * s_pts.size, 2 * t_pts.size))
    for i, s in enumerate(s_pts):
        for j, t in enumerate(t_pts):
            blk = (np.outer(up_s[i], um_t[j]) if s >= t else np.outer(um_s[i], up_t[j]))
            K[2 * i:2 * i + 2, 2 * j:2 * j + 2] = blk / G.wronskian * ws[i] * wt[j]
    return float(np.linalg.svd(K, compute_uv=False)[0])


def sli_probe(model: RandomModel, energy: float, L: int = 36,
              samples: int = 100, seed: int = 0) -> float:
    """Empirical maximum of the nested-box inequality ratio
    ||G_L chi|| / (||G_l' chi|| * ||G_L Gamma'||) over random configurations.

    The constant in the inequality is existential; this probe only reports
    the largest observed ratio.
    """
    rng_idx = 0
    worst = 0.0
    from .potential import sample_disorder
    n_lo, n_hi = cell_index(-L / 2.0), cell_index(np.nextafter(L / 2.0, 0))
    got = 0
    while got < samples:
        u = np.stack([np.asarray(model.law.draw(seed + 7919, 10_000 + rng_idx, i))
                      for i in range(4)]).ravel()
        rng_idx += 1
        lp = 6 * (2 + int(u[0] * ((L - 6) // 6 - 1)))          # inner box length
        ly = int((u[1] - 0.5) * (L - lp - 6))                   # inner center
        lpp = max(2, int(2 + u[2] * (lp / 3 - 2)))              # core length
        real = sample_disorder(model.law, (n_lo, n_hi), seed, stream=100 + got)
        box_L = make_box(model.per, model.site, real, 0.0, float(L))
        box_lp = make_box(model.per, model.site, real, float(ly), float(lp))
        try:
            G_L = green_kernel(box_L, energy)
            G_lp = green_kernel(box_lp, energy)
        except DegeneracyError:
            continue
        s_L_l, s_L_r, _ = _strip_grids(box_L)
        s_p_l, s_p_r, _ = _strip_grids(box_lp)
        t_core = np.linspace(ly - lpp / 2.0, ly + lpp / 2.0, 13)
        lhs = _kernel_opnorm(G_L, np.concatenate([s_L_l, s_L_r]), t_core)
        rhs1 = _kernel_opnorm(G_lp, np.concatenate([s_p_l, s_p_r]), t_core)
        rhs2 = _kernel_opnorm(G_L, np.concatenate([s_L_l, s_L_r]),
                              np.concatenate([s_p_l, s_p_r]))
        if rhs1 * rhs2 > 0:
            worst = max(worst, lhs / (rhs1 * rhs2))
            got += 1
    return worst


def eigenvalue_csv(values: np.ndarray) -> str:
    lines = ["index,E_k"]
    for i, e in enumerate(values):
        lines.append(f"{i},{float(e)!r}")
    return "\n".join(lines) + "\n"
