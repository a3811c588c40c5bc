"""Exact propagation of the first-order system J u' + V u = z u.

On a segment where the potential is constant the solution map is the
matrix exponential of length * A with A = J^{-1}(zI - V); A is traceless,
so exp evaluates in closed form through the scalar/traceless split
(cosh/cos branches) and has determinant exactly 1 up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .potential import PauliField, SingleSitePotential, DisorderRealization, PiecewiseSlice, cell_slice

_SERIES_CUT = 1e-7


def _f0_f1(w):
    """Stable (cosh(sqrt(w)), sinh(sqrt(w))/sqrt(w)) as even functions of sqrt(w).

    Works for real or complex w; the removable singularity at w = 0 is
    handled by a truncated series.
    """
    w = np.atleast_1d(np.asarray(w))
    small = np.abs(w) < _SERIES_CUT
    if np.iscomplexobj(w):
        mu = np.sqrt(np.where(small, 1.0, w))
        f0 = np.where(small, 1.0 + w / 2.0 + w * w / 24.0, np.cosh(mu))
        f1 = np.where(small, 1.0 + w / 6.0 + w * w / 120.0, np.sinh(mu) / mu)
        return f0, f1
    f0 = np.empty_like(w, dtype=float)
    f1 = np.empty_like(w, dtype=float)
    pos = (w >= 0) & ~small
    neg = (w < 0) & ~small
    mu = np.sqrt(w[pos])
    f0[pos] = np.cosh(mu)
    f1[pos] = np.sinh(mu) / mu
    om = np.sqrt(-w[neg])
    f0[neg] = np.cos(om)
    f1[neg] = np.sin(om) / om
    ws = w[small]
    f0[small] = 1.0 + ws / 2.0 + ws * ws / 24.0
    f1[small] = 1.0 + ws / 6.0 + ws * ws / 120.0
    return f0, f1


def segment_propagator(v_am, v_sc, v_el, z, length):
    """exp(length * A) for constant Pauli coefficients; broadcasts to (..., 2, 2).

    Real inputs yield real matrices (the fast path used by real-energy scans).
    """
    scalar_in = all(np.ndim(v) == 0 for v in (v_am, v_sc, v_el, z, length))
    z = np.asarray(z)
    a = np.asarray(v_am)
    b = z - v_el + v_sc
    c = z - v_el - v_sc
    delta = a * a - b * c
    L = np.asarray(length)
    f0, f1 = _f0_f1(delta * L * L)
    s = f1 * np.atleast_1d(L)
    a, b, c, f0, s = np.broadcast_arrays(np.atleast_1d(a), np.atleast_1d(b),
                                         np.atleast_1d(c), f0, s)
    dtype = np.result_type(f0, s, a, b)
    M = np.empty(f0.shape + (2, 2), dtype=dtype)
    M[..., 0, 0] = f0 - s * a
    M[..., 0, 1] = s * b
    M[..., 1, 0] = -s * c
    M[..., 1, 1] = f0 + s * a
    return M[0] if scalar_in else M


def operator_norm(M) -> np.ndarray:
    """Largest singular value of 2x2 matrices, vectorized over leading dims."""
    M = np.asarray(M)
    fro2 = np.sum(np.abs(M) ** 2, axis=(-2, -1))
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    gap = np.sqrt(np.maximum(fro2 * fro2 - 4.0 * np.abs(det) ** 2, 0.0))
    return np.sqrt((fro2 + gap) / 2.0)


def cell_transfer(slice_: PiecewiseSlice, z) -> np.ndarray:
    """Transfer matrix of a piecewise-constant slice at energy z.

    Ordered product over segments, leftmost segment applied first; supports
    batched slices and/or an array of energies (shapes broadcast into the
    leading dimensions of the result).
    """
    lens = slice_.lengths
    M = None
    for k in range(slice_.n_segments):
        P = segment_propagator(slice_.v_am[k], slice_.v_sc[k], slice_.v_el[k], z, lens[k])
        M = P if M is None else P @ M
    return M


def transfer_det_residual(M) -> float:
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    return float(np.max(np.abs(det - 1.0)))


def norm_bound(slice_: PiecewiseSlice) -> np.ndarray:
    """Deterministic bound: ||g_E||^2 <= exp(2 * integral(|q_am| + |q_sc|)).

    Valid for real E; the electrostatic part and the energy only rotate the
    solution and do not contribute to norm growth.
    """
    return np.exp(2.0 * slice_.norm_growth_integral())


def energy_lipschitz_bound(slice_: PiecewiseSlice, e_lo: float, e_hi: float) -> float:
    """Bound C3 with ||g(E) - g(E')|| <= C3 |E - E'| on [e_lo, e_hi].

    Perturbation-series estimate: the difference of two solutions driven by
    potentials V - E and V - E' is controlled by exp(integral(|V-E| + |V-E'|))
    times integral(|E - E'|); sqrt(2) converts column bounds to a matrix bound.
    """
    i_lo = float(np.max(slice_.matrix_integral(e_lo)))
    i_hi = float(np.max(slice_.matrix_integral(e_hi)))
    worst = max(i_lo, i_hi)
    return np.sqrt(2.0) * (slice_.x1 - slice_.x0) * np.exp(2.0 * worst)


@dataclass(frozen=True)
class SolutionTrace:
    """Sampled solution values psi(x) of the system at energy z."""

    positions: np.ndarray
    values: np.ndarray          # (N, 2), complex
    z: complex

    def norms(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.values) ** 2, axis=1))

    def to_csv(self) -> str:
        lines = ["x,re_up,im_up,re_down,im_down"]
        for x, v in zip(self.positions, self.values):
            lines.append(f"{x!r},{v[0].real!r},{v[0].imag!r},{v[1].real!r},{v[1].imag!r}")
        return "\n".join(lines) + "\n"


def trace_values(slice_: PiecewiseSlice, z, anchor: float, value, xs) -> np.ndarray:
    """Exact solution values at sorted or unsorted sample points.

    The solution anchored at ``anchor`` with value ``value`` is propagated
    segment-exactly; points left of the anchor use the inverse propagators
    exp(-length * A).
    """
    if slice_.batch_shape:
        raise ValueError("trace_values expects a non-batched slice")
    xs = np.asarray(xs, dtype=float)
    if np.any(xs < slice_.x0 - 1e-12) or np.any(xs > slice_.x1 + 1e-12):
        raise ValueError("sample points outside the slice")
    v0 = np.asarray(value, dtype=complex)
    if v0.shape != (2,) or not np.any(v0):
        raise ValueError("anchor value must be a nonzero 2-vector")
    order = np.argsort(xs, kind="stable")
    out = np.empty((xs.size, 2), dtype=complex)

    def sweep(points, direction):
        cur_x, cur_v = anchor, v0.copy()
        for idx in points:
            target = xs[idx]
            while abs(target - cur_x) > 1e-15:
                k = slice_.segment_of(cur_x if direction > 0 else np.nextafter(cur_x, target))
                edge = slice_.breakpoints[k + 1] if direction > 0 else slice_.breakpoints[k]
                step_to = min(target, edge) if direction > 0 else max(target, edge)
                h = step_to - cur_x
                if h != 0.0:
                    P = segment_propagator(slice_.v_am[k], slice_.v_sc[k], slice_.v_el[k],
                                           complex(z), h)
                    cur_v = P @ cur_v
                    cur_x = step_to
                else:
                    cur_x = step_to
            out[idx] = cur_v

    right = [i for i in order if xs[i] >= anchor]
    left = [i for i in order[::-1] if xs[i] < anchor]
    sweep(right, +1)
    sweep(left, -1)
    return out


def propagate_solution(slice_: PiecewiseSlice, initial, z, anchor: float | None = None,
                       step: float = 0.02) -> SolutionTrace:
    """Solution trace across the slice from an initial value at ``anchor``.

    Sampling positions include every breakpoint plus a uniform refinement of
    spacing at most ``step``.
    """
    anchor = slice_.x0 if anchor is None else float(anchor)
    if not slice_.x0 - 1e-12 <= anchor <= slice_.x1 + 1e-12:
        raise ValueError("anchor outside the slice")
    pts = set(np.round(slice_.breakpoints, 15))
    n = max(2, int(np.ceil((slice_.x1 - slice_.x0) / step)) + 1)
    pts.update(np.round(np.linspace(slice_.x0, slice_.x1, n), 15))
    pts.add(round(anchor, 15))
    xs = np.array(sorted(pts))
    vals = trace_values(slice_, z, anchor, initial, xs)
    return SolutionTrace(xs, vals, complex(z))


@dataclass(frozen=True)
class RenormalizedProduct:
    """Transfer-matrix product carried as (unit-norm direction, log norm)."""

    direction: np.ndarray
    log_norm: float
    steps: int

    def norm_log(self) -> float:
        """log of the operator norm of the full product."""
        return self.log_norm + float(np.log(operator_norm(self.direction)))

    def dense(self) -> np.ndarray:
        """Naive product exp(log_norm) * direction (overflow-prone for long runs)."""
        return np.exp(self.log_norm) * self.direction


def cell_matrices(per: PauliField, site: SingleSitePotential, lam_values, energy) -> np.ndarray:
    """Transfer matrices of the perturbed cell for each coupling value."""
    lam_values = np.atleast_1d(np.asarray(lam_values, dtype=float))
    sl = cell_slice(per, site, lam_values)
    M = cell_transfer(sl, energy)
    return M


def transfer_product(per: PauliField, site: SingleSitePotential,
                     realization: DisorderRealization, energy, n: int) -> RenormalizedProduct:
    """Renormalized product of cell transfers over cells 1..n.

    After each cell the running matrix is rescaled by its operator norm and
    the logarithm is accumulated; n = 0 returns the identity with log 0.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return RenormalizedProduct(np.eye(2), 0.0, 0)
    if not realization.covers(1, n):
        raise ValueError(f"realization window [{realization.n_min}, {realization.n_max}] "
                         f"does not cover cells 1..{n}")
    lams = realization.values[1 - realization.n_min: n + 1 - realization.n_min]
    uniq, inv = np.unique(lams, return_inverse=True)
    mats = cell_matrices(per, site, uniq, energy)
    U = np.eye(2, dtype=mats.dtype)
    log_norm = 0.0
    for k in range(n):
        U = mats[inv[k]] @ U
        nrm = float(operator_norm(U))
        U = U / nrm
        log_norm += np.log(nrm)
    return RenormalizedProduct(U, log_norm, n)
