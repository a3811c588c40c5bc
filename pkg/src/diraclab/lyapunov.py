"""Monte Carlo Lyapunov exponents of the random transfer-matrix cocycle,
Hölder-modulus fits along energy grids and large-deviation diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .potential import (DisorderModel, PauliField, SingleSitePotential,
                        cell_slice, sample_disorder_batch)
from .scattering import CriticalSet
from .transfer import cell_matrices, operator_norm, segment_propagator


def _atom_indices(law: DisorderModel, lam: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(law.atoms, lam)
    return np.clip(idx, 0, law.atoms.size - 1)


def _uniform_cell_products(per, site, lam_col, energy):
    """(R, 2, 2) cell transfer matrices for per-realization couplings."""
    sl = cell_slice(per, site, lam_col)
    lens = sl.lengths
    M = None
    for k in range(sl.n_segments):
        P = segment_propagator(sl.v_am[k], sl.v_sc[k], sl.v_el[k], energy, lens[k])
        M = P if M is None else P @ M
    return M


def ensemble_log_norms(per: PauliField, site: SingleSitePotential, law: DisorderModel,
                       energy: float, n: int, realizations: int, seed: int,
                       stream_offset: int = 0, vector=None) -> np.ndarray:
    """(R,) values of log ||U_E(n)|| (or log ||U_E(n) x|| when ``vector`` is
    given), using per-cell operator-norm renormalization.

    Finite laws share a small set of cell matrices, gathered per cell; the
    uniform law rebuilds the cell product per (cell, realization).
    """
    lam = sample_disorder_batch(law, (1, n), seed, realizations, stream_offset)
    track_vec = vector is not None
    if track_vec:
        state = np.broadcast_to(np.asarray(vector, dtype=float), (realizations, 2)).copy()
    else:
        state = np.broadcast_to(np.eye(2), (realizations, 2, 2)).copy()
    acc = np.zeros(realizations)
    mats = None
    if law.kind == "atoms":
        mats = cell_matrices(per, site, law.atoms, energy)
        idx = _atom_indices(law, lam)
    for k in range(n):
        M = mats[idx[:, k]] if mats is not None else _uniform_cell_products(per, site, lam[:, k], energy)
        if track_vec:
            state = (M @ state[..., None])[..., 0]
            nrm = np.sqrt(np.sum(state ** 2, axis=-1))
        else:
            state = M @ state
            nrm = operator_norm(state)
        state /= nrm[..., None] if track_vec else nrm[:, None, None]
        acc += np.log(nrm)
    return acc


@dataclass(frozen=True)
class LyapunovEstimate:
    energy: float
    gamma_hat: float
    stderr: float
    n: int
    realizations: int
    seed: int


def lyapunov_estimate(per: PauliField, site: SingleSitePotential, law: DisorderModel,
                      energy: float, n: int = 10_000, realizations: int = 200,
                      seed: int = 0) -> LyapunovEstimate:
    """Ensemble average of (1/n) log ||U_E(n)|| over independent realizations.

    The growth-rate limit is implemented with the logarithm of the matrix
    norm (the standard subadditive reading).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if realizations < 2:
        raise ValueError("need at least 2 realizations")
    acc = ensemble_log_norms(per, site, law, float(energy), n, realizations, seed)
    per_orbit = acc / n
    gamma = float(np.mean(per_orbit))
    stderr = float(np.std(per_orbit, ddof=1) / np.sqrt(realizations))
    return LyapunovEstimate(float(energy), gamma, stderr, n, realizations, seed)


def single_orbit_estimate(per: PauliField, site: SingleSitePotential, law: DisorderModel,
                          energy: float, total_cells: int, seed: int = 0,
                          chunks: int = 200) -> float:
    """Ergodic estimate from one long orbit, evaluated chunk-parallel.

    The orbit of ``total_cells`` cells from a single stream is split into
    contiguous chunks whose partial products are computed in a batch and
    recombined in order; the result is identical to a sequential sweep up
    to renormalization bookkeeping.
    """
    n = total_cells // chunks
    total_cells = n * chunks
    lam = sample_disorder_batch(law, (1, total_cells), seed, 1)[0]
    lam = lam.reshape(chunks, n)
    state = np.broadcast_to(np.eye(2), (chunks, 2, 2)).copy()
    acc = np.zeros(chunks)
    mats = None
    if law.kind == "atoms":
        mats = cell_matrices(per, site, law.atoms, float(energy))
        idx = _atom_indices(law, lam)
    for k in range(n):
        M = mats[idx[:, k]] if mats is not None else _uniform_cell_products(per, site, lam[:, k], float(energy))
        state = M @ state
        nrm = operator_norm(state)
        state /= nrm[:, None, None]
        acc += np.log(nrm)
    U = np.eye(2)
    total = 0.0
    for c in range(chunks):
        U = state[c] @ U
        nrm = float(operator_norm(U))
        U /= nrm
        total += np.log(nrm)
    return float((total + acc.sum()) / total_cells)


@dataclass(frozen=True)
class HolderFit:
    alpha_hat: float
    log_c: float
    stderr: float
    ci_low: float
    ci_high: float
    pairs: int


def holder_fit(energies: np.ndarray, gammas: np.ndarray) -> HolderFit:
    """Least squares of log |gamma(E) - gamma(E')| on log |E - E'| over
    dyadic-gap index pairs; the slope estimates the Hölder exponent."""
    energies = np.asarray(energies, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    xs, ys = [], []
    gap = 1
    while gap < energies.size:
        de = np.abs(energies[gap:] - energies[:-gap])
        dg = np.abs(gammas[gap:] - gammas[:-gap])
        ok = (de > 0) & (dg > 0)
        xs.extend(np.log(de[ok]))
        ys.extend(np.log(dg[ok]))
        gap *= 2
    if len(xs) < 3:
        return HolderFit(float("nan"), float("nan"), float("nan"),
                         float("nan"), float("nan"), len(xs))
    res = stats.linregress(xs, ys)
    tq = stats.t.ppf(0.975, len(xs) - 2)
    return HolderFit(float(res.slope), float(res.intercept), float(res.stderr),
                     float(res.slope - tq * res.stderr),
                     float(res.slope + tq * res.stderr), len(xs))


@dataclass(frozen=True)
class LyapunovCurve:
    energies: np.ndarray
    gamma_hat: np.ndarray
    stderr: np.ndarray
    n: int
    realizations: int
    seed: int
    fit: HolderFit
    skipped: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["E,gamma_hat,stderr,n,R"]
        for e, g, s in zip(self.energies, self.gamma_hat, self.stderr):
            lines.append(f"{e!r},{g!r},{s!r},{self.n},{self.realizations}")
        return "\n".join(lines) + "\n"


def lyapunov_curve(per: PauliField, site: SingleSitePotential, law: DisorderModel,
                   energies, n: int = 10_000, realizations: int = 200, seed: int = 0,
                   critical: CriticalSet | None = None,
                   margin: float | None = None) -> LyapunovCurve:
    """Per-energy estimates plus the Hölder-modulus fit.

    Grid points within ``margin`` of a detected critical energy are skipped
    and reported in ``skipped`` (the exponent degrades to zero there, which
    poisons modulus fits); default margin is 10x the grid spacing.
    """
    energies = np.sort(np.atleast_1d(np.asarray(energies, dtype=float)))
    if margin is None:
        spacing = np.min(np.diff(energies)) if energies.size > 1 else 0.01
        margin = 10.0 * spacing
    keep, skipped = [], []
    for e in energies:
        if critical is not None and not critical.clear_of(float(e), margin):
            skipped.append(float(e))
        else:
            keep.append(float(e))
    keep_arr = np.asarray(keep)
    gam = np.empty(keep_arr.size)
    err = np.empty(keep_arr.size)
    for i, e in enumerate(keep_arr):
        est = lyapunov_estimate(per, site, law, e, n, realizations, seed)
        gam[i] = est.gamma_hat
        err[i] = est.stderr
    return LyapunovCurve(keep_arr, gam, err, n, realizations, seed,
                         holder_fit(keep_arr, gam), skipped)


def cell_growth_cap(per: PauliField, site: SingleSitePotential, law: DisorderModel) -> float:
    """Deterministic cap on the exponent: the worst-cell value of
    integral(|q_am| + |q_sc|) over the coupling support (from the norm bound
    ||g||^2 <= exp(2 * integral))."""
    lo, hi = law.support_bounds()
    worst = 0.0
    for lam in {lo, hi, 0.0}:
        sl = cell_slice(per, site, float(lam))
        worst = max(worst, float(sl.norm_growth_integral()))
    return worst


def large_deviation_probe(per: PauliField, site: SingleSitePotential, law: DisorderModel,
                          energy: float, n: int, realizations: int, eps: float,
                          gamma_ref: float, seed: int = 0,
                          vector=(0.0, 1.0)) -> float:
    """Empirical probability of exp((gamma-eps) n) <= ||U_E(n) x|| <=
    exp((gamma+eps) n) with x a fixed unit vector."""
    acc = ensemble_log_norms(per, site, law, float(energy), n, realizations, seed,
                             vector=np.asarray(vector, dtype=float))
    lo = (gamma_ref - eps) * n
    hi = (gamma_ref + eps) * n
    return float(np.mean((acc >= lo) & (acc <= hi)))


def inverse_moment_probe(per: PauliField, site: SingleSitePotential, law: DisorderModel,
                         energy: float, ns, realizations: int, delta: float,
                         seed: int = 0, vector=(0.0, 1.0)) -> np.ndarray:
    """E(||U_E(n) x||^(-delta)) for each n (expected to decay in n)."""
    out = []
    for n in ns:
        acc = ensemble_log_norms(per, site, law, float(energy), int(n), realizations,
                                 seed, vector=np.asarray(vector, dtype=float))
        out.append(float(np.mean(np.exp(-delta * acc))))
    return np.asarray(out)
