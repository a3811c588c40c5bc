"""Integrated density of states with the signed convention N(0) = 0, the
Dirac-adapted growth-rate/state-count identity, the singular-log integral
evaluator and the averaged Weyl-function (w-function) cross-checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneracyError
from .potential import RandomModel, build_slice, cell_index, sample_disorder, \
    sample_disorder_batch, batched_box_slice
from .spectrum import right_edge_phase, _pi_floor
from .lyapunov import LyapunovCurve
from .transfer import trace_values


@dataclass(frozen=True)
class IdsTable:
    """Signed per-length eigenvalue counts N(E) relative to E = 0."""

    energies: np.ndarray
    n_hat: np.ndarray
    length: float
    realizations: int
    seed: int
    w_sup: float = 0.0            # sup-norm bound of the full potential

    def n_free(self) -> np.ndarray:
        return self.energies / np.pi

    def deviation_bound(self) -> float:
        """(2/pi) ||W||_inf plus the finite-volume slack 4/L."""
        return 2.0 * self.w_sup / np.pi + 4.0 / self.length

    def to_csv(self) -> str:
        lines = ["E,N_hat,N0"]
        for e, nh in zip(self.energies, self.n_hat):
            lines.append(f"{e!r},{nh!r},{e / np.pi!r}")
        return "\n".join(lines) + "\n"


def ids_estimate(model: RandomModel, grid, length: float = 200.0,
                 realizations: int = 20, seed: int = 0) -> IdsTable:
    """Ensemble IDS from boundary-phase winding of boxes centered at 0.

    For E >= 0, N(E) averages (eigenvalue count in (0, E]) / L; negative
    energies count (E, 0] with a minus sign, so N(0) = 0 identically and
    the table is nondecreasing.
    """
    if length < 20:
        raise ValueError("length must be >= 20")
    if realizations < 1:
        raise ValueError("need at least one realization")
    grid = np.sort(np.atleast_1d(np.asarray(grid, dtype=float)))
    energies = np.concatenate([grid, [0.0]])
    x0, x1 = -length / 2.0, length / 2.0
    n_lo = cell_index(x0)
    n_hi = cell_index(np.nextafter(x1, x0))
    lam = sample_disorder_batch(model.law, (n_lo, n_hi), seed, realizations)
    slc = batched_box_slice(model.per, model.site, lam, x0, x1)
    th = right_edge_phase(slc, energies)              # (nE + 1, R)
    k = _pi_floor(th)
    counts = k[:-1, :] - k[-1:, :]
    n_hat = np.mean(counts, axis=1) / length
    return IdsTable(grid, n_hat, float(length), realizations, seed,
                    w_sup=model.sup_norm())


@dataclass(frozen=True)
class MeasureDescriptor:
    """Signed measure d(N - N0): piecewise-linear part plus point atoms."""

    knots: np.ndarray             # strictly increasing
    values: np.ndarray            # (N - N0) at the knots
    atoms: list = field(default_factory=list)      # [(position, weight)]

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.size < 2 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing with >= 2 entries")
        if v.shape != k.shape or not np.all(np.isfinite(v)):
            raise ValueError("values must match knots and be finite (bounded support)")
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_table(cls, table: IdsTable, window: tuple[float, float] | None = None
                   ) -> "MeasureDescriptor":
        dev = table.n_hat - table.n_free()
        k, v = table.energies, dev
        if window is not None:
            keep = (k >= window[0]) & (k <= window[1])
            k, v = k[keep], v[keep]
        return cls(k, v)


def _log_abs_antideriv(t: np.ndarray, E: float) -> np.ndarray:
    """Antiderivative of log|E - t|, continuous through t = E."""
    d = t - E
    out = np.zeros_like(d)
    nz = d != 0.0
    out[nz] = d[nz] * (np.log(np.abs(d[nz])) - 1.0)
    return out


def _log_sq_antideriv(t: np.ndarray) -> np.ndarray:
    """Antiderivative of (1/2) log(t^2 + 1)."""
    return 0.5 * (t * np.log(t * t + 1.0) - 2.0 * t + 2.0 * np.arctan(t))


def log_weight_integral(energy: float, measure: MeasureDescriptor) -> float:
    """integral of log |(E - t) / (t - i)| against d(N - N0).

    The linear-density part integrates exactly through the antiderivatives
    of log|E - t| and (1/2) log(t^2 + 1); the singularity at t = E is
    absolutely integrable, so no principal value is involved.  Atoms add
    their pointwise weight, and an atom exactly at E is rejected.
    """
    E = float(energy)
    k, v = measure.knots, measure.values
    slopes = np.diff(v) / np.diff(k)
    f1 = _log_abs_antideriv(k, E)
    f2 = _log_sq_antideriv(k)
    total = float(np.sum(slopes * (np.diff(f1) - np.diff(f2))))
    for (t0, w) in measure.atoms:
        if t0 == E:
            raise ValueError("atom exactly at the evaluation energy: divergent integral")
        total += w * (np.log(abs(E - t0)) - 0.5 * np.log(t0 * t0 + 1.0))
    return total


@dataclass(frozen=True)
class ThoulessFit:
    """Fit of the additive constant in gamma(E) = -alpha + integral(E)."""

    alpha_hat: float
    energies: np.ndarray
    residuals: np.ndarray
    rms: float
    truncation_estimate: float


def thouless_check(curve: LyapunovCurve, table: IdsTable,
                   window: tuple[float, float] | None = None) -> ThoulessFit:
    """Fit alpha and report residuals of the growth-rate/state-count identity.

    The measure is the piecewise-linear d(N - N0) over the table grid
    (restricted to ``window``); alpha is fitted by least squares, i.e. the
    mean of integral - gamma, so the residual trace has mean zero.
    """
    measure = MeasureDescriptor.from_table(table, window)
    lo, hi = measure.knots[0], measure.knots[-1]
    es = curve.energies
    if es.size == 0 or es.min() < lo or es.max() > hi:
        raise ValueError("curve grid must lie inside the measure window")
    ints = np.array([log_weight_integral(float(e), measure) for e in es])
    alpha = float(np.mean(ints - curve.gamma_hat))
    resid = curve.gamma_hat - (ints - alpha)
    # tail estimate: |N - N0| <= C and the integrand decays like (|E|+1)/t
    C = 2.0 * table.w_sup / np.pi
    T = min(abs(lo), abs(hi))
    tail = C * (np.max(np.abs(es)) + 1.0) / max(T - np.max(np.abs(es)), 1e-9)
    return ThoulessFit(alpha, es, resid, float(np.sqrt(np.mean(resid ** 2))), float(tail))


@dataclass(frozen=True)
class KotaniSample:
    """Averaged w-function sample at one complex energy.

    Orientation: the free operator realizes w0(z) = +z * m0(z) = iz with the
    decaying-solution convention m0 = i, and then gamma(z) = -Re w(z) equals
    the direct growth rate (calibrated once on the free operator).
    """

    z: complex
    w: complex
    w0: complex
    realizations: int
    halfline: float
    shifts: int

    @property
    def gamma_re(self) -> float:
        return -self.w.real


def free_w0(z: complex) -> complex:
    return 1j * complex(z)


def kotani_w(model: RandomModel, z: complex, realizations: int = 100,
             halfline: float | None = None, seed: int = 0, shifts: int = 8) -> KotaniSample:
    """Monte Carlo w(z) = -E(W_am + m_+(z) (W_el - W_sc - z)).

    m_+ is the half-line Weyl ratio per realization, obtained by backward
    propagation from the Dirichlet-type datum at distance X (truncation
    error ~ exp(-2 Im z X)); the expectation averages realizations and
    ``shifts`` equally spaced origin shifts within one period (the
    computable stand-in for averaging over the suspension circle).
    """
    zc = complex(z)
    if zc.imag < 0.1:
        raise ValueError("kotani_w needs Im z >= 0.1 for the truncation to converge")
    X = 50.0 / zc.imag if halfline is None else float(halfline)
    if X < 50.0 / zc.imag:
        raise ValueError(f"halfline too short: need X >= {50.0 / zc.imag}")
    anchor = float(np.ceil(X)) + 0.5                 # right edge on a cell boundary
    n_hi = cell_index(np.nextafter(anchor, 0.0))
    shifts_x = np.arange(shifts) / shifts
    samples = []
    for r in range(realizations):
        real = sample_disorder(model.law, (0, n_hi), seed, stream=r)
        slc = build_slice(model.per, real, model.site, 0.0, anchor)
        vals = trace_values(slc, zc, anchor, np.array([0.0, 1.0]), shifts_x)
        for j, s in enumerate(shifts_x):
            if vals[j][0] == 0.0:
                raise DegeneracyError("Weyl ratio undefined at a shift point")
            m = vals[j][1] / vals[j][0]
            k = slc.segment_of(float(s) if s > 0 else 1e-13)
            wam = float(slc.v_am[k])
            wsc = float(slc.v_sc[k])
            wel = float(slc.v_el[k])
            samples.append(-(wam + m * (wel - wsc - zc)))
    w = complex(np.mean(samples))
    return KotaniSample(zc, w, free_w0(zc), realizations, X, shifts)


def stieltjes_resolvent_trace(table: IdsTable, z: complex) -> complex:
    """integral dnu(t) / (t - z) evaluated through the deviation N - N0.

    Splits off the free part (identically i for Im z > 0) and integrates the
    bounded deviation by parts: boundary terms plus the exactly integrable
    piecewise-linear integral against 1/(t - z)^2.
    """
    zc = complex(z)
    if zc.imag <= 0:
        raise ValueError("requires Im z > 0")
    k = table.energies
    v = table.n_hat - table.n_free()
    total = 1j + v[-1] / (zc - k[-1]) - v[0] / (zc - k[0])
    # integral of (c + s t)/(t - z)^2 over each knot interval, closed form
    for j in range(k.size - 1):
        t0, t1 = k[j], k[j + 1]
        s = (v[j + 1] - v[j]) / (t1 - t0)
        c = v[j] - s * t0
        fz = c + s * zc
        total += fz * (1.0 / (t0 - zc) - 1.0 / (t1 - zc)) + s * (np.log(t1 - zc) - np.log(t0 - zc))
    return complex(total)


def herglotz_deviation_integral(table: IdsTable, z: complex, refine: int = 40) -> complex:
    """integral of (1 + t z) / ((t - z)(1 + t^2)) (N - N0)(t) dt over the
    table range (dense trapezoid on the piecewise-linear interpolant)."""
    zc = complex(z)
    k = table.energies
    dev = table.n_hat - table.n_free()
    ts = np.linspace(k[0], k[-1], refine * (k.size - 1) + 1)
    f = np.interp(ts, k, dev)
    integrand = (1.0 + ts * zc) / ((ts - zc) * (1.0 + ts * ts)) * f
    return complex(np.trapezoid(integrand, ts))


def kotani_csv(rows: list[KotaniSample]) -> str:
    lines = ["re_z,im_z,re_w,im_w"]
    for ks in rows:
        lines.append(f"{ks.z.real!r},{ks.z.imag!r},{ks.w.real!r},{ks.w.imag!r}")
    return "\n".join(lines) + "\n"
